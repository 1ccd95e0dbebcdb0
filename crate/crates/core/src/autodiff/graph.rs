//! Tape of tensor operations with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that depends on a trainable
//! leaf.
//!
//! Broadcasting is deliberately narrow: the right operand of `add`, `sub` and `mul`
//! may match the left operand exactly, be a per-channel scalar `[N, C, 1, 1]`, or be a
//! single-channel map `[N, 1, H, W]`. Anything else is a shape error.

use std::collections::HashMap;

use super::kernels::{col2im, gemm, im2col, tap, ConvGeom, Padding};
use super::params::ParamId;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    PerChannel,
    PerPixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: Padding,
    },
    ConvWeightGrad {
        x: Var,
        r: Var,
        kh: usize,
        kw: usize,
        pad: Padding,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        mode: Bcast,
    },
    ScaleBy {
        s: Var,
        x: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddConst {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    AdaptiveAvg {
        x: Var,
    },
    AvgPool {
        x: Var,
        k: usize,
        s: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    SumChannels {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    RegionPool {
        x: Var,
        bbox: Var,
        out: usize,
        samples: usize,
        scale: f64,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    DivScalar {
        a: Var,
        b: Var,
    },
    HingeMse {
        s: Var,
        z: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics recorded by a training-mode batch norm, to be folded into the
/// running estimates by [`super::ParamStore::apply_bn_updates`].
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
}

/// Running statistics handed to [`Graph::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub struct RunningStats<'a> {
    pub mean: &'a Tensor,
    pub var: &'a Tensor,
    pub ids: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    training: bool,
    bn_updates: Vec<BnUpdate>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn bcast_mode(a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    if a.len() == 4 && b.len() == 4 && a[0] == b[0] {
        if b[1] == a[1] && b[2] == 1 && b[3] == 1 {
            return Ok(Bcast::PerChannel);
        }
        if b[1] == 1 && b[2] == a[2] && b[3] == a[3] {
            return Ok(Bcast::PerPixel);
        }
    }
    Err(Error::shape(format!("cannot broadcast {b:?} onto {a:?}")))
}

/// Index into the right operand for element `i` of the left operand.
#[inline]
fn bidx(mode: Bcast, shape: &[usize], i: usize) -> usize {
    match mode {
        Bcast::Same => i,
        Bcast::PerChannel => i / (shape[2] * shape[3]),
        Bcast::PerPixel => {
            let hw = shape[2] * shape[3];
            (i / (shape[1] * hw)) * hw + i % hw
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sample offsets inside one output cell of a region pool, as fractions of the box.
#[inline]
fn region_frac(cell: usize, sample: usize, samples: usize, out: usize) -> f64 {
    (cell * samples + sample) as f64 / (samples * out) as f64 + 0.5 / (samples * out) as f64
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose batch norms use batch statistics.
    pub fn training() -> Self {
        Graph {
            training: true,
            ..Self::default()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (&ParamId, &Var)> {
        self.params.iter()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; no gradient flows to it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient is tracked (e.g. box coordinates under refinement).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; inserted once per graph.
    pub fn param_leaf(&mut self, id: ParamId, value: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- convolution

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: Padding) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(Error::shape(format!("conv kernel expects {wcin} channels, input has {cin}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!("conv bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let g = ConvGeom::new(cin, h, wd, kh, kw, stride, pad)
            .ok_or_else(|| Error::shape(format!("kernel {kh}x{kw} stride {stride} does not fit {h}x{wd}")))?;
        let (k, p) = (g.k(), g.p());
        let mut out = vec![0.0; n * cout * p];
        let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { k * p }];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            let xi = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
            let cm: &[f64] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, &g, &mut cols);
                &cols
            };
            let oi = &mut out[i * cout * p..(i + 1) * cout * p];
            gemm(cout, k, p, wv, false, cm, false, oi, 0.0);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (c, row) in oi.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        }
        let t = Tensor::new(&[n, cout, g.ho, g.wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let ng = self.ng(&parents);
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    /// Gradient of `sum(r * conv(x, f))` with respect to a single-output filter `f` of
    /// size `kh x kw`: the correlation of `x` with the map `r`. Output `[1, C, kh, kw]`.
    pub fn conv2d_weight_grad(&mut self, x: Var, r: Var, kh: usize, kw: usize, pad: Padding) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if n != 1 {
            return Err(Error::shape("conv2d_weight_grad expects a single image"));
        }
        let g = ConvGeom::new(c, h, w, kh, kw, 1, pad).ok_or_else(|| Error::shape("filter does not fit"))?;
        if self.shape(r) != [1, 1, g.ho, g.wo] {
            return Err(Error::shape(format!(
                "residual map {:?} does not match output {}x{}",
                self.shape(r),
                g.ho,
                g.wo
            )));
        }
        let mut cols = vec![0.0; g.k() * g.p()];
        im2col(self.value(x).data(), &g, &mut cols);
        let mut out = vec![0.0; g.k()];
        gemm(1, g.p(), g.k(), self.value(r).data(), false, &cols, true, &mut out, 0.0);
        let t = Tensor::new(&[1, c, kh, kw], out)?;
        let ng = self.ng(&[x, r]);
        Ok(self.push(t, Op::ConvWeightGrad { x, r, kh, kw, pad }, ng))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let mode = bcast_mode(self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let shape = av.shape().to_vec();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[bidx(mode, &shape, i)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let t = Tensor::new(&shape, data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Binary { kind, a, b, mode }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(format!("scale_by needs a scalar, got {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|v| v * sv).collect())?;
        let ng = self.ng(&[s, x]);
        Ok(self.push(t, Op::ScaleBy { s, x }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|v| v * c).collect()).unwrap();
        let ng = self.ng(&[x]);
        self.push(t, Op::Scale { x, c }, ng)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|v| v + c).collect()).unwrap();
        let ng = self.ng(&[x]);
        self.push(t, Op::AddConst { x }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|&v| sigmoid(v)).collect()).unwrap();
        let ng = self.ng(&[x]);
        self.push(t, Op::Sigmoid { x }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v.max(0.0)).collect()).unwrap();
        let ng = self.ng(&[x]);
        self.push(t, Op::Relu { x }, ng)
    }

    // ---------------------------------------------------------------- normalization

    /// Per-channel batch normalization of `[N, C, H, W]` (or `[N, C]`).
    ///
    /// Training graphs normalize with batch statistics and record them for the running
    /// estimates; evaluation graphs use `running`, which is then mandatory.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: Option<RunningStats<'_>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, hw) = match shape[..] {
            [n, c, h, w] => (n, c, h * w),
            [n, c] => (n, c, 1),
            _ => return Err(Error::shape(format!("batch_norm on {shape:?}"))),
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm gamma/beta must have one value per channel"));
        }
        let m = (n * hw) as f64;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let (mean, var) = if self.training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    s += xv[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
                }
                mean[ch] = s / m;
                let mut q = 0.0;
                for i in 0..n {
                    q += xv[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
                var[ch] = q / m;
            }
            (mean, var)
        } else {
            let r = running.ok_or_else(|| Error::State("batch_norm in eval mode needs running statistics".into()))?;
            if r.mean.len() != c || r.var.len() != c {
                return Err(Error::State("running statistics have the wrong channel count".into()));
            }
            (r.mean.data().to_vec(), r.var.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    xhat[j] = (xv[j] - mean[ch]) * inv_std[ch];
                    out[j] = gv[ch] * xhat[j] + bv[ch];
                }
            }
        }
        if self.training {
            if let Some(ids) = running.and_then(|r| r.ids) {
                let corr = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                self.bn_updates.push(BnUpdate {
                    running_mean: ids.0,
                    running_var: ids.1,
                    batch_mean: mean,
                    batch_var_unbiased: var.iter().map(|v| v * corr).collect(),
                });
            }
        }
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(&[x, gamma, beta]);
        let training = self.training;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- pooling and reshaping

    /// Per-channel spatial mean, `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h * w == 0 {
            return Err(Error::shape("adaptive_avg_pool over empty spatial extent"));
        }
        let hw = h * w;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(&[n, c, 1, 1], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::AdaptiveAvg { x }, ng))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k == 0 || s == 0 || h < k || w < k {
            return Err(Error::shape(format!("avg_pool {k}/{s} on {h}x{w}")));
        }
        let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += xv[p * h * w + (oy * s + ky) * w + ox * s + kx];
                        }
                    }
                    out[(p * ho + oy) * wo + ox] = acc / (k * k) as f64;
                }
            }
        }
        let t = Tensor::new(&[n, c, ho, wo], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::AvgPool { x, k, s }, ng))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k == 0 || s == 0 || h < k || w < k {
            return Err(Error::shape(format!("max_pool {k}/{s} on {h}x{w}")));
        }
        let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let j = p * h * w + (oy * s + ky) * w + ox * s + kx;
                            if xv[j] > best {
                                best = xv[j];
                                at = j;
                            }
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let t = Tensor::new(&[n, c, ho, wo], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::MaxPool { x, argmax }, ng))
    }

    /// Sum over channels, `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * hw];
        for i in 0..n {
            for ch in 0..c {
                let src = &xv[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                for (o, s) in out[i * hw..(i + 1) * hw].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        let t = Tensor::new(&[n, 1, h, w], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SumChannels { x }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} on rank {}", first.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d]) {
                return Err(Error::shape(format!("concat {s:?} with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(parts);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// `len` entries of `x` along `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!("narrow {start}+{len} on axis {axis} of {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut ns = shape;
        ns[axis] = len;
        let t = Tensor::new(&ns, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Narrow { x, axis, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape { x }, ng))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Fully connected layer: `x [N, in]`, `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = match self.shape(x) {
            [n, f] => (*n, *f),
            s => return Err(Error::shape(format!("linear input must be [N, in], got {s:?}"))),
        };
        let (fout, win) = match self.shape(w) {
            [o, i] => (*o, *i),
            s => return Err(Error::shape(format!("linear weight must be [out, in], got {s:?}"))),
        };
        if win != fin {
            return Err(Error::shape(format!("linear weight expects {win} inputs, got {fin}")));
        }
        let mut out = vec![0.0; n * fout];
        gemm(n, fin, fout, self.value(x).data(), false, self.value(w).data(), true, &mut out, 0.0);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape("linear bias size mismatch"));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let t = Tensor::new(&[n, fout], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let ng = self.ng(&parents);
        Ok(self.push(t, Op::Linear { x, w, b }, ng))
    }

    /// Bilinearly sampled average pooling of a box onto an `out x out` grid.
    ///
    /// `x` is `[1, C, H, W]`; `bbox` holds `(x, y, w, h)` in image pixels, mapped to the
    /// feature grid by `scale` (feature cells per image pixel) with cell `j` centered at
    /// image coordinate `(j + 0.5) / scale`. Each output cell averages `samples x samples`
    /// bilinear taps; taps outside the map are clamped to its border. Differentiable in
    /// both the features and the box.
    pub fn region_pool(&mut self, x: Var, bbox: Var, out: usize, samples: usize, scale: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if n != 1 {
            return Err(Error::shape("region_pool expects a single image"));
        }
        if out == 0 || samples == 0 || h == 0 || w == 0 {
            return Err(Error::shape("region_pool needs non-empty output and input"));
        }
        let b = self.value(bbox).data().to_vec();
        if b.len() != 4 {
            return Err(Error::shape("region_pool box must have 4 values"));
        }
        if !(b[2] > 0.0 && b[3] > 0.0) || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Box(format!("degenerate pooling box {b:?}")));
        }
        let xv = self.value(x).data();
        let hw = h * w;
        let mut res = vec![0.0; c * out * out];
        let norm = 1.0 / (samples * samples) as f64;
        for oy in 0..out {
            for ox in 0..out {
                for sy in 0..samples {
                    let v = (b[1] + region_frac(oy, sy, samples, out) * b[3]) * scale - 0.5;
                    for sx in 0..samples {
                        let u = (b[0] + region_frac(ox, sx, samples, out) * b[2]) * scale - 0.5;
                        let t = tap(u, v, w, h);
                        let (w00, w01) = ((1.0 - t.ly) * (1.0 - t.lx), (1.0 - t.ly) * t.lx);
                        let (w10, w11) = (t.ly * (1.0 - t.lx), t.ly * t.lx);
                        for ch in 0..c {
                            let p = &xv[ch * hw..(ch + 1) * hw];
                            let val = w00 * p[t.y0 * w + t.x0]
                                + w01 * p[t.y0 * w + t.x1]
                                + w10 * p[t.y1 * w + t.x0]
                                + w11 * p[t.y1 * w + t.x1];
                            res[(ch * out + oy) * out + ox] += val * norm;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[1, c, out, out], res)?;
        let ng = self.ng(&[x, bbox]);
        Ok(self.push(
            t,
            Op::RegionPool {
                x,
                bbox,
                out,
                samples,
                scale,
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- reductions and losses

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(t, Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::scalar(xv.sum() / xv.len().max(1) as f64);
        let ng = self.ng(&[x]);
        self.push(t, Op::Mean { x }, ng)
    }

    /// Sum of elementwise products of two same-shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("dot of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Ratio of two one-element tensors.
    pub fn div_scalar(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != 1 || self.value(b).len() != 1 {
            return Err(Error::shape("div_scalar needs one-element operands"));
        }
        let t = Tensor::scalar(self.value(a).item() / self.value(b).item());
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::DivScalar { a, b }, ng))
    }

    /// Mean of squared hinge residuals: `s - z` where `z > 0.05`, else `max(0, s)`.
    pub fn hinge_mse(&mut self, s: Var, z: &Tensor) -> Result<Var> {
        if self.shape(s) != z.shape() {
            return Err(Error::shape(format!("scores {:?} vs labels {:?}", self.shape(s), z.shape())));
        }
        let sv = self.value(s).data();
        let n = sv.len().max(1) as f64;
        let total: f64 = sv
            .iter()
            .zip(z.data())
            .map(|(&s, &z)| crate::loss::hinge_residual(s, z).powi(2))
            .sum();
        let t = Tensor::scalar(total / n);
        let ng = self.ng(&[s]);
        Ok(self.push(
            t,
            Op::HingeMse {
                s,
                z: z.data().to_vec(),
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a one-element node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(format!("backward from non-scalar {:?}", self.shape(out))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::new(self.shape(out), vec![1.0])?);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(gt) = hi[0].as_ref() else { continue };
            self.backward_node(i, gt.data(), lo);
        }
        Ok(Gradients { grads })
    }

    fn buf<'a>(&self, lo: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        Some(
            lo[v.0]
                .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
                .data_mut(),
        )
    }

    fn backward_node(&self, i: usize, g: &[f64], lo: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (n, cin, h, wd) = self.value(*x).dims4().unwrap();
                let (cout, _, kh, kw) = self.value(*w).dims4().unwrap();
                let geo = ConvGeom::new(cin, h, wd, kh, kw, *stride, *pad).unwrap();
                let (k, p) = (geo.k(), geo.p());
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.nodes[x.0].needs_grad;
                let need_w = self.nodes[w.0].needs_grad;
                let mut cols = vec![0.0; if geo.is_pointwise() { 0 } else { k * p }];
                let mut dcols = vec![0.0; k * p];
                for s in 0..n {
                    let gs = &g[s * cout * p..(s + 1) * cout * p];
                    let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
                    if need_w {
                        let cm: &[f64] = if geo.is_pointwise() {
                            xs
                        } else {
                            im2col(xs, &geo, &mut cols);
                            &cols
                        };
                        let dw = self.buf(lo, *w).unwrap();
                        gemm(cout, p, k, gs, false, cm, true, dw, 1.0);
                    }
                    if need_x {
                        let dx = &mut self.buf(lo, *x).unwrap()[s * cin * h * wd..(s + 1) * cin * h * wd];
                        if geo.is_pointwise() {
                            gemm(k, cout, p, wv, true, gs, false, dx, 1.0);
                        } else {
                            gemm(k, cout, p, wv, true, gs, false, &mut dcols, 0.0);
                            col2im(&dcols, &geo, dx);
                        }
                    }
                    if let Some(b) = b {
                        if let Some(db) = self.buf(lo, *b) {
                            for (c, row) in gs.chunks(p).enumerate() {
                                db[c] += row.iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::ConvWeightGrad { x, r, kh, kw, pad } => {
                let (_, c, h, w) = self.value(*x).dims4().unwrap();
                let geo = ConvGeom::new(c, h, w, *kh, *kw, 1, *pad).unwrap();
                let (k, p) = (geo.k(), geo.p());
                let mut cols = vec![0.0; k * p];
                im2col(self.value(*x).data(), &geo, &mut cols);
                if let Some(dr) = self.buf(lo, *r) {
                    gemm(1, k, p, g, false, &cols, false, dr, 1.0);
                }
                if self.nodes[x.0].needs_grad {
                    let rv = self.value(*r).data();
                    let mut dcols = vec![0.0; k * p];
                    gemm(k, 1, p, g, false, rv, false, &mut dcols, 0.0);
                    col2im(&dcols, &geo, self.buf(lo, *x).unwrap());
                }
            }
            Op::Binary { kind, a, b, mode } => {
                let shape = node.value.shape();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.buf(lo, *a) {
                    match kind {
                        Binary::Add | Binary::Sub => da.iter_mut().zip(g).for_each(|(d, g)| *d += g),
                        Binary::Mul => {
                            for (j, d) in da.iter_mut().enumerate() {
                                *d += g[j] * bv[bidx(*mode, shape, j)];
                            }
                        }
                    }
                }
                if let Some(db) = self.buf(lo, *b) {
                    for j in 0..g.len() {
                        let t = bidx(*mode, shape, j);
                        db[t] += match kind {
                            Binary::Add => g[j],
                            Binary::Sub => -g[j],
                            Binary::Mul => g[j] * av[j],
                        };
                    }
                }
            }
            Op::ScaleBy { s, x } => {
                let sv = self.value(*s).item();
                let xv = self.value(*x).data();
                if let Some(ds) = self.buf(lo, *s) {
                    ds[0] += g.iter().zip(xv).map(|(g, x)| g * x).sum::<f64>();
                }
                if let Some(dx) = self.buf(lo, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g * sv);
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.buf(lo, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
                }
            }
            Op::AddConst { x } | Op::Reshape { x } => {
                if let Some(dx) = self.buf(lo, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                if let Some(dx) = self.buf(lo, *x) {
                    for j in 0..g.len() {
                        dx[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.buf(lo, *x) {
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            dx[j] += g[j];
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let hw: usize = shape[2..].iter().product();
                let m = (n * hw) as f64;
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for j in base..base + hw {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if let Some(db) = self.buf(lo, *beta) {
                    db.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                }
                if let Some(dg) = self.buf(lo, *gamma) {
                    dg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                }
                if let Some(dx) = self.buf(lo, *x) {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            for j in base..base + hw {
                                dx[j] += if *training {
                                    k / m * (m * g[j] - sum_g[ch] - xhat[j] * sum_gx[ch])
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                }
            }
            Op::AdaptiveAvg { x } => {
                let (_, _, h, w) = self.value(*x).dims4().unwrap();
                let hw = h * w;
                if let Some(dx) = self.buf(lo, *x) {
                    for (p, chunk) in dx.chunks_mut(hw).enumerate() {
                        let v = g[p] / hw as f64;
                        chunk.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::AvgPool { x, k, s } => {
                let (n, c, h, w) = self.value(*x).dims4().unwrap();
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                if let Some(dx) = self.buf(lo, *x) {
                    let inv = 1.0 / (k * k) as f64;
                    for p in 0..n * c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[(p * ho + oy) * wo + ox] * inv;
                                for ky in 0..*k {
                                    for kx in 0..*k {
                                        dx[p * h * w + (oy * s + ky) * w + ox * s + kx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = self.buf(lo, *x) {
                    for (o, &j) in argmax.iter().enumerate() {
                        dx[j] += g[o];
                    }
                }
            }
            Op::SumChannels { x } => {
                let (n, c, h, w) = self.value(*x).dims4().unwrap();
                let hw = h * w;
                if let Some(dx) = self.buf(lo, *x) {
                    for s in 0..n {
                        for ch in 0..c {
                            let dst = &mut dx[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                            dst.iter_mut().zip(&g[s * hw..(s + 1) * hw]).for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(dp) = self.buf(lo, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            dp[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, extent, inner) = split_axis(&xs, *axis);
                let len = node.value.shape()[*axis];
                if let Some(dx) = self.buf(lo, *x) {
                    for o in 0..outer {
                        let base = (o * extent + start) * inner;
                        dx[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                if let Some(dx) = self.buf(lo, *x) {
                    gemm(n, fout, fin, g, false, self.value(*w).data(), false, dx, 1.0);
                }
                if let Some(dw) = self.buf(lo, *w) {
                    gemm(fout, n, fin, g, true, self.value(*x).data(), false, dw, 1.0);
                }
                if let Some(b) = b {
                    if let Some(db) = self.buf(lo, *b) {
                        for row in g.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
            Op::RegionPool {
                x,
                bbox,
                out,
                samples,
                scale,
            } => {
                let (_, c, h, w) = self.value(*x).dims4().unwrap();
                let hw = h * w;
                let b = self.value(*bbox).data().to_vec();
                let xv = self.value(*x).data();
                let need_x = self.nodes[x.0].needs_grad;
                let need_b = self.nodes[bbox.0].needs_grad;
                let norm = 1.0 / (samples * samples) as f64;
                let mut db = [0.0f64; 4];
                for oy in 0..*out {
                    for ox in 0..*out {
                        for sy in 0..*samples {
                            let fv = region_frac(oy, sy, *samples, *out);
                            let v = (b[1] + fv * b[3]) * scale - 0.5;
                            for sx in 0..*samples {
                                let fu = region_frac(ox, sx, *samples, *out);
                                let u = (b[0] + fu * b[2]) * scale - 0.5;
                                let t = tap(u, v, w, h);
                                let (w00, w01) = ((1.0 - t.ly) * (1.0 - t.lx), (1.0 - t.ly) * t.lx);
                                let (w10, w11) = (t.ly * (1.0 - t.lx), t.ly * t.lx);
                                let (mut du, mut dv) = (0.0, 0.0);
                                for ch in 0..c {
                                    let gv = g[(ch * out + oy) * out + ox] * norm;
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    let (i00, i01) = (ch * hw + t.y0 * w + t.x0, ch * hw + t.y0 * w + t.x1);
                                    let (i10, i11) = (ch * hw + t.y1 * w + t.x0, ch * hw + t.y1 * w + t.x1);
                                    if need_x {
                                        let dx = self.buf(lo, *x).unwrap();
                                        dx[i00] += gv * w00;
                                        dx[i01] += gv * w01;
                                        dx[i10] += gv * w10;
                                        dx[i11] += gv * w11;
                                    }
                                    if need_b {
                                        du += gv
                                            * ((1.0 - t.ly) * (xv[i01] - xv[i00]) + t.ly * (xv[i11] - xv[i10]));
                                        dv += gv
                                            * ((1.0 - t.lx) * (xv[i10] - xv[i00]) + t.lx * (xv[i11] - xv[i01]));
                                    }
                                }
                                if need_b {
                                    if t.x_free {
                                        db[0] += du * scale;
                                        db[2] += du * fu * scale;
                                    }
                                    if t.y_free {
                                        db[1] += dv * scale;
                                        db[3] += dv * fv * scale;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(d) = self.buf(lo, *bbox) {
                    d.iter_mut().zip(db).for_each(|(d, v)| *d += v);
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.buf(lo, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { x } => {
                let n = self.value(*x).len().max(1) as f64;
                if let Some(dx) = self.buf(lo, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::DivScalar { a, b } => {
                let av = self.value(*a).item();
                let bv = self.value(*b).item();
                if let Some(da) = self.buf(lo, *a) {
                    da[0] += g[0] / bv;
                }
                if let Some(db) = self.buf(lo, *b) {
                    db[0] -= g[0] * av / (bv * bv);
                }
            }
            Op::HingeMse { s, z } => {
                let sv = self.value(*s).data();
                let n = sv.len().max(1) as f64;
                if let Some(ds) = self.buf(lo, *s) {
                    for j in 0..sv.len() {
                        let r = crate::loss::hinge_residual(sv[j], z[j]);
                        let dr = if z[j] > crate::loss::HINGE_THRESHOLD || sv[j] > 0.0 { 1.0 } else { 0.0 };
                        ds[j] += g[0] * 2.0 * r * dr / n;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[2], vec![-3.0, 3.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_constant_kernel() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.input(Tensor::full(&[1, 1, 1, 1], 2.0));
        let b = g.input(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), 1, Padding::default()).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut g = Graph::new();
        let xt = Tensor::from_fn(&[1, 1, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let x = g.input(xt.clone());
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let w = g.input(k);
        let y = g.conv2d(x, w, None, 1, Padding::same(1)).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.input(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(matches!(g.conv2d(x, w, None, 1, Padding::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let ch = g.input(Tensor::new(&[1, 2, 1, 1], vec![10.0, 100.0]).unwrap());
        let px = g.input(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.mul(a, ch).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 10.0, 20.0, 30.0, 400.0, 500.0, 600.0, 700.0]);
        let z = g.add(a, px).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 3.0, 5.0, 7.0, 5.0, 7.0, 9.0, 11.0]);
        let bad = g.input(Tensor::zeros(&[1, 2, 2, 1]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn pooling_values() {
        let mut g = Graph::new();
        let c = g.input(Tensor::full(&[1, 1, 3, 3], 4.0));
        let p = g.adaptive_avg_pool(c).unwrap();
        assert_eq!(g.value(p).data(), &[4.0]);
        let x = g.input(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.adaptive_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
        let m = g.max_pool(x, 2, 2).unwrap();
        assert_eq!(g.value(m).data(), &[4.0]);
        let a = g.avg_pool(x, 1, 1).unwrap();
        assert_eq!(g.value(a).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn batch_norm_identity_and_zero_gamma() {
        let data = vec![-1.0, 1.0, -1.0, 1.0];
        let mut g = Graph::training();
        let x = g.input(Tensor::new(&[4, 1], data.clone()).unwrap());
        let gamma = g.input(Tensor::full(&[1], 1.0));
        let beta = g.input(Tensor::zeros(&[1]));
        let y = g.batch_norm(x, gamma, beta, None).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-5);
        }
        let gamma0 = g.input(Tensor::zeros(&[1]));
        let beta3 = g.input(Tensor::full(&[1], 3.0));
        let y = g.batch_norm(x, gamma0, beta3, None).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn batch_norm_eval_requires_state() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 1]));
        let gamma = g.input(Tensor::full(&[1], 1.0));
        let beta = g.input(Tensor::zeros(&[1]));
        assert!(matches!(g.batch_norm(x, gamma, beta, None), Err(Error::State(_))));
    }

    #[test]
    fn region_pool_constant_and_aligned_block() {
        let mut g = Graph::new();
        let c = g.input(Tensor::full(&[1, 2, 6, 6], 1.5));
        let b = g.input(Tensor::new(&[4], vec![3.3, 7.1, 19.0, 11.0]).unwrap());
        let p = g.region_pool(c, b, 3, 2, 0.25).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 1.5).abs() < 1e-15));

        let x = g.input(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
        // cells (1..3, 1..3) at stride 4 are image pixels [4, 12)
        let b = g.input(Tensor::new(&[4], vec![4.0, 4.0, 8.0, 8.0]).unwrap());
        let p = g.region_pool(x, b, 1, 2, 0.25).unwrap();
        let expect = (5.0 + 6.0 + 9.0 + 10.0) / 4.0;
        assert!((g.value(p).item() - expect).abs() < 1e-12);

        let bad = g.input(Tensor::new(&[4], vec![0.0, 0.0, 0.0, 1.0]).unwrap());
        assert!(matches!(g.region_pool(x, bad, 1, 2, 0.25), Err(Error::Box(_))));
    }
}
