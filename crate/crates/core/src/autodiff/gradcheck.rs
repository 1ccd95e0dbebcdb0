//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, RunningStats, Var};
use super::kernels::Padding;
use super::params::{ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Knobs of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so near-zero gradients are compared
    /// absolutely.
    pub floor: f64,
    /// Coordinates sampled per tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub training_mode: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-6,
            tolerance: 1e-4,
            floor: 1e-6,
            max_coords: Some(48),
            training_mode: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Analytic and numeric derivative at the worst coordinate.
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates whose stencil straddled a kink and were re-measured with a smaller step.
    pub refined: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tolerance)
    }

    pub fn merge(&mut self, prefix: &str, other: GradCheckReport) {
        self.entries.extend(other.entries.into_iter().map(|mut e| {
            e.name = format!("{prefix}{}", e.name);
            e
        }));
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Default)]
struct Worst {
    err: f64,
    analytic: f64,
    numeric: f64,
    refined: usize,
}

impl Worst {
    fn update(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let e = rel_err(analytic, numeric, floor);
        if e >= self.err {
            *self = Worst { err: e, analytic, numeric, ..*self };
        }
    }

    fn entry(&self, name: &str, checked: usize) -> GradCheckEntry {
        GradCheckEntry {
            name: name.to_string(),
            max_rel_err: self.err,
            analytic: self.analytic,
            numeric: self.numeric,
            checked,
            refined: self.refined,
        }
    }
}

fn coords(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(m) if m < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut v = sample(&mut rng, len, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Shrinks applied to the step when the stencil straddles a kink.
const MAX_SHRINKS: usize = 2;

/// Central difference of `f(delta)` around `delta = 0`, where `f0 = f(0)`.
///
/// For a piecewise-linear kink inside `[-h, h]` the error of the central difference
/// equals `|f(h) - 2 f(0) + f(-h)| / 2h`; a wrong analytic gradient leaves that term near
/// zero. When it exceeds the tolerance the coordinate is measured again at `h / 10`. If
/// the two differences agree up to the rounding noise of the smaller step, the function
/// is merely curved and the first one stands; otherwise the stencil straddled a kink
/// and the smaller step replaces it. Returns the difference and whether the step shrank.
fn central_difference<F>(mut f: F, f0: f64, analytic: f64, opts: &GradCheckOptions) -> Result<(f64, bool)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut measure = |h: f64| -> Result<(f64, f64, f64)> {
        let (fp, fm) = (f(h)?, f(-h)?);
        let noise = 8.0 * f64::EPSILON * fp.abs().max(fm.abs()).max(f0.abs()) / h;
        Ok(((fp - fm) / (2.0 * h), (fp - 2.0 * f0 + fm).abs() / (2.0 * h), noise))
    };
    let limit = |d: f64| 0.5 * opts.tolerance * analytic.abs().max(d.abs()).max(opts.floor);
    let mut h = opts.h;
    let (mut d, mut kink, mut noise) = measure(h)?;
    for shrink in 0..MAX_SHRINKS {
        if kink <= limit(d) + noise {
            return Ok((d, shrink > 0));
        }
        h /= 10.0;
        let (d2, kink2, noise2) = measure(h)?;
        if (d2 - d).abs() <= limit(d) + noise2 {
            return Ok((d, shrink > 0));
        }
        (d, kink, noise) = (d2, kink2, noise2);
    }
    Ok((d, true))
}

fn new_graph(opts: &GradCheckOptions) -> Graph {
    if opts.training_mode {
        Graph::training()
    } else {
        Graph::new()
    }
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::shape(format!("grad check needs a scalar output, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Checks the gradient of `f` with respect to each named input tensor.
pub fn check_inputs<F>(inputs: &[(&str, Tensor)], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = new_graph(opts);
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };
    let mut g = new_graph(opts);
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.input_with_grad(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let f0 = scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut vals: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut entries = Vec::new();
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let idx = coords(t.len(), opts, k as u64);
        let mut worst = Worst::default();
        for &i in &idx {
            let x0 = vals[k].data()[i];
            let a = analytic.data()[i];
            let (d, refined) = central_difference(
                |delta| {
                    vals[k].data_mut()[i] = x0 + delta;
                    let v = eval(&vals);
                    vals[k].data_mut()[i] = x0;
                    v
                },
                f0,
                a,
                opts,
            )?;
            worst.refined += refined as usize;
            worst.update(a, d, opts.floor);
        }
        entries.push(worst.entry(name, idx.len()));
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        entries,
    })
}

/// Checks the gradient of `f` with respect to every trainable parameter of `store`.
pub fn check_params<F>(store: &mut ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = new_graph(opts);
    let out = f(&mut g, store)?;
    let f0 = scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    store.zero_grads();
    store.accumulate_grads(&g, &grads);

    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(id, _)| id)
        .collect();
    let mut entries = Vec::new();
    for (k, id) in ids.into_iter().enumerate() {
        let analytic = store.get(id).grad.clone();
        let idx = coords(analytic.len(), opts, k as u64 + 1000);
        let mut worst = Worst::default();
        for &i in &idx {
            let x0 = store.value(id).data()[i];
            let a = analytic.data()[i];
            let (d, refined) = central_difference(
                |delta| {
                    store.value_mut(id).data_mut()[i] = x0 + delta;
                    let mut g = new_graph(opts);
                    let v = f(&mut g, store).and_then(|o| scalar_of(&g, o));
                    store.value_mut(id).data_mut()[i] = x0;
                    v
                },
                f0,
                a,
                opts,
            )?;
            worst.refined += refined as usize;
            worst.update(a, d, opts.floor);
        }
        entries.push(worst.entry(&store.get(id).name, idx.len()));
    }
    store.zero_grads();
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        entries,
    })
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Reduces `y` to a scalar through a fixed random projection so no gradient is trivial.
fn project(g: &mut Graph, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let r = g.input(rand_t(g.shape(y), rng));
    g.dot(y, r)
}

type OpCase = (&'static str, Vec<(&'static str, Tensor)>, bool, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

/// Every graph operator on small random inputs drawn from `seed`.
fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<OpCase> = Vec::new();
    let proj_seed = seed.wrapping_add(77);
    let mut training = false;
    macro_rules! case {
        ($name:expr, [$(($n:expr, $t:expr)),*], |$g:ident, $v:ident| $body:expr) => {{
            let inputs = vec![$(($n, $t)),*];
            let f = move |$g: &mut Graph, $v: &[Var]| -> Result<Var> {
                let y = $body?;
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                project($g, y, &mut prng)
            };
            cases.push(($name, inputs, training, Box::new(f)));
        }};
    }
    let pad = Padding { top: 1, bottom: 0, left: 2, right: 1 };
    case!("conv2d", [("x", rand_t(&[2, 3, 7, 6], &mut rng)), ("w", rand_t(&[4, 3, 3, 3], &mut rng)), ("b", rand_t(&[4], &mut rng))],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, pad));
    case!("conv2d_pointwise", [("x", rand_t(&[2, 3, 4, 5], &mut rng)), ("w", rand_t(&[2, 3, 1, 1], &mut rng))],
        |g, v| g.conv2d(v[0], v[1], None, 1, Padding::default()));
    case!("conv2d_weight_grad", [("x", rand_t(&[1, 2, 5, 6], &mut rng)), ("r", rand_t(&[1, 1, 5, 6], &mut rng))],
        |g, v| g.conv2d_weight_grad(v[0], v[1], 4, 4, Padding::preserving(4)));
    for (name, bshape) in [("same", [2, 3, 4, 5]), ("per_channel", [2, 3, 1, 1]), ("per_pixel", [2, 1, 4, 5])] {
        let a = rand_t(&[2, 3, 4, 5], &mut rng);
        let b = rand_t(&bshape, &mut rng);
        let label: &'static str = match name {
            "same" => "add_same",
            "per_channel" => "add_per_channel",
            _ => "add_per_pixel",
        };
        case!(label, [("a", a.clone()), ("b", b.clone())], |g, v| g.add(v[0], v[1]));
        let label: &'static str = match name {
            "same" => "sub_same",
            "per_channel" => "sub_per_channel",
            _ => "sub_per_pixel",
        };
        case!(label, [("a", a.clone()), ("b", b.clone())], |g, v| g.sub(v[0], v[1]));
        let label: &'static str = match name {
            "same" => "mul_same",
            "per_channel" => "mul_per_channel",
            _ => "mul_per_pixel",
        };
        case!(label, [("a", a), ("b", b)], |g, v| g.mul(v[0], v[1]));
    }
    case!("scale_by", [("s", rand_t(&[1], &mut rng)), ("x", rand_t(&[3, 4], &mut rng))], |g, v| g.scale_by(v[0], v[1]));
    case!("scale", [("x", rand_t(&[3, 4], &mut rng))], |g, v| Ok::<_, Error>(g.scale(v[0], -1.7)));
    case!("add_const", [("x", rand_t(&[3, 4], &mut rng))], |g, v| Ok::<_, Error>(g.add_const(v[0], 0.3)));
    case!("sigmoid", [("x", rand_t(&[2, 5], &mut rng))], |g, v| Ok::<_, Error>(g.sigmoid(v[0])));
    case!("relu", [("x", rand_t(&[2, 5], &mut rng))], |g, v| Ok::<_, Error>(g.relu(v[0])));
    training = true;
    case!("batch_norm_train", [("x", rand_t(&[3, 2, 3, 2], &mut rng)), ("gamma", rand_t(&[2], &mut rng)), ("beta", rand_t(&[2], &mut rng))],
        |g, v| g.batch_norm(v[0], v[1], v[2], None));
    training = false;
    let rm = Tensor::uniform(&[2], -0.5, 0.5, &mut rng);
    let rv = Tensor::uniform(&[2], 0.5, 1.5, &mut rng);
    case!("batch_norm_eval", [("x", rand_t(&[3, 2, 3, 2], &mut rng)), ("gamma", rand_t(&[2], &mut rng)), ("beta", rand_t(&[2], &mut rng))],
        |g, v| g.batch_norm(v[0], v[1], v[2], Some(RunningStats { mean: &rm, var: &rv, ids: None })));
    case!("adaptive_avg_pool", [("x", rand_t(&[2, 3, 4, 5], &mut rng))], |g, v| g.adaptive_avg_pool(v[0]));
    case!("avg_pool", [("x", rand_t(&[1, 2, 5, 5], &mut rng))], |g, v| g.avg_pool(v[0], 3, 2));
    case!("max_pool", [("x", rand_t(&[1, 2, 5, 5], &mut rng))], |g, v| g.max_pool(v[0], 2, 2));
    case!("sum_channels", [("x", rand_t(&[2, 3, 2, 3], &mut rng))], |g, v| g.sum_channels(v[0]));
    case!("concat", [("a", rand_t(&[2, 1, 3], &mut rng)), ("b", rand_t(&[2, 2, 3], &mut rng))], |g, v| g.concat(&[v[0], v[1], v[0]], 1));
    case!("narrow", [("x", rand_t(&[2, 5, 3], &mut rng))], |g, v| g.narrow(v[0], 1, 1, 3));
    case!("reshape", [("x", rand_t(&[2, 6], &mut rng))], |g, v| g.reshape(v[0], &[3, 4]));
    case!("linear", [("x", rand_t(&[3, 4], &mut rng)), ("w", rand_t(&[2, 4], &mut rng)), ("b", rand_t(&[2], &mut rng))],
        |g, v| g.linear(v[0], v[1], Some(v[2])));
    let bx = Tensor::new(&[4], vec![
        rng.random_range(0.0..30.0),
        rng.random_range(0.0..30.0),
        rng.random_range(8.0..40.0),
        rng.random_range(8.0..40.0),
    ])
    .expect("four values");
    case!("region_pool", [("features", rand_t(&[1, 3, 6, 7], &mut rng)), ("box", bx)],
        |g, v| g.region_pool(v[0], v[1], 3, 2, 0.125));
    case!("sum", [("x", rand_t(&[2, 3], &mut rng))], |g, v| Ok::<_, Error>(g.sum(v[0])));
    case!("mean", [("x", rand_t(&[2, 3], &mut rng))], |g, v| Ok::<_, Error>(g.mean(v[0])));
    let den = Tensor::scalar(rng.random_range(0.5..2.0));
    case!("div_scalar", [("a", rand_t(&[1], &mut rng)), ("b", den)], |g, v| g.div_scalar(v[0], v[1]));
    let z = Tensor::uniform(&[1, 1, 4, 4], 0.0, 0.1, &mut rng);
    case!("hinge_mse", [("s", rand_t(&[1, 1, 4, 4], &mut rng))], |g, v| g.hinge_mse(v[0], &z));
    cases
}

/// Runs the finite-difference comparison for every operator, one entry per op input.
pub fn op_suite(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        tolerance: opts.tolerance,
        entries: Vec::new(),
    };
    for (name, inputs, training, f) in op_cases(seed) {
        let o = GradCheckOptions {
            training_mode: training,
            seed,
            ..*opts
        };
        report.merge(&format!("{name}/"), check_inputs(&inputs, &*f, &o)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_passes() {
        let x = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let r = check_inputs(
            &[("x", x)],
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let cu = g.mul(sq, v[0])?;
                Ok(g.sum(cu))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn every_op_passes_seed_0() {
        let r = op_suite(0, &GradCheckOptions::default()).unwrap();
        for e in &r.entries {
            assert!(e.max_rel_err <= r.tolerance, "{} err {}", e.name, e.max_rel_err);
        }
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at a kink-free point but with a detached path: f = x * stop(x) is not
        // expressible, so compare against a function whose graph ignores one use.
        let x = Tensor::new(&[1], vec![1.5]).unwrap();
        let r = check_inputs(
            &[("x", x)],
            |g, v| {
                let c = g.input(g.value(v[0]).clone());
                g.mul(v[0], c)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn kink_inside_the_stencil_is_remeasured() {
        // relu(x) at 4e-7: the 1e-6 stencil crosses zero, the 1e-8 one does not
        let x = Tensor::new(&[2], vec![4e-7, 0.8]).unwrap();
        let r = check_inputs(&[("x", x)], |g, v| Ok(g.relu(v[0])).map(|y| g.sum(y)), &GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.entries[0].refined, 1);
    }
}
