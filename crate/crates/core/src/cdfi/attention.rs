//! Gating blocks: edge attention inside the event branch, cross-domain attention and
//! adaptive channel weighting inside the fusion stage.

use rand::Rng;

use crate::autodiff::{Graph, ParamGroup, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBnRelu, Init};

const G: ParamGroup = ParamGroup::Cdfi;

/// Edge attention: a channel-attended copy of the input is collapsed to one map, which
/// gates the original input spatially.
#[derive(Debug, Clone)]
pub struct Eab {
    pub gate: Conv,
}

impl Eab {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let init = Init::Std(1.0 / channels as f64);
        Eab {
            gate: Conv::new(store, name, 1, 1, 1, 1, true, init, G, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, kappa: Var) -> Result<Var> {
        let pooled = g.adaptive_avg_pool(kappa)?;
        let ch = g.sigmoid(pooled);
        let km = g.mul(kappa, ch)?;
        let collapsed = g.sum_channels(km)?;
        let logits = self.gate.forward(g, store, collapsed)?;
        let gate = g.sigmoid(logits);
        g.mul(kappa, gate)
    }
}

/// Cross-domain attention: `D1` plus `D1` gated by itself and by a multi-scale view of `D2`.
#[derive(Debug, Clone)]
pub struct Cab {
    pub self_gate: Option<Conv>,
    pub cross: Option<CrossGate>,
}

#[derive(Debug, Clone)]
pub struct CrossGate {
    pub branches: [ConvBnRelu; 3],
    pub merge: Conv,
}

impl Cab {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        use_self: bool,
        use_cross: bool,
        rng: &mut R,
    ) -> Self {
        let c = channels;
        let self_gate = use_self.then(|| Conv::new(store, &format!("{name}.self"), c, c, 3, 1, true, Init::Lecun, G, rng));
        let cross = use_cross.then(|| CrossGate {
            branches: [1, 3, 5].map(|k| ConvBnRelu::new(store, &format!("{name}.cross.k{k}"), c, c, k, 1, G, rng)),
            merge: Conv::new(store, &format!("{name}.cross.merge"), 3 * c, c, 1, 1, true, Init::Lecun, G, rng),
        });
        Cab { self_gate, cross }
    }

    /// The two gates, each in (0, 1), for inspection and for the forward pass.
    pub fn gates(&self, g: &mut Graph, store: &ParamStore, d1: Var, d2: Var) -> Result<(Option<Var>, Option<Var>)> {
        if g.shape(d1) != g.shape(d2) {
            return Err(Error::shape(format!(
                "cross attention operands {:?} and {:?} differ",
                g.shape(d1),
                g.shape(d2)
            )));
        }
        let gs = match &self.self_gate {
            Some(conv) => {
                let l = conv.forward(g, store, d1)?;
                Some(g.sigmoid(l))
            }
            None => None,
        };
        let gc = match &self.cross {
            Some(cross) => {
                let mut parts = Vec::with_capacity(3);
                for b in &cross.branches {
                    parts.push(b.forward(g, store, d2)?);
                }
                let cat = g.concat(&parts, 1)?;
                let l = cross.merge.forward(g, store, cat)?;
                Some(g.sigmoid(l))
            }
            None => None,
        };
        Ok((gs, gc))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, d1: Var, d2: Var) -> Result<Var> {
        let (gs, gc) = self.gates(g, store, d1, d2)?;
        let mut t = d1;
        for gate in [gs, gc].into_iter().flatten() {
            let term = g.mul(d1, gate)?;
            t = g.add(t, term)?;
        }
        Ok(t)
    }
}

/// Per-channel weights in (0, 1) from the pooled descriptor of a feature map.
#[derive(Debug, Clone)]
pub struct AdaptiveWeight {
    pub reduce: ConvBnRelu,
    pub expand: Conv,
}

impl AdaptiveWeight {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let hidden = (channels / 2).max(1);
        AdaptiveWeight {
            reduce: ConvBnRelu::new(store, &format!("{name}.reduce"), channels, hidden, 1, 1, G, rng),
            expand: Conv::new(store, &format!("{name}.expand"), hidden, channels, 1, 1, true, Init::Lecun, G, rng),
        }
    }

    /// Returns `[N, C, 1, 1]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, t: Var) -> Result<Var> {
        let p = g.adaptive_avg_pool(t)?;
        let h = self.reduce.forward(g, store, p)?;
        let l = self.expand.forward(g, store, h)?;
        Ok(g.sigmoid(l))
    }
}

/// Cross-domain modulation and selection for one feature level.
#[derive(Debug, Clone)]
pub struct Cdms {
    pub cab_f: Cab,
    pub cab_e: Cab,
    pub weights: Option<(AdaptiveWeight, AdaptiveWeight)>,
}

/// Fused map of one level plus the channel weights that produced it.
#[derive(Debug, Clone, Copy)]
pub struct CdmsOutput {
    pub k: Var,
    pub w_f: Option<Var>,
    pub w_e: Option<Var>,
}

impl Cdms {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        flags: &super::CdfiConfig,
        rng: &mut R,
    ) -> Self {
        let (s, c) = (flags.use_self_attention, flags.use_cross_attention);
        Cdms {
            cab_f: Cab::new(store, &format!("{name}.cab_f"), channels, s, c, rng),
            cab_e: Cab::new(store, &format!("{name}.cab_e"), channels, s, c, rng),
            weights: flags.use_adaptive_weighting.then(|| {
                (
                    AdaptiveWeight::new(store, &format!("{name}.aw_f"), channels, rng),
                    AdaptiveWeight::new(store, &format!("{name}.aw_e"), channels, rng),
                )
            }),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var, e: Var) -> Result<CdmsOutput> {
        let t_f = self.cab_f.forward(g, store, f, e)?;
        let t_e = self.cab_e.forward(g, store, e, f)?;
        match &self.weights {
            Some((aw_f, aw_e)) => {
                let w_f = aw_f.forward(g, store, t_f)?;
                let w_e = aw_e.forward(g, store, t_e)?;
                let a = g.mul(t_f, w_f)?;
                let b = g.mul(t_e, w_e)?;
                Ok(CdmsOutput {
                    k: g.add(a, b)?,
                    w_f: Some(w_f),
                    w_e: Some(w_e),
                })
            }
            None => Ok(CdmsOutput {
                k: g.add(t_f, t_e)?,
                w_f: None,
                w_e: None,
            }),
        }
    }
}
