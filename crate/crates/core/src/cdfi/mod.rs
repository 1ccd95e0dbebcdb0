//! The fusion network: a frame feature extractor, an event feature extractor with one
//! sub-branch per time bin, and a per-level fusion stage.

pub mod attention;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationMethod;
use crate::autodiff::{Graph, ParamGroup, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::ConvBnRelu;
pub use attention::{AdaptiveWeight, Cab, Cdms, CdmsOutput, Eab};

/// Which inputs reach the network and how they are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    #[default]
    Fused,
    FrameOnly,
    EventOnly,
    /// Frame and aggregated events stacked as channels into the frame extractor.
    ConcatToFrame,
    /// Each event sub-branch also receives the frame as an extra channel.
    ConcatToEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdfiConfig {
    pub n_bins: usize,
    pub c_low: usize,
    pub c_high: usize,
    pub input_width: usize,
    pub input_height: usize,
    pub aggregation: AggregationMethod,
    pub use_eab: bool,
    pub use_cdms: bool,
    pub use_self_attention: bool,
    pub use_cross_attention: bool,
    pub use_adaptive_weighting: bool,
    pub input_mode: InputMode,
    pub fixed_branch_weights: bool,
}

impl Default for CdfiConfig {
    fn default() -> Self {
        CdfiConfig {
            n_bins: 3,
            c_low: 64,
            c_high: 128,
            input_width: 256,
            input_height: 256,
            aggregation: AggregationMethod::LatestPolarity,
            use_eab: true,
            use_cdms: true,
            use_self_attention: true,
            use_cross_attention: true,
            use_adaptive_weighting: true,
            input_mode: InputMode::Fused,
            fixed_branch_weights: false,
        }
    }
}

impl CdfiConfig {
    /// Narrow widths for CPU-scale experiments.
    pub fn toy() -> Self {
        CdfiConfig {
            c_low: 16,
            c_high: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 {
            return Err(Error::Config("n_bins must be at least 1".into()));
        }
        if self.c_low == 0 || self.c_high == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.input_width == 0 || self.input_height == 0 {
            return Err(Error::Config("input resolution must be positive".into()));
        }
        Ok(())
    }

    pub fn uses_frames(&self) -> bool {
        self.input_mode != InputMode::EventOnly
    }

    pub fn uses_events(&self) -> bool {
        self.input_mode != InputMode::FrameOnly
    }

    /// Channels of one aggregated bin.
    pub fn bin_channels(&self) -> usize {
        self.aggregation.channels()
    }

    pub fn event_channels(&self) -> usize {
        self.n_bins * self.bin_channels()
    }
}

/// Low (stride 8) and high (stride 16) feature maps.
#[derive(Debug, Clone, Copy)]
pub struct FeatureLevels {
    pub low: Var,
    pub high: Var,
}

/// Fused maps plus everything needed to inspect how they were formed.
#[derive(Debug, Clone, Copy)]
pub struct FusedFeatures {
    pub low: Var,
    pub high: Var,
    pub frame: Option<FeatureLevels>,
    pub event: Option<FeatureLevels>,
    pub fusion: Option<[CdmsOutput; 2]>,
}

impl FusedFeatures {
    /// Mean frame and event weights over both levels and the batch.
    pub fn mean_weights(&self, g: &Graph) -> Option<(f64, f64)> {
        let [lo, hi] = self.fusion?;
        let mean = |v: Option<Var>| -> Option<f64> {
            let t = g.value(v?);
            Some(t.sum() / t.len() as f64)
        };
        Some((
            (mean(lo.w_f)? + mean(hi.w_f)?) / 2.0,
            (mean(lo.w_e)? + mean(hi.w_e)?) / 2.0,
        ))
    }
}

/// Five-stage convolutional stack with taps at strides 8 and 16.
#[derive(Debug, Clone)]
pub struct Ffe {
    pub stages: Vec<ConvBnRelu>,
}

impl Ffe {
    pub fn new<R: Rng>(store: &mut ParamStore, cin: usize, c_low: usize, c_high: usize, rng: &mut R) -> Self {
        let widths = [(c_low / 4).max(1), (c_low / 4).max(1), (c_low / 2).max(1), c_low, c_high];
        let strides = [1, 2, 2, 2, 2];
        let mut prev = cin;
        let stages = widths
            .iter()
            .zip(strides)
            .enumerate()
            .map(|(i, (&w, s))| {
                let st = ConvBnRelu::new(store, &format!("ffe.stage{}", i + 1), prev, w, 3, s, ParamGroup::Cdfi, rng);
                prev = w;
                st
            })
            .collect();
        Ffe { stages }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<FeatureLevels> {
        check_divisible(g.shape(x))?;
        let mut h = x;
        let mut low = None;
        for (i, st) in self.stages.iter().enumerate() {
            h = st.forward(g, store, h)?;
            if i == 3 {
                low = Some(h);
            }
        }
        Ok(FeatureLevels {
            low: low.expect("four stages run before the last"),
            high: h,
        })
    }
}

fn check_divisible(shape: &[usize]) -> Result<()> {
    match shape {
        [_, _, h, w] if h % 16 == 0 && w % 16 == 0 && *h > 0 && *w > 0 => Ok(()),
        _ => Err(Error::shape(format!("input {shape:?} must be 4-D with sides divisible by 16"))),
    }
}

/// One event sub-branch.
#[derive(Debug, Clone)]
pub struct EventBranch {
    pub convs: [ConvBnRelu; 4],
    pub eab: Option<(Eab, Eab)>,
}

#[derive(Debug, Clone)]
pub struct Efe {
    pub branches: Vec<EventBranch>,
    /// Per-level bin weights `[n]`; absent when fixed at 1.
    pub weights: Option<(ParamId, ParamId)>,
    pub bin_channels: usize,
    pub with_frame: bool,
}

impl Efe {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &CdfiConfig, rng: &mut R) -> Self {
        let with_frame = cfg.input_mode == InputMode::ConcatToEvent;
        let cin = cfg.bin_channels() + usize::from(with_frame);
        let widths = [(cfg.c_low / 4).max(1), (cfg.c_low / 2).max(1), cfg.c_low, cfg.c_high];
        let branches = (0..cfg.n_bins)
            .map(|i| {
                let p = format!("efe.branch{}", i + 1);
                let mut prev = cin;
                let convs = [0, 1, 2, 3].map(|k| {
                    let c = ConvBnRelu::new(
                        store,
                        &format!("{p}.conv{}", k + 1),
                        prev,
                        widths[k],
                        3,
                        2,
                        ParamGroup::Cdfi,
                        rng,
                    );
                    prev = widths[k];
                    c
                });
                let eab = cfg.use_eab.then(|| {
                    (
                        Eab::new(store, &format!("{p}.eab1"), cfg.c_low, rng),
                        Eab::new(store, &format!("{p}.eab2"), cfg.c_high, rng),
                    )
                });
                EventBranch { convs, eab }
            })
            .collect();
        let weights = (!cfg.fixed_branch_weights).then(|| {
            let init = Tensor::full(&[cfg.n_bins], 1.0 / cfg.n_bins as f64);
            (
                store.add("efe.w_low", init.clone(), ParamKind::Trainable, ParamGroup::Cdfi),
                store.add("efe.w_high", init, ParamKind::Trainable, ParamGroup::Cdfi),
            )
        });
        Efe {
            branches,
            weights,
            bin_channels: cfg.bin_channels(),
            with_frame,
        }
    }

    /// Per-bin `(e_low, e_high)` before the weighted sum.
    pub fn branch_outputs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        events: Var,
        frame: Option<Var>,
    ) -> Result<Vec<FeatureLevels>> {
        let n = self.branches.len();
        let shape = g.shape(events).to_vec();
        if shape.len() != 4 || shape[1] != n * self.bin_channels {
            return Err(Error::Config(format!(
                "event tensor {shape:?} does not hold {n} bins of {} channels",
                self.bin_channels
            )));
        }
        check_divisible(&shape)?;
        let mut out = Vec::with_capacity(n);
        for (i, br) in self.branches.iter().enumerate() {
            let mut h = g.narrow(events, 1, i * self.bin_channels, self.bin_channels)?;
            if self.with_frame {
                let f = frame.ok_or_else(|| Error::Config("frame input required for concat_to_event".into()))?;
                h = g.concat(&[h, f], 1)?;
            }
            for c in &br.convs[..3] {
                h = c.forward(g, store, h)?;
            }
            let low = match &br.eab {
                Some((e1, _)) => e1.forward(g, store, h)?,
                None => h,
            };
            let h = br.convs[3].forward(g, store, low)?;
            let high = match &br.eab {
                Some((_, e2)) => e2.forward(g, store, h)?,
                None => h,
            };
            out.push(FeatureLevels { low, high });
        }
        Ok(out)
    }

    fn weighted_sum(&self, g: &mut Graph, store: &ParamStore, parts: &[Var], w: Option<ParamId>) -> Result<Var> {
        let wv = w.map(|id| store.leaf(g, id));
        let mut acc: Option<Var> = None;
        for (i, &p) in parts.iter().enumerate() {
            let term = match wv {
                Some(wv) => {
                    let wi = g.narrow(wv, 0, i, 1)?;
                    g.scale_by(wi, p)?
                }
                None => p,
            };
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        acc.ok_or_else(|| Error::Config("no event bins".into()))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, events: Var, frame: Option<Var>) -> Result<FeatureLevels> {
        let outs = self.branch_outputs(g, store, events, frame)?;
        let lows: Vec<Var> = outs.iter().map(|o| o.low).collect();
        let highs: Vec<Var> = outs.iter().map(|o| o.high).collect();
        Ok(FeatureLevels {
            low: self.weighted_sum(g, store, &lows, self.weights.map(|w| w.0))?,
            high: self.weighted_sum(g, store, &highs, self.weights.map(|w| w.1))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Cdfi {
    pub config: CdfiConfig,
    pub ffe: Option<Ffe>,
    pub efe: Option<Efe>,
    pub cdms: Option<[Cdms; 2]>,
}

impl Cdfi {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &CdfiConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        // independent streams per extractor, so the bin count does not shift the others
        let mut child = || ChaCha8Rng::seed_from_u64(rng.random());
        let (rng_f, rng_e, rng_m) = (&mut child(), &mut child(), &mut child());
        let ffe = match config.input_mode {
            InputMode::Fused | InputMode::FrameOnly => Some(Ffe::new(store, 1, config.c_low, config.c_high, rng_f)),
            InputMode::ConcatToFrame => {
                Some(Ffe::new(store, 1 + config.event_channels(), config.c_low, config.c_high, rng_f))
            }
            InputMode::EventOnly | InputMode::ConcatToEvent => None,
        };
        let efe = matches!(
            config.input_mode,
            InputMode::Fused | InputMode::EventOnly | InputMode::ConcatToEvent
        )
        .then(|| Efe::new(store, config, rng_e));
        let cdms = (config.input_mode == InputMode::Fused && config.use_cdms).then(|| {
            [
                Cdms::new(store, "cdms.low", config.c_low, config, rng_m),
                Cdms::new(store, "cdms.high", config.c_high, config, rng_m),
            ]
        });
        Ok(Cdfi {
            config: config.clone(),
            ffe,
            efe,
            cdms,
        })
    }

    /// `frame` is `[N, 1, H, W]` and `events` `[N, n * ch, H, W]`, both unit-scaled.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frame: Var, events: Var) -> Result<FusedFeatures> {
        let mode = self.config.input_mode;
        let f = match (&self.ffe, mode) {
            (Some(ffe), InputMode::ConcatToFrame) => {
                let x = g.concat(&[frame, events], 1)?;
                Some(ffe.forward(g, store, x)?)
            }
            (Some(ffe), _) => Some(ffe.forward(g, store, frame)?),
            (None, _) => None,
        };
        let e = match &self.efe {
            Some(efe) => Some(efe.forward(g, store, events, Some(frame))?),
            None => None,
        };
        let (low, high, fusion) = match (f, e) {
            (Some(f), Some(e)) => match &self.cdms {
                Some([lo, hi]) => {
                    let a = lo.forward(g, store, f.low, e.low)?;
                    let b = hi.forward(g, store, f.high, e.high)?;
                    (a.k, b.k, Some([a, b]))
                }
                None => (g.add(f.low, e.low)?, g.add(f.high, e.high)?, None),
            },
            (Some(f), None) => (f.low, f.high, None),
            (None, Some(e)) => (e.low, e.high, None),
            (None, None) => return Err(Error::Config("no input branch is enabled".into())),
        };
        Ok(FusedFeatures {
            low,
            high,
            frame: f,
            event: e,
            fusion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> CdfiConfig {
        CdfiConfig {
            c_low: 8,
            c_high: 12,
            input_width: 32,
            input_height: 48,
            ..CdfiConfig::default()
        }
    }

    fn run(cfg: &CdfiConfig, seed: u64) -> (Graph, FusedFeatures, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Cdfi::new(&mut store, cfg, &mut rng).unwrap();
        let mut g = Graph::training();
        let fr = g.input(Tensor::uniform(&[2, 1, 48, 32], 0.0, 1.0, &mut rng));
        let ev = g.input(Tensor::uniform(&[2, cfg.event_channels(), 48, 32], 0.0, 1.0, &mut rng));
        let out = net.forward(&mut g, &store, fr, ev).unwrap();
        (g, out, store)
    }

    #[test]
    fn shapes_and_levels() {
        let (g, out, _) = run(&small(), 1);
        assert_eq!(g.shape(out.low), &[2, 8, 6, 4]);
        assert_eq!(g.shape(out.high), &[2, 12, 3, 2]);
        let (wf, we) = out.mean_weights(&g).unwrap();
        assert!(wf > 0.0 && wf < 1.0 && we > 0.0 && we < 1.0);
    }

    #[test]
    fn frame_only_bypasses() {
        let cfg = CdfiConfig {
            input_mode: InputMode::FrameOnly,
            ..small()
        };
        let (g, out, store) = run(&cfg, 2);
        let f = out.frame.unwrap();
        assert_eq!(g.value(out.low), g.value(f.low));
        assert_eq!(g.value(out.high), g.value(f.high));
        assert!(store.names().all(|n| n.starts_with("ffe.")));
    }

    #[test]
    fn indivisible_resolution_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = Cdfi::new(&mut store, &small(), &mut rng).unwrap();
        let mut g = Graph::training();
        let fr = g.input(Tensor::zeros(&[1, 1, 40, 32]));
        let ev = g.input(Tensor::zeros(&[1, 3, 40, 32]));
        assert!(matches!(net.forward(&mut g, &store, fr, ev), Err(Error::Shape(_))));
    }

    #[test]
    fn bin_count_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = Cdfi::new(&mut store, &small(), &mut rng).unwrap();
        let mut g = Graph::training();
        let fr = g.input(Tensor::zeros(&[1, 1, 48, 32]));
        let ev = g.input(Tensor::zeros(&[1, 2, 48, 32]));
        assert!(matches!(net.forward(&mut g, &store, fr, ev), Err(Error::Config(_))));
    }
}
