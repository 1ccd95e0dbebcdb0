//! Finite-difference gradient checks of the network pieces, shared by the CLI and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_inputs, check_params, op_suite, GradCheckOptions, GradCheckReport};
use crate::autodiff::{Graph, ParamGroup, ParamStore, Tensor};
use crate::bbox::BBox;
use crate::error::Result;
use crate::heads::{HeadConfig, IouFeatures, Modulation, Regressor};
use crate::model::{Model, ModelConfig, ModelInput, PairSample};
use crate::nn::{ConvBnRelu, Init, Linear};

/// Input size of the full-model check.
pub const TOY_INPUT: (usize, usize) = (48, 32);

/// One named check of one seed.
#[derive(Debug, Clone)]
pub struct CheckRun {
    pub check: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

/// conv -> batch norm -> ReLU -> pool -> fully connected, reduced to a scalar.
pub fn small_composite(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = ConvBnRelu::new(&mut store, "block", 2, 4, 3, 1, ParamGroup::Cdfi, &mut rng);
    let fc = Linear::new(&mut store, "fc", 4, 3, true, Init::Lecun, ParamGroup::Cdfi, &mut rng);
    randomize_bn(&mut store, &mut rng);
    let x = Tensor::uniform(&[2, 2, 5, 6], -1.0, 1.0, &mut rng);
    let r = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
    check_params(
        &mut store,
        |g, s| {
            let xv = g.input(x.clone());
            let y = block.forward(g, s, xv)?;
            let p = g.adaptive_avg_pool(y)?;
            let p = g.flatten(p)?;
            let o = fc.forward(g, s, p)?;
            let rv = g.input(r.clone());
            g.dot(o, rv)
        },
        &GradCheckOptions { seed, ..*opts },
    )
}

fn randomize_bn(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        if p.name.ends_with("running_mean") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        } else if p.name.ends_with("running_var") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    }
}

/// Predicted IoU of a random box, differentiated with respect to the box, the test
/// features and the modulation vectors.
pub fn predict_iou(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cl, ch) = (4, 6);
    let mut store = ParamStore::new();
    let reg = Regressor::new(&mut store, cl, ch, &HeadConfig::default(), &mut rng);
    let (w, h) = (rng.random_range(10.0..30.0), rng.random_range(10.0..30.0));
    let bx = Tensor::new(
        &[4],
        vec![rng.random_range(0.0..60.0 - w), rng.random_range(0.0..60.0 - h), w, h],
    )?;
    let inputs = [
        ("box", bx),
        ("feat_low", Tensor::uniform(&[1, cl, 8, 8], -1.0, 1.0, &mut rng)),
        ("feat_high", Tensor::uniform(&[1, ch, 4, 4], -1.0, 1.0, &mut rng)),
        ("v_low", Tensor::uniform(&[1, cl], -1.0, 1.0, &mut rng)),
        ("v_high", Tensor::uniform(&[1, ch], -1.0, 1.0, &mut rng)),
    ];
    check_inputs(
        &inputs,
        |g, v| {
            let feats = IouFeatures { low: v[1], high: v[2] };
            let m = Modulation { v_low: v[3], v_high: v[4] };
            let iou = reg.predict_iou(g, &store, feats, m, &[v[0]])?;
            Ok(g.sum(iou))
        },
        &GradCheckOptions { seed, ..*opts },
    )
}

fn toy_pair(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> PairSample {
    let (iw, ih) = (cfg.cdfi.input_width, cfg.cdfi.input_height);
    let ch = cfg.cdfi.event_channels();
    let input = |rng: &mut ChaCha8Rng| ModelInput {
        frame: Tensor::uniform(&[1, 1, ih, iw], 0.0, 1.0, rng),
        events: Tensor::uniform(&[1, ch, ih, iw], 0.0, 1.0, rng),
    };
    let reference = input(rng);
    let test = input(rng);
    let rbox = |rng: &mut ChaCha8Rng| {
        let w = rng.random_range(10.0..16.0);
        let h = rng.random_range(10.0..16.0);
        BBox::new(rng.random_range(2.0..iw as f64 - w - 2.0), rng.random_range(2.0..ih as f64 - h - 2.0), w, h)
    };
    let ref_box = rbox(rng);
    let test_box = rbox(rng);
    let candidates = vec![rbox(rng), rbox(rng)];
    let iou_targets = candidates.iter().map(|_| rng.random_range(0.0..1.0)).collect();
    PairSample {
        reference,
        test,
        ref_box,
        test_box,
        candidates,
        iou_targets,
    }
}

/// The whole training objective (fusion network, both heads, loss) of a two-pair batch,
/// differentiated with respect to every trainable parameter.
///
/// Batch norm runs on running statistics copied from a batch-statistics pass over the
/// same inputs, so activations keep their trained scale while the function stays
/// deterministic.
pub fn model_composite(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut cfg = ModelConfig::toy();
    cfg.cdfi.input_width = TOY_INPUT.0;
    cfg.cdfi.input_height = TOY_INPUT.1;
    cfg.seed = seed;
    let mut model = Model::new(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let batch = vec![toy_pair(&mut rng, &cfg), toy_pair(&mut rng, &cfg)];
    let mut g = Graph::training();
    model.batch_loss(&mut g, &batch, 1.0)?;
    model.store.apply_bn_updates_with(&g, 1.0);

    let mut store = model.store.clone();
    check_params(
        &mut store,
        |g, s| Ok(model.batch_loss_with(g, s, &batch, 1.0)?.total),
        &GradCheckOptions {
            seed,
            training_mode: false,
            ..*opts
        },
    )
}

pub type CheckFn = fn(u64, &GradCheckOptions) -> Result<GradCheckReport>;

/// Every check by name. `model` options sample a few coordinates per tensor.
pub fn all_checks() -> [(&'static str, CheckFn); 4] {
    [
        ("ops", op_suite),
        ("conv_bn_relu_pool_fc", small_composite),
        ("predict_iou", predict_iou),
        ("model", model_composite),
    ]
}

/// Coordinates sampled per parameter tensor in the full-model check.
pub const MODEL_COORDS: usize = 2;

/// Runs `checks` over `seeds`.
pub fn run_checks(names: &[&str], seeds: std::ops::Range<u64>, opts: &GradCheckOptions) -> Result<Vec<CheckRun>> {
    let mut out = Vec::new();
    for (name, f) in all_checks() {
        if !names.is_empty() && !names.contains(&name) {
            continue;
        }
        let o = if name == "model" {
            GradCheckOptions {
                max_coords: Some(opts.max_coords.map_or(MODEL_COORDS, |m| m.min(MODEL_COORDS))),
                ..*opts
            }
        } else {
            *opts
        };
        for seed in seeds.clone() {
            out.push(CheckRun {
                check: name,
                seed,
                report: f(seed, &o)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_checks_pass() {
        let opts = GradCheckOptions::default();
        for f in [small_composite as CheckFn, predict_iou] {
            let r = f(1, &opts).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}
