//! Online tracking: classifier argmax for the coarse position, then IoU-guided
//! refinement of jittered candidates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::bbox::BBox;
use crate::cdfi::{FusedFeatures, InputMode};
use crate::error::{Error, Result};
use crate::event_stream::Sequence;
use crate::heads::{argmax, cell_center, IouFeatures, Modulation, LOW_STRIDE};
use crate::model::{prepare_input, Model, View};
use crate::training::jitter_boxes;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub candidates: usize,
    pub refine_steps: usize,
    /// Ascent step as a fraction of the box dimensions.
    pub step_fraction: f64,
    pub max_halvings: usize,
    /// Refined boxes averaged into the output.
    pub top_m: usize,
    /// Candidate jitter as a fraction of the box size.
    pub jitter: f64,
    /// Frames between extra filter optimization rounds on the reference; `None` disables.
    pub reoptimize_every: Option<usize>,
    /// Process a square crop of `crop_factor * max(w, h)` around the previous box instead
    /// of the full frame.
    pub crop: bool,
    pub crop_factor: f64,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            candidates: 10,
            refine_steps: 5,
            step_fraction: 0.01,
            max_halvings: 4,
            top_m: 3,
            jitter: 0.1,
            reoptimize_every: None,
            crop: false,
            crop_factor: 4.0,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 || self.top_m == 0 || !(self.step_fraction >= 0.0) || !(self.crop_factor > 0.0) {
            return Err(Error::Config(
                "tracker needs candidates >= 1, top_m >= 1, step_fraction >= 0, crop_factor > 0".into(),
            ));
        }
        if self.reoptimize_every == Some(0) {
            return Err(Error::Config("reoptimize_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    pub filter: Tensor,
    pub v_low: Tensor,
    pub v_high: Tensor,
    pub prev: BBox,
    pub frame: usize,
    /// Classifier features and label of the reference, kept for re-optimization.
    ref_feat: Tensor,
    ref_label: Tensor,
}

/// Output of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackRecord {
    pub frame: usize,
    pub bbox: BBox,
    pub confidence: f64,
    pub w_f: f64,
    pub w_e: f64,
}

/// Mean adaptive weights of a forward pass. Without adaptive weighting both domains
/// count fully; single-domain modes report the unused domain as 0.
pub fn diagnostic_weights(model: &Model, fused: &FusedFeatures, g: &Graph) -> (f64, f64) {
    match model.input_mode() {
        InputMode::FrameOnly | InputMode::ConcatToFrame => (1.0, 0.0),
        InputMode::EventOnly | InputMode::ConcatToEvent => (0.0, 1.0),
        InputMode::Fused => fused.mean_weights(g).unwrap_or((1.0, 1.0)),
    }
}

fn view_for(model: &Model, seq: &Sequence, around: &BBox, cfg: &TrackerConfig) -> View {
    let c = &model.config.cdfi;
    if cfg.crop {
        View::crop(around, cfg.crop_factor, c.input_width, c.input_height)
    } else {
        View::full_frame(seq.meta.width, seq.meta.height, c.input_width, c.input_height)
    }
}

fn box_tensor(b: &BBox) -> Tensor {
    Tensor::new(&[4], b.to_array().to_vec()).expect("four values")
}

/// Builds the reference state from `box0` on frame `j0` of `seq`.
pub fn init(model: &Model, seq: &Sequence, j0: usize, box0: BBox, cfg: &TrackerConfig) -> Result<(TrackerState, TrackRecord)> {
    box0.validate()?;
    cfg.validate()?;
    let view = view_for(model, seq, &box0, cfg);
    let input = prepare_input(&model.config.cdfi, seq, j0, &view)?;
    let mut g = Graph::new();
    let fused = model.features(&mut g, input.frame, input.events)?;
    let cf = model.cls.features(&mut g, &model.store, fused.low)?;
    let rbox = view.to_input(&box0);
    let rb = g.input(box_tensor(&rbox));
    let label = model.label_for(&rbox);
    let f0 = model.cls.init_filter(&mut g, cf, rb)?;
    let f = model.cls.optimize_filter(&mut g, cf, f0, &label, model.cls.steps)?;
    let s = model.cls.classify(&mut g, cf, f)?;
    let rf = model.reg.ref_features(&mut g, &model.store, fused.low, fused.high)?;
    let m = model.reg.modulation(&mut g, &model.store, rf, rb)?;
    let (w_f, w_e) = diagnostic_weights(model, &fused, &g);
    let filter = g.value(f).clone();
    if !filter.data().iter().all(|v| v.is_finite()) {
        return Err(Error::Numerics("reference filter is not finite".into()));
    }
    let state = TrackerState {
        filter,
        v_low: g.value(m.v_low).clone(),
        v_high: g.value(m.v_high).clone(),
        prev: box0,
        frame: j0,
        ref_feat: g.value(cf).clone(),
        ref_label: label,
    };
    let confidence = g.value(s).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((
        state,
        TrackRecord {
            frame: j0,
            bbox: box0,
            confidence,
            w_f,
            w_e,
        },
    ))
}

/// Test-branch regressor inputs of one frame, detached from the forward graph.
struct IouContext<'a> {
    model: &'a Model,
    low: Tensor,
    high: Tensor,
    v_low: &'a Tensor,
    v_high: &'a Tensor,
}

impl IouContext<'_> {
    /// Predicted IoU of every box and, when asked, its gradient with respect to the box.
    fn predict(&self, boxes: &[BBox], with_grad: bool) -> Result<(Vec<f64>, Vec<[f64; 4]>)> {
        let mut g = Graph::new();
        let feats = IouFeatures {
            low: g.input(self.low.clone()),
            high: g.input(self.high.clone()),
        };
        let m = Modulation {
            v_low: g.input(self.v_low.clone()),
            v_high: g.input(self.v_high.clone()),
        };
        let vars: Vec<_> = boxes
            .iter()
            .map(|b| if with_grad { g.input_with_grad(box_tensor(b)) } else { g.input(box_tensor(b)) })
            .collect();
        let iou = self.model.reg.predict_iou(&mut g, &self.model.store, feats, m, &vars)?;
        let values = g.value(iou).data().to_vec();
        let mut grads = Vec::new();
        if with_grad {
            let total = g.sum(iou);
            let gr = g.backward(total)?;
            for v in &vars {
                let d = gr.get(*v).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; 4]);
                grads.push([d[0], d[1], d[2], d[3]]);
            }
        }
        Ok((values, grads))
    }
}

/// Gradient ascent on the predicted IoU of each box. A step that lowers the prediction
/// is halved up to `max_halvings` times and otherwise dropped, so every candidate's
/// prediction is non-decreasing. Returns the refined boxes with their predictions and
/// the prediction history of each candidate.
pub fn refine_boxes(
    ctx_model: &Model,
    feats: (&Tensor, &Tensor),
    modulation: (&Tensor, &Tensor),
    boxes: &[BBox],
    bounds: (f64, f64),
    cfg: &TrackerConfig,
) -> Result<(Vec<(BBox, f64)>, Vec<Vec<f64>>)> {
    let ctx = IouContext {
        model: ctx_model,
        low: feats.0.clone(),
        high: feats.1.clone(),
        v_low: modulation.0,
        v_high: modulation.1,
    };
    let mut cur: Vec<BBox> = boxes.to_vec();
    let (mut score, _) = ctx.predict(&cur, false)?;
    let mut history: Vec<Vec<f64>> = score.iter().map(|&s| vec![s]).collect();
    for _ in 0..cfg.refine_steps {
        let (_, grads) = ctx.predict(&cur, true)?;
        let dirs: Vec<Option<[f64; 4]>> = grads
            .iter()
            .map(|gr| {
                let n = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
                (n > 0.0 && n.is_finite()).then(|| gr.map(|v| v / n))
            })
            .collect();
        let mut pending: Vec<usize> = (0..cur.len()).filter(|&i| dirs[i].is_some()).collect();
        let mut scale = 1.0;
        for _ in 0..=cfg.max_halvings {
            if pending.is_empty() {
                break;
            }
            let trial: Vec<BBox> = pending
                .iter()
                .map(|&i| {
                    let b = cur[i];
                    let d = dirs[i].expect("pending boxes have a direction");
                    let s = cfg.step_fraction * scale;
                    BBox::new(
                        b.x + s * b.w * d[0],
                        b.y + s * b.h * d[1],
                        (b.w + s * b.w * d[2]).max(1.0),
                        (b.h + s * b.h * d[3]).max(1.0),
                    )
                    .clamp_to(bounds.0, bounds.1)
                })
                .collect();
            let (ts, _) = ctx.predict(&trial, false)?;
            let mut still = Vec::new();
            for (k, &i) in pending.iter().enumerate() {
                if ts[k] >= score[i] {
                    cur[i] = trial[k];
                    score[i] = ts[k];
                } else {
                    still.push(i);
                }
            }
            pending = still;
            scale *= 0.5;
        }
        for (h, &s) in history.iter_mut().zip(&score) {
            h.push(s);
        }
    }
    Ok((cur.into_iter().zip(score).collect(), history))
}

/// Tracks frame `j` of `seq`.
pub fn track_step(model: &Model, state: &mut TrackerState, seq: &Sequence, j: usize, cfg: &TrackerConfig) -> Result<TrackRecord> {
    let (img_w, img_h) = (seq.meta.width as f64, seq.meta.height as f64);
    let view = view_for(model, seq, &state.prev, cfg);
    let input = prepare_input(&model.config.cdfi, seq, j, &view)?;
    let mut g = Graph::new();

    if let Some(u) = cfg.reoptimize_every {
        if j > state.frame && (j - state.frame) % u == 0 {
            let cf = g.input(state.ref_feat.clone());
            let f0 = g.input(state.filter.clone());
            let f = model.cls.optimize_filter(&mut g, cf, f0, &state.ref_label, model.cls.steps)?;
            state.filter = g.value(f).clone();
        }
    }

    let fused = model.features(&mut g, input.frame, input.events)?;
    let cf = model.cls.features(&mut g, &model.store, fused.low)?;
    let fv = g.input(state.filter.clone());
    let s = model.cls.classify(&mut g, cf, fv)?;
    let scores = g.value(s).data();
    let cols = g.shape(s)[3];
    let confidence = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let center = match argmax(scores) {
        Some(k) => view.point_to_image(cell_center(k / cols, k % cols, LOW_STRIDE)),
        None => state.prev.center(),
    };
    let coarse = BBox::from_center(center.0, center.1, state.prev.w, state.prev.h).clamp_to(img_w, img_h);

    let tf = model.reg.test_features(&mut g, &model.store, fused.low, fused.high)?;
    let (w_f, w_e) = diagnostic_weights(model, &fused, &g);
    let c = &model.config.cdfi;
    let bounds = (c.input_width as f64, c.input_height as f64);
    let start = view.to_input(&coarse);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (j as u64).wrapping_mul(0x9E37_79B9));
    let mut cands = vec![start.clamp_to(bounds.0, bounds.1)];
    cands.extend(jitter_boxes(&start, cfg.candidates - 1, cfg.jitter, bounds.0, bounds.1, &mut rng));
    let (mut refined, _) = refine_boxes(
        model,
        (g.value(tf.low), g.value(tf.high)),
        (&state.v_low, &state.v_high),
        &cands,
        bounds,
        cfg,
    )?;
    refined.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top = &refined[..cfg.top_m.min(refined.len())];
    let n = top.len() as f64;
    let mean = top.iter().fold([0.0; 4], |acc, (b, _)| {
        let a = b.to_array();
        [acc[0] + a[0] / n, acc[1] + a[1] / n, acc[2] + a[2] / n, acc[3] + a[3] / n]
    });
    let mut out = view.to_image(&BBox::from_slice(&mean)).clamp_to(img_w, img_h);
    if !out.to_array().iter().all(|v| v.is_finite()) {
        out = coarse;
    }
    state.prev = out;
    Ok(TrackRecord {
        frame: j,
        bbox: out,
        confidence,
        w_f,
        w_e,
    })
}

/// Initializes on frame 0 with its ground truth and tracks every later frame.
pub fn track_sequence(model: &Model, seq: &Sequence, cfg: &TrackerConfig) -> Result<Vec<TrackRecord>> {
    let box0 = *seq
        .gt
        .get(0)
        .ok_or_else(|| Error::Data(format!("{}: no ground truth for frame 0", seq.name())))?;
    let (mut state, first) = init(model, seq, 0, box0, cfg)?;
    let mut out = vec![first];
    for j in 1..seq.frames.len() {
        out.push(track_step(model, &mut state, seq, j, cfg)?);
    }
    Ok(out)
}

/// Prediction file text: `frame_index,x,y,w,h,confidence,w_f,w_e` per line.
pub fn format_predictions(records: &[TrackRecord]) -> String {
    records
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}\n",
                r.frame, r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h, r.confidence, r.w_f, r.w_e
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::simulator::{simulate, SceneSpec, Trajectory};

    fn setup() -> (Model, Sequence) {
        let mut cfg = ModelConfig::toy();
        cfg.cdfi.input_width = 64;
        cfg.cdfi.input_height = 48;
        let model = Model::new(&cfg).unwrap();
        let mut spec = SceneSpec {
            width: 64,
            height: 48,
            frames: 3,
            ..SceneSpec::default()
        };
        spec.objects[0].width = 14.0;
        spec.objects[0].height = 12.0;
        spec.objects[0].trajectory = Trajectory::Linear {
            waypoints: vec![[0.0, 20.0, 20.0], [1.0, 50.0, 30.0]],
        };
        (model, simulate(&spec).unwrap().sequence)
    }

    #[test]
    fn tracks_every_frame_inside_the_image() {
        let (model, seq) = setup();
        let cfg = TrackerConfig::default();
        let a = track_sequence(&model, &seq, &cfg).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].bbox, *seq.gt.get(0).unwrap());
        for r in &a {
            let b = r.bbox;
            assert!(b.is_valid() && b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 64.0 + 1e-9 && b.y + b.h <= 48.0 + 1e-9);
            assert!(r.w_f > 0.0 && r.w_f < 1.0 && r.w_e > 0.0 && r.w_e < 1.0);
        }
        let b = track_sequence(&model, &seq, &cfg).unwrap();
        assert_eq!(a, b);
        let (state, _) = init(&model, &seq, 0, *seq.gt.get(0).unwrap(), &cfg).unwrap();
        assert_eq!(state.filter.shape(), &[1, 16, 4, 4]);
        assert_eq!(state.v_low.shape(), &[1, 16]);
        assert_eq!(state.v_high.shape(), &[1, 32]);
    }

    #[test]
    fn zero_filter_keeps_center() {
        let (model, seq) = setup();
        let cfg = TrackerConfig {
            candidates: 1,
            refine_steps: 0,
            ..TrackerConfig::default()
        };
        let (mut state, _) = init(&model, &seq, 0, *seq.gt.get(0).unwrap(), &cfg).unwrap();
        state.filter = Tensor::zeros(state.filter.shape());
        let before = state.prev;
        let r = track_step(&model, &mut state, &seq, 1, &cfg).unwrap();
        let (a, b) = (r.bbox.center(), before.center());
        assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9, "{a:?} vs {b:?}");
    }

    #[test]
    fn refinement_is_monotone() {
        let (model, seq) = setup();
        let cfg = TrackerConfig::default();
        let (state, _) = init(&model, &seq, 0, *seq.gt.get(0).unwrap(), &cfg).unwrap();
        let input = prepare_input(&model.config.cdfi, &seq, 1, &View::full_frame(64, 48, 64, 48)).unwrap();
        let mut g = Graph::new();
        let fused = model.features(&mut g, input.frame, input.events).unwrap();
        let tf = model.reg.test_features(&mut g, &model.store, fused.low, fused.high).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cands = jitter_boxes(&BBox::new(20.0, 15.0, 14.0, 12.0), 10, 0.3, 64.0, 48.0, &mut rng);
        let (_, hist) = refine_boxes(
            &model,
            (g.value(tf.low), g.value(tf.high)),
            (&state.v_low, &state.v_high),
            &cands,
            (64.0, 48.0),
            &cfg,
        )
        .unwrap();
        for h in hist {
            assert_eq!(h.len(), 6);
            assert!(h.windows(2).all(|w| w[1] >= w[0]), "{h:?}");
        }
    }
}
