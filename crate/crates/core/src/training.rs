//! Siamese pair sampling, the Adam optimizer and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, ParamKind, ParamStore, Tensor};
use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::event_stream::Sequence;
use crate::loss::LossReport;
use crate::model::{prepare_input, Model, ModelConfig, PairSample, View};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_classifier: f64,
    pub lr_regressor: f64,
    pub lr_cdfi: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    /// Largest frame distance between reference and test frame.
    pub max_gap: usize,
    pub candidates: usize,
    /// Candidate jitter as a fraction of the box size.
    pub jitter: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_classifier: 1e-3,
            lr_regressor: 1e-3,
            lr_cdfi: 1e-4,
            lr_decay: 0.2,
            decay_every: 5,
            epochs: 10,
            batch_size: 4,
            steps_per_epoch: 16,
            max_gap: 10,
            candidates: 8,
            jitter: 0.1,
            beta: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_classifier, self.lr_regressor, self.lr_cdfi];
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if self.batch_size == 0 || self.decay_every == 0 || self.max_gap == 0 || self.candidates == 0 {
            return Err(Error::Config(
                "batch_size, decay_every, max_gap and candidates must be positive".into(),
            ));
        }
        if !(self.jitter >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("jitter must be >= 0 and lr_decay > 0".into()));
        }
        Ok(())
    }

    pub fn base_rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Cdfi => self.lr_cdfi,
            ParamGroup::Classifier => self.lr_classifier,
            ParamGroup::Regressor => self.lr_regressor,
        }
    }

    /// Rate of `group` during (zero-based) `epoch`.
    pub fn rate(&self, group: ParamGroup, epoch: usize) -> f64 {
        self.base_rate(group) * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Model and training settings as stored in a run configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Indices of one reference/test pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub sequence: usize,
    pub reference: usize,
    pub test: usize,
}

/// Annotated frames of `seq` that have an annotated successor within `max_gap`.
fn anchors(seq: &Sequence, max_gap: usize) -> Vec<(usize, Vec<usize>)> {
    let annotated: Vec<usize> = seq.gt.boxes.keys().copied().filter(|&i| i < seq.frames.len()).collect();
    annotated
        .iter()
        .map(|&r| {
            let tests: Vec<usize> = annotated.iter().copied().filter(|&t| t > r && t - r <= max_gap).collect();
            (r, tests)
        })
        .filter(|(_, t)| !t.is_empty())
        .collect()
}

/// Draws `count` pairs: a sequence uniformly, a reference frame uniformly among those
/// with a valid partner, then a later test frame at most `max_gap` frames ahead.
pub fn sample_pairs(dataset: &[Sequence], count: usize, seed: u64, max_gap: usize) -> Result<Vec<PairIndex>> {
    let table: Vec<(usize, Vec<(usize, Vec<usize>)>)> = dataset
        .iter()
        .enumerate()
        .map(|(i, s)| (i, anchors(s, max_gap)))
        .filter(|(_, a)| !a.is_empty())
        .collect();
    if table.is_empty() {
        return Err(Error::Data("no sequence has two annotated frames within the gap".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let (sequence, a) = &table[rng.random_range(0..table.len())];
            let (reference, tests) = &a[rng.random_range(0..a.len())];
            PairIndex {
                sequence: *sequence,
                reference: *reference,
                test: tests[rng.random_range(0..tests.len())],
            }
        })
        .collect())
}

/// `n` Gaussian perturbations of `b` (center and size, sigma `frac` of the size) that
/// stay inside a `w x h` image.
pub fn jitter_boxes<R: Rng>(b: &BBox, n: usize, frac: f64, w: f64, h: f64, rng: &mut R) -> Vec<BBox> {
    let (cx, cy) = b.center();
    (0..n)
        .map(|_| {
            let mut z = || -> f64 { StandardNormal.sample(rng) };
            let (sx, sy) = (frac * b.w, frac * b.h);
            let nw = (b.w + sx * z()).max(0.25 * b.w).max(1.0);
            let nh = (b.h + sy * z()).max(0.25 * b.h).max(1.0);
            BBox::from_center(cx + sx * z(), cy + sy * z(), nw, nh).clamp_to(w, h)
        })
        .collect()
}

/// Builds the network sample of a pair, boxes mapped to input pixels.
pub fn make_sample(model: &Model, dataset: &[Sequence], p: PairIndex, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<PairSample> {
    let seq = &dataset[p.sequence];
    let c = &model.config.cdfi;
    let view = View::full_frame(seq.meta.width, seq.meta.height, c.input_width, c.input_height);
    let gt = |j: usize| {
        seq.gt
            .get(j)
            .copied()
            .ok_or_else(|| Error::Data(format!("{}: frame {j} has no ground truth", seq.name())))
    };
    let ref_box = view.to_input(&gt(p.reference)?);
    let test_box = view.to_input(&gt(p.test)?);
    let (iw, ih) = (c.input_width as f64, c.input_height as f64);
    let candidates = jitter_boxes(&test_box, cfg.candidates, cfg.jitter, iw, ih, rng);
    let iou_targets = candidates.iter().map(|b| iou(b, &test_box)).collect::<Result<Vec<_>>>()?;
    Ok(PairSample {
        reference: prepare_input(c, seq, p.reference, &view)?,
        test: prepare_input(c, seq, p.test, &view)?,
        ref_box,
        test_box,
        candidates,
        iou_targets,
    })
}

/// Adam with one learning rate per parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore, rate: impl Fn(ParamGroup) -> f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let lr = rate(p.group);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let grad = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                if lr != 0.0 {
                    *w -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                }
            }
        }
    }
}

/// Forward, backward and one optimizer update on `batch`. Returns the losses before
/// the update.
pub fn train_step(
    model: &mut Model,
    batch: &[PairSample],
    adam: &mut Adam,
    beta: f64,
    rate: impl Fn(ParamGroup) -> f64,
) -> Result<LossReport> {
    let mut g = Graph::training();
    let l = model.batch_loss(&mut g, batch, beta)?;
    let report = LossReport::new(g.value(l.cls).item(), g.value(l.bbox).item(), beta);
    if !report.is_finite() {
        return Err(Error::Numerics(format!(
            "non-finite loss (total {}, cls {}, bbox {})",
            report.total, report.cls, report.bbox
        )));
    }
    let grads = g.backward(l.total)?;
    model.store.zero_grads();
    model.store.accumulate_grads(&g, &grads);
    let gn = model.store.grad_norm(None);
    if !gn.is_finite() {
        return Err(Error::Numerics(format!("non-finite gradient norm {gn}")));
    }
    adam.update(&mut model.store, rate);
    model.store.apply_bn_updates(&g);
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub losses: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub const FINAL_CHECKPOINT: &str = "model.fetw";
pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_FILE: &str = "loss.csv";

/// Trains `model` on `dataset`, writing `loss.csv`, `epoch_NNN.fetw` after every epoch,
/// `model.fetw` and the resolved `config.json` into `out_dir`.
pub fn train(model: &mut Model, dataset: &[Sequence], cfg: &TrainConfig, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let run = RunConfig {
        model: model.config.clone(),
        train: cfg.clone(),
    };
    fs::write(out_dir.join(CONFIG_FILE), serde_json::to_string_pretty(&run)? + "\n")?;
    let mut csv = fs::File::create(out_dir.join(LOSS_FILE))?;
    writeln!(csv, "step,L_total,L_cls,L_b")?;

    let mut adam = Adam::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in 0..cfg.epochs {
        let pairs = sample_pairs(
            dataset,
            cfg.steps_per_epoch * cfg.batch_size,
            cfg.seed.wrapping_add(epoch as u64 + 1),
            cfg.max_gap,
        )?;
        for chunk in pairs.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&p| make_sample(model, dataset, p, cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let r = train_step(model, &batch, &mut adam, cfg.beta, |g| cfg.rate(g, epoch))?;
            losses.push(r);
            writeln!(csv, "{},{},{},{}", losses.len(), r.total, r.cls, r.bbox)?;
            log::debug!("epoch {epoch} step {} loss {:.5}", losses.len(), r.total);
        }
        let path = out_dir.join(format!("epoch_{:03}.fetw", epoch + 1));
        model.store.save(&path)?;
        checkpoints.push(path);
        let tail = &losses[losses.len().saturating_sub(cfg.steps_per_epoch)..];
        log::info!(
            "epoch {}/{}: mean loss {:.5}",
            epoch + 1,
            cfg.epochs,
            tail.iter().map(|r| r.total).sum::<f64>() / tail.len().max(1) as f64
        );
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    model.store.save(&final_checkpoint)?;
    Ok(TrainSummary {
        losses,
        checkpoints,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_stream::{EventStream, FrameRecord, GroundTruth, SequenceMeta};
    use crate::image::GrayImage;

    fn seq(frames: usize, name: &str) -> Sequence {
        let mut gt = GroundTruth::default();
        for i in 0..frames {
            gt.boxes.insert(i, BBox::new(4.0 + i as f64, 4.0, 8.0, 8.0));
        }
        Sequence {
            meta: SequenceMeta {
                width: 32,
                height: 32,
                fps: 40.0,
                frame_timestamps_us: None,
                attributes: vec![],
                name: Some(name.into()),
            },
            stream: EventStream::empty(32, 32),
            frames: (0..frames)
                .map(|i| FrameRecord {
                    index: i,
                    t: 25_000 * (i as u64 + 1),
                    image: GrayImage::filled(32, 32, 100),
                })
                .collect(),
            gt,
        }
    }

    #[test]
    fn pairs_are_seeded_and_respect_gap() {
        let data = vec![seq(30, "a"), seq(3, "b")];
        let a = sample_pairs(&data, 200, 7, 10).unwrap();
        assert_eq!(a, sample_pairs(&data, 200, 7, 10).unwrap());
        assert!(a.iter().all(|p| p.test > p.reference && p.test - p.reference <= 10));
        assert!(matches!(sample_pairs(&[], 1, 0, 10), Err(Error::Data(_))));
        assert!(matches!(sample_pairs(&[seq(1, "c")], 1, 0, 10), Err(Error::Data(_))));
    }

    #[test]
    fn decay_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.rate(ParamGroup::Classifier, 0), 1e-3);
        assert_eq!(c.rate(ParamGroup::Classifier, 4), 1e-3);
        assert!((c.rate(ParamGroup::Classifier, 5) - 2e-4).abs() < 1e-18);
        assert!((c.rate(ParamGroup::Cdfi, 10) - 1e-4 * 0.04).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap(), ParamKind::Trainable, ParamGroup::Cdfi);
        s.get_mut(id).grad = Tensor::new(&[2], vec![0.5, -3.0]).unwrap();
        let mut adam = Adam::new(&s);
        adam.update(&mut s, |_| 0.1);
        // bias-corrected first step is lr * sign(g)
        let v = s.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn jittered_boxes_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = BBox::new(0.5, 0.5, 10.0, 6.0);
        for c in jitter_boxes(&b, 100, 0.3, 20.0, 12.0, &mut rng) {
            assert!(c.is_valid() && c.x >= 0.0 && c.y >= 0.0 && c.x + c.w <= 20.0 + 1e-9 && c.y + c.h <= 12.0 + 1e-9, "{c:?}");
        }
    }
}
