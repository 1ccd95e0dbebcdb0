//! The complete network (fusion stage plus heads), its input preparation and the
//! batched training objective.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::aggregate_interframe;
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::bbox::BBox;
use crate::cdfi::{Cdfi, CdfiConfig, FusedFeatures, InputMode};
use crate::error::{Error, Result};
use crate::event_stream::Sequence;
use crate::heads::{make_label, Classifier, HeadConfig, IouFeatures, Regressor, LOW_STRIDE};
use crate::image::resample_bilinear;
use crate::loss::{bbox_loss_graph, total_loss_graph};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub cdfi: CdfiConfig,
    pub heads: HeadConfig,
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            cdfi: CdfiConfig::toy(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cdfi.validate()?;
        self.heads.validate()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let cfg: ModelConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Affine map from image pixels to network-input pixels: `p' = (p - offset) * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub offset: (f64, f64),
    pub scale: (f64, f64),
}

impl View {
    pub fn full_frame(img_w: usize, img_h: usize, in_w: usize, in_h: usize) -> Self {
        View {
            offset: (0.0, 0.0),
            scale: (in_w as f64 / img_w as f64, in_h as f64 / img_h as f64),
        }
    }

    /// Square region of side `factor * max(w, h)` centered on `b`.
    pub fn crop(b: &BBox, factor: f64, in_w: usize, in_h: usize) -> Self {
        let side = (factor * b.w.max(b.h)).max(1.0);
        let (cx, cy) = b.center();
        View {
            offset: (cx - side / 2.0, cy - side / 2.0),
            scale: (in_w as f64 / side, in_h as f64 / side),
        }
    }

    pub fn to_input(&self, b: &BBox) -> BBox {
        b.transform(self.offset, self.scale)
    }

    pub fn to_image(&self, b: &BBox) -> BBox {
        b.untransform(self.offset, self.scale)
    }

    pub fn point_to_image(&self, p: (f64, f64)) -> (f64, f64) {
        (p.0 / self.scale.0 + self.offset.0, p.1 / self.scale.1 + self.offset.1)
    }
}

/// Unit-scaled network input of one frame: `frame [1, 1, H, W]`, `events [1, n*ch, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub frame: Tensor,
    pub events: Tensor,
}

/// Builds the network input of frame `j` of `seq` seen through `view`.
pub fn prepare_input(cfg: &CdfiConfig, seq: &Sequence, j: usize, view: &View) -> Result<ModelInput> {
    let (w, h) = (seq.meta.width, seq.meta.height);
    let (iw, ih) = (cfg.input_width, cfg.input_height);
    let rec = seq
        .frames
        .get(j)
        .ok_or_else(|| Error::Data(format!("{}: no frame {j}", seq.name())))?;
    let frame = resample_bilinear(&rec.image.to_unit(), w, h, iw, ih, view.offset, view.scale);
    let (t0, t1) = seq.event_window(j);
    let (t0, t1) = if t1 > t0 { (t0, t1) } else { (t0, t0 + 1) };
    let agg = aggregate_interframe(&seq.stream, t0, t1, cfg.n_bins, cfg.aggregation)?;
    let mut events = Vec::with_capacity(agg.channels() * iw * ih);
    for c in 0..agg.channels() {
        let unit: Vec<f64> = agg.plane(c).iter().map(|&v| v as f64 / 255.0).collect();
        events.extend(resample_bilinear(&unit, w, h, iw, ih, view.offset, view.scale));
    }
    Ok(ModelInput {
        frame: Tensor::new(&[1, 1, ih, iw], frame)?,
        events: Tensor::new(&[1, agg.channels(), ih, iw], events)?,
    })
}

/// Stacks single-image inputs along the batch axis.
pub fn stack_inputs(inputs: &[&ModelInput]) -> Result<(Tensor, Tensor)> {
    let first = inputs.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let fs = first.frame.shape();
    let es = first.events.shape();
    let mut frame = Vec::with_capacity(inputs.len() * first.frame.len());
    let mut events = Vec::with_capacity(inputs.len() * first.events.len());
    for x in inputs {
        if x.frame.shape() != fs || x.events.shape() != es {
            return Err(Error::shape("batch inputs differ in shape"));
        }
        frame.extend_from_slice(x.frame.data());
        events.extend_from_slice(x.events.data());
    }
    Ok((
        Tensor::new(&[inputs.len(), fs[1], fs[2], fs[3]], frame)?,
        Tensor::new(&[inputs.len(), es[1], es[2], es[3]], events)?,
    ))
}

/// One reference/test pair, boxes in network-input pixels.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub reference: ModelInput,
    pub test: ModelInput,
    pub ref_box: BBox,
    pub test_box: BBox,
    pub candidates: Vec<BBox>,
    pub iou_targets: Vec<f64>,
}

/// Loss nodes of one batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub cls: Var,
    pub bbox: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub cdfi: Cdfi,
    pub cls: Classifier,
    pub reg: Regressor,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        // One stream per component, so switching a fusion sub-module off leaves the
        // initialization of the heads unchanged.
        let rng = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(stream);
            r
        };
        let mut store = ParamStore::new();
        let cdfi = Cdfi::new(&mut store, &config.cdfi, &mut rng(0))?;
        let (cl, ch) = (config.cdfi.c_low, config.cdfi.c_high);
        let cls = Classifier::new(&mut store, cl, &config.heads, &mut rng(1));
        let reg = Regressor::new(&mut store, cl, ch, &config.heads, &mut rng(2));
        Ok(Model {
            config: config.clone(),
            store,
            cdfi,
            cls,
            reg,
        })
    }

    /// Builds the architecture from `config` and loads weights from a checkpoint.
    pub fn load(config: &ModelConfig, checkpoint: &Path) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.store.load(checkpoint)?;
        Ok(m)
    }

    /// Rows and columns of the low-level (score) map.
    pub fn score_geometry(&self) -> (usize, usize) {
        let c = &self.config.cdfi;
        (c.input_height / 8, c.input_width / 8)
    }

    pub fn input_mode(&self) -> InputMode {
        self.config.cdfi.input_mode
    }

    pub fn features(&self, g: &mut Graph, frame: Tensor, events: Tensor) -> Result<FusedFeatures> {
        self.features_with(g, &self.store, frame, events)
    }

    fn features_with(&self, g: &mut Graph, store: &ParamStore, frame: Tensor, events: Tensor) -> Result<FusedFeatures> {
        let f = g.input(frame);
        let e = g.input(events);
        self.cdfi.forward(g, store, f, e)
    }

    /// Label of a box (input pixels) on the score grid.
    pub fn label_for(&self, b: &BBox) -> Tensor {
        let (rows, cols) = self.score_geometry();
        make_label(b.center(), (b.w, b.h), rows, cols, LOW_STRIDE)
    }

    /// Training objective of a batch of pairs.
    pub fn batch_loss(&self, g: &mut Graph, batch: &[PairSample], beta: f64) -> Result<BatchLoss> {
        self.batch_loss_with(g, &self.store, batch, beta)
    }

    /// [`Model::batch_loss`] with parameter values taken from `store`, which must share
    /// this model's layout.
    pub fn batch_loss_with(&self, g: &mut Graph, store: &ParamStore, batch: &[PairSample], beta: f64) -> Result<BatchLoss> {
        let bsz = batch.len();
        if bsz == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let mut all: Vec<&ModelInput> = batch.iter().map(|p| &p.reference).collect();
        all.extend(batch.iter().map(|p| &p.test));
        let (frames, events) = stack_inputs(&all)?;
        let fused = self.features_with(g, store, frames, events)?;
        let cls_feat = self.cls.features(g, store, fused.low)?;

        let ref_low = g.narrow(fused.low, 0, 0, bsz)?;
        let ref_high = g.narrow(fused.high, 0, 0, bsz)?;
        let test_low = g.narrow(fused.low, 0, bsz, bsz)?;
        let test_high = g.narrow(fused.high, 0, bsz, bsz)?;
        let rf = self.reg.ref_features(g, store, ref_low, ref_high)?;
        let tf = self.reg.test_features(g, store, test_low, test_high)?;

        let mut cls_terms = Vec::with_capacity(bsz);
        let mut bb_terms = Vec::with_capacity(bsz);
        for (b, pair) in batch.iter().enumerate() {
            pair.ref_box.validate()?;
            let cf_ref = g.narrow(cls_feat, 0, b, 1)?;
            let cf_test = g.narrow(cls_feat, 0, bsz + b, 1)?;
            let rbox = g.input(Tensor::new(&[4], pair.ref_box.to_array().to_vec())?);
            let f0 = self.cls.init_filter(g, cf_ref, rbox)?;
            let f = self
                .cls
                .optimize_filter(g, cf_ref, f0, &self.label_for(&pair.ref_box), self.cls.steps)?;
            let s = self.cls.classify(g, cf_test, f)?;
            cls_terms.push(g.hinge_mse(s, &self.label_for(&pair.test_box))?);

            let one = |g: &mut Graph, v: Var| g.narrow(v, 0, b, 1);
            let rfb = IouFeatures {
                low: one(g, rf.low)?,
                high: one(g, rf.high)?,
            };
            let tfb = IouFeatures {
                low: one(g, tf.low)?,
                high: one(g, tf.high)?,
            };
            let m = self.reg.modulation(g, store, rfb, rbox)?;
            let mut boxes = Vec::with_capacity(pair.candidates.len());
            for c in &pair.candidates {
                c.validate()?;
                boxes.push(g.input(Tensor::new(&[4], c.to_array().to_vec())?));
            }
            let iou = self.reg.predict_iou(g, store, tfb, m, &boxes)?;
            bb_terms.push(bbox_loss_graph(g, iou, &pair.iou_targets)?);
        }
        let mean = |g: &mut Graph, terms: &[Var]| -> Result<Var> {
            let cat = g.concat(terms, 0)?;
            Ok(g.mean(cat))
        };
        let cls = mean(g, &cls_terms)?;
        let bbox = mean(g, &bb_terms)?;
        let total = total_loss_graph(g, cls, bbox, beta)?;
        Ok(BatchLoss { total, cls, bbox })
    }
}
