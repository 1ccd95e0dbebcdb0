//! IoU predictor conditioned on the reference target through per-channel modulation.

use rand::Rng;

use crate::autodiff::{Graph, ParamGroup, ParamStore, Var};
use crate::error::Result;
use crate::nn::{Conv, Init, Linear};

use super::{HeadConfig, HIGH_STRIDE, LOW_STRIDE};

const G: ParamGroup = ParamGroup::Regressor;

#[derive(Debug, Clone)]
pub struct Regressor {
    pub ref_low: Conv,
    pub ref_high: Conv,
    pub ref_fc: Linear,
    pub mod_low: Linear,
    pub mod_high: Linear,
    pub test_low: [Conv; 2],
    pub test_high: [Conv; 2],
    pub fc_low: Linear,
    pub fc_high: Linear,
    pub head: Linear,
    pub pool_low: usize,
    pub pool_high: usize,
    pub pool_samples: usize,
}

/// Reference-derived per-channel vectors, `[1, C_l]` and `[1, C_h]`.
#[derive(Debug, Clone, Copy)]
pub struct Modulation {
    pub v_low: Var,
    pub v_high: Var,
}

/// Regressor features of one or more images.
#[derive(Debug, Clone, Copy)]
pub struct IouFeatures {
    pub low: Var,
    pub high: Var,
}

impl Regressor {
    pub fn new<R: Rng>(store: &mut ParamStore, c_low: usize, c_high: usize, cfg: &HeadConfig, rng: &mut R) -> Self {
        let (pl, ph) = (cfg.iou_pool_low, cfg.iou_pool_high);
        let conv = |store: &mut ParamStore, name: &str, c: usize, rng: &mut R| {
            Conv::new(store, name, c, c, 3, 1, true, Init::He, G, rng)
        };
        let ref_low = conv(store, "reg.ref_low", c_low, rng);
        let ref_high = conv(store, "reg.ref_high", c_high, rng);
        let ref_fc = Linear::new(store, "reg.ref_fc", c_low * pl * pl, c_low, true, Init::He, G, rng);
        let q = c_low + c_high * ph * ph;
        let mod_low = Linear::new(store, "reg.mod_low", q, c_low, true, Init::Lecun, G, rng);
        let mod_high = Linear::new(store, "reg.mod_high", q, c_high, true, Init::Lecun, G, rng);
        let test_low = [
            conv(store, "reg.test_low1", c_low, rng),
            conv(store, "reg.test_low2", c_low, rng),
        ];
        let test_high = [
            conv(store, "reg.test_high1", c_high, rng),
            conv(store, "reg.test_high2", c_high, rng),
        ];
        let fc_low = Linear::new(store, "reg.fc_low", c_low * pl * pl, c_low, false, Init::He, G, rng);
        let fc_high = Linear::new(store, "reg.fc_high", c_high * ph * ph, c_high, false, Init::He, G, rng);
        // Modulation multiplies two feature maps, so the head starts small to keep the
        // first predictions near the bias.
        let head = Linear::new(store, "reg.head", c_low + c_high, 1, true, Init::Std(0.01), G, rng);
        Regressor {
            ref_low,
            ref_high,
            ref_fc,
            mod_low,
            mod_high,
            test_low,
            test_high,
            fc_low,
            fc_high,
            head,
            pool_low: pl,
            pool_high: ph,
            pool_samples: cfg.pool_samples,
        }
    }

    pub fn ref_features(&self, g: &mut Graph, store: &ParamStore, k_low: Var, k_high: Var) -> Result<IouFeatures> {
        let l = self.ref_low.forward(g, store, k_low)?;
        let h = self.ref_high.forward(g, store, k_high)?;
        Ok(IouFeatures {
            low: g.relu(l),
            high: g.relu(h),
        })
    }

    pub fn test_features(&self, g: &mut Graph, store: &ParamStore, k_low: Var, k_high: Var) -> Result<IouFeatures> {
        let mut l = k_low;
        for c in &self.test_low {
            let y = c.forward(g, store, l)?;
            l = g.relu(y);
        }
        let mut h = k_high;
        for c in &self.test_high {
            let y = c.forward(g, store, h)?;
            h = g.relu(y);
        }
        Ok(IouFeatures { low: l, high: h })
    }

    /// `feats` holds a single image; `bbox` is a `[4]` box in input pixels.
    pub fn modulation(&self, g: &mut Graph, store: &ParamStore, feats: IouFeatures, bbox: Var) -> Result<Modulation> {
        let pl = g.region_pool(feats.low, bbox, self.pool_low, self.pool_samples, 1.0 / LOW_STRIDE)?;
        let pl = g.flatten(pl)?;
        let fl = self.ref_fc.forward(g, store, pl)?;
        let fl = g.relu(fl);
        let ph = g.region_pool(feats.high, bbox, self.pool_high, self.pool_samples, 1.0 / HIGH_STRIDE)?;
        let ph = g.flatten(ph)?;
        let q = g.concat(&[fl, ph], 1)?;
        Ok(Modulation {
            v_low: self.mod_low.forward(g, store, q)?,
            v_high: self.mod_high.forward(g, store, q)?,
        })
    }

    fn modulated(
        &self,
        g: &mut Graph,
        feat: Var,
        boxes: &[Var],
        v: Var,
        out: usize,
        scale: f64,
    ) -> Result<Var> {
        let mut pooled = Vec::with_capacity(boxes.len());
        for &b in boxes {
            pooled.push(g.region_pool(feat, b, out, self.pool_samples, scale)?);
        }
        let p = g.concat(&pooled, 0)?;
        let c = g.shape(v)[1];
        let v4 = g.reshape(v, &[1, c, 1, 1])?;
        let vs = g.concat(&vec![v4; boxes.len()], 0)?;
        let m = g.mul(p, vs)?;
        g.flatten(m)
    }

    /// Predicted IoU `[M, 1]` of each `[4]` box over a single test image.
    pub fn predict_iou(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: IouFeatures,
        modulation: Modulation,
        boxes: &[Var],
    ) -> Result<Var> {
        let ml = self.modulated(g, feats.low, boxes, modulation.v_low, self.pool_low, 1.0 / LOW_STRIDE)?;
        let yl = self.fc_low.forward(g, store, ml)?;
        let yl = g.relu(yl);
        let mh = self.modulated(g, feats.high, boxes, modulation.v_high, self.pool_high, 1.0 / HIGH_STRIDE)?;
        let yh = self.fc_high.forward(g, store, mh)?;
        let yh = g.relu(yh);
        let cat = g.concat(&[yl, yh], 1)?;
        self.head.forward(g, store, cat)
    }
}
