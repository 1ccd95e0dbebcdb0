//! Small layer wrappers over the parameter store.

use rand::Rng;

use crate::autodiff::{BnParams, Graph, Padding, ParamGroup, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::error::Result;

/// Weight initialization scale.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `sqrt(2 / fan_in)`, for layers followed by a ReLU.
    He,
    /// `sqrt(1 / fan_in)`.
    Lecun,
    /// Explicit standard deviation.
    Std(f64),
}

impl Init {
    fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Lecun => (1.0 / fan_in as f64).sqrt(),
            Init::Std(s) => s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: Padding,
}

#[allow(clippy::too_many_arguments)]
impl Conv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        init: Init,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let std = init.std(cin * k * k);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[cout, cin, k, k], std, rng),
            ParamKind::Trainable,
            group,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Trainable, group));
        Conv {
            weight,
            bias,
            stride,
            pad: Padding::same(k / 2),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.leaf(g, self.weight);
        let b = self.bias.map(|b| store.leaf(g, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Convolution without bias, then batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BnParams,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let conv = Conv::new(store, &format!("{name}.conv"), cin, cout, k, stride, false, Init::He, group, rng);
        let bn = store.add_bn(&format!("{name}.bn"), cout, group);
        ConvBnRelu { conv, bn }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = store.batch_norm(g, y, &self.bn)?;
        Ok(g.relu(y))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fin: usize,
        fout: usize,
        bias: bool,
        init: Init,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[fout, fin], init.std(fin), rng),
            ParamKind::Trainable,
            group,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fout]), ParamKind::Trainable, group));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.leaf(g, self.weight);
        let b = self.bias.map(|b| store.leaf(g, b));
        g.linear(x, w, b)
    }
}
