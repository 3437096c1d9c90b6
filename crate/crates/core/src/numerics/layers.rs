//! Parameterised building blocks: each holds ids into a [`ParamStore`] and
//! evaluates itself through a [`Forward`].

use super::graph::Var;
use super::ops::attention::{multi_head_self_attention, AttentionOutput, AttentionWeights};
use super::ops::conv::{conv2d, ConvOptions};
use super::ops::linalg::linear;
use super::ops::norm::{batch_norm, layer_norm, BN_EPS, LN_EPS};
use super::params::{BnId, Forward, ModelRng, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// He (fan-in) normal initialisation.
fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ModelRng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: ConvOptions,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ModelRng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: ConvOptions,
        with_bias: bool,
    ) -> Result<Self> {
        let w = he_normal(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        let weight = store.add(&format!("{name}.weight"), w)?;
        let bias = if with_bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, opts })
    }

    pub fn forward<'g>(&self, f: &Forward<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        conv2d(x, f.param(self.weight), self.bias.map(|b| f.param(b)), self.opts)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            stats: store.add_bn(&format!("{name}.running"), channels)?,
        })
    }

    pub fn forward<'g>(&self, f: &Forward<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let (y, stats) = batch_norm(
            x,
            f.param(self.gamma),
            f.param(self.beta),
            BN_EPS,
            f.mode(),
            Some(f.running(self.stats)),
        )?;
        if let Some(stats) = stats {
            f.record_batch_stats(self.stats, stats);
        }
        Ok(y)
    }
}

/// Bias-free convolution, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ModelRng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: ConvOptions,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, kernel, opts, false)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward<'g>(&self, f: &Forward<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let y = self.conv.forward(f, x)?;
        Ok(self.bn.forward(f, y)?.relu())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ModelRng,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), he_normal(&[d_out, d_in], d_in, rng))?;
        let bias = if with_bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<'g>(&self, f: &Forward<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        linear(x, f.param(self.weight), self.bias.map(|b| f.param(b)))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[d]))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward<'g>(&self, f: &Forward<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        layer_norm(x, f.param(self.gamma), f.param(self.beta), LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ModelRng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        let mut proj = |suffix: &str, store: &mut ParamStore| {
            store.add(&format!("{name}.{suffix}.weight"), he_normal(&[d, d], d, rng))
        };
        let query = proj("query", store)?;
        let key = proj("key", store)?;
        let value = proj("value", store)?;
        let out = Linear::new(store, rng, &format!("{name}.out"), d, d, true)?;
        Ok(SelfAttention { query, key, value, out, heads })
    }

    pub fn forward<'g>(&self, f: &Forward<'g, '_>, x: Var<'g>) -> Result<AttentionOutput<'g>> {
        let w = AttentionWeights {
            query: f.param(self.query),
            key: f.param(self.key),
            value: f.param(self.value),
            out: f.param(self.out.weight),
            out_bias: f.param(self.out.bias.expect("attention output projection has a bias")),
        };
        multi_head_self_attention(x, &w, self.heads)
    }
}
