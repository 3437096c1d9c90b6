//! Attentional feature fusion: per pyramid level, the CNN and transformer
//! maps are concatenated, reduced back to one branch's width, and
//! reweighted channel-wise by squeeze-and-excitation.

use crate::encoders::FeaturePyramid;
use crate::error::{Error, Result};
use crate::numerics::layers::{BatchNorm2d, Conv2d, Linear};
use crate::numerics::ops::{concat, global_avg_pool, ConvOptions};
use crate::numerics::{Forward, ModelRng, ParamStore, Var};

/// Squeeze (global average pool) and excitation (bottleneck MLP, sigmoid).
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub reduce: Linear,
    pub expand: Linear,
    pub channels: usize,
    pub ratio: usize,
}

/// Rescaled map and the per-(sample, channel) weights `[N, C]` in (0, 1).
pub struct SeOutput<'g> {
    pub output: Var<'g>,
    pub weights: Var<'g>,
}

impl SeBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ModelRng,
        name: &str,
        channels: usize,
        ratio: usize,
    ) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::invalid(format!(
                "SE block: {channels} channels are not divisible by reduction ratio {ratio}"
            )));
        }
        let hidden = channels / ratio;
        Ok(SeBlock {
            reduce: Linear::new(store, rng, &format!("{name}.reduce"), channels, hidden, true)?,
            expand: Linear::new(store, rng, &format!("{name}.expand"), hidden, channels, true)?,
            channels,
            ratio,
        })
    }

    pub fn forward<'g>(&self, f: &Forward<'g, '_>, x: Var<'g>) -> Result<SeOutput<'g>> {
        let [n, c, _, _] = x.value().dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "SE block built for {} channels applied to {:?}",
                self.channels,
                x.shape()
            )));
        }
        let s = global_avg_pool(x)?.reshape(&[n, c])?;
        let z = self.reduce.forward(f, s)?.relu();
        let weights = self.expand.forward(f, z)?.sigmoid();
        let output = x.mul(weights.reshape(&[n, c, 1, 1])?)?;
        Ok(SeOutput { output, weights })
    }
}

/// Fusion of one pyramid level: concat -> 1x1 conv -> BN -> ReLU -> SE.
#[derive(Debug, Clone)]
pub struct Aff {
    pub reduce: Conv2d,
    pub bn: BatchNorm2d,
    pub se: Vec<SeBlock>,
}

pub struct AffOutput<'g> {
    pub output: Var<'g>,
    /// Excitation weights of each SE block, in order.
    pub se_weights: Vec<Var<'g>>,
}

impl Aff {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ModelRng,
        name: &str,
        channels: usize,
        se_ratio: usize,
        se_blocks: usize,
    ) -> Result<Self> {
        if se_blocks == 0 {
            return Err(Error::invalid("AFF needs at least one SE block"));
        }
        let reduce = Conv2d::new(
            store,
            rng,
            &format!("{name}.reduce"),
            2 * channels,
            channels,
            1,
            ConvOptions::default(),
            false,
        )?;
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), channels)?;
        let se = (0..se_blocks)
            .map(|i| SeBlock::new(store, rng, &format!("{name}.se{i}"), channels, se_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Aff { reduce, bn, se })
    }

    pub fn forward<'g>(&self, f: &Forward<'g, '_>, f_cnn: Var<'g>, f_trans: Var<'g>) -> Result<AffOutput<'g>> {
        let (a, b) = (f_cnn.shape(), f_trans.shape());
        if a != b {
            return Err(Error::shape(format!(
                "AFF branches disagree: CNN {a:?} vs transformer {b:?}"
            )));
        }
        let cat = concat(&[f_cnn, f_trans], 1)?;
        let mut x = self.bn.forward(f, self.reduce.forward(f, cat)?)?.relu();
        let mut se_weights = Vec::with_capacity(self.se.len());
        for se in &self.se {
            let out = se.forward(f, x)?;
            x = out.output;
            se_weights.push(out.weights);
        }
        Ok(AffOutput { output: x, se_weights })
    }
}

/// Level-wise fusion of two pyramids, one [`Aff`] per level.
pub fn fuse_pyramids<'g>(
    f: &Forward<'g, '_>,
    p_cnn: &FeaturePyramid<'g>,
    p_trans: &FeaturePyramid<'g>,
    modules: &[Aff],
) -> Result<(FeaturePyramid<'g>, Vec<Var<'g>>)> {
    if p_cnn.levels.len() != p_trans.levels.len() || p_cnn.levels.len() != modules.len() {
        return Err(Error::shape(format!(
            "cannot fuse pyramids with {} and {} levels using {} modules",
            p_cnn.levels.len(),
            p_trans.levels.len(),
            modules.len()
        )));
    }
    let mut levels = Vec::with_capacity(modules.len());
    let mut weights = Vec::new();
    for ((a, b), m) in p_cnn.levels.iter().zip(&p_trans.levels).zip(modules) {
        let out = m.forward(f, *a, *b)?;
        levels.push(out.output);
        weights.extend(out.se_weights);
    }
    Ok((FeaturePyramid { levels }, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_rng, Graph, Mode, Tensor};

    #[test]
    fn se_rejects_indivisible_channels() {
        let mut store = ParamStore::new();
        assert!(SeBlock::new(&mut store, &mut seeded_rng(0), "se", 6, 4).is_err());
        assert!(SeBlock::new(&mut store, &mut seeded_rng(0), "se", 8, 4).is_ok());
    }

    #[test]
    fn zero_excitation_halves_input() {
        let mut store = ParamStore::new();
        let se = SeBlock::new(&mut store, &mut seeded_rng(0), "se", 4, 2).unwrap();
        store.get_mut(se.expand.weight).value.scale_in_place(0.0);
        let g = Graph::new();
        let f = Forward::frozen(&g, &store, Mode::Train);
        let xt = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut seeded_rng(1));
        let out = se.forward(&f, g.constant(xt.clone())).unwrap();
        assert!(out.weights.value().data().iter().all(|&w| w == 0.5));
        assert_eq!(*out.output.value(), xt.map(|v| v * 0.5));
    }

    #[test]
    fn aff_preserves_shape_and_rejects_mismatch() {
        let mut store = ParamStore::new();
        let aff = Aff::new(&mut store, &mut seeded_rng(0), "aff", 32, 4, 1).unwrap();
        let g = Graph::new();
        let f = Forward::frozen(&g, &store, Mode::Train);
        let mut rng = seeded_rng(2);
        let a = g.constant(Tensor::randn(&[1, 32, 16, 16], 1.0, &mut rng));
        let b = g.constant(Tensor::randn(&[1, 32, 16, 16], 1.0, &mut rng));
        assert_eq!(aff.forward(&f, a, b).unwrap().output.shape(), vec![1, 32, 16, 16]);
        let c = g.constant(Tensor::zeros(&[1, 32, 8, 8]));
        assert!(aff.forward(&f, a, c).is_err());
    }
}
