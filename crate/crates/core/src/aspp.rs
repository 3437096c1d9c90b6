//! Atrous spatial pyramid pooling over the deepest fused map.
//!
//! Five parallel branches (1x1, three dilated 3x3, image pooling) are
//! concatenated in that order, giving five times the branch width, then
//! projected back with a 1x1 conv.

use crate::error::{Error, Result};
use crate::numerics::layers::ConvBnRelu;
use crate::numerics::ops::{bilinear_resize, concat, global_avg_pool, ConvOptions};
use crate::numerics::{Forward, ModelRng, ParamStore, Var};

pub const DEFAULT_RATES: [usize; 3] = [6, 12, 18];
pub const BRANCHES: usize = 5;

/// Span covered by a `kernel`-tap filter with the given dilation.
pub fn effective_receptive_field(kernel: usize, dilation: usize) -> usize {
    dilation * (kernel - 1) + 1
}

#[derive(Debug, Clone)]
pub struct Aspp {
    pub point: ConvBnRelu,
    pub dilated: Vec<(usize, ConvBnRelu)>,
    pub pool: ConvBnRelu,
    pub project: ConvBnRelu,
    pub channels: usize,
}

pub struct AsppOutput<'g> {
    pub output: Var<'g>,
    /// The five-branch concatenation before projection.
    pub concat: Var<'g>,
    /// Image-pooling branch after resampling to the input size.
    pub pool_branch: Var<'g>,
}

impl Aspp {
    /// Branch width equals `channels`; output has `out_channels`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ModelRng,
        name: &str,
        channels: usize,
        out_channels: usize,
        rates: [usize; 3],
    ) -> Result<Self> {
        if rates[0] == 0 || !rates.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid(format!(
                "ASPP dilation rates {rates:?} must be >= 1 and strictly increasing"
            )));
        }
        let one = ConvOptions::default();
        let point = ConvBnRelu::new(store, rng, &format!("{name}.point"), channels, channels, 1, one)?;
        let dilated = rates
            .iter()
            .map(|&d| {
                let block = ConvBnRelu::new(
                    store,
                    rng,
                    &format!("{name}.rate{d}"),
                    channels,
                    channels,
                    3,
                    ConvOptions::same_3x3(d),
                )?;
                Ok((d, block))
            })
            .collect::<Result<Vec<_>>>()?;
        let pool = ConvBnRelu::new(store, rng, &format!("{name}.pool"), channels, channels, 1, one)?;
        let project = ConvBnRelu::new(
            store,
            rng,
            &format!("{name}.project"),
            BRANCHES * channels,
            out_channels,
            1,
            one,
        )?;
        Ok(Aspp { point, dilated, pool, project, channels })
    }

    pub fn rates(&self) -> Vec<usize> {
        self.dilated.iter().map(|(d, _)| *d).collect()
    }

    pub fn forward<'g>(&self, f: &Forward<'g, '_>, x: Var<'g>) -> Result<AsppOutput<'g>> {
        let [_, c, h, w] = x.value().dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "ASPP built for {} channels applied to {:?}",
                self.channels,
                x.shape()
            )));
        }
        let mut branches = Vec::with_capacity(BRANCHES);
        branches.push(self.point.forward(f, x)?);
        for (_, block) in &self.dilated {
            branches.push(block.forward(f, x)?);
        }
        let pooled = self.pool.forward(f, global_avg_pool(x)?)?;
        let pool_branch = bilinear_resize(pooled, h, w)?;
        branches.push(pool_branch);
        let cat = concat(&branches, 1)?;
        let output = self.project.forward(f, cat)?;
        Ok(AsppOutput { output, concat: cat, pool_branch })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_rng, Graph, Mode, Tensor};

    #[test]
    fn receptive_fields() {
        assert_eq!(effective_receptive_field(3, 1), 3);
        assert_eq!(effective_receptive_field(3, 6), 13);
        assert_eq!(effective_receptive_field(3, 18), 37);
    }

    #[test]
    fn rejects_non_increasing_rates() {
        let mut store = ParamStore::new();
        assert!(Aspp::new(&mut store, &mut seeded_rng(0), "a", 4, 4, [6, 6, 18]).is_err());
        assert!(Aspp::new(&mut store, &mut seeded_rng(0), "b", 4, 4, [0, 6, 18]).is_err());
    }

    #[test]
    fn five_fold_concat_and_preserved_size() {
        let mut store = ParamStore::new();
        let aspp = Aspp::new(&mut store, &mut seeded_rng(0), "aspp", 64, 64, DEFAULT_RATES).unwrap();
        let g = Graph::new();
        let f = Forward::frozen(&g, &store, Mode::Train);
        let x = g.constant(Tensor::randn(&[1, 64, 8, 8], 1.0, &mut seeded_rng(3)));
        let out = aspp.forward(&f, x).unwrap();
        assert_eq!(out.concat.shape(), vec![1, 320, 8, 8]);
        assert_eq!(out.output.shape(), vec![1, 64, 8, 8]);
        assert!(out.output.value().all_finite());
    }

    #[test]
    fn pool_branch_is_spatially_constant() {
        let mut store = ParamStore::new();
        let aspp = Aspp::new(&mut store, &mut seeded_rng(0), "aspp", 4, 4, [1, 2, 3]).unwrap();
        let g = Graph::new();
        let f = Forward::frozen(&g, &store, Mode::Train);
        let x = g.constant(Tensor::randn(&[2, 4, 6, 6], 1.0, &mut seeded_rng(5)));
        let p = aspp.forward(&f, x).unwrap().pool_branch.value();
        for plane in p.data().chunks(36) {
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }
}
