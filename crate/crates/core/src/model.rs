//! The assembled network: both encoders, per-level fusion, ASPP on the
//! deepest level, and the gated decoder.

use crate::aspp::{Aspp, AsppOutput};
use crate::encoders::{CnnEncoder, EncoderConfig, FeaturePyramid, TransformerEncoder, LEVELS};
use crate::error::{Error, Result};
use crate::fusion::{fuse_pyramids, Aff};
use crate::gates_decoder::{Decoder, InterChannels};
use crate::numerics::{seeded_rng, Forward, Graph, Mode, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub se_ratio: usize,
    pub se_blocks: usize,
    pub aspp_rates: [usize; 3],
    pub inter_channels: InterChannels,
    /// `conv3x3 -> BN -> ReLU` blocks per decoder level.
    pub decoder_blocks: usize,
}

impl Default for ModelConfig {
    /// Desk-scale defaults. The bottleneck is only `input_size / 16` wide,
    /// so the ASPP rates are scaled down from (6, 12, 18).
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            se_ratio: 4,
            se_blocks: 1,
            aspp_rates: [2, 3, 4],
            inter_channels: InterChannels::Half,
            decoder_blocks: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.se_ratio == 0 || self.encoder.base_channels % self.se_ratio != 0 {
            return Err(Error::invalid(format!(
                "se_ratio {} must divide base_channels {}",
                self.se_ratio, self.encoder.base_channels
            )));
        }
        if self.se_blocks == 0 || self.decoder_blocks == 0 {
            return Err(Error::invalid("se_blocks and decoder_blocks must be >= 1"));
        }
        Ok(())
    }

    /// A small configuration used by gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                input_size: 16,
                base_channels: 4,
                patch_size: 2,
                depth: 1,
                heads: 2,
                cnn_blocks: 1,
                mlp_ratio: 2,
            },
            se_ratio: 2,
            se_blocks: 1,
            aspp_rates: [1, 2, 3],
            inter_channels: InterChannels::Half,
            decoder_blocks: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Architecture {
    pub cnn: CnnEncoder,
    pub transformer: TransformerEncoder,
    pub fusion: Vec<Aff>,
    pub aspp: Aspp,
    pub decoder: Decoder,
}

/// Everything a forward pass produces, for inspection by tests.
pub struct CafctOutput<'g> {
    pub logits: Var<'g>,
    pub cnn: FeaturePyramid<'g>,
    pub transformer: FeaturePyramid<'g>,
    pub fused: FeaturePyramid<'g>,
    pub aspp: AsppOutput<'g>,
    pub se_weights: Vec<Var<'g>>,
    pub gate_coefficients: Vec<Var<'g>>,
}

#[derive(Debug, Clone)]
pub struct Cafct {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub arch: Architecture,
}

impl Cafct {
    /// Build with freshly initialised parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let enc = &config.encoder;
        let cnn = CnnEncoder::new(&mut store, &mut rng, "cnn", enc)?;
        let transformer = TransformerEncoder::new(&mut store, &mut rng, "transformer", enc)?;
        let shapes = enc.level_shapes();
        let fusion = shapes
            .iter()
            .enumerate()
            .map(|(i, &(c, _))| {
                Aff::new(&mut store, &mut rng, &format!("aff{}", i + 1), c, config.se_ratio, config.se_blocks)
            })
            .collect::<Result<Vec<_>>>()?;
        let deepest = shapes[LEVELS - 1].0;
        let aspp = Aspp::new(&mut store, &mut rng, "aspp", deepest, deepest, config.aspp_rates)?;
        let channels = shapes.map(|(c, _)| c);
        let decoder = Decoder::new(
            &mut store,
            &mut rng,
            "decoder",
            channels,
            deepest,
            config.inter_channels,
            config.decoder_blocks,
            enc.input_size,
        )?;
        Ok(Cafct {
            config: config.clone(),
            store,
            arch: Architecture { cnn, transformer, fusion, aspp, decoder },
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Full forward pass; `image` is `[N, 1, S, S]`.
    pub fn forward<'g>(&self, f: &Forward<'g, '_>, image: Var<'g>) -> Result<CafctOutput<'g>> {
        self.arch.forward(f, image)
    }

    /// Eval-mode logits without recording gradients for parameters.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let f = Forward::frozen(&g, &self.store, Mode::Eval);
        let out = self.forward(&f, g.constant(images.clone()))?;
        Ok((*out.logits.value()).clone())
    }
}

impl Architecture {
    pub fn forward<'g>(&self, f: &Forward<'g, '_>, image: Var<'g>) -> Result<CafctOutput<'g>> {
        let cnn = self.cnn.forward(f, image)?;
        let transformer = self.transformer.forward(f, image)?;
        let (fused, se_weights) = fuse_pyramids(f, &cnn, &transformer, &self.fusion)?;
        let aspp = self.aspp.forward(f, fused.levels[LEVELS - 1])?;
        let dec = self.decoder.forward(f, &fused, aspp.output)?;
        Ok(CafctOutput {
            logits: dec.logits,
            cnn,
            transformer,
            fused,
            aspp,
            se_weights,
            gate_coefficients: dec.gate_coefficients,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_model_is_small() {
        let m = Cafct::new(&ModelConfig::default(), 0).unwrap();
        let n = m.num_parameters();
        assert!(n > 10_000 && n < 2_000_000, "{n}");
    }

    #[test]
    fn logits_match_input_and_are_deterministic() {
        let m = Cafct::new(&ModelConfig::tiny(), 1).unwrap();
        let x = Tensor::rand_uniform(&[2, 1, 16, 16], 0.0, 1.0, &mut seeded_rng(2));
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(a.shape(), &[2, 1, 16, 16]);
        assert!(a.all_finite());
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_size() {
        let m = Cafct::new(&ModelConfig::tiny(), 1).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 1, 32, 32])).is_err());
    }

    #[test]
    fn bad_se_ratio_is_rejected() {
        let cfg = ModelConfig { se_ratio: 3, ..ModelConfig::tiny() };
        assert!(Cafct::new(&cfg, 0).is_err());
    }
}
