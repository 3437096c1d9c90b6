//! The two encoder branches. Each turns a `[N, 1, H, W]` image into a
//! four-level [`FeaturePyramid`] with strides 2, 4, 8, 16 and channel
//! widths `C, 2C, 4C, 4C`.

use crate::error::{Error, Result};
use crate::numerics::layers::{Conv2d, ConvBnRelu, LayerNorm, Linear, SelfAttention};
use crate::numerics::ops::{avg_pool2d, ConvOptions};
use crate::numerics::{Forward, ModelRng, ParamId, ParamStore, Tensor, Var};

pub const LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Side of the square input image.
    pub input_size: usize,
    /// Channel width of pyramid level 1.
    pub base_channels: usize,
    /// Kernel of the stage-1 patch embedding (applied with stride 2).
    pub patch_size: usize,
    /// Transformer blocks per stage.
    pub depth: usize,
    pub heads: usize,
    /// `conv3x3 -> BN -> ReLU` blocks per CNN stage.
    pub cnn_blocks: usize,
    /// Hidden width of the transformer MLP, as a multiple of the stage width.
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 64,
            base_channels: 16,
            patch_size: 2,
            depth: 1,
            heads: 2,
            cnn_blocks: 2,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return bad(format!("input_size {} must be a positive multiple of 16", self.input_size));
        }
        if self.base_channels == 0 || self.depth == 0 || self.cnn_blocks == 0 || self.mlp_ratio == 0 {
            return bad("base_channels, depth, cnn_blocks and mlp_ratio must be >= 1".into());
        }
        if self.heads == 0 || self.base_channels % self.heads != 0 {
            return bad(format!(
                "base_channels {} must be divisible by heads {}",
                self.base_channels, self.heads
            ));
        }
        if self.patch_size < 2 || self.patch_size > self.input_size / 2 {
            return bad(format!(
                "patch_size {} must lie in [2, input_size/2]",
                self.patch_size
            ));
        }
        Ok(())
    }

    /// `(channels, side)` of each pyramid level.
    pub fn level_shapes(&self) -> [(usize, usize); LEVELS] {
        let c = self.base_channels;
        let s = self.input_size;
        [(c, s / 2), (2 * c, s / 4), (4 * c, s / 8), (4 * c, s / 16)]
    }

    /// Padding that makes a stride-2 patch embedding with kernel `patch_size`
    /// halve the input exactly.
    fn patch_padding(&self) -> usize {
        (self.patch_size - 1) / 2
    }

    /// Stage-1 token count.
    pub fn stage1_tokens(&self) -> usize {
        let side = self.level_shapes()[0].1;
        side * side
    }
}

/// Four multi-scale maps, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<'g> {
    pub levels: Vec<Var<'g>>,
}

impl<'g> FeaturePyramid<'g> {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|l| l.shape()).collect()
    }

    /// Check the halving/doubling schedule: `H_{i+1} = H_i / 2`,
    /// `C_2 = 2 C_1`, `C_3 = 2 C_2`, `C_4 = C_3`, common batch size.
    pub fn check_schedule(&self) -> Result<()> {
        let shapes = self.shapes();
        if shapes.len() != LEVELS {
            return Err(Error::shape(format!("pyramid has {} levels, expected {LEVELS}", shapes.len())));
        }
        for s in &shapes {
            if s.len() != 4 {
                return Err(Error::shape(format!("pyramid level {s:?} is not NCHW")));
            }
        }
        for i in 0..LEVELS - 1 {
            let (a, b) = (&shapes[i], &shapes[i + 1]);
            let want_c = if i < 2 { 2 * a[1] } else { a[1] };
            if b[0] != a[0] || 2 * b[2] != a[2] || 2 * b[3] != a[3] || b[1] != want_c {
                return Err(Error::shape(format!(
                    "pyramid levels {i}->{} break the schedule: {a:?} -> {b:?}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

fn check_image(image: &Var<'_>, cfg: &EncoderConfig) -> Result<()> {
    let s = image.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != cfg.input_size || s[3] != cfg.input_size {
        return Err(Error::shape(format!(
            "encoder expects [N, 1, {0}, {0}] input, got {s:?}",
            cfg.input_size
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CnnEncoder {
    stages: Vec<Vec<ConvBnRelu>>,
    cfg: EncoderConfig,
}

impl CnnEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ModelRng, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(LEVELS);
        let mut cin = 1;
        for (i, (cout, _)) in cfg.level_shapes().into_iter().enumerate() {
            let blocks = (0..cfg.cnn_blocks)
                .map(|b| {
                    let input = if b == 0 { cin } else { cout };
                    ConvBnRelu::new(
                        store,
                        rng,
                        &format!("{name}.stage{}.block{b}", i + 1),
                        input,
                        cout,
                        3,
                        ConvOptions::same_3x3(1),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            cin = cout;
        }
        Ok(CnnEncoder { stages, cfg: cfg.clone() })
    }

    /// Each stage: conv blocks at the incoming resolution, then 2x2 average
    /// pooling down to the level's resolution.
    pub fn forward<'g>(&self, f: &Forward<'g, '_>, image: Var<'g>) -> Result<FeaturePyramid<'g>> {
        check_image(&image, &self.cfg)?;
        let mut x = image;
        let mut levels = Vec::with_capacity(LEVELS);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(f, x)?;
            }
            x = avg_pool2d(x, 2)?;
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Pre-norm transformer block: `x + attn(LN x)`, then `x + mlp(LN x)`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ModelRng,
        name: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), d, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), d, d * mlp_ratio, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), d * mlp_ratio, d, true)?,
        })
    }

    pub fn forward<'g>(&self, f: &Forward<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let a = self.attn.forward(f, self.norm1.forward(f, x)?)?.output;
        let x = x.add(a)?;
        let h = self.fc1.forward(f, self.norm2.forward(f, x)?)?.gelu();
        x.add(self.fc2.forward(f, h)?)
    }
}

#[derive(Debug, Clone)]
struct TransformerStage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

/// Hierarchical transformer branch: patch embedding (stage 1) or 2x2 patch
/// merging (stages 2-4), learned positional embedding, attention blocks.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    stages: Vec<TransformerStage>,
    cfg: EncoderConfig,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ModelRng, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(LEVELS);
        let mut cin = 1;
        for (i, (d, side)) in cfg.level_shapes().into_iter().enumerate() {
            let prefix = format!("{name}.stage{}", i + 1);
            let (k, opts) = if i == 0 {
                let opts = ConvOptions { stride: 2, padding: cfg.patch_padding(), dilation: 1 };
                (cfg.patch_size, opts)
            } else {
                (2, ConvOptions { stride: 2, padding: 0, dilation: 1 })
            };
            let embed = Conv2d::new(store, rng, &format!("{prefix}.embed"), cin, d, k, opts, true)?;
            let embed_norm = LayerNorm::new(store, &format!("{prefix}.embed_norm"), d)?;
            let pos = store.add(
                &format!("{prefix}.pos_embed"),
                Tensor::randn(&[1, side * side, d], 0.02, rng),
            )?;
            let blocks = (0..cfg.depth)
                .map(|b| {
                    TransformerBlock::new(
                        store,
                        rng,
                        &format!("{prefix}.block{b}"),
                        d,
                        cfg.heads,
                        cfg.mlp_ratio,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(store, &format!("{prefix}.norm"), d)?;
            stages.push(TransformerStage { embed, embed_norm, pos, blocks, norm });
            cin = d;
        }
        Ok(TransformerEncoder { stages, cfg: cfg.clone() })
    }

    pub fn forward<'g>(&self, f: &Forward<'g, '_>, image: Var<'g>) -> Result<FeaturePyramid<'g>> {
        check_image(&image, &self.cfg)?;
        let mut x = image;
        let mut levels = Vec::with_capacity(LEVELS);
        for stage in &self.stages {
            let map = stage.embed.forward(f, x)?;
            let [_, _, h, w] = map.value().dims4()?;
            let mut t = stage.embed_norm.forward(f, map.map_to_tokens()?)?;
            t = t.add(f.param(stage.pos))?;
            for block in &stage.blocks {
                t = block.forward(f, t)?;
            }
            x = stage.norm.forward(f, t)?.tokens_to_map(h, w)?;
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_rng, Graph, Mode};

    fn build(cfg: &EncoderConfig) -> (ParamStore, CnnEncoder, TransformerEncoder) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let cnn = CnnEncoder::new(&mut store, &mut rng, "cnn", cfg).unwrap();
        let tr = TransformerEncoder::new(&mut store, &mut rng, "trans", cfg).unwrap();
        (store, cnn, tr)
    }

    #[test]
    fn desk_config_level_shapes() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.level_shapes(), [(16, 32), (32, 16), (64, 8), (64, 4)]);
        assert_eq!(cfg.stage1_tokens(), 1024);
    }

    #[test]
    fn config_validation() {
        let ok = EncoderConfig::default();
        assert!(ok.validate().is_ok());
        assert!(EncoderConfig { input_size: 40, ..ok.clone() }.validate().is_err());
        assert!(EncoderConfig { heads: 3, ..ok.clone() }.validate().is_err());
        assert!(EncoderConfig { patch_size: 1, ..ok.clone() }.validate().is_err());
        assert!(EncoderConfig { patch_size: 3, ..ok }.validate().is_ok());
    }

    #[test]
    fn both_branches_follow_the_schedule() {
        let cfg = EncoderConfig { input_size: 32, base_channels: 4, ..Default::default() };
        let (store, cnn, tr) = build(&cfg);
        let g = Graph::new();
        let f = Forward::frozen(&g, &store, Mode::Train);
        let x = g.constant(Tensor::rand_uniform(&[2, 1, 32, 32], 0.0, 1.0, &mut seeded_rng(1)));
        let pc = cnn.forward(&f, x).unwrap();
        let pt = tr.forward(&f, x).unwrap();
        pc.check_schedule().unwrap();
        pt.check_schedule().unwrap();
        assert_eq!(pc.shapes(), pt.shapes());
        assert_eq!(pc.shapes()[0], vec![2, 4, 16, 16]);
        assert_eq!(pc.shapes()[3], vec![2, 16, 2, 2]);
    }

    #[test]
    fn odd_patch_size_keeps_schedule() {
        let cfg = EncoderConfig { input_size: 16, base_channels: 4, patch_size: 3, ..Default::default() };
        let (store, _, tr) = build(&cfg);
        let g = Graph::new();
        let f = Forward::frozen(&g, &store, Mode::Train);
        let x = g.constant(Tensor::zeros(&[1, 1, 16, 16]));
        tr.forward(&f, x).unwrap().check_schedule().unwrap();
    }

    #[test]
    fn rejects_wrong_input_size() {
        let cfg = EncoderConfig { input_size: 16, base_channels: 4, ..Default::default() };
        let (store, cnn, tr) = build(&cfg);
        let g = Graph::new();
        let f = Forward::frozen(&g, &store, Mode::Train);
        let x = g.constant(Tensor::zeros(&[1, 1, 32, 16]));
        assert!(cnn.forward(&f, x).is_err());
        assert!(tr.forward(&f, x).is_err());
    }
}
