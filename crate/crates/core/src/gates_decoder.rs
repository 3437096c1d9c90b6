//! Attention-gated skip connections and the convolutional decoder.

use crate::encoders::{FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::numerics::layers::{Conv2d, ConvBnRelu};
use crate::numerics::ops::{bilinear_resize, concat, ConvOptions};
use crate::numerics::{Forward, ModelRng, ParamStore, Var};

/// Width of the gate's intermediate space for a skip with `skip_channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterChannels {
    /// `skip_channels / 2`, at least 1.
    Half,
    /// Same as the skip.
    Full,
}

impl InterChannels {
    pub fn for_skip(self, skip_channels: usize) -> usize {
        match self {
            InterChannels::Half => (skip_channels / 2).max(1),
            InterChannels::Full => skip_channels,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InterChannels::Half => "half",
            InterChannels::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "half" => Some(InterChannels::Half),
            "full" => Some(InterChannels::Full),
            _ => None,
        }
    }
}

/// `a = sigmoid(psi(relu(W_x x + W_g g)))`, evaluated at the gate's
/// resolution and resampled back onto the skip.
#[derive(Debug, Clone)]
pub struct AttentionGate {
    pub w_x: Conv2d,
    pub w_g: Conv2d,
    pub psi: Conv2d,
    pub inter_channels: usize,
}

pub struct GateOutput<'g> {
    pub output: Var<'g>,
    /// Coefficients `[N, 1, Hx, Wx]`, each in (0, 1).
    pub coefficients: Var<'g>,
}

impl AttentionGate {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ModelRng,
        name: &str,
        skip_channels: usize,
        gate_channels: usize,
        inter_channels: usize,
    ) -> Result<Self> {
        let one = ConvOptions::default();
        Ok(AttentionGate {
            w_x: Conv2d::new(store, rng, &format!("{name}.w_x"), skip_channels, inter_channels, 1, one, false)?,
            w_g: Conv2d::new(store, rng, &format!("{name}.w_g"), gate_channels, inter_channels, 1, one, true)?,
            psi: Conv2d::new(store, rng, &format!("{name}.psi"), inter_channels, 1, 1, one, true)?,
            inter_channels,
        })
    }

    pub fn forward<'g>(&self, f: &Forward<'g, '_>, x_skip: Var<'g>, g: Var<'g>) -> Result<GateOutput<'g>> {
        let [nx, _, hx, wx] = x_skip.value().dims4()?;
        let [ng, _, hg, wg] = g.value().dims4()?;
        if nx != ng {
            return Err(Error::shape(format!(
                "attention gate: skip batch {nx} != gate batch {ng}"
            )));
        }
        if hg > hx || wg > wx {
            return Err(Error::shape(format!(
                "attention gate: gate {hg}x{wg} is finer than skip {hx}x{wx}"
            )));
        }
        let theta = bilinear_resize(self.w_x.forward(f, x_skip)?, hg, wg)?;
        let phi = self.w_g.forward(f, g)?;
        let a = self.psi.forward(f, theta.add(phi)?.relu())?.sigmoid();
        let coefficients = bilinear_resize(a, hx, wx)?;
        let output = x_skip.mul(coefficients)?;
        Ok(GateOutput { output, coefficients })
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    gate: AttentionGate,
    blocks: Vec<ConvBnRelu>,
}

/// Decodes the ASPP context back up through pyramid levels 3, 2, 1, then a
/// 1x1 head and bilinear upsampling to the input resolution.
#[derive(Debug, Clone)]
pub struct Decoder {
    stages: Vec<DecoderStage>,
    head: Conv2d,
    output_size: usize,
}

pub struct DecoderOutput<'g> {
    pub logits: Var<'g>,
    /// Gate coefficient maps for levels 3, 2, 1, in that order.
    pub gate_coefficients: Vec<Var<'g>>,
}

impl Decoder {
    /// `level_channels` are the fused pyramid widths, finest first;
    /// `context_channels` is the width of the ASPP output.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ModelRng,
        name: &str,
        level_channels: [usize; LEVELS],
        context_channels: usize,
        inter: InterChannels,
        blocks_per_stage: usize,
        output_size: usize,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(LEVELS - 1);
        let mut state_channels = context_channels;
        for level in (0..LEVELS - 1).rev() {
            let skip = level_channels[level];
            let prefix = format!("{name}.level{}", level + 1);
            let gate = AttentionGate::new(
                store,
                rng,
                &format!("{prefix}.gate"),
                skip,
                state_channels,
                inter.for_skip(skip),
            )?;
            let blocks = (0..blocks_per_stage.max(1))
                .map(|b| {
                    let cin = if b == 0 { state_channels + skip } else { skip };
                    ConvBnRelu::new(store, rng, &format!("{prefix}.block{b}"), cin, skip, 3, ConvOptions::same_3x3(1))
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(DecoderStage { gate, blocks });
            state_channels = skip;
        }
        let head = Conv2d::new(
            store,
            rng,
            &format!("{name}.head"),
            state_channels,
            1,
            1,
            ConvOptions::default(),
            true,
        )?;
        Ok(Decoder { stages, head, output_size })
    }

    pub fn forward<'g>(
        &self,
        f: &Forward<'g, '_>,
        fused: &FeaturePyramid<'g>,
        context: Var<'g>,
    ) -> Result<DecoderOutput<'g>> {
        fused.check_schedule()?;
        let deepest = fused.levels[LEVELS - 1].shape();
        let ctx = context.shape();
        if ctx.len() != 4 || ctx[0] != deepest[0] || ctx[2..] != deepest[2..] {
            return Err(Error::shape(format!(
                "decoder context {ctx:?} does not match deepest pyramid level {deepest:?}"
            )));
        }
        let mut state = context;
        let mut gate_coefficients = Vec::with_capacity(LEVELS - 1);
        for (stage, level) in self.stages.iter().zip((0..LEVELS - 1).rev()) {
            let skip = fused.levels[level];
            let [_, _, h, w] = skip.value().dims4()?;
            let gated = stage.gate.forward(f, skip, state)?;
            gate_coefficients.push(gated.coefficients);
            let up = bilinear_resize(state, h, w)?;
            let mut x = concat(&[up, gated.output], 1)?;
            for block in &stage.blocks {
                x = block.forward(f, x)?;
            }
            state = x;
        }
        let logits = bilinear_resize(self.head.forward(f, state)?, self.output_size, self.output_size)?;
        Ok(DecoderOutput { logits, gate_coefficients })
    }
}
