//! Registry of finite-difference gradient suites, run by `grad-check`.
//!
//! Every suite builds a scalar loss, differentiates it with the tape, and
//! compares against central differences (`eps = 1e-5`). Module losses are
//! random-weighted sums `sum(out * R)`: a plain sum through batch or layer
//! norm has an identically zero gradient, which only measures round-off.
//!
//! Each probed entry is also sampled at `2 * eps`. Where that shows the
//! central difference cannot resolve the tolerance (a ReLU kink inside the
//! stencil, or a slope below the loss's rounding step) the entry is counted
//! as unresolved and must instead agree within a few noise estimates.

use rand::seq::index::sample;

use crate::aspp::{Aspp, DEFAULT_RATES};
use crate::encoders::{CnnEncoder, EncoderConfig, TransformerEncoder};
use crate::error::{Error, Result};
use crate::fusion::{Aff, SeBlock};
use crate::gates_decoder::AttentionGate;
use crate::model::{Cafct, ModelConfig};
use crate::numerics::layers::{LayerNorm, SelfAttention};
use crate::numerics::{
    avg_pool2d, batch_norm, bilinear_resize, conv2d, global_avg_pool, linear, relative_error,
    seeded_rng, ConvOptions, Forward, Graph, Mode, ModelRng, ParamStore, Tensor, Var, BN_EPS, REL_ERR_FLOOR,
};
use crate::objective::{bce_dice_loss, bce_loss, dice_loss};

pub const FD_EPS: f64 = 1e-5;
pub const TOL_PRIMITIVE: f64 = 1e-4;
pub const TOL_END_TO_END: f64 = 1e-3;
pub const TOL_LOSS: f64 = 1e-5;
/// An entry is resolved when its eps and 2*eps central differences agree
/// within this fraction of the tolerance.
pub const RESOLVE_FRACTION: f64 = 0.1;
/// Rounding error assumed in a loss evaluation, in units of its last place.
pub const ROUNDING_ULPS: f64 = 8.0;
/// Unresolved entries must still agree within this many noise estimates.
pub const NOISE_MULTIPLE: f64 = 3.0;

pub const MODULES: &[&str] = &["numerics", "encoders", "fusion", "aspp", "gates_decoder", "objective"];

#[derive(Debug, Clone, Copy, Default)]
pub struct CheckOptions {
    pub seed: u64,
    /// Scale every analytic gradient by 1.01 before comparing (negative control).
    pub corrupt: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub module: &'static str,
    pub name: &'static str,
    pub tolerance: f64,
    /// Worst relative error over the resolved entries.
    pub worst: f64,
    /// Number of gradient entries probed.
    pub entries: usize,
    /// Entries where the finite-difference estimate itself was too noisy
    /// to resolve the tolerance.
    pub unresolved: usize,
    /// Unresolved entries whose analytic value fell outside the noise band.
    pub outside_noise: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance && self.outside_noise == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub rows: Vec<CheckRow>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    /// Worst relative error and pass flag of each module present, in order.
    pub fn per_module(&self) -> Vec<(&'static str, f64, bool)> {
        let mut out: Vec<(&'static str, f64, bool)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(m, _, _)| *m == r.module) {
                Some(entry) => {
                    entry.1 = worse(entry.1, r.worst);
                    entry.2 &= r.passed();
                }
                None => out.push((r.module, r.worst, r.passed())),
            }
        }
        out
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&format!(
                "{:<14} {:<22} entries={:<5} unresolved={:<4} outside_noise={} worst_rel_err={:.3e} tol={:.0e} {}\n",
                r.module,
                r.name,
                r.entries,
                r.unresolved,
                r.outside_noise,
                r.worst,
                r.tolerance,
                if r.passed() { "PASS" } else { "FAIL" }
            ));
        }
        for (m, worst, ok) in self.per_module() {
            s.push_str(&format!(
                "module={m} worst_rel_err={worst:.3e} status={}\n",
                if ok { "pass" } else { "fail" }
            ));
        }
        s
    }
}

/// Larger of two errors, with NaN counting as worst.
fn worse(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

struct Checker {
    opts: CheckOptions,
    rng: ModelRng,
    tolerance: f64,
    worst: f64,
    entries: usize,
    unresolved: usize,
    outside_noise: usize,
}

/// Flat indices to probe: all of them, or `limit` drawn at random.
fn pick(numel: usize, limit: usize, rng: &mut ModelRng) -> Vec<usize> {
    if numel <= limit {
        (0..numel).collect()
    } else {
        let mut idx = sample(rng, numel, limit).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Loss samples at `x + j * eps * e_i` for `j` in -2..=2, per probed entry.
struct Probe {
    loss: f64,
    /// `[f(-2), f(-1), f(1), f(2)]`.
    samples: Vec<[f64; 4]>,
}

fn probe_at(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, idx: &[usize]) -> Probe {
    let loss = f(x);
    let mut p = x.clone();
    let samples = idx
        .iter()
        .map(|&i| {
            let orig = p.data()[i];
            let mut at = |j: f64| {
                p.data_mut()[i] = orig + j * FD_EPS;
                f(&p)
            };
            let row = [at(-2.0), at(-1.0), at(1.0), at(2.0)];
            p.data_mut()[i] = orig;
            row
        })
        .collect();
    Probe { loss, samples }
}

impl Probe {
    /// Central difference with step `eps`.
    fn slope(&self, k: usize) -> f64 {
        let [_, m1, p1, _] = self.samples[k];
        (p1 - m1) / (2.0 * FD_EPS)
    }

    /// Uncertainty of [`Probe::slope`]. Where the loss is smooth the `eps`
    /// and `2 eps` stencils agree to O(eps^2) in both first and second
    /// differences. A kink inside the stencil breaks one or the other: off
    /// centre it shifts the first differences, at the centre it halves the
    /// ratio of second differences. Nothing below the loss's own rounding
    /// step can be resolved at all.
    fn noise(&self, k: usize) -> f64 {
        let [m2, m1, p1, p2] = self.samples[k];
        let f0 = self.loss;
        let far = (p2 - m2) / (4.0 * FD_EPS);
        let shift = (self.slope(k) - far).abs();
        let curvature = ((p2 - 2.0 * f0 + m2) - 4.0 * (p1 - 2.0 * f0 + m1)).abs() / (4.0 * FD_EPS);
        let rounding = ROUNDING_ULPS * f0.abs() * f64::EPSILON / FD_EPS;
        shift.max(curvature).max(rounding)
    }
}

impl Checker {
    fn new(opts: CheckOptions, tolerance: f64) -> Self {
        Checker {
            opts,
            rng: seeded_rng(opts.seed.wrapping_add(0x5EED)),
            tolerance,
            worst: 0.0,
            entries: 0,
            unresolved: 0,
            outside_noise: 0,
        }
    }

    fn compare(&mut self, analytic: &Tensor, probe: Probe, idx: &[usize]) {
        let scale = if self.opts.corrupt { 1.01 } else { 1.0 };
        for (k, &i) in idx.iter().enumerate() {
            let n = probe.slope(k);
            self.entries += 1;
            let a = analytic.data()[i] * scale;
            let noise = probe.noise(k);
            if noise > RESOLVE_FRACTION * self.tolerance * n.abs().max(REL_ERR_FLOOR) {
                self.unresolved += 1;
                let band = NOISE_MULTIPLE * noise + self.tolerance * a.abs().max(n.abs()).max(REL_ERR_FLOOR);
                if !((a - n).abs() <= band) {
                    self.outside_noise += 1;
                }
                continue;
            }
            let e = relative_error(a, n);
            self.worst = worse(self.worst, e);
        }
    }

    /// `sum(out * R)` with a fixed standard-normal `R`.
    fn weights_for(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut self.rng)
    }

    /// Check `loss(inputs)` with respect to each input tensor.
    fn inputs<F>(&mut self, inputs: &[Tensor], limit: usize, loss: F) -> Result<()>
    where
        F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
    {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let grads = g.backward(loss(&g, &vars)?)?;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k]);
            let idx = pick(x.numel(), limit, &mut self.rng);
            let eval = |probe: &Tensor| {
                let g = Graph::new();
                let vars: Vec<Var<'_>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                loss(&g, &vars).map_or(f64::NAN, |l| l.value().item())
            };
            let numeric = probe_at(eval, x, &idx);
            self.compare(&analytic, numeric, &idx);
        }
        Ok(())
    }

    /// Check a parameterised module with respect to its inputs and every
    /// parameter in `store` (train mode).
    fn module<F>(&mut self, store: &ParamStore, inputs: &[Tensor], limit: usize, loss: F) -> Result<()>
    where
        F: for<'g, 's> Fn(&Forward<'g, 's>, &[Var<'g>]) -> Result<Var<'g>>,
    {
        let g = Graph::new();
        let f = Forward::new(&g, store, Mode::Train);
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let grads = g.backward(loss(&f, &vars)?)?;
        let bindings = f.finish();

        let run = |store: &ParamStore, inputs: &[Tensor]| {
            let g = Graph::new();
            let f = Forward::frozen(&g, store, Mode::Train);
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            loss(&f, &vars).map_or(f64::NAN, |l| l.value().item())
        };

        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k]);
            let idx = pick(x.numel(), limit, &mut self.rng);
            let mut probe_inputs = inputs.to_vec();
            let numeric = probe_at(
                |p: &Tensor| {
                    probe_inputs[k] = p.clone();
                    run(store, &probe_inputs)
                },
                x,
                &idx,
            );
            self.compare(&analytic, numeric, &idx);
        }
        let mut probe = store.clone();
        for id in store.ids() {
            let value = store.get(id).value.clone();
            let analytic = match bindings.param(id) {
                Some(v) => grads.get_or_zeros(v),
                None => Tensor::zeros(value.shape()),
            };
            let idx = pick(value.numel(), limit, &mut self.rng);
            let numeric = probe_at(
                |p: &Tensor| {
                    probe.get_mut(id).value = p.clone();
                    run(&probe, inputs)
                },
                &value,
                &idx,
            );
            probe.get_mut(id).value = value;
            self.compare(&analytic, numeric, &idx);
        }
        Ok(())
    }
}

fn weighted<'g>(out: Var<'g>, r: &Tensor) -> Result<Var<'g>> {
    Ok(out.mul(out.graph().constant(r.clone()))?.sum())
}

fn randn(rng: &mut ModelRng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

type SuiteFn = fn(&mut Checker) -> Result<()>;

struct Suite {
    module: &'static str,
    name: &'static str,
    tolerance: f64,
    run: SuiteFn,
}

const ALL: usize = usize::MAX;

fn conv_suite(c: &mut Checker, opts: ConvOptions) -> Result<()> {
    let x = randn(&mut c.rng, &[1, 2, 6, 6]);
    let w = randn(&mut c.rng, &[3, 2, 3, 3]);
    let b = randn(&mut c.rng, &[3]);
    let out_shape = {
        let g = Graph::new();
        conv2d(g.constant(x.clone()), g.constant(w.clone()), None, opts)?.shape()
    };
    let r = c.weights_for(&out_shape);
    c.inputs(&[x, w, b], ALL, move |_, v| weighted(conv2d(v[0], v[1], Some(v[2]), opts)?, &r))
}

fn suites() -> Vec<Suite> {
    vec![
        Suite { module: "numerics", name: "conv2d", tolerance: TOL_PRIMITIVE, run: |c| {
            conv_suite(c, ConvOptions { stride: 1, padding: 1, dilation: 1 })
        }},
        Suite { module: "numerics", name: "conv2d_dilated_strided", tolerance: TOL_PRIMITIVE, run: |c| {
            conv_suite(c, ConvOptions { stride: 2, padding: 2, dilation: 2 })
        }},
        Suite { module: "numerics", name: "batch_norm", tolerance: TOL_PRIMITIVE, run: |c| {
            let x = randn(&mut c.rng, &[2, 3, 4, 4]);
            let gamma = randn(&mut c.rng, &[3]);
            let beta = randn(&mut c.rng, &[3]);
            let r = c.weights_for(&[2, 3, 4, 4]);
            c.inputs(&[x, gamma, beta], ALL, move |_, v| {
                let (y, _) = batch_norm(v[0], v[1], v[2], BN_EPS, Mode::Train, None)?;
                weighted(y, &r)
            })
        }},
        Suite { module: "numerics", name: "pooling", tolerance: TOL_PRIMITIVE, run: |c| {
            let x = randn(&mut c.rng, &[2, 3, 4, 4]);
            let r1 = c.weights_for(&[2, 3, 1, 1]);
            let r2 = c.weights_for(&[2, 3, 2, 2]);
            c.inputs(&[x], ALL, move |_, v| {
                weighted(global_avg_pool(v[0])?, &r1)?.add(weighted(avg_pool2d(v[0], 2)?, &r2)?)
            })
        }},
        Suite { module: "numerics", name: "bilinear_resize", tolerance: TOL_PRIMITIVE, run: |c| {
            let x = randn(&mut c.rng, &[1, 2, 3, 4]);
            let up = c.weights_for(&[1, 2, 7, 5]);
            let down = c.weights_for(&[1, 2, 2, 3]);
            c.inputs(&[x], ALL, move |_, v| {
                weighted(bilinear_resize(v[0], 7, 5)?, &up)?.add(weighted(bilinear_resize(v[0], 2, 3)?, &down)?)
            })
        }},
        Suite { module: "numerics", name: "activations", tolerance: TOL_PRIMITIVE, run: |c| {
            // Keep relu inputs away from the kink.
            let x = randn(&mut c.rng, &[3, 5]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            let r = c.weights_for(&[3, 5]);
            c.inputs(&[x], ALL, move |_, v| {
                let x = v[0];
                let sum = x.relu().add(x.sigmoid())?.add(x.gelu())?.add(x.softmax(1)?)?.add(x.softmax(0)?)?;
                weighted(sum, &r)
            })
        }},
        Suite { module: "numerics", name: "elementwise", tolerance: TOL_PRIMITIVE, run: |c| {
            let a = randn(&mut c.rng, &[2, 3, 4]);
            let b = randn(&mut c.rng, &[2, 1, 4]).map(|v| v.signum() * (v.abs() + 0.5));
            let r = c.weights_for(&[2, 3, 4]);
            c.inputs(&[a, b], ALL, move |_, v| {
                let y = v[0].mul(v[1])?.add(v[0].div(v[1])?)?.sub(v[1])?.add(v[0].square())?;
                weighted(y, &r)
            })
        }},
        Suite { module: "numerics", name: "linear", tolerance: TOL_PRIMITIVE, run: |c| {
            let x = randn(&mut c.rng, &[2, 3, 4]);
            let w = randn(&mut c.rng, &[5, 4]);
            let b = randn(&mut c.rng, &[5]);
            let r = c.weights_for(&[2, 3, 5]);
            c.inputs(&[x, w, b], ALL, move |_, v| weighted(linear(v[0], v[1], Some(v[2]))?, &r))
        }},
        Suite { module: "numerics", name: "layer_norm", tolerance: TOL_PRIMITIVE, run: |c| {
            let mut store = ParamStore::new();
            let ln = LayerNorm::new(&mut store, "ln", 6)?;
            store.get_mut(ln.gamma).value = randn(&mut c.rng, &[6]);
            store.get_mut(ln.beta).value = randn(&mut c.rng, &[6]);
            let x = randn(&mut c.rng, &[2, 3, 6]);
            let r = c.weights_for(&[2, 3, 6]);
            c.module(&store, &[x], ALL, move |f, v| weighted(ln.forward(f, v[0])?, &r))
        }},
        Suite { module: "numerics", name: "attention", tolerance: TOL_PRIMITIVE, run: |c| {
            let mut store = ParamStore::new();
            let mut rng = seeded_rng(c.opts.seed);
            let attn = SelfAttention::new(&mut store, &mut rng, "attn", 4, 2)?;
            let x = randn(&mut c.rng, &[2, 5, 4]);
            let r = c.weights_for(&[2, 5, 4]);
            c.module(&store, &[x], ALL, move |f, v| weighted(attn.forward(f, v[0])?.output, &r))
        }},
        Suite { module: "encoders", name: "cnn_encoder", tolerance: TOL_PRIMITIVE, run: |c| {
            encoder_suite(c, false)
        }},
        Suite { module: "encoders", name: "transformer_encoder", tolerance: TOL_PRIMITIVE, run: |c| {
            encoder_suite(c, true)
        }},
        Suite { module: "fusion", name: "se_block", tolerance: TOL_PRIMITIVE, run: |c| {
            let mut store = ParamStore::new();
            let mut rng = seeded_rng(c.opts.seed);
            let se = SeBlock::new(&mut store, &mut rng, "se", 4, 2)?;
            randomise_biases(&mut store, &mut rng);
            let x = randn(&mut c.rng, &[1, 4, 6, 6]);
            let r = c.weights_for(&[1, 4, 6, 6]);
            c.module(&store, &[x], ALL, move |f, v| weighted(se.forward(f, v[0])?.output, &r))
        }},
        Suite { module: "fusion", name: "aff", tolerance: TOL_PRIMITIVE, run: |c| {
            let mut store = ParamStore::new();
            let mut rng = seeded_rng(c.opts.seed);
            let aff = Aff::new(&mut store, &mut rng, "aff", 4, 2, 1)?;
            randomise_biases(&mut store, &mut rng);
            let a = randn(&mut c.rng, &[1, 4, 6, 6]);
            let b = randn(&mut c.rng, &[1, 4, 6, 6]);
            let r = c.weights_for(&[1, 4, 6, 6]);
            c.module(&store, &[a, b], ALL, move |f, v| weighted(aff.forward(f, v[0], v[1])?.output, &r))
        }},
        Suite { module: "aspp", name: "aspp_small_rates", tolerance: TOL_PRIMITIVE, run: |c| {
            aspp_suite(c, [1, 2, 3], 9)
        }},
        Suite { module: "aspp", name: "aspp_default_rates", tolerance: TOL_PRIMITIVE, run: |c| {
            aspp_suite(c, DEFAULT_RATES, 20)
        }},
        Suite { module: "gates_decoder", name: "attention_gate", tolerance: TOL_PRIMITIVE, run: |c| {
            let mut store = ParamStore::new();
            let mut rng = seeded_rng(c.opts.seed);
            let gate = AttentionGate::new(&mut store, &mut rng, "gate", 4, 6, 2)?;
            randomise_biases(&mut store, &mut rng);
            let x = randn(&mut c.rng, &[1, 4, 8, 8]);
            let g = randn(&mut c.rng, &[1, 6, 4, 4]);
            let r = c.weights_for(&[1, 4, 8, 8]);
            c.module(&store, &[x, g], ALL, move |f, v| weighted(gate.forward(f, v[0], v[1])?.output, &r))
        }},
        Suite { module: "gates_decoder", name: "cafct_end_to_end", tolerance: TOL_END_TO_END, run: |c| {
            let model = Cafct::new(&ModelConfig::tiny(), c.opts.seed)?;
            let x = Tensor::rand_uniform(&[4, 1, 16, 16], 0.0, 1.0, &mut c.rng);
            let arch = model.arch.clone();
            c.module(&model.store, &[x], 6, move |f, v| Ok(arch.forward(f, v[0])?.logits.square().sum()))
        }},
        Suite { module: "objective", name: "bce", tolerance: TOL_LOSS, run: |c| {
            let (z, t) = loss_inputs(c);
            c.inputs(&[z], ALL, move |_, v| bce_loss(v[0], &t))
        }},
        Suite { module: "objective", name: "dice", tolerance: TOL_LOSS, run: |c| {
            let (z, t) = loss_inputs(c);
            c.inputs(&[z], ALL, move |_, v| dice_loss(v[0], &t))
        }},
        Suite { module: "objective", name: "bce_dice", tolerance: TOL_LOSS, run: |c| {
            let (z, t) = loss_inputs(c);
            c.inputs(&[z], ALL, move |_, v| bce_dice_loss(v[0], &t, 1.0, 1.0))
        }},
    ]
}

fn loss_inputs(c: &mut Checker) -> (Tensor, Tensor) {
    let z = Tensor::randn(&[2, 1, 4, 4], 2.0, &mut c.rng);
    let t = Tensor::rand_uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut c.rng).map(|v| v.round());
    (z, t)
}

/// Freshly built modules have zero biases and unit/zero affine terms,
/// which hides bugs that only show away from that point.
fn randomise_biases(store: &mut ParamStore, rng: &mut ModelRng) {
    for p in store.params_mut() {
        if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
            p.value = Tensor::randn(p.value.shape(), 0.1, rng);
        } else if p.name.ends_with(".gamma") {
            p.value = Tensor::rand_uniform(p.value.shape(), 0.5, 1.5, rng);
        }
    }
}

fn encoder_suite(c: &mut Checker, transformer: bool) -> Result<()> {
    let cfg = EncoderConfig {
        input_size: 16,
        base_channels: 4,
        patch_size: 2,
        depth: 1,
        heads: 2,
        cnn_blocks: 1,
        mlp_ratio: 2,
    };
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(c.opts.seed);
    let x = Tensor::rand_uniform(&[3, 1, 16, 16], 0.0, 1.0, &mut c.rng);
    let shapes = cfg.level_shapes();
    let rs: Vec<Tensor> = shapes.iter().map(|&(ch, s)| c.weights_for(&[3, ch, s, s])).collect();
    if transformer {
        let enc = TransformerEncoder::new(&mut store, &mut rng, "trans", &cfg)?;
        randomise_biases(&mut store, &mut rng);
        c.module(&store, &[x], 12, move |f, v| weighted_levels(&enc.forward(f, v[0])?.levels, &rs))
    } else {
        let enc = CnnEncoder::new(&mut store, &mut rng, "cnn", &cfg)?;
        randomise_biases(&mut store, &mut rng);
        c.module(&store, &[x], 12, move |f, v| weighted_levels(&enc.forward(f, v[0])?.levels, &rs))
    }
}

fn weighted_levels<'g>(levels: &[Var<'g>], rs: &[Tensor]) -> Result<Var<'g>> {
    let mut total = weighted(levels[0], &rs[0])?;
    for (l, r) in levels.iter().zip(rs).skip(1) {
        total = total.add(weighted(*l, r)?)?;
    }
    Ok(total)
}

fn aspp_suite(c: &mut Checker, rates: [usize; 3], side: usize) -> Result<()> {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(c.opts.seed);
    let aspp = Aspp::new(&mut store, &mut rng, "aspp", 4, 4, rates)?;
    randomise_biases(&mut store, &mut rng);
    // Two samples so the pooled branch's batch norm sees a spread.
    let x = randn(&mut c.rng, &[2, 4, side, side]);
    let r = c.weights_for(&[2, 4, side, side]);
    c.module(&store, &[x], 24, move |f, v| weighted(aspp.forward(f, v[0])?.output, &r))
}

/// Run every suite of `scope` (a module name or `all`).
pub fn grad_check(scope: &str, opts: CheckOptions) -> Result<GradCheckReport> {
    if scope != "all" && !MODULES.contains(&scope) {
        return Err(Error::invalid(format!(
            "unknown grad-check scope {scope:?}; expected `all` or one of {}",
            MODULES.join(", ")
        )));
    }
    let mut report = GradCheckReport::default();
    for suite in suites().into_iter().filter(|s| scope == "all" || s.module == scope) {
        let mut c = Checker::new(opts, suite.tolerance);
        (suite.run)(&mut c)?;
        report.rows.push(CheckRow {
            module: suite.module,
            name: suite.name,
            tolerance: suite.tolerance,
            worst: c.worst,
            entries: c.entries,
            unresolved: c.unresolved,
            outside_noise: c.outside_noise,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_scope_is_rejected() {
        assert!(grad_check("decoder", CheckOptions::default()).is_err());
    }

    #[test]
    fn objective_scope_passes_and_corruption_fails() {
        let ok = grad_check("objective", CheckOptions::default()).unwrap();
        assert!(ok.passed(), "{}", ok.render());
        assert_eq!(ok.rows.len(), 3);
        let bad = grad_check("objective", CheckOptions { seed: 0, corrupt: true }).unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn nan_counts_as_worst() {
        assert!(worse(0.1, f64::NAN).is_nan());
        let row = CheckRow { module: "m", name: "n", tolerance: 1e-4, worst: f64::NAN, entries: 1, unresolved: 0, outside_noise: 0 };
        assert!(!row.passed());
    }
}
