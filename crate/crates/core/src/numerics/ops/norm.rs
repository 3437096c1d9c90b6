use crate::error::{Error, Result};
use crate::numerics::graph::Var;
use crate::numerics::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Conventional starting point: zero mean, unit variance.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average toward a batch's statistics.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var_unbiased) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Statistics of one training batch, for updating [`RunningStats`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

/// Batch normalisation over `N, H, W` for each channel of `x[N, C, H, W]`.
///
/// Train mode normalises with the batch statistics and returns them so the
/// caller can update its running averages. Eval mode uses `running`, which
/// must then be present.
pub fn batch_norm<'g>(
    x: Var<'g>,
    gamma: Var<'g>,
    beta: Var<'g>,
    eps: f64,
    mode: Mode,
    running: Option<&RunningStats>,
) -> Result<(Var<'g>, Option<BatchStats>)> {
    if eps <= 0.0 {
        return Err(Error::invalid("batch norm eps must be > 0"));
    }
    let xv = x.value();
    let [n, c, h, w] = xv.dims4()?;
    let (gv, bv) = (gamma.value(), beta.value());
    if gv.shape() != [c] || bv.shape() != [c] {
        return Err(Error::shape(format!(
            "batch norm over {c} channels needs gamma/beta of shape [{c}], got {:?} / {:?}",
            gv.shape(),
            bv.shape()
        )));
    }
    let plane = h * w;
    let count = n * plane;
    let xd = xv.data();
    let at = move |ni: usize, ci: usize| (ni * c + ci) * plane;

    let (mean, var, stats) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let s: f64 = (0..n).map(|ni| xd[at(ni, ci)..at(ni, ci) + plane].iter().sum::<f64>()).sum();
                let m = s / count as f64;
                let ss: f64 = (0..n)
                    .map(|ni| xd[at(ni, ci)..at(ni, ci) + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                    .sum();
                mean[ci] = m;
                var[ci] = ss / count as f64;
            }
            let unbiased = if count > 1 {
                var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect()
            } else {
                var.clone()
            };
            let stats = BatchStats {
                mean: mean.clone(),
                var_unbiased: unbiased,
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => {
            let r = running.ok_or(Error::MissingRunningStats)?;
            if r.mean.len() != c || r.var.len() != c {
                return Err(Error::shape(format!(
                    "running stats hold {} channels, input has {c}",
                    r.mean.len()
                )));
            }
            (r.mean.clone(), r.var.clone(), None)
        }
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xv.numel()];
    let mut out = vec![0.0; xv.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let (g, b, m, is) = (gv.data()[ci], bv.data()[ci], mean[ci], inv_std[ci]);
            let base = at(ni, ci);
            for j in base..base + plane {
                let xh = (xd[j] - m) * is;
                xhat[j] = xh;
                out[j] = g * xh + b;
            }
        }
    }
    let shape = xv.shape().to_vec();
    let y = Tensor::new(&shape, out)?;
    let xhat = Tensor::new(&shape, xhat)?;

    let var_out = x.graph().record(y, &[x, gamma, beta], move |g| {
        let gd = g.data();
        let xh = xhat.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = at(ni, ci);
                for j in base..base + plane {
                    dbeta[ci] += gd[j];
                    dgamma[ci] += gd[j] * xh[j];
                }
            }
        }
        let mut dx = vec![0.0; gd.len()];
        for ci in 0..c {
            let k = gv.data()[ci] * inv_std[ci];
            let (sum_g, sum_gx) = (dbeta[ci] / count as f64, dgamma[ci] / count as f64);
            for ni in 0..n {
                let base = at(ni, ci);
                for j in base..base + plane {
                    dx[j] = match mode {
                        Mode::Train => k * (gd[j] - sum_g - xh[j] * sum_gx),
                        Mode::Eval => k * gd[j],
                    };
                }
            }
        }
        vec![
            Some(Tensor::new(&shape, dx).unwrap()),
            Some(Tensor::new(&[c], dgamma).unwrap()),
            Some(Tensor::new(&[c], dbeta).unwrap()),
        ]
    });
    Ok((var_out, stats))
}

/// Layer normalisation over the trailing axis with affine `gamma`, `beta`.
pub fn layer_norm<'g>(x: Var<'g>, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
    let xv = x.value();
    let d = *xv.shape().last().unwrap();
    let (gv, bv) = (gamma.value(), beta.value());
    if gv.shape() != [d] || bv.shape() != [d] {
        return Err(Error::shape(format!(
            "layer norm over trailing extent {d} needs gamma/beta [{d}], got {:?} / {:?}",
            gv.shape(),
            bv.shape()
        )));
    }
    let rows = xv.numel() / d;
    let mut xhat = vec![0.0; xv.numel()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; xv.numel()];
    for r in 0..rows {
        let row = &xv.data()[r * d..(r + 1) * d];
        let m = row.iter().sum::<f64>() / d as f64;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d as f64;
        let is = 1.0 / (v + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let xh = (row[j] - m) * is;
            xhat[r * d + j] = xh;
            out[r * d + j] = gv.data()[j] * xh + bv.data()[j];
        }
    }
    let shape = xv.shape().to_vec();
    let y = Tensor::new(&shape, out)?;
    Ok(x.graph().record(y, &[x, gamma, beta], move |g| {
        let gd = g.data();
        let gam = gv.data();
        let mut dx = vec![0.0; gd.len()];
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for r in 0..rows {
            let gr = &gd[r * d..(r + 1) * d];
            let xr = &xhat[r * d..(r + 1) * d];
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for j in 0..d {
                let dxh = gr[j] * gam[j];
                s1 += dxh;
                s2 += dxh * xr[j];
                dgamma[j] += gr[j] * xr[j];
                dbeta[j] += gr[j];
            }
            let (s1, s2) = (s1 / d as f64, s2 / d as f64);
            for j in 0..d {
                dx[r * d + j] = inv_std[r] * (gr[j] * gam[j] - s1 - xr[j] * s2);
            }
        }
        vec![
            Some(Tensor::new(&shape, dx).unwrap()),
            Some(Tensor::new(&[d], dgamma).unwrap()),
            Some(Tensor::new(&[d], dbeta).unwrap()),
        ]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;
    use rand::SeedableRng;

    fn affine<'g>(g: &'g Graph, c: usize, gamma: f64, beta: f64) -> (Var<'g>, Var<'g>) {
        (g.input(Tensor::full(&[c], gamma)), g.input(Tensor::full(&[c], beta)))
    }

    #[test]
    fn constant_input_normalises_to_zero() {
        let g = Graph::new();
        let x = g.input(Tensor::full(&[2, 3, 4, 4], 7.5));
        let (ga, be) = affine(&g, 3, 1.0, 0.0);
        let (y, _) = batch_norm(x, ga, be, BN_EPS, Mode::Train, None).unwrap();
        assert!(y.value().max_abs() < 1e-12);
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let mut rng = rand_pcg::Pcg64Mcg::seed_from_u64(1);
        let g = Graph::new();
        let x = g.input(Tensor::randn(&[2, 3, 4, 4], 3.0, &mut rng));
        let (ga, be) = affine(&g, 3, 0.0, 1.25);
        let (y, _) = batch_norm(x, ga, be, BN_EPS, Mode::Train, None).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn train_output_has_beta_mean_and_gamma_variance() {
        let mut rng = rand_pcg::Pcg64Mcg::seed_from_u64(2);
        let g = Graph::new();
        let x = g.input(Tensor::randn(&[3, 2, 5, 5], 10.0, &mut rng));
        let ga = g.input(Tensor::new(&[2], vec![1.5, -0.5]).unwrap());
        let be = g.input(Tensor::new(&[2], vec![0.3, 2.0]).unwrap());
        let (y, stats) = batch_norm(x, ga, be, BN_EPS, Mode::Train, None).unwrap();
        let y = y.value();
        for (ci, (gm, bt)) in [(1.5f64, 0.3), (-0.5, 2.0)].into_iter().enumerate() {
            let vals: Vec<f64> = (0..3)
                .flat_map(|ni| y.data()[(ni * 2 + ci) * 25..(ni * 2 + ci + 1) * 25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!((m - bt).abs() < 1e-9);
            assert!((v - gm * gm).abs() < 1e-6);
        }
        assert!(stats.is_some());
    }

    #[test]
    fn eval_requires_running_stats() {
        let g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2, 2, 2]));
        let (ga, be) = affine(&g, 2, 1.0, 0.0);
        let err = batch_norm(x, ga, be, BN_EPS, Mode::Eval, None).unwrap_err();
        assert!(matches!(err, Error::MissingRunningStats));
        let stats = RunningStats::new(2);
        let (y, s) = batch_norm(x, ga, be, BN_EPS, Mode::Eval, Some(&stats)).unwrap();
        assert!(s.is_none());
        assert!(y.value().max_abs() < 1e-12);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut r = RunningStats::new(1);
        r.update(
            &BatchStats { mean: vec![2.0], var_unbiased: vec![3.0] },
            BN_MOMENTUM,
        );
        assert!((r.mean[0] - 0.2).abs() < 1e-15);
        assert!((r.var[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut rng = rand_pcg::Pcg64Mcg::seed_from_u64(3);
        let g = Graph::new();
        let x = g.input(Tensor::randn(&[4, 6], 2.0, &mut rng));
        let (ga, be) = affine(&g, 6, 1.0, 0.0);
        let y = layer_norm(x, ga, be, LN_EPS).unwrap().value();
        for row in y.data().chunks(6) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
