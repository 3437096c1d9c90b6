use crate::error::{Error, Result};
use crate::numerics::graph::Var;
use crate::numerics::tensor::Tensor;

/// Mean over each channel plane: `[N, C, H, W] -> [N, C, 1, 1]`.
pub fn global_avg_pool(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let [n, c, h, w] = xv.dims4()?;
    let plane = h * w;
    let out: Vec<f64> = xv
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    let y = Tensor::new(&[n, c, 1, 1], out)?;
    let shape = xv.shape().to_vec();
    Ok(x.graph().record(y, &[x], move |g| {
        let mut dx = Vec::with_capacity(n * c * plane);
        for &gv in g.data() {
            dx.extend(std::iter::repeat_n(gv / plane as f64, plane));
        }
        vec![Some(Tensor::new(&shape, dx).unwrap())]
    }))
}

/// Non-overlapping `k x k` average pooling; H and W must be multiples of `k`.
pub fn avg_pool2d(x: Var<'_>, k: usize) -> Result<Var<'_>> {
    let xv = x.value();
    let [n, c, h, w] = xv.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(format!(
            "avg_pool2d: {h}x{w} map is not divisible into {k}x{k} windows"
        )));
    }
    let (ho, wo) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * ho * wo];
    let xd = xv.data();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for dy in 0..k {
                    let row = (p * h + oy * k + dy) * w + ox * k;
                    s += xd[row..row + k].iter().sum::<f64>();
                }
                out[(p * ho + oy) * wo + ox] = s * norm;
            }
        }
    }
    let y = Tensor::new(&[n, c, ho, wo], out)?;
    let shape = xv.shape().to_vec();
    Ok(x.graph().record(y, &[x], move |g| {
        let gd = g.data();
        let mut dx = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            for iy in 0..h {
                for ix in 0..w {
                    dx[(p * h + iy) * w + ix] = gd[(p * ho + iy / k) * wo + ix / k] * norm;
                }
            }
        }
        vec![Some(Tensor::new(&shape, dx).unwrap())]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;

    #[test]
    fn global_pool_values_and_shape() {
        let g = Graph::new();
        let x = g.input(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(global_avg_pool(x).unwrap().value().item(), 2.5);

        let x = g.input(Tensor::full(&[2, 16, 8, 8], 5.0));
        let y = global_avg_pool(x).unwrap().value();
        assert_eq!(y.shape(), &[2, 16, 1, 1]);
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn avg_pool_halves() {
        let g = Graph::new();
        let x = g.input(Tensor::new(&[1, 1, 2, 4], vec![1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = avg_pool2d(x, 2).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[2.0, 6.0]);
        let odd = g.input(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(avg_pool2d(odd, 2).is_err());
    }
}
