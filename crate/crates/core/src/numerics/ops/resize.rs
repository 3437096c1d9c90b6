use crate::error::{Error, Result};
use crate::numerics::graph::Var;
use crate::numerics::tensor::Tensor;

/// Source taps `(lo, hi, frac)` for each output index under half-pixel
/// alignment: `src = (i + 0.5) * in / out - 0.5`, clamped to the border.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling of `x[N, C, H, W]` to `out_h x out_w`.
pub fn bilinear_resize(x: Var<'_>, out_h: usize, out_w: usize) -> Result<Var<'_>> {
    let xv = x.value();
    let [n, c, h, w] = xv.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!("bilinear_resize to {out_h}x{out_w}")));
    }
    if (out_h, out_w) == (h, w) {
        let y = (*xv).clone();
        return Ok(x.graph().record(y, &[x], |g| vec![Some(g.clone())]));
    }
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let xd = xv.data();
    let mut out = vec![0.0; n * c * out_h * out_w];
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                out[(p * out_h + oy) * out_w + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    let y = Tensor::new(&[n, c, out_h, out_w], out)?;
    let shape = xv.shape().to_vec();
    Ok(x.graph().record(y, &[x], move |g| {
        let gd = g.data();
        let mut dx = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            let dst = &mut dx[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let gv = gd[(p * out_h + oy) * out_w + ox];
                    dst[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                    dst[y0 * w + x1] += gv * (1.0 - ly) * lx;
                    dst[y1 * w + x0] += gv * ly * (1.0 - lx);
                    dst[y1 * w + x1] += gv * ly * lx;
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
    fn same_size_is_exact_identity() {
        let g = Graph::new();
        let x = g.input(Tensor::new(&[1, 2, 2, 3], (0..12).map(|v| (v as f64).sqrt()).collect()).unwrap());
        assert_eq!(*bilinear_resize(x, 2, 3).unwrap().value(), *x.value());
    }

    #[test]
    fn constant_stays_constant() {
        let g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, 3, 5], 0.7));
        for (oh, ow) in [(7, 2), (1, 1), (12, 20), (2, 9)] {
            let y = bilinear_resize(x, oh, ow).unwrap().value();
            assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn half_pixel_weights_on_ramp() {
        let g = Graph::new();
        let x = g.input(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let y = bilinear_resize(x, 2, 4).unwrap().value();
        // source columns -0.25, 0.25, 0.75, 1.25 clamp to 0, 0.25, 0.75, 1
        for row in y.data().chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
    }
}
