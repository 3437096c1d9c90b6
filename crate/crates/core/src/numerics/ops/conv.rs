use rayon::prelude::*;

use super::linalg::gemm;
use crate::error::{Error, Result};
use crate::numerics::graph::Var;
use crate::numerics::tensor::Tensor;

/// Stride, zero padding and dilation of a square 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvOptions {
    fn default() -> Self {
        ConvOptions {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvOptions {
    /// Stride 1 with padding equal to the dilation: shape-preserving for 3x3 kernels.
    pub fn same_3x3(dilation: usize) -> Self {
        ConvOptions {
            stride: 1,
            padding: dilation,
            dilation,
        }
    }
}

/// Output extent along one axis.
pub fn conv_out_size(input: usize, kernel: usize, opts: ConvOptions) -> Option<usize> {
    let span = opts.dilation * (kernel - 1) + 1;
    let padded = input + 2 * opts.padding;
    (span <= padded).then(|| (padded - span) / opts.stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    hout: usize,
    wout: usize,
    opts: ConvOptions,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.hout * self.wout
    }

    /// Visit (col_index, input_index) for every in-bounds position of tap (ci, ky, kx).
    fn for_taps(&self, ci: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
        let ConvOptions { stride, padding, dilation } = self.opts;
        for oy in 0..self.hout {
            let iy = (oy * stride + ky * dilation) as isize - padding as isize;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            for ox in 0..self.wout {
                let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                if ix < 0 || ix >= self.w as isize {
                    continue;
                }
                f(oy * self.wout + ox, (ci * self.h + iy as usize) * self.w + ix as usize);
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.col_cols();
        let mut out = vec![0.0; self.col_rows() * cols];
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ci * self.k + ky) * self.k + kx) * cols;
                    let dst = &mut out[row..row + cols];
                    self.for_taps(ci, ky, kx, |c, i| dst[c] = x[i]);
                }
            }
        }
        out
    }

    fn col2im(&self, cols_data: &[f64], dx: &mut [f64]) {
        let cols = self.col_cols();
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ci * self.k + ky) * self.k + kx) * cols;
                    let src = &cols_data[row..row + cols];
                    self.for_taps(ci, ky, kx, |c, i| dx[i] += src[c]);
                }
            }
        }
    }
}

/// 2-D convolution of `x[N, Cin, H, W]` with `weight[Cout, Cin, k, k]`,
/// zero padding, optional bias `[Cout]`.
pub fn conv2d<'g>(
    x: Var<'g>,
    weight: Var<'g>,
    bias: Option<Var<'g>>,
    opts: ConvOptions,
) -> Result<Var<'g>> {
    let (xv, wv) = (x.value(), weight.value());
    let [n, cin, h, w] = xv.dims4()?;
    let &[cout, wcin, k, k2] = wv.shape() else {
        return Err(Error::shape(format!(
            "conv2d weight must be [Cout, Cin, k, k], got {:?}",
            wv.shape()
        )));
    };
    if wcin != cin || k != k2 {
        return Err(Error::shape(format!(
            "conv2d: input {:?} is incompatible with weight {:?}",
            xv.shape(),
            wv.shape()
        )));
    }
    if opts.stride == 0 || opts.dilation == 0 {
        return Err(Error::invalid("conv2d stride and dilation must be >= 1"));
    }
    let (Some(hout), Some(wout)) = (conv_out_size(h, k, opts), conv_out_size(w, k, opts)) else {
        return Err(Error::shape(format!(
            "conv2d: effective kernel extent {} exceeds padded input {}x{} (input {:?}, padding {})",
            opts.dilation * (k - 1) + 1,
            h + 2 * opts.padding,
            w + 2 * opts.padding,
            xv.shape(),
            opts.padding
        )));
    };
    let bv = match bias {
        Some(b) => {
            let bv = b.value();
            if bv.shape() != [cout] {
                return Err(Error::shape(format!("conv2d bias {:?} != [{cout}]", bv.shape())));
            }
            Some(bv)
        }
        None => None,
    };
    let geo = Geometry { cin, h, w, k, hout, wout, opts };
    let (rows, cols) = (geo.col_rows(), geo.col_cols());
    let in_plane = cin * h * w;
    let out_plane = cout * cols;

    let mut out = vec![0.0; n * out_plane];
    {
        let (xd, wd) = (xv.data(), wv.data());
        let bd = bv.as_ref().map(|b| b.data());
        out.par_chunks_mut(out_plane).enumerate().for_each(|(i, o)| {
            let xi = &xd[i * in_plane..(i + 1) * in_plane];
            if let Some(bd) = bd {
                for (co, chunk) in o.chunks_mut(cols).enumerate() {
                    chunk.fill(bd[co]);
                }
            }
            if geo.is_pointwise() {
                gemm(false, false, cout, cols, rows, 1.0, wd, xi, 1.0, o);
            } else {
                let c = geo.im2col(xi);
                gemm(false, false, cout, cols, rows, 1.0, wd, &c, 1.0, o);
            }
        });
    }
    let y = Tensor::new(&[n, cout, hout, wout], out)?;

    let mut parents = vec![x, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    let (x_shape, w_shape) = (xv.shape().to_vec(), wv.shape().to_vec());
    Ok(x.graph().record(y, &parents, move |g| {
        let (gd, xd, wd) = (g.data(), xv.data(), wv.data());
        let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let gi = &gd[i * out_plane..(i + 1) * out_plane];
                let xi = &xd[i * in_plane..(i + 1) * in_plane];
                let mut dw = vec![0.0; cout * rows];
                let mut dx = vec![0.0; in_plane];
                if geo.is_pointwise() {
                    gemm(false, true, cout, rows, cols, 1.0, gi, xi, 0.0, &mut dw);
                    gemm(true, false, rows, cols, cout, 1.0, wd, gi, 0.0, &mut dx);
                } else {
                    let c = geo.im2col(xi);
                    gemm(false, true, cout, rows, cols, 1.0, gi, &c, 0.0, &mut dw);
                    let mut dcols = vec![0.0; rows * cols];
                    gemm(true, false, rows, cols, cout, 1.0, wd, gi, 0.0, &mut dcols);
                    geo.col2im(&dcols, &mut dx);
                }
                (dx, dw)
            })
            .collect();
        let mut dx = Vec::with_capacity(n * in_plane);
        let mut dw = vec![0.0; cout * rows];
        for (dxi, dwi) in per_sample {
            dx.extend_from_slice(&dxi);
            for (a, b) in dw.iter_mut().zip(&dwi) {
                *a += b;
            }
        }
        let mut grads = vec![
            Some(Tensor::new(&x_shape, dx).unwrap()),
            Some(Tensor::new(&w_shape, dw).unwrap()),
        ];
        if has_bias {
            let mut db = vec![0.0; cout];
            for gi in gd.chunks(out_plane) {
                for (co, chunk) in gi.chunks(cols).enumerate() {
                    db[co] += chunk.iter().sum::<f64>();
                }
            }
            grads.push(Some(Tensor::new(&[cout], db).unwrap()));
        }
        grads
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;

    #[test]
    fn identity_kernel_is_identity() {
        let g = Graph::new();
        let x = g.input(Tensor::new(&[1, 1, 3, 3], (0..9).map(|v| v as f64 * 1.5 - 3.0).collect()).unwrap());
        let w = g.input(Tensor::ones(&[1, 1, 1, 1]));
        let y = conv2d(x, w, None, ConvOptions::default()).unwrap();
        assert_eq!(*y.value(), *x.value());
    }

    #[test]
    fn dilated_all_ones_sums_nine_taps() {
        let g = Graph::new();
        let x = g.input(Tensor::ones(&[1, 1, 5, 5]));
        let w = g.input(Tensor::ones(&[1, 1, 3, 3]));
        let opts = ConvOptions { stride: 1, padding: 0, dilation: 2 };
        let y = conv2d(x, w, None, opts).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.value().item(), 9.0);
    }

    #[test]
    fn strided_output_shape() {
        let g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 32, 32]));
        let w = g.input(Tensor::zeros(&[8, 3, 3, 3]));
        let opts = ConvOptions { stride: 2, padding: 1, dilation: 1 };
        assert_eq!(conv2d(x, w, None, opts).unwrap().shape(), vec![1, 8, 16, 16]);
    }

    #[test]
    fn padded_dilation_preserves_shape() {
        let g = Graph::new();
        let x = g.input(Tensor::ones(&[1, 2, 8, 8]));
        let w = g.input(Tensor::ones(&[3, 2, 3, 3]));
        for d in [6, 12, 18] {
            let y = conv2d(x, w, None, ConvOptions::same_3x3(d)).unwrap();
            assert_eq!(y.shape(), vec![1, 3, 8, 8]);
            // only the centre tap ever lands inside an 8x8 map once d >= 8
            if d >= 8 {
                assert!(y.value().data().iter().all(|&v| v == 2.0));
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch_naming_shapes() {
        let g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 8, 8]));
        let w = g.input(Tensor::zeros(&[4, 2, 3, 3]));
        let err = conv2d(x, w, None, ConvOptions::default()).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 8, 8]") && err.contains("[4, 2, 3, 3]"), "{err}");
    }

    #[test]
    fn rejects_kernel_wider_than_padded_input() {
        let g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 1, 4, 4]));
        let w = g.input(Tensor::zeros(&[1, 1, 3, 3]));
        let opts = ConvOptions { stride: 1, padding: 0, dilation: 2 };
        assert!(conv2d(x, w, None, opts).is_err());
    }

    #[test]
    fn bias_is_added_per_channel() {
        let g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 1, 2, 2]));
        let w = g.input(Tensor::zeros(&[2, 1, 1, 1]));
        let b = g.input(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let y = conv2d(x, w, Some(b), ConvOptions::default()).unwrap().value();
        assert_eq!(&y.data()[..8], &[1.0, 1.0, 1.0, 1.0, -2.0, -2.0, -2.0, -2.0]);
    }
}
