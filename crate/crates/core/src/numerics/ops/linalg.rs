use crate::error::{Error, Result};
use crate::numerics::graph::Var;
use crate::numerics::tensor::Tensor;

/// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k`
/// and `op(b)` is `k x n`. Transposition is expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index touched for the given
    // extents and strides; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Affine map over the trailing axis: `x[..., Din] -> x W^T + b`, with
/// `weight` shaped `[Dout, Din]`.
pub fn linear<'g>(x: Var<'g>, weight: Var<'g>, bias: Option<Var<'g>>) -> Result<Var<'g>> {
    let (xv, wv) = (x.value(), weight.value());
    let [d_out, d_in] = wv.shape()[..] else {
        return Err(Error::shape(format!("linear weight must be [Dout, Din], got {:?}", wv.shape())));
    };
    let x_shape = xv.shape().to_vec();
    if x_shape.last() != Some(&d_in) {
        return Err(Error::shape(format!(
            "linear: input {x_shape:?} has trailing extent != Din of weight {:?}",
            wv.shape()
        )));
    }
    let rows = xv.numel() / d_in;
    let mut out = vec![0.0; rows * d_out];
    if let Some(b) = bias {
        let bv = b.value();
        if bv.shape() != [d_out] {
            return Err(Error::shape(format!("linear bias {:?} != [{d_out}]", bv.shape())));
        }
        for row in out.chunks_mut(d_out) {
            row.copy_from_slice(bv.data());
        }
    }
    gemm(false, true, rows, d_out, d_in, 1.0, xv.data(), wv.data(), 1.0, &mut out);
    let mut out_shape = x_shape.clone();
    *out_shape.last_mut().unwrap() = d_out;
    let y = Tensor::new(&out_shape, out)?;

    let mut parents = vec![x, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    Ok(x.graph().record(y, &parents, move |g| {
        let gd = g.data();
        let mut dx = vec![0.0; rows * d_in];
        gemm(false, false, rows, d_in, d_out, 1.0, gd, wv.data(), 0.0, &mut dx);
        let mut dw = vec![0.0; d_out * d_in];
        gemm(true, false, d_out, d_in, rows, 1.0, gd, xv.data(), 0.0, &mut dw);
        let mut grads = vec![
            Some(Tensor::new(&x_shape, dx).unwrap()),
            Some(Tensor::new(&[d_out, d_in], dw).unwrap()),
        ];
        if has_bias {
            let mut db = vec![0.0; d_out];
            for row in gd.chunks(d_out) {
                for (a, b) in db.iter_mut().zip(row) {
                    *a += b;
                }
            }
            grads.push(Some(Tensor::new(&[d_out], db).unwrap()));
        }
        grads
    }))
}

/// Batched matrix product of `[B, M, K]` and `[B, K, N]` operands, each
/// optionally transposed in its last two axes.
pub fn bmm<'g>(a: Var<'g>, b: Var<'g>, trans_a: bool, trans_b: bool) -> Result<Var<'g>> {
    let (av, bv) = (a.value(), b.value());
    let (&[ba, a0, a1], &[bb, b0, b1]) = (av.shape(), bv.shape()) else {
        return Err(Error::shape(format!(
            "bmm expects rank-3 operands, got {:?} and {:?}",
            av.shape(),
            bv.shape()
        )));
    };
    let (m, ka) = if trans_a { (a1, a0) } else { (a0, a1) };
    let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
    if ba != bb || ka != kb {
        return Err(Error::shape(format!(
            "bmm: incompatible operands {:?}{} and {:?}{}",
            av.shape(),
            if trans_a { "^T" } else { "" },
            bv.shape(),
            if trans_b { "^T" } else { "" }
        )));
    }
    let (batch, k) = (ba, ka);
    let (sa, sb, sc) = (m * k, k * n, m * n);
    let mut out = vec![0.0; batch * sc];
    for i in 0..batch {
        gemm(
            trans_a,
            trans_b,
            m,
            n,
            k,
            1.0,
            &av.data()[i * sa..],
            &bv.data()[i * sb..],
            0.0,
            &mut out[i * sc..(i + 1) * sc],
        );
    }
    let y = Tensor::new(&[batch, m, n], out)?;
    let (a_shape, b_shape) = (av.shape().to_vec(), bv.shape().to_vec());
    Ok(a.graph().record(y, &[a, b], move |g| {
        let gd = g.data();
        let mut da = vec![0.0; batch * sa];
        let mut db = vec![0.0; batch * sb];
        for i in 0..batch {
            let gi = &gd[i * sc..(i + 1) * sc];
            let (ai, bi) = (&av.data()[i * sa..], &bv.data()[i * sb..]);
            // C = A B: dA = G B^T, dB = A^T G (adjusted for stored transposes)
            let dai = &mut da[i * sa..(i + 1) * sa];
            if trans_a {
                gemm(trans_b, true, k, m, n, 1.0, bi, gi, 0.0, dai);
            } else {
                gemm(false, !trans_b, m, k, n, 1.0, gi, bi, 0.0, dai);
            }
            let dbi = &mut db[i * sb..(i + 1) * sb];
            if trans_b {
                gemm(true, trans_a, n, k, m, 1.0, gi, ai, 0.0, dbi);
            } else {
                gemm(!trans_a, false, k, n, m, 1.0, ai, gi, 0.0, dbi);
            }
        }
        vec![
            Some(Tensor::new(&a_shape, da).unwrap()),
            Some(Tensor::new(&b_shape, db).unwrap()),
        ]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;

    #[test]
    fn linear_hand_product() {
        let g = Graph::new();
        let x = g.input(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let w = g.input(Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap());
        let b = g.input(Tensor::zeros(&[2]));
        let y = linear(x, w, Some(b)).unwrap();
        assert_eq!(y.value().data(), &[3.0, 2.0]);
    }

    #[test]
    fn linear_identity_and_shapes() {
        let g = Graph::new();
        let x = g.input(Tensor::new(&[1, 4, 3], (0..12).map(f64::from).collect()).unwrap());
        let eye = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let y = linear(x, g.input(eye), Some(g.input(Tensor::zeros(&[3])))).unwrap();
        assert_eq!(*y.value(), *x.value());

        let w = g.input(Tensor::zeros(&[5, 3]));
        assert_eq!(linear(x, w, None).unwrap().shape(), vec![1, 4, 5]);
        let bad = g.input(Tensor::zeros(&[5, 4]));
        assert!(linear(x, bad, None).is_err());
    }

    #[test]
    fn bmm_matches_naive_all_transpose_modes() {
        let a_data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b_data: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let g = Graph::new();
            // logical A: 2 x (2x3), B: 2 x (3x2)
            let a_shape = if ta { [2, 3, 2] } else { [2, 2, 3] };
            let b_shape = if tb { [2, 2, 3] } else { [2, 3, 2] };
            let a = g.input(Tensor::new(&a_shape, a_data.clone()).unwrap());
            let b = g.input(Tensor::new(&b_shape, b_data.clone()).unwrap());
            let c = bmm(a, b, ta, tb).unwrap().value();
            let at = |i: usize, r: usize, k: usize| {
                if ta { a_data[i * 6 + k * 2 + r] } else { a_data[i * 6 + r * 3 + k] }
            };
            let bt = |i: usize, k: usize, col: usize| {
                if tb { b_data[i * 6 + col * 3 + k] } else { b_data[i * 6 + k * 2 + col] }
            };
            for i in 0..2 {
                for r in 0..2 {
                    for col in 0..2 {
                        let want: f64 = (0..3).map(|k| at(i, r, k) * bt(i, k, col)).sum();
                        let got = c.data()[i * 4 + r * 2 + col];
                        assert!((want - got).abs() < 1e-12, "{ta} {tb}");
                    }
                }
            }
        }
    }
}
