use super::linalg::{bmm, linear};
use crate::error::{Error, Result};
use crate::numerics::graph::Var;

/// Projection weights of one multi-head self-attention layer. Query, key and
/// value projections are bias-free; the output projection carries a bias.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'g> {
    pub query: Var<'g>,
    pub key: Var<'g>,
    pub value: Var<'g>,
    pub out: Var<'g>,
    pub out_bias: Var<'g>,
}

/// Output of [`multi_head_self_attention`] plus the softmax weights
/// `[N * heads, L, L]` (row = query, column = key).
pub struct AttentionOutput<'g> {
    pub output: Var<'g>,
    pub weights: Var<'g>,
}

/// `[N, L, D] -> [N * heads, L, D / heads]`
fn split_heads<'g>(x: Var<'g>, n: usize, l: usize, heads: usize, dh: usize) -> Result<Var<'g>> {
    x.reshape(&[n, l, heads, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n * heads, l, dh])
}

/// Scaled dot-product self-attention over `x[N, L, D]` with `heads` heads.
pub fn multi_head_self_attention<'g>(
    x: Var<'g>,
    w: &AttentionWeights<'g>,
    heads: usize,
) -> Result<AttentionOutput<'g>> {
    let shape = x.shape();
    let [n, l, d] = shape[..] else {
        return Err(Error::shape(format!("attention expects [N, L, D], got {shape:?}")));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    // The 1/sqrt(dh) score scaling is applied to the (much smaller) queries.
    let q = split_heads(linear(x, w.query, None)?.scale(1.0 / (dh as f64).sqrt()), n, l, heads, dh)?;
    let k = split_heads(linear(x, w.key, None)?, n, l, heads, dh)?;
    let v = split_heads(linear(x, w.value, None)?, n, l, heads, dh)?;
    let scores = bmm(q, k, false, true)?;
    let weights = scores.softmax(2)?;
    let context = bmm(weights, v, false, false)?
        .reshape(&[n, heads, l, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n, l, d])?;
    let output = linear(context, w.out, Some(w.out_bias))?;
    Ok(AttentionOutput { output, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;
    use crate::numerics::tensor::Tensor;
    use rand::SeedableRng;

    fn weights<'g>(g: &'g Graph, d: usize, seed: u64) -> AttentionWeights<'g> {
        let mut rng = rand_pcg::Pcg64Mcg::seed_from_u64(seed);
        let mut m = || g.input(Tensor::randn(&[d, d], 0.5, &mut rng));
        AttentionWeights {
            query: m(),
            key: m(),
            value: m(),
            out: m(),
            out_bias: g.input(Tensor::randn(&[d], 0.1, &mut rand_pcg::Pcg64Mcg::seed_from_u64(seed + 1))),
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let g = Graph::new();
        let w = weights(&g, 4, 1);
        let x = g.input(Tensor::randn(&[2, 1, 4], 1.0, &mut rand_pcg::Pcg64Mcg::seed_from_u64(9)));
        let out = multi_head_self_attention(x, &w, 2).unwrap();
        assert!(out.weights.value().data().iter().all(|&v| v == 1.0));
        let expected = linear(linear(x, w.value, None).unwrap(), w.out, Some(w.out_bias)).unwrap();
        for (a, b) in out.output.value().data().iter().zip(expected.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let g = Graph::new();
        let w = weights(&g, 4, 2);
        let row = [0.3, -1.2, 0.8, 2.0];
        let x = g.input(Tensor::new(&[1, 5, 4], row.repeat(5)).unwrap());
        let y = multi_head_self_attention(x, &w, 2).unwrap().output.value();
        for r in y.data().chunks(4).skip(1) {
            for (a, b) in r.iter().zip(&y.data()[..4]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let g = Graph::new();
        let w = weights(&g, 6, 3);
        let x = g.input(Tensor::randn(&[2, 7, 6], 2.0, &mut rand_pcg::Pcg64Mcg::seed_from_u64(4)));
        let out = multi_head_self_attention(x, &w, 3).unwrap();
        let a = out.weights.value();
        assert_eq!(a.shape(), &[6, 7, 7]);
        for row in a.data().chunks(7) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let g = Graph::new();
        let w = weights(&g, 6, 5);
        let x = g.input(Tensor::zeros(&[1, 3, 6]));
        assert!(multi_head_self_attention(x, &w, 4).is_err());
    }
}
