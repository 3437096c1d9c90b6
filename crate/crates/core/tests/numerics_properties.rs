use cafct_core::numerics::{
    batch_norm, bilinear_resize, conv2d, finite_diff_grad, max_relative_error, seeded_rng, ConvOptions, Graph, Mode,
    BN_EPS,
};
use cafct_core::Tensor;
use proptest::prelude::*;

fn tensor(shape: &[usize], seed: u64, std: f64) -> Tensor {
    Tensor::randn(shape, std, &mut seeded_rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), std in 0.1f64..30.0) {
        let g = Graph::new();
        let y = g.constant(tensor(&[rows, cols], seed, std)).softmax(1).unwrap().value();
        for row in y.data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_kernel_is_identity(c in 1usize..4, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let x = tensor(&[2, c, h, w], seed, 1.0);
        let mut k = Tensor::zeros(&[c, c, 1, 1]);
        for i in 0..c {
            k.data_mut()[i * c + i] = 1.0;
        }
        let g = Graph::new();
        let y = conv2d(g.constant(x.clone()), g.constant(k), None, ConvOptions::default()).unwrap();
        prop_assert_eq!(&*y.value(), &x);
    }

    #[test]
    fn resize_keeps_identity_and_constants(h in 1usize..6, w in 1usize..6, oh in 1usize..12, ow in 1usize..12, seed in any::<u64>(), c in -5.0f64..5.0) {
        let g = Graph::new();
        let x = tensor(&[1, 2, h, w], seed, 1.0);
        prop_assert_eq!(&*bilinear_resize(g.constant(x.clone()), h, w).unwrap().value(), &x);
        let flat = bilinear_resize(g.constant(Tensor::full(&[1, 2, h, w], c)), oh, ow).unwrap().value();
        prop_assert!(flat.data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn train_batch_norm_hits_affine_moments(seed in any::<u64>(), gamma in 0.2f64..3.0, beta in -2.0f64..2.0) {
        // Variance ~100, so the eps shrinkage is ~1e-7 relative.
        let x = tensor(&[3, 2, 4, 4], seed, 10.0);
        let g = Graph::new();
        let (y, _) = batch_norm(
            g.constant(x),
            g.constant(Tensor::full(&[2], gamma)),
            g.constant(Tensor::full(&[2], beta)),
            BN_EPS,
            Mode::Train,
            None,
        ).unwrap();
        let y = y.value();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| y.data()[(n * 2 + ch) * 16..(n * 2 + ch + 1) * 16].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!((mean - beta).abs() < 1e-9);
            prop_assert!((var / (gamma * gamma) - 1.0).abs() < 1e-6, "{var} vs {}", gamma * gamma);
        }
    }

    #[test]
    fn forward_outputs_stay_finite(seed in any::<u64>(), std in 0.0f64..1e3) {
        let g = Graph::new();
        let x = g.constant(tensor(&[2, 3, 5, 5], seed, std));
        let k = g.constant(tensor(&[2, 3, 3, 3], seed ^ 1, 1.0));
        let y = conv2d(x, k, None, ConvOptions::same_3x3(2)).unwrap();
        let y = y.relu().add(y.sigmoid()).unwrap().add(y.gelu()).unwrap();
        prop_assert!(y.value().all_finite());
        prop_assert!(y.softmax(1).unwrap().value().all_finite());
    }
}

#[test]
fn conv_gradient_matches_oracle() {
    let x = tensor(&[1, 2, 6, 6], 3, 1.0);
    let w = tensor(&[3, 2, 3, 3], 4, 1.0);
    let r = tensor(&[1, 3, 6, 6], 5, 1.0);
    let loss = |x: &Tensor| {
        let g = Graph::new();
        let y = conv2d(g.constant(x.clone()), g.constant(w.clone()), None, ConvOptions::same_3x3(1)).unwrap();
        y.mul(g.constant(r.clone())).unwrap().sum().value().item()
    };
    let g = Graph::new();
    let xv = g.input(x.clone());
    let y = conv2d(xv, g.constant(w.clone()), None, ConvOptions::same_3x3(1)).unwrap();
    let grads = g.backward(y.mul(g.constant(r.clone())).unwrap().sum()).unwrap();
    let numeric = finite_diff_grad(loss, &x, 1e-5);
    assert!(max_relative_error(grads.get_or_zeros(xv).data(), numeric.data()) < 1e-4);
}

#[test]
fn square_gradient_is_twice_input() {
    let g = Graph::new();
    let p = g.input(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let grads = g.backward(p.square().sum()).unwrap();
    assert_eq!(grads.get_or_zeros(p).data(), &[2.0, 4.0]);
}
