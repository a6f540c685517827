use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vnsc_tensor::{conv_output_len, transposed_output_len, Graph, Tensor};

fn rand64(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest! {
    #[test]
    fn conv1d_transposed_adjoint(
        cin in 1usize..4, cout in 1usize..4, k in 1usize..6, stride in 1usize..4,
        extra in 0usize..12, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let n = k + extra;
        let g = Graph::<f64>::inference();
        let w = g.constant(rand64(seed, &[cout, cin, k]));
        let x = rand64(seed ^ 1, &[cin, n]);
        let y = g.constant(x.clone()).conv1d(&w, None, stride, pad, 1).unwrap();
        let probe = rand64(seed ^ 2, y.shape());
        let out_len = conv_output_len(n, k, stride, pad).unwrap();
        let op = transposed_output_len(out_len, k, stride, pad, 0).and_then(|t| n.checked_sub(t));
        prop_assume!(op.is_some_and(|op| op < stride));
        let op = op.unwrap();
        let xt = g.constant(probe.clone()).conv1d_transposed(&w, None, stride, pad, op).unwrap();
        prop_assert_eq!(xt.shape(), &[cin, n][..]);
        let lhs = inner(y.value(), &probe);
        let rhs = inner(&x, xt.value());
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn linear_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let g = Graph::<f64>::inference();
        let w = g.constant(rand64(seed, &[4, 3]));
        let x = rand64(seed ^ 5, &[3, 6]);
        let y = rand64(seed ^ 6, &[3, 6]);
        let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = g.constant(combo).linear(&w, None).unwrap();
        let fx = g.constant(x).linear(&w, None).unwrap();
        let fy = g.constant(y).linear(&w, None).unwrap();
        let rhs = fx.value().zip_map(fy.value(), |p, q| a * p + b * q).unwrap();
        prop_assert!(lhs.value().max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn layer_norm_output_is_standardised(seed in any::<u64>(), d in 2usize..10, n in 1usize..6) {
        let g = Graph::<f64>::inference();
        let x = rand64(seed, &[d, n]).map(|v| 4.0 * v + 1.0);
        let y = g
            .constant(x)
            .layer_norm(&g.constant(Tensor::ones(&[d])), &g.constant(Tensor::zeros(&[d])), 1e-12)
            .unwrap();
        for c in 0..n {
            let col = y.value().column(c);
            let mean = col.iter().sum::<f64>() / d as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_then_narrow_round_trips(seed in any::<u64>(), r1 in 1usize..5, r2 in 1usize..5, c in 1usize..5) {
        let g = Graph::<f64>::inference();
        let a = rand64(seed, &[r1, c]);
        let b = rand64(seed ^ 9, &[r2, c]);
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let cat = vnsc_tensor::Var::concat(&[&va, &vb]).unwrap();
        let head = cat.narrow(0, r1).unwrap();
        let tail = cat.narrow(r1, r2).unwrap();
        prop_assert_eq!(head.value(), &a);
        prop_assert_eq!(tail.value(), &b);
    }
}
