use proptest::prelude::*;
use winmatch_core::attention::{
    top_k_window_attention, window_partition, window_reverse, AttentionParams, WindowContext,
};
use winmatch_core::matcher::{mutual_nn_select_raw, patch_confidence};
use winmatch_core::reference::{self, Linear, Problem};
use winmatch_core::{no_grad, FeatureMap, Tensor};

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

/// `(h, w, s, c)` with `s` dividing both sides.
fn shape() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..=4, 1usize..=4, 1usize..=3, 1usize..=4).prop_map(|(a, b, s, c)| (a * s, b * s, s, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_agrees_with_reference(
        ((h, w, s, c), top_k_frac, temperature, x) in shape().prop_flat_map(|d| {
            let (h, w, _, c) = d;
            (Just(d), 0.0f64..1.0, 0.3f64..3.0, values(2 * h * w * c + 6 * c * c + 6 * c))
        })
    ) {
        let n = (h / s) * (w / s);
        let top_k = 1 + ((n - 1) as f64 * top_k_frac).round() as usize;
        let hw = h * w * c;
        let (x1, rest) = x.split_at(hw);
        let (x2, rest) = rest.split_at(hw);
        let (wq, rest) = rest.split_at(c * c);
        let (wk, rest) = rest.split_at(c * c);
        let (wv, rest) = rest.split_at(c * c);
        let (bq, rest) = rest.split_at(c);
        let (bk, rest) = rest.split_at(c);
        let bv = &rest[..c];
        let mut p = AttentionParams::identity(c);
        p.wq = Tensor::new(&[c, c], wq.to_vec()).unwrap();
        p.wk = Tensor::new(&[c, c], wk.to_vec()).unwrap();
        p.wv = Tensor::new(&[c, c], wv.to_vec()).unwrap();
        p.bq = Tensor::new(&[c], bq.to_vec()).unwrap();
        p.bk = Tensor::new(&[c], bk.to_vec()).unwrap();
        p.bv = Tensor::new(&[c], bv.to_vec()).unwrap();
        let fa = FeatureMap::new(Tensor::new(&[h, w, c], x1.to_vec()).unwrap(), 8).unwrap();
        let fb = FeatureMap::new(Tensor::new(&[h, w, c], x2.to_vec()).unwrap(), 8).unwrap();
        let ctx = WindowContext::new(h, w, s, top_k).unwrap();
        let fast = no_grad(|| top_k_window_attention(&fa, &fb, &ctx, &p, temperature)).unwrap();
        let slow = reference::window_attention(&Problem {
            x1, x2, h, w, c,
            q: Linear { weight: wq, bias: bq },
            k: Linear { weight: wk, bias: bk },
            v: Linear { weight: wv, bias: bv },
            s, top_k, temperature,
        });
        for (a, b) in fast.data().iter().zip(&slow) {
            prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn partition_round_trip_is_bit_exact(
        ((h, w, s, c), x) in shape().prop_flat_map(|d| (Just(d), values(d.0 * d.1 * d.3)))
    ) {
        let t = Tensor::new(&[h, w, c], x).unwrap();
        let back = window_reverse(&window_partition(&t, s).unwrap(), h, w).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn matmul_matches_triple_loop(
        (m, k, n, a, b) in (1usize..=16, 1usize..=16, 1usize..=16)
            .prop_flat_map(|(m, k, n)| (Just(m), Just(k), Just(n), values(m * k), values(k * n)))
    ) {
        let out = Tensor::new(&[m, k], a.clone()).unwrap().matmul(&Tensor::new(&[k, n], b.clone()).unwrap()).unwrap();
        for i in 0..m {
            for j in 0..n {
                let expected: f64 = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                prop_assert!((out.data()[i * n + j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        (rows, cols, x, temperature) in (1usize..=8, 1usize..=8)
            .prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-50.0f64..50.0, r * c), 0.05f64..5.0))
    ) {
        let p = Tensor::new(&[rows, cols], x).unwrap().softmax_rows(temperature).unwrap();
        for row in p.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mutual_matches_are_unique_mutual_maxima(
        (rows, cols, x, threshold) in (1usize..=10, 1usize..=10)
            .prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(0i32..5, r * c), 0.0f64..0.5))
    ) {
        // coarse integer levels make ties common
        let p: Vec<f64> = x.iter().map(|&v| f64::from(v) / 4.0).collect();
        let matches = mutual_nn_select_raw(&p, rows, cols, threshold);
        let mut seen_i = vec![false; rows];
        let mut seen_j = vec![false; cols];
        for m in &matches {
            prop_assert!(!seen_i[m.i] && !seen_j[m.j]);
            seen_i[m.i] = true;
            seen_j[m.j] = true;
            let v = p[m.i * cols + m.j];
            prop_assert!(v >= threshold || (v - threshold).abs() < 1e-15);
            prop_assert!((0..cols).all(|j| p[m.i * cols + j] <= v));
            prop_assert!((0..rows).all(|i| p[i * cols + m.j] <= v));
        }
    }
}

#[test]
fn dual_softmax_confidence_is_symmetric_under_swap() {
    let a: Vec<f64> = (0..48).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
    let b: Vec<f64> = (0..48).map(|i| ((i * 11 % 13) as f64 - 6.0) / 6.0).collect();
    let fa = FeatureMap::new(Tensor::new(&[4, 4, 3], a).unwrap(), 8).unwrap();
    let fb = FeatureMap::new(Tensor::new(&[4, 4, 3], b).unwrap(), 8).unwrap();
    let ab = patch_confidence(&fa, &fb, 0.1).unwrap();
    let ba = patch_confidence(&fb, &fa, 0.1).unwrap();
    for i in 0..16 {
        for j in 0..16 {
            assert!((ab.get(i, j) - ba.get(j, i)).abs() < 1e-12);
        }
    }
}
