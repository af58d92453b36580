//! Randomized invariants of the retrieval, queue, batching and loss code.

use std::collections::VecDeque;

use itr::evaluator::{recall_at_k, similarity};
use itr::feature_store::{batch_slices, epoch_order};
use itr::momentum_contrast::DynamicQueue;
use itr::objectives::{mini_hal_loss, LossConfig};
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Array2<f64>> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c)
            .prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
    })
}

/// Nonzero rows only, so cosines are defined.
fn nonzero(m: Array2<f64>) -> Array2<f64> {
    let mut m = m;
    for mut row in m.rows_mut() {
        if row.iter().all(|x| x.abs() < 1e-3) {
            row[0] = 1.0;
        }
    }
    m
}

proptest! {
    #[test]
    fn cosine_is_bounded_and_symmetric(a in matrix(1..6, 4..5), b in matrix(1..6, 4..5)) {
        let (a, b) = (nonzero(a), nonzero(b));
        let ab = similarity(a.view(), b.view()).unwrap();
        let ba = similarity(b.view(), a.view()).unwrap();
        prop_assert_eq!(ab.dim(), (a.nrows(), b.nrows()));
        for ((i, j), &x) in ab.indexed_iter() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&x));
            prop_assert!((x - ba[[j, i]]).abs() <= 1e-12);
        }
    }

    #[test]
    fn recall_is_a_monotone_percentage(n_img in 1usize..8, per in 1usize..4, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n_cap = n_img * per;
        let sim = Array2::from_shape_fn((n_img, n_cap), |_| rng.gen_range(-1.0f64..1.0));
        let gt: Vec<Vec<usize>> = (0..n_img).map(|i| (i * per..(i + 1) * per).collect()).collect();
        let ks: Vec<usize> = (1..=n_cap.max(n_img) + 1).collect();
        let r = recall_at_k(sim.view(), &gt, &ks).unwrap();
        for dir in [&r.i2t, &r.t2i] {
            prop_assert!(dir.iter().all(|&x| (0.0..=100.0).contains(&x)));
            prop_assert!(dir.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*dir.last().unwrap(), 100.0);
        }
    }

    #[test]
    fn queue_keeps_the_newest_rows(cap in 1usize..12, sizes in prop::collection::vec(0usize..6, 0..20)) {
        let dim = 3;
        let mut q = DynamicQueue::<f64>::new(cap, dim);
        let mut all: VecDeque<Vec<f64>> = VecDeque::new();
        let mut next = 0.0;
        let mut pushed = 0;
        for n in sizes {
            let n = n.min(cap);
            let batch = Array2::from_shape_fn((n, dim), |(r, c)| next + r as f64 + c as f64 / 10.0);
            next += n as f64;
            q.enqueue(batch.view()).unwrap();
            pushed += n;
            for row in batch.rows() {
                all.push_back(row.to_vec());
            }
            prop_assert_eq!(q.len(), pushed.min(cap));
            let snap = q.snapshot();
            let tail: Vec<Vec<f64>> = all.iter().skip(all.len() - q.len()).cloned().collect();
            let got: Vec<Vec<f64>> = snap.rows().into_iter().map(|r| r.to_vec()).collect();
            prop_assert_eq!(got, tail);
        }
    }

    #[test]
    fn epoch_batches_partition_a_permutation(
        n in 0usize..200, b in 1usize..40, seed in any::<u64>(), epoch in 0u64..50, drop_last in any::<bool>()
    ) {
        let order = epoch_order(n, seed, epoch);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(&order, &epoch_order(n, seed, epoch));

        let batches = batch_slices(&order, b, drop_last);
        let flat: Vec<usize> = batches.iter().flat_map(|s| s.iter().copied()).collect();
        let expected = if drop_last { n / b * b } else { n };
        prop_assert_eq!(&flat[..], &order[..expected]);
        prop_assert!(batches.iter().all(|s| !s.is_empty() && s.len() <= b));
        if drop_last {
            prop_assert!(batches.iter().all(|s| s.len() == b));
        }
    }

    #[test]
    fn mini_loss_ignores_row_scale(
        v in matrix(2..6, 5..6),
        scales in prop::collection::vec(0.1f64..10.0, 12),
    ) {
        let v = nonzero(v);
        let w = nonzero(v.mapv(|x| (x * 1.7).sin()));
        let cfg = LossConfig::default();
        let base = mini_hal_loss(v.view(), w.view(), &cfg).unwrap().value;
        let mut vs = v.clone();
        let mut ws = w.clone();
        for (i, mut row) in vs.rows_mut().into_iter().enumerate() {
            row *= scales[i];
        }
        for (i, mut row) in ws.rows_mut().into_iter().enumerate() {
            row *= scales[6 + i];
        }
        let scaled = mini_hal_loss(vs.view(), ws.view(), &cfg).unwrap().value;
        prop_assert!((base - scaled).abs() <= 1e-9 * base.abs().max(1.0), "{} vs {}", base, scaled);
    }
}
