//! Property tests for the invariants the library promises.

use proptest::prelude::*;

use triqa::distortion::DistortionGrouping;
use triqa::encoder::{crop_window, synchronized_crop, triplet_distance, triplet_loss_and_grad};
use triqa::eval::{average_ranks, format_delta, plcc, srcc};
use triqa::fr::cosine_similarity;
use triqa::image::ImageBuffer;
use triqa::regression::{fit, Grid, SplitProtocol};
use triqa::triplet::build_manifest;

fn vectors(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    let v = || prop::collection::vec(-5.0f64..5.0, dim);
    (v(), v(), v())
}

fn distinct_pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-50.0f64..50.0, n),
            prop::collection::vec(-50.0f64..50.0, n),
        )
    })
}

/// Image whose pixels encode their own coordinates.
fn coordinate_image(w: u32, h: u32, salt: u8) -> ImageBuffer {
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for y in 0..h {
        for x in 0..w {
            data.extend([x as u8, y as u8, salt]);
        }
    }
    ImageBuffer::from_raw(w, h, data).unwrap()
}

proptest! {
    #[test]
    fn loss_is_bounded((a, p, n) in (1usize..12).prop_flat_map(vectors), margin in 0.01f64..4.0) {
        let g = triplet_loss_and_grad(&a, &p, &n, margin).unwrap();
        prop_assert!(g.loss >= 0.0);
        // triangle inequality: d(a,p) - d(a,n) <= d(p,n)
        prop_assert!(g.loss <= margin + triplet_distance(&p, &n).unwrap() + 1e-12);
        if g.d_an >= g.d_ap + margin {
            prop_assert_eq!(g.loss, 0.0);
        }
        let total: f64 = (0..a.len()).map(|i| g.grad_a[i] + g.grad_p[i] + g.grad_n[i]).map(f64::abs).sum();
        // translating all three embeddings leaves the loss unchanged
        prop_assert!(total < 1e-9);
    }

    #[test]
    fn cosine_is_symmetric_and_scale_free((u, v, _) in (1usize..32).prop_flat_map(vectors), k in 0.01f64..100.0) {
        prop_assume!(u.iter().any(|&x| x != 0.0) && v.iter().any(|&x| x != 0.0));
        let c = cosine_similarity(&u, &v).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((c - cosine_similarity(&v, &u).unwrap()).abs() < 1e-12);
        let scaled: Vec<f64> = u.iter().map(|x| x * k).collect();
        prop_assert!((c - cosine_similarity(&scaled, &v).unwrap()).abs() < 1e-12);
        prop_assert_eq!(cosine_similarity(&u, &u).unwrap(), 1.0);
    }

    #[test]
    fn srcc_sees_only_ranks((x, y) in distinct_pairs()) {
        let Ok(s) = srcc(&x, &y) else { return Ok(()); };
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - srcc(&y, &x).unwrap()).abs() < 1e-12);
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v).collect();
        prop_assert!((s - srcc(&cubed, &y).unwrap()).abs() < 1e-12);
        let flipped: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!((s + srcc(&flipped, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ranks_sum_and_plcc_affine((x, y) in distinct_pairs(), a in 0.1f64..10.0, b in -100.0f64..100.0) {
        let n = x.len() as f64;
        prop_assert!((average_ranks(&x).iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        let Ok(p) = plcc(&x, &y) else { return Ok(()); };
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((p - plcc(&ax, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn delta_formatting_truncates(pct in -50.0f64..50.0) {
        let text = format_delta(pct);
        let value: f64 = text.trim_end_matches('%').parse().unwrap();
        prop_assert!(value.abs() <= pct.abs() + 1e-9);
        prop_assert!(pct.abs() - value.abs() < 0.01 + 1e-9);
        prop_assert_eq!(text.starts_with('-'), value < 0.0);
    }

    #[test]
    fn crops_share_one_window(w in 16u32..80, h in 16u32..80, crop in 1u32..16, seed in any::<u64>()) {
        let (x, y) = crop_window(w, h, crop, seed).unwrap();
        prop_assert!(x + crop <= w && y + crop <= h);
        let imgs: Vec<ImageBuffer> = (0..3).map(|s| coordinate_image(w, h, s)).collect();
        let crops = synchronized_crop(&imgs[0], &imgs[1], &imgs[2], crop, seed).unwrap();
        for (s, c) in crops.iter().enumerate() {
            prop_assert_eq!(c.pixel(0, 0), [x as u8, y as u8, s as u8]);
        }
    }

    #[test]
    fn split_partitions_rows(n in 2usize..300, frac in 0.05f64..0.95, seed in any::<u64>(), it in 0usize..10) {
        let protocol = SplitProtocol { train_fraction: frac, seed, ..SplitProtocol::default() };
        let (train, test) = protocol.split(n, it);
        prop_assert!(!train.is_empty() && !test.is_empty());
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(protocol.split(n, it), (train, test));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn manifests_are_deterministic(n in 1usize..4, seed in any::<u64>(), combined in any::<bool>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("p{i}.png")).collect();
        let grouping = DistortionGrouping::default_grouping();
        let a = build_manifest(&ids, &grouping, combined, seed).unwrap();
        let b = build_manifest(&ids, &grouping, combined, seed).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
        prop_assert_eq!(a.entries.len(), n * if combined { 1008 } else { 400 });
        prop_assert!(a.validate().is_ok());
    }

    #[test]
    fn replicating_rows_leaves_the_head_unchanged(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| 10.0 * r[0] - 4.0 * r[2] + rng.random_range(-0.5..0.5)).collect();
        // tight solve: the invariant holds at the optimum, not at early stopping
        let grid = Grid { seed, tolerance: 1e-10, max_epochs: 50_000, ..Grid::default() };
        let once = fit(&x, &y, &grid).unwrap();
        let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
        let twice = fit(&x2, &y2, &grid).unwrap();
        prop_assert_eq!((once.c, once.epsilon), (twice.c, twice.epsilon));
        for (a, b) in once.weights.iter().zip(&twice.weights) {
            prop_assert!((a - b).abs() < 1e-3 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }
}
