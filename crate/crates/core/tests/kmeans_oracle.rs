mod common;

use ndarray::{Array2, Axis};
use proptest::prelude::*;
use protoexplain::kmeans::{derive_seed, fit, fit_classwise, KMeansConfig};
use protoexplain::sem_core::BankLocation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn to_array(points: &[Vec<f64>]) -> Array2<f32> {
    Array2::from_shape_fn((points.len(), points[0].len()), |(i, j)| points[i][j] as f32)
}

#[test]
fn inertia_within_five_percent_of_exhaustive_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for instance in 0..300 {
        let n = rng.random_range(3..=10);
        let k = rng.random_range(1..=3);
        let d = rng.random_range(1..=2);
        let pts = common::random_points(&mut rng, n, d, 10.0);
        // the fit sees f32 points, so the optimum is taken over the same rounded values
        let rounded: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| p.iter().map(|&v| v as f32 as f64).collect())
            .collect();
        let optimum = common::exhaustive_kmeans_optimum(&rounded, k);
        let r = fit(to_array(&pts).view(), &KMeansConfig::new(k, rng.random())).unwrap();
        assert!(
            r.inertia <= 1.05 * optimum + 1e-9,
            "instance {instance}: inertia {} vs optimum {optimum}",
            r.inertia
        );
        assert!(r.inertia_history.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn brute_force_confirms_two_cluster_example() {
    let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]];
    assert_eq!(common::exhaustive_kmeans_optimum(&pts, 2), 1.0);
}

#[test]
fn seeded_fit_is_bit_identical_and_parallel_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let pts = Array2::from_shape_fn((3000, 6), |_| normal.sample(&mut rng));
    let cfg = KMeansConfig::new(7, 99).with_n_init(2);
    let a = fit(pts.view(), &cfg).unwrap();
    let b = fit(pts.view(), &cfg).unwrap();
    assert_eq!(a, b);
    let p = fit(pts.view(), &cfg.clone().with_parallel(true)).unwrap();
    assert!((p.inertia - a.inertia).abs() <= 1e-5 * a.inertia);
    assert_eq!(p.centroids, a.centroids);
    for c in 0..7 {
        assert!(a.assignments.contains(&c));
    }
}

#[test]
fn classwise_equals_independent_fits() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let n = 90;
    let pts = Array2::from_shape_fn((n, 3), |_| normal.sample(&mut rng));
    let labels: Vec<usize> = (0..n).map(|i| (i * 7) % 3).collect();
    let base = KMeansConfig::new(0, 1234);
    let bank = fit_classwise(pts.view(), &labels, 3, 4, &base, BankLocation::Embedding).unwrap();
    for c in 0..3 {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let subset = pts.select(Axis(0), &rows);
        let cfg = KMeansConfig {
            k: 4,
            seed: derive_seed(1234, c),
            ..base.clone()
        };
        let solo = fit(subset.view(), &cfg).unwrap();
        for (j, k) in bank.class_window(c).enumerate() {
            assert_eq!(bank.prototype(k), solo.centroids.row(j).as_slice().unwrap());
        }
    }
}

#[test]
fn one_prototype_per_class_is_the_class_mean() {
    let pts = ndarray::array![[0.0f32, 0.0], [2.0, 2.0], [10.0, 10.0], [12.0, 14.0], [11.0, 12.0]];
    let bank = fit_classwise(
        pts.view(),
        &[0, 0, 1, 1, 1],
        2,
        1,
        &KMeansConfig::new(1, 0),
        BankLocation::Embedding,
    )
    .unwrap();
    assert_eq!(bank.prototype(0), &[1.0, 1.0]);
    assert_eq!(bank.prototype(1), &[11.0, 12.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn results_are_well_formed(
        n in 1usize..40,
        d in 1usize..4,
        k in 1usize..6,
        seed in any::<u64>(),
        values in proptest::collection::vec(-5.0f32..5.0, 160),
    ) {
        prop_assume!(k <= n);
        let pts = Array2::from_shape_fn((n, d), |(i, j)| values[(i * d + j) % values.len()]);
        let r = fit(pts.view(), &KMeansConfig::new(k, seed)).unwrap();
        prop_assert!(r.inertia >= 0.0);
        prop_assert!(r.assignments.iter().all(|&a| a < k));
        for c in 0..k {
            prop_assert!(r.assignments.contains(&c));
        }
        prop_assert!(r.inertia_history.windows(2).all(|w| w[1] <= w[0]));
        // reported inertia matches the returned assignment/centroids
        let recomputed: f64 = (0..n).map(|i| {
            pts.row(i).iter().zip(r.centroids.row(r.assignments[i]).iter())
                .map(|(&x, &c)| (x as f64 - c as f64).powi(2)).sum::<f64>()
        }).sum();
        prop_assert!((recomputed - r.inertia).abs() <= 1e-4 * (1.0 + r.inertia));
    }
}
