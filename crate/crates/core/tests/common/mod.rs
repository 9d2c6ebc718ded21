//! Independent oracles shared by the integration tests. Nothing here calls into the
//! code paths it is used to check.
#![allow(dead_code)]

use rand::Rng;

/// Exact k-means optimum by enumerating every assignment of `points` to `k` non-empty
/// clusters. Exponential; only for n ≤ 10, k ≤ 3.
pub fn exhaustive_kmeans_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    assert!(n <= 12 && k <= 4 && k <= n);
    let d = points[0].len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0f64; d]; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        if counts.iter().all(|&c| c > 0) {
            let sse: f64 = points
                .iter()
                .zip(&labels)
                .map(|(p, &l)| {
                    p.iter()
                        .zip(&sums[l])
                        .map(|(v, s)| (v - s / counts[l] as f64).powi(2))
                        .sum::<f64>()
                })
                .sum();
            best = best.min(sse);
        }
        // next assignment in base k
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// Brute-force nearest row, ties toward the lowest index.
pub fn brute_nearest(point: &[f32], rows: &[Vec<f32>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, r) in rows.iter().enumerate() {
        let mut d = 0f64;
        for (a, b) in point.iter().zip(r) {
            let t = *a as f64 - *b as f64;
            d += t * t;
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Group-by mean: every cell replaced by the mean of all cells sharing its id.
pub fn group_mean(values: &[f64], ids: &[usize]) -> Vec<f64> {
    use std::collections::HashMap;
    let mut acc: HashMap<usize, (f64, usize)> = HashMap::new();
    for (&v, &id) in values.iter().zip(ids) {
        let e = acc.entry(id).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    ids.iter()
        .map(|id| {
            let (s, c) = acc[id];
            s / c as f64
        })
        .collect()
}

/// Half-pixel bilinear sampling of a single-channel `h × w` grid at `(th, tw)`, written
/// directly from the sampling formula.
pub fn bilinear_reference(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let coord = |i: usize, n_src: usize, n_dst: usize| {
        let x = ((i as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).max(0.0);
        let x0 = (x.floor() as usize).min(n_src - 1);
        let x1 = (x0 + 1).min(n_src - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = Vec::with_capacity(th * tw);
    for i in 0..th {
        let (y0, y1, fy) = coord(i, h, th);
        for j in 0..tw {
            let (x0, x1, fx) = coord(j, w, tw);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

pub fn random_points<R: Rng>(rng: &mut R, n: usize, d: usize, spread: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-spread..spread)).collect())
        .collect()
}
