//! Seeded Lloyd's k-means with k-means++ initialization.
//!
//! Every explanation location clusters through [`fit`]. Distances and centroid
//! updates are accumulated in f64; centroids are returned as f32. The assignment step
//! may run on the rayon pool, but the update step always reduces in point-index order,
//! so parallel and sequential fits are bit-identical.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::sem_core::{BankLocation, BankMeta, PrototypeBank};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyClusterPolicy {
    /// Move the point farthest from its centroid into the empty cluster.
    #[default]
    ReassignFarthest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the relative inertia improvement drops below this.
    pub rel_tol: f64,
    pub empty_cluster_policy: EmptyClusterPolicy,
    /// Independent k-means++ restarts; the lowest-inertia run wins.
    pub n_init: usize,
    /// Run the assignment step on the rayon pool.
    pub parallel: bool,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 300,
            rel_tol: 1e-6,
            empty_cluster_policy: EmptyClusterPolicy::ReassignFarthest,
            n_init: 10,
            parallel: false,
        }
    }

    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn with_n_init(mut self, n_init: usize) -> Self {
        self.n_init = n_init;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config(format!("rel_tol must be > 0, got {}", self.rel_tol)));
        }
        if self.max_iter == 0 || self.n_init == 0 {
            return Err(Error::Config("max_iter and n_init must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Array2<f32>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after each assignment step of the winning run; non-increasing.
    pub inertia_history: Vec<f64>,
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-class seed used by [`fit_classwise`].
pub fn derive_seed(seed: u64, class: usize) -> u64 {
    splitmix64(seed ^ splitmix64(class as u64))
}

pub fn fit(points: ArrayView2<f32>, cfg: &KMeansConfig) -> Result<KMeansResult> {
    cfg.validate()?;
    let (n, d) = points.dim();
    if d == 0 {
        return Err(Error::Validation("points have zero dimensions".into()));
    }
    if n < cfg.k {
        return Err(Error::InsufficientPoints {
            needed: cfg.k,
            got: n,
        });
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("k-means input contains non-finite values".into()));
    }
    let points = points.as_standard_layout();
    let data = points.as_slice().expect("standard layout");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Run> = None;
    for _ in 0..cfg.n_init {
        let run = Lloyd::new(data, d, cfg).run(&mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("n_init >= 1");
    Ok(KMeansResult {
        centroids: Array2::from_shape_vec(
            (cfg.k, d),
            best.centroids.iter().map(|&c| c as f32).collect(),
        )
        .expect("k*d centroids"),
        assignments: best.assignments,
        inertia: best.inertia,
        iterations_run: best.history.len(),
        inertia_history: best.history,
    })
}

struct Run {
    centroids: Vec<f64>,
    assignments: Vec<usize>,
    inertia: f64,
    history: Vec<f64>,
}

struct Lloyd<'a> {
    data: &'a [f32],
    dim: usize,
    n: usize,
    cfg: &'a KMeansConfig,
}

impl<'a> Lloyd<'a> {
    fn new(data: &'a [f32], dim: usize, cfg: &'a KMeansConfig) -> Self {
        Self {
            data,
            dim,
            n: data.len() / dim,
            cfg,
        }
    }

    fn point(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn run(&self, rng: &mut ChaCha8Rng) -> Run {
        let k = self.cfg.k;
        let mut centroids = self.init_plus_plus(rng);
        let (mut assignments, mut dists) = self.assign(&centroids);
        let mut repaired = self.repair_empty(&mut assignments, &mut dists, &mut centroids);
        let mut inertia: f64 = dists.iter().sum();
        let mut history = vec![inertia];

        while history.len() < self.cfg.max_iter && inertia > 0.0 {
            let next_centroids = self.update(&assignments, &centroids);
            let (mut next_assign, mut next_dists) = self.assign(&next_centroids);
            let mut next_centroids = next_centroids;
            let next_repaired =
                self.repair_empty(&mut next_assign, &mut next_dists, &mut next_centroids);
            let next_inertia: f64 = next_dists.iter().sum();
            if next_inertia > inertia {
                // Only reachable through rounding at convergence; keep the better state.
                break;
            }
            let improvement = inertia - next_inertia;
            centroids = next_centroids;
            assignments = next_assign;
            inertia = next_inertia;
            history.push(inertia);
            debug_assert!(history.windows(2).all(|w| w[1] <= w[0]));
            let settled = !repaired && !next_repaired;
            repaired = next_repaired;
            if settled && improvement <= self.cfg.rel_tol * (inertia + improvement) {
                break;
            }
        }
        if inertia > 0.0 {
            let mut polished = assignments.clone();
            if self.hartigan(&mut polished) {
                let means = self.update(&polished, &centroids);
                let polished_inertia: f64 = (0..self.n)
                    .map(|i| linalg::squared_l2_mixed(self.point(i), self.centroid(&means, polished[i])))
                    .sum();
                if polished_inertia < inertia {
                    centroids = means;
                    assignments = polished;
                    inertia = polished_inertia;
                    history.push(inertia);
                }
            }
        }
        debug_assert_eq!(centroids.len(), k * self.dim);
        Run {
            centroids,
            assignments,
            inertia,
            history,
        }
    }

    fn centroid<'c>(&self, centroids: &'c [f64], k: usize) -> &'c [f64] {
        &centroids[k * self.dim..(k + 1) * self.dim]
    }

    /// Hartigan single-point moves on top of a Lloyd fixed point. A point leaves cluster
    /// `a` for `b` when `n_b/(n_b+1)·‖x-c_b‖² < n_a/(n_a-1)·‖x-c_a‖²`, which lowers the
    /// inertia by exactly the difference. Returns whether any point moved.
    fn hartigan(&self, assignments: &mut [usize]) -> bool {
        let k = self.cfg.k;
        if k < 2 {
            return false;
        }
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let mut centroids = self.update(assignments, &vec![0.0; k * self.dim]);
        let mut moved_any = false;
        for _ in 0..self.cfg.max_iter {
            let mut moved = false;
            for i in 0..self.n {
                let from = assignments[i];
                if counts[from] < 2 {
                    continue;
                }
                let x = self.point(i);
                let n_from = counts[from] as f64;
                let remove_gain = n_from / (n_from - 1.0)
                    * linalg::squared_l2_mixed(x, self.centroid(&centroids, from));
                let mut best: Option<(usize, f64)> = None;
                for to in (0..k).filter(|&c| c != from) {
                    let n_to = counts[to] as f64;
                    let add_cost = n_to / (n_to + 1.0)
                        * linalg::squared_l2_mixed(x, self.centroid(&centroids, to));
                    if best.is_none_or(|(_, c)| add_cost < c) {
                        best = Some((to, add_cost));
                    }
                }
                let Some((to, add_cost)) = best else { continue };
                if add_cost < remove_gain * (1.0 - 1e-12) {
                    let (nf, nt) = (counts[from] as f64, counts[to] as f64);
                    for (dim, &v) in x.iter().enumerate() {
                        let v = v as f64;
                        let cf = &mut centroids[from * self.dim + dim];
                        *cf = (*cf * nf - v) / (nf - 1.0);
                        let ct = &mut centroids[to * self.dim + dim];
                        *ct = (*ct * nt + v) / (nt + 1.0);
                    }
                    counts[from] -= 1;
                    counts[to] += 1;
                    assignments[i] = to;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
            moved_any = true;
        }
        moved_any
    }

    /// Uniform index drawn as `⌊u·n⌋`, so repeating every point in place maps each draw
    /// onto a copy of the same point.
    fn uniform_index(&self, rng: &mut ChaCha8Rng) -> usize {
        ((rng.random::<f64>() * self.n as f64) as usize).min(self.n - 1)
    }

    fn init_plus_plus(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let k = self.cfg.k;
        let mut centroids = Vec::with_capacity(k * self.dim);
        let first = self.uniform_index(rng);
        centroids.extend(self.point(first).iter().map(|&v| v as f64));
        let mut min_d2: Vec<f64> = (0..self.n)
            .map(|i| linalg::squared_l2_mixed(self.point(i), &centroids[..self.dim]))
            .collect();

        for c in 1..k {
            let total: f64 = min_d2.iter().sum();
            let chosen = if total > 0.0 {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = None;
                for (i, &w) in min_d2.iter().enumerate() {
                    acc += w;
                    if w > 0.0 && acc > target {
                        pick = Some(i);
                        break;
                    }
                }
                // Rounding can leave target just above the final sum.
                pick.unwrap_or_else(|| min_d2.iter().rposition(|&w| w > 0.0).unwrap())
            } else {
                self.uniform_index(rng)
            };
            centroids.extend(self.point(chosen).iter().map(|&v| v as f64));
            let new_center = &centroids[c * self.dim..(c + 1) * self.dim];
            for (i, m) in min_d2.iter_mut().enumerate() {
                let d2 = linalg::squared_l2_mixed(self.point(i), new_center);
                if d2 < *m {
                    *m = d2;
                }
            }
        }
        centroids
    }

    fn nearest(&self, i: usize, centroids: &[f64]) -> (usize, f64) {
        let p = self.point(i);
        let mut best = (0, f64::INFINITY);
        for (k, c) in centroids.chunks_exact(self.dim).enumerate() {
            let d = linalg::squared_l2_mixed(p, c);
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    fn assign(&self, centroids: &[f64]) -> (Vec<usize>, Vec<f64>) {
        let pairs: Vec<(usize, f64)> = if self.cfg.parallel {
            (0..self.n)
                .into_par_iter()
                .with_min_len(256)
                .map(|i| self.nearest(i, centroids))
                .collect()
        } else {
            (0..self.n).map(|i| self.nearest(i, centroids)).collect()
        };
        pairs.into_iter().unzip()
    }

    /// Fills empty clusters; returns whether anything moved.
    fn repair_empty(
        &self,
        assignments: &mut [usize],
        dists: &mut [f64],
        centroids: &mut [f64],
    ) -> bool {
        let k = self.cfg.k;
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let mut moved = false;
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            let EmptyClusterPolicy::ReassignFarthest = self.cfg.empty_cluster_policy;
            // n >= k guarantees some cluster holds at least two points.
            let donor = (0..self.n)
                .filter(|&i| sizes[assignments[i]] >= 2)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                })
                .expect("a cluster with two or more points exists");
            sizes[assignments[donor]] -= 1;
            sizes[empty] = 1;
            assignments[donor] = empty;
            dists[donor] = 0.0;
            let point = self.point(donor);
            for (c, &v) in centroids[empty * self.dim..(empty + 1) * self.dim]
                .iter_mut()
                .zip(point)
            {
                *c = v as f64;
            }
            moved = true;
        }
        moved
    }

    fn update(&self, assignments: &[usize], previous: &[f64]) -> Vec<f64> {
        let k = self.cfg.k;
        let mut sums = vec![0f64; k * self.dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a * self.dim..(a + 1) * self.dim]
                .iter_mut()
                .zip(self.point(i))
            {
                *s += v as f64;
            }
        }
        let mut out = previous.to_vec();
        for c in 0..k {
            if counts[c] > 0 {
                for (o, s) in out[c * self.dim..(c + 1) * self.dim]
                    .iter_mut()
                    .zip(&sums[c * self.dim..(c + 1) * self.dim])
                {
                    *o = s / counts[c] as f64;
                }
            }
        }
        out
    }
}

/// Fits `k_per_class` prototypes independently on each class's point set and stacks
/// them class-major. `sets[c]` holds class `c`'s points; each class uses the seed
/// `derive_seed(base.seed, c)`.
pub fn fit_class_sets(
    sets: &[Array2<f32>],
    k_per_class: usize,
    base: &KMeansConfig,
    location: BankLocation,
    meta: BankMeta,
) -> Result<PrototypeBank> {
    if sets.is_empty() {
        return Err(Error::Config("no classes to fit".into()));
    }
    if k_per_class == 0 {
        return Err(Error::Config("k_per_class must be at least 1".into()));
    }
    let dim = sets[0].ncols();
    for (class, set) in sets.iter().enumerate() {
        if set.nrows() < k_per_class {
            return Err(Error::UndersizedClass {
                class,
                got: set.nrows(),
                needed: k_per_class,
            });
        }
        if set.ncols() != dim {
            return Err(Error::shape(format!("class {class} point dim"), dim, set.ncols()));
        }
    }
    let fit_one = |(class, set): (usize, &Array2<f32>)| {
        let cfg = KMeansConfig {
            k: k_per_class,
            seed: derive_seed(base.seed, class),
            ..base.clone()
        };
        fit(set.view(), &cfg).map(|r| r.centroids)
    };
    let results: Vec<Result<Array2<f32>>> = if base.parallel {
        sets.par_iter().enumerate().map(fit_one).collect()
    } else {
        sets.iter().enumerate().map(fit_one).collect()
    };
    let mut prototypes = Array2::<f32>::zeros((sets.len() * k_per_class, dim));
    for (class, centroids) in results.into_iter().enumerate() {
        let centroids = centroids?;
        prototypes
            .slice_mut(ndarray::s![class * k_per_class..(class + 1) * k_per_class, ..])
            .assign(&centroids);
    }
    PrototypeBank::new(prototypes, sets.len(), k_per_class, location, meta)
}

/// Class-wise k-means over labelled points (`labels[i]` in `[0, num_classes)`).
pub fn fit_classwise(
    points: ArrayView2<f32>,
    labels: &[usize],
    num_classes: usize,
    k_per_class: usize,
    base: &KMeansConfig,
    location: BankLocation,
) -> Result<PrototypeBank> {
    if labels.len() != points.nrows() {
        return Err(Error::shape("labels", points.nrows(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Validation(format!(
            "label {bad} outside [0, {num_classes})"
        )));
    }
    let sets: Vec<Array2<f32>> = (0..num_classes)
        .map(|c| {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            points.select(ndarray::Axis(0), &rows)
        })
        .collect();
    let meta = BankMeta {
        seed: Some(base.seed),
        ..BankMeta::default()
    };
    fit_class_sets(&sets, k_per_class, base, location, meta)
}
