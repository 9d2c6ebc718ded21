//! Multi-depth composite features and the explanation maps built from them.
//!
//! For a configuration starting at block `b`, every block from `b` to the encoder
//! output is upsampled to the largest grid, divided by `D_b · ‖u_b‖_F`, and
//! concatenated along channels. Each grid cell of the result is hard-assigned to its
//! nearest prototype; the assignment grid is the explanation map, and the per-class
//! cluster counts give the prediction.

mod upsample;

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use upsample::upsample_bilinear;

use crate::error::{Error, Result};
use crate::kmeans::{derive_seed, fit, splitmix64, KMeansConfig};
use crate::sem_core::{BankLocation, BankMeta, PrototypeBank};
use crate::tensor_store::{read_tensor, write_tensor, ActivationRecord, TensorBlob};

/// Default per-class cap on rows handed to k-means.
pub const DEFAULT_ROW_CAP: usize = 200_000;

/// Channel range one block occupies inside a composite row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSlice {
    pub block_id: u32,
    pub offset: usize,
    pub channels: usize,
}

/// `R' × ΣD_b` composite feature matrix for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeFeature {
    pub rows: Array2<f32>,
    pub height: usize,
    pub width: usize,
    pub depth_from: u32,
    pub slices: Vec<BlockSlice>,
    /// Blocks whose activations were all zero; their slice is left at zero.
    pub zero_norm_blocks: Vec<u32>,
}

impl CompositeFeature {
    pub fn resolution(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let d = self.dim();
        &self.rows.as_slice().expect("standard layout")[r * d..(r + 1) * d]
    }
}

/// Builds the composite feature of `record` from block `depth_from` to its deepest block.
pub fn compose(record: &ActivationRecord, depth_from: u32) -> Result<CompositeFeature> {
    let blocks: Vec<(u32, &ndarray::Array3<f32>)> = record
        .blocks
        .range(depth_from..)
        .map(|(id, a)| (*id, a))
        .collect();
    match blocks.first() {
        Some((id, _)) if *id == depth_from => {}
        _ => {
            return Err(Error::Config(format!(
                "record {} has no activations for block {depth_from}",
                record.sample_id
            )))
        }
    }
    let (height, width, _) = blocks[0].1.dim();
    let total: usize = blocks.iter().map(|(_, a)| a.dim().2).sum();
    let resolution = height * width;
    let mut rows = Array2::<f32>::zeros((resolution, total));
    let mut slices = Vec::with_capacity(blocks.len());
    let mut zero_norm_blocks = Vec::new();
    let mut offset = 0;
    for (id, activations) in blocks {
        let channels = activations.dim().2;
        let up = upsample_bilinear(activations.view(), height, width)?;
        let norm = up
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            let scale = 1.0 / (channels as f64 * norm);
            let flat = up
                .into_shape_with_order((resolution, channels))
                .expect("contiguous upsample output");
            rows.slice_mut(s![.., offset..offset + channels])
                .zip_mut_with(&flat, |dst, &v| *dst = (v as f64 * scale) as f32);
        } else {
            log::warn!(
                "sample {}: block {id} activations are all zero, slice left at zero",
                record.sample_id
            );
            zero_norm_blocks.push(id);
        }
        slices.push(BlockSlice {
            block_id: id,
            offset,
            channels,
        });
        offset += channels;
    }
    Ok(CompositeFeature {
        rows,
        height,
        width,
        depth_from,
        slices,
        zero_norm_blocks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeFitConfig {
    pub depth_from: u32,
    pub k_per_class: usize,
    pub kmeans: KMeansConfig,
    /// Per-class reservoir size; rows beyond it are sub-sampled uniformly.
    pub row_cap: usize,
}

impl CompositeFitConfig {
    pub fn new(depth_from: u32, k_per_class: usize, seed: u64) -> Self {
        Self {
            depth_from,
            k_per_class,
            kmeans: KMeansConfig::new(k_per_class, seed),
            row_cap: DEFAULT_ROW_CAP,
        }
    }
}

/// Uniform fixed-size sample of a row stream (Algorithm R).
struct Reservoir {
    rows: Vec<f32>,
    dim: usize,
    cap: usize,
    seen: usize,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn new(dim: usize, cap: usize, seed: u64) -> Self {
        Self {
            rows: Vec::new(),
            dim,
            cap,
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn offer(&mut self, row: &[f32]) {
        if self.seen < self.cap {
            self.rows.extend_from_slice(row);
        } else {
            let j = self.rng.random_range(0..=self.seen);
            if j < self.cap {
                self.rows[j * self.dim..(j + 1) * self.dim].copy_from_slice(row);
            }
        }
        self.seen += 1;
    }

    fn into_array(self) -> Array2<f32> {
        let n = self.rows.len() / self.dim.max(1);
        Array2::from_shape_vec((n, self.dim), self.rows).expect("whole rows")
    }
}

/// Fits `k_per_class` prototypes per class on the pooled composite rows of that class's
/// training records. `records_of_class(c)` yields class `c`'s records; classes are
/// processed one at a time so only one reservoir is alive.
pub fn fit_composite_bank<F, I>(
    num_classes: usize,
    mut records_of_class: F,
    cfg: &CompositeFitConfig,
) -> Result<PrototypeBank>
where
    F: FnMut(usize) -> Result<I>,
    I: IntoIterator<Item = Result<ActivationRecord>>,
{
    if cfg.k_per_class == 0 || cfg.row_cap == 0 {
        return Err(Error::Config("k_per_class and row_cap must be positive".into()));
    }
    let mut prototypes: Option<Array2<f32>> = None;
    let mut fit_samples = Vec::new();
    for class in 0..num_classes {
        let mut reservoir: Option<Reservoir> = None;
        for record in records_of_class(class)? {
            let record = record?;
            if record.label != class {
                return Err(Error::Validation(format!(
                    "record {} has label {} but was offered for class {class}",
                    record.sample_id, record.label
                )));
            }
            let composite = compose(&record, cfg.depth_from)?;
            let res = reservoir.get_or_insert_with(|| {
                Reservoir::new(
                    composite.dim(),
                    cfg.row_cap,
                    splitmix64(derive_seed(cfg.kmeans.seed, class)),
                )
            });
            if res.dim != composite.dim() {
                return Err(Error::shape(
                    format!("composite dim of record {}", record.sample_id),
                    res.dim,
                    composite.dim(),
                ));
            }
            for r in 0..composite.resolution() {
                res.offer(composite.row(r));
            }
            fit_samples.push(record.sample_id);
        }
        let points = reservoir.map(Reservoir::into_array).unwrap_or_default();
        if points.nrows() < cfg.k_per_class {
            return Err(Error::UndersizedClass {
                class,
                got: points.nrows(),
                needed: cfg.k_per_class,
            });
        }
        let kcfg = KMeansConfig {
            k: cfg.k_per_class,
            seed: derive_seed(cfg.kmeans.seed, class),
            ..cfg.kmeans.clone()
        };
        let centroids = fit(points.view(), &kcfg)?.centroids;
        let dim = centroids.ncols();
        let bank = prototypes
            .get_or_insert_with(|| Array2::zeros((num_classes * cfg.k_per_class, dim)));
        if bank.ncols() != dim {
            return Err(Error::shape(format!("class {class} composite dim"), bank.ncols(), dim));
        }
        bank.slice_mut(s![class * cfg.k_per_class..(class + 1) * cfg.k_per_class, ..])
            .assign(&centroids);
    }
    let prototypes = prototypes.ok_or_else(|| Error::Config("no classes to fit".into()))?;
    fit_samples.sort_unstable();
    PrototypeBank::new(
        prototypes,
        num_classes,
        cfg.k_per_class,
        BankLocation::Composite {
            depth_from: cfg.depth_from,
        },
        BankMeta {
            seed: Some(cfg.kmeans.seed),
            row_cap: Some(cfg.row_cap),
            fit_samples: Some(fit_samples),
        },
    )
}

/// [`fit_composite_bank`] over records held in memory; records are grouped by label.
pub fn fit_composite_bank_from_records(
    records: &[ActivationRecord],
    num_classes: usize,
    cfg: &CompositeFitConfig,
) -> Result<PrototypeBank> {
    fit_composite_bank(
        num_classes,
        |class| {
            Ok(records
                .iter()
                .filter(move |r| r.label == class)
                .cloned()
                .map(Ok))
        },
        cfg,
    )
}

/// Hard assignment of every composite row to its nearest prototype.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplanationMap {
    pub height: usize,
    pub width: usize,
    /// Row-major prototype ids, one per grid cell.
    pub ids: Vec<usize>,
    pub depth_from: u32,
    pub num_prototypes: usize,
    pub num_classes: usize,
    pub k_per_class: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct MapSidecar {
    depth_from: u32,
    #[serde(rename = "K")]
    num_prototypes: usize,
    #[serde(rename = "C")]
    num_classes: usize,
    k_per_class: usize,
    bank_path: String,
}

impl ExplanationMap {
    pub fn get(&self, row: usize, col: usize) -> usize {
        self.ids[row * self.width + col]
    }

    pub fn resolution(&self) -> usize {
        self.height * self.width
    }

    /// Count of cells per prototype; sums to the grid resolution.
    pub fn histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_prototypes];
        for &id in &self.ids {
            hist[id] += 1;
        }
        hist
    }

    pub fn to_array(&self) -> Array2<i64> {
        Array2::from_shape_fn((self.height, self.width), |(r, c)| self.get(r, c) as i64)
    }

    /// Writes `<stem>.npy` (i64 `H' × W'`) and `<stem>.json`; returns the NPY path.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str, bank_path: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let npy = dir.join(format!("{stem}.npy"));
        write_tensor(&TensorBlob::from_i64_array(&self.to_array())?, &npy)?;
        let sidecar = MapSidecar {
            depth_from: self.depth_from,
            num_prototypes: self.num_prototypes,
            num_classes: self.num_classes,
            k_per_class: self.k_per_class,
            bank_path: bank_path.to_string(),
        };
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
        Ok(npy)
    }

    pub fn load(npy_path: impl AsRef<Path>) -> Result<Self> {
        let npy_path = npy_path.as_ref();
        let json_path = npy_path.with_extension("json");
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let sidecar: MapSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", json_path.display())))?;
        let grid = read_tensor(npy_path)?.into_i64_array::<Ix2>()?;
        let (height, width) = grid.dim();
        let ids = grid
            .iter()
            .map(|&v| {
                usize::try_from(v)
                    .ok()
                    .filter(|&v| v < sidecar.num_prototypes)
                    .ok_or_else(|| {
                        Error::Format(format!(
                            "{}: prototype id {v} outside [0, {})",
                            npy_path.display(),
                            sidecar.num_prototypes
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            height,
            width,
            ids,
            depth_from: sidecar.depth_from,
            num_prototypes: sidecar.num_prototypes,
            num_classes: sidecar.num_classes,
            k_per_class: sidecar.k_per_class,
        })
    }
}

/// Assigns every cell of `composite` to its nearest prototype over the whole bank.
pub fn explain(composite: &CompositeFeature, bank: &PrototypeBank) -> Result<ExplanationMap> {
    match bank.location() {
        BankLocation::Composite { depth_from } if depth_from == composite.depth_from => {}
        other => {
            return Err(Error::Config(format!(
                "bank at {other:?} cannot explain composite features from block {}",
                composite.depth_from
            )))
        }
    }
    if bank.dim() != composite.dim() {
        return Err(Error::shape("composite dim vs bank", bank.dim(), composite.dim()));
    }
    let ids = (0..composite.resolution())
        .map(|r| bank.nearest(composite.row(r)).0)
        .collect();
    Ok(ExplanationMap {
        height: composite.height,
        width: composite.width,
        ids,
        depth_from: composite.depth_from,
        num_prototypes: bank.len(),
        num_classes: bank.num_classes(),
        k_per_class: bank.k_per_class(),
    })
}

/// Composes `record` at the bank's depth and explains it.
pub fn explain_record(record: &ActivationRecord, bank: &PrototypeBank) -> Result<ExplanationMap> {
    let depth_from = bank.depth_from().ok_or_else(|| {
        Error::Config(format!(
            "bank at {:?} is not a composite bank",
            bank.location()
        ))
    })?;
    explain(&compose(record, depth_from)?, bank)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountPrediction {
    /// Per-class average cluster count over the class's `k_per_class` window.
    pub y: Vec<f64>,
    /// Class owning the most frequent cluster (the canonical prediction).
    pub class: usize,
    /// `argmax_c y_c`; may differ from `class`.
    pub class_by_mean: usize,
    pub winning_cluster: usize,
    pub histogram: Vec<usize>,
}

/// Count-based prediction from an explanation map built on a class-major bank.
pub fn predict_counts(map: &ExplanationMap) -> Result<CountPrediction> {
    if map.num_prototypes != map.num_classes * map.k_per_class {
        return Err(Error::Config(format!(
            "count prediction needs K = C·K/C, got K={} C={} K/C={}",
            map.num_prototypes, map.num_classes, map.k_per_class
        )));
    }
    let histogram = map.histogram();
    let y: Vec<f64> = histogram
        .chunks_exact(map.k_per_class)
        .map(|w| w.iter().sum::<usize>() as f64 / map.k_per_class as f64)
        .collect();
    let winning_cluster = crate::linalg::argmax(&histogram).expect("K >= 1");
    let class = winning_cluster / map.k_per_class;
    let class_by_mean = crate::linalg::argmax(&y).expect("C >= 1");
    if class != class_by_mean {
        log::debug!(
            "count prediction disagreement: most frequent cluster {winning_cluster} (class {class}) \
             vs highest class mean {class_by_mean}"
        );
    }
    Ok(CountPrediction {
        y,
        class,
        class_by_mean,
        winning_cluster,
        histogram,
    })
}
