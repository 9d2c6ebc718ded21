//! The frozen CNN head (average pooling followed by a bias-free linear classifier) and
//! its reading as a prototype model.
//!
//! Because pooling and the dot product commute, `classify(avg_pool(h))` equals the
//! average over spatial positions of the per-position scores `h_r · c_j`. The latter is
//! a similarity to the classifier columns followed by average pooling, so the columns
//! act as `C` prototypes. [`sem_forward`] computes that second route independently so the
//! identity can be checked numerically.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView3, Ix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor_store::{read_tensor, write_tensor, TensorBlob};

/// Bias-free linear classifier stored as a `D × C` matrix whose columns are `c_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    weights: Array2<f32>,
    /// Column-major copy so each `c_j` is a contiguous slice.
    columns: Array2<f32>,
}

impl LinearClassifier {
    /// Rejects non-finite entries and zero columns (attribution divides by `‖c_j‖²`).
    pub fn new(weights: Array2<f32>) -> Result<Self> {
        let (dim, classes) = weights.dim();
        if dim == 0 || classes == 0 {
            return Err(Error::Validation(format!(
                "classifier must be non-empty, got {dim}x{classes}"
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Validation("classifier has non-finite weights".into()));
        }
        let columns = weights.t().as_standard_layout().into_owned();
        if let Some(j) = columns
            .outer_iter()
            .position(|c| c.iter().all(|&w| w == 0.0))
        {
            return Err(Error::Validation(format!("classifier column {j} is the zero vector")));
        }
        Ok(Self { weights, columns })
    }

    pub fn weights(&self) -> &Array2<f32> {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    /// Column `c_j` as a contiguous slice.
    pub fn column(&self, j: usize) -> &[f32] {
        let start = j * self.dim();
        &self.columns.as_slice().expect("standard layout")[start..start + self.dim()]
    }

    pub fn squared_norm(&self, j: usize) -> f64 {
        let c = self.column(j);
        linalg::dot(c, c)
    }
}

/// Mean over the rows of `h` (`R × D`).
pub fn avg_pool(h: ArrayView2<f32>) -> Result<Array1<f32>> {
    let (rows, dim) = h.dim();
    if rows == 0 {
        return Err(Error::shape("avg_pool rows", ">= 1", rows));
    }
    let mut acc = vec![0f64; dim];
    for row in h.outer_iter() {
        for (a, &v) in acc.iter_mut().zip(row.iter()) {
            *a += v as f64;
        }
    }
    Ok(acc.into_iter().map(|s| (s / rows as f64) as f32).collect())
}

/// Pools an `H × W × D` activation grid.
pub fn avg_pool_grid(h: ArrayView3<f32>) -> Result<Array1<f32>> {
    let (height, width, dim) = h.dim();
    let flat = h
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((height * width, dim))
        .map_err(|e| Error::Validation(e.to_string()))?;
    avg_pool(flat.view())
}

/// `y_j = z · c_j`.
pub fn classify(z: ArrayView1<f32>, clf: &LinearClassifier) -> Result<Array1<f32>> {
    if z.len() != clf.dim() {
        return Err(Error::shape("classify input", clf.dim(), z.len()));
    }
    let z = z.as_standard_layout();
    let z = z.as_slice().expect("standard layout");
    Ok((0..clf.num_classes())
        .map(|j| linalg::dot(z, clf.column(j)) as f32)
        .collect())
}

/// Prototype-model forward pass: per-position dot-product similarity to every column,
/// then average pooling of the similarity scores.
pub fn sem_forward(h: ArrayView2<f32>, clf: &LinearClassifier) -> Result<Array1<f32>> {
    let (rows, dim) = h.dim();
    if dim != clf.dim() {
        return Err(Error::shape("sem_forward feature dim", clf.dim(), dim));
    }
    if rows == 0 {
        return Err(Error::shape("sem_forward rows", ">= 1", rows));
    }
    let h = h.as_standard_layout();
    let mut scores = vec![0f64; clf.num_classes()];
    for row in h.as_slice().expect("standard layout").chunks_exact(dim) {
        for (j, s) in scores.iter_mut().enumerate() {
            *s += linalg::dot(row, clf.column(j));
        }
    }
    Ok(scores
        .into_iter()
        .map(|s| (s / rows as f64) as f32)
        .collect())
}

/// Where a prototype bank lives in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "location")]
pub enum BankLocation {
    /// The classifier columns themselves.
    ClassifierWeights,
    /// Pooled encoder output `z`.
    Embedding,
    /// Composite multi-depth features built from `depth_from` down to the encoder output.
    Composite { depth_from: u32 },
}

/// Fitting provenance kept next to a bank.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Per-class cap on the number of rows handed to k-means.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_cap: Option<usize>,
    /// Sample ids the bank was fitted on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_samples: Option<Vec<usize>>,
}

/// `K` prototypes, `k_per_class` per class, stored class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    prototypes: Array2<f32>,
    class_of: Vec<usize>,
    num_classes: usize,
    k_per_class: usize,
    location: BankLocation,
    meta: BankMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankSidecar {
    #[serde(flatten)]
    location: BankLocation,
    num_classes: usize,
    k_per_class: usize,
    dim: usize,
    class_of_cluster: Vec<usize>,
    #[serde(flatten)]
    meta: BankMeta,
}

impl PrototypeBank {
    /// `prototypes` must hold `num_classes * k_per_class` rows, class 0's first.
    pub fn new(
        prototypes: Array2<f32>,
        num_classes: usize,
        k_per_class: usize,
        location: BankLocation,
        meta: BankMeta,
    ) -> Result<Self> {
        if num_classes == 0 || k_per_class == 0 {
            return Err(Error::Config(format!(
                "bank needs positive class and per-class counts, got C={num_classes}, K/C={k_per_class}"
            )));
        }
        if location == BankLocation::ClassifierWeights && k_per_class != 1 {
            return Err(Error::Config("a classifier-weight bank has one prototype per class".into()));
        }
        let expected = num_classes * k_per_class;
        if prototypes.nrows() != expected {
            return Err(Error::shape("prototype count", expected, prototypes.nrows()));
        }
        if prototypes.ncols() == 0 {
            return Err(Error::shape("prototype dim", ">= 1", 0));
        }
        if prototypes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("prototype bank has non-finite entries".into()));
        }
        let class_of = (0..expected).map(|k| k / k_per_class).collect();
        Ok(Self {
            prototypes: prototypes.as_standard_layout().into_owned(),
            class_of,
            num_classes,
            k_per_class,
            location,
            meta,
        })
    }

    pub fn prototypes(&self) -> &Array2<f32> {
        &self.prototypes
    }

    pub fn prototype(&self, k: usize) -> &[f32] {
        let d = self.dim();
        &self.prototypes.as_slice().expect("standard layout")[k * d..(k + 1) * d]
    }

    /// Row-major prototype storage.
    pub fn as_slice(&self) -> &[f32] {
        self.prototypes.as_slice().expect("standard layout")
    }

    pub fn class_of(&self) -> &[usize] {
        &self.class_of
    }

    pub fn len(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn k_per_class(&self) -> usize {
        self.k_per_class
    }

    pub fn location(&self) -> BankLocation {
        self.location
    }

    pub fn meta(&self) -> &BankMeta {
        &self.meta
    }

    pub fn with_meta(mut self, meta: BankMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn depth_from(&self) -> Option<u32> {
        match self.location {
            BankLocation::Composite { depth_from } => Some(depth_from),
            _ => None,
        }
    }

    /// Index range of class `c`'s prototypes.
    pub fn class_window(&self, c: usize) -> std::ops::Range<usize> {
        c * self.k_per_class..(c + 1) * self.k_per_class
    }

    /// Nearest prototype by ℓ2 distance, ties toward the lowest index.
    pub fn nearest(&self, point: &[f32]) -> (usize, f64) {
        linalg::nearest(point, self.as_slice(), self.dim())
    }

    /// Writes `<stem>.npy` (prototypes) and `<stem>.json` (sidecar); returns the NPY path.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let npy = dir.join(format!("{stem}.npy"));
        write_tensor(&TensorBlob::from_f32_array(&self.prototypes)?, &npy)?;
        let sidecar = BankSidecar {
            location: self.location,
            num_classes: self.num_classes,
            k_per_class: self.k_per_class,
            dim: self.dim(),
            class_of_cluster: self.class_of.clone(),
            meta: self.meta.clone(),
        };
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
        Ok(npy)
    }

    /// Loads a bank from its NPY path; the sidecar is the same path with a `.json` extension.
    pub fn load(npy_path: impl AsRef<Path>) -> Result<Self> {
        let npy_path = npy_path.as_ref();
        let json_path = npy_path.with_extension("json");
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let sidecar: BankSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", json_path.display())))?;
        let prototypes = read_tensor(npy_path)?.into_f32_array::<Ix2>()?;
        if prototypes.ncols() != sidecar.dim {
            return Err(Error::shape("bank sidecar dim", sidecar.dim, prototypes.ncols()));
        }
        let bank = Self::new(
            prototypes,
            sidecar.num_classes,
            sidecar.k_per_class,
            sidecar.location,
            sidecar.meta,
        )?;
        if bank.class_of != sidecar.class_of_cluster {
            return Err(Error::Format(format!(
                "{}: class_of_cluster is not class-major blocked",
                json_path.display()
            )));
        }
        Ok(bank)
    }
}

/// Views the classifier columns as a `C`-prototype bank (row `j` is `c_j`).
pub fn classifier_as_bank(clf: &LinearClassifier) -> PrototypeBank {
    PrototypeBank::new(
        clf.columns.clone(),
        clf.num_classes(),
        1,
        BankLocation::ClassifierWeights,
        BankMeta::default(),
    )
    .expect("a valid classifier yields a valid bank")
}

/// Inverse of [`classifier_as_bank`].
pub fn bank_as_classifier(bank: &PrototypeBank) -> Result<LinearClassifier> {
    if bank.location() != BankLocation::ClassifierWeights {
        return Err(Error::Config(format!(
            "bank at {:?} is not a classifier-weight bank",
            bank.location()
        )));
    }
    LinearClassifier::new(bank.prototypes().t().to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn clf_3x2() -> LinearClassifier {
        LinearClassifier::new(array![[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]).unwrap()
    }

    #[test]
    fn avg_pool_examples() {
        assert_eq!(avg_pool(array![[1.0, 2.0], [3.0, 4.0]].view()).unwrap(), array![2.0, 3.0]);
        assert_eq!(avg_pool(array![[7.5, -1.0]].view()).unwrap(), array![7.5, -1.0]);
        let constant = Array2::from_shape_fn((5, 3), |(_, d)| d as f32 + 0.25);
        assert_eq!(avg_pool(constant.view()).unwrap(), array![0.25, 1.25, 2.25]);
        assert!(avg_pool(Array2::<f32>::zeros((0, 3)).view()).is_err());
    }

    #[test]
    fn classify_examples() {
        let clf = LinearClassifier::new(array![[2.0, 0.0], [0.0, 3.0]]).unwrap();
        // z = c_0 / ‖c_0‖² with orthogonal columns
        let y = classify(array![0.5, 0.0].view(), &clf).unwrap();
        assert_eq!(y, array![1.0, 0.0]);
        assert_eq!(classify(array![0.0, 0.0].view(), &clf).unwrap(), array![0.0, 0.0]);
        assert!(classify(array![1.0].view(), &clf).is_err());
    }

    #[test]
    fn single_row_paths_agree_exactly() {
        let clf = clf_3x2();
        let h = array![[0.3f32, -1.7, 2.25]];
        let pooled = classify(avg_pool(h.view()).unwrap().view(), &clf).unwrap();
        assert_eq!(sem_forward(h.view(), &clf).unwrap(), pooled);
    }

    #[test]
    fn rejects_zero_column_and_nan() {
        assert!(LinearClassifier::new(array![[1.0, 0.0], [2.0, 0.0]]).is_err());
        assert!(LinearClassifier::new(array![[1.0, f32::NAN]]).is_err());
    }

    #[test]
    fn classifier_bank_rows_are_columns() {
        let clf = clf_3x2();
        let bank = classifier_as_bank(&clf);
        assert_eq!(bank.len(), 2);
        assert_eq!(bank.class_of(), &[0, 1]);
        assert_eq!(bank.prototype(1), &[0.0, 2.0, 1.0]);
        let back = bank_as_classifier(&bank).unwrap();
        assert_eq!(back, clf);
        assert_eq!(classifier_as_bank(&back), bank);
    }

    #[test]
    fn bank_requires_class_major_size() {
        let p = Array2::<f32>::zeros((5, 2));
        assert!(PrototypeBank::new(p, 2, 2, BankLocation::Embedding, BankMeta::default()).is_err());
        let p = Array2::<f32>::zeros((6, 2));
        let bank =
            PrototypeBank::new(p, 3, 2, BankLocation::Embedding, BankMeta::default()).unwrap();
        assert_eq!(bank.class_of(), &[0, 0, 1, 1, 2, 2]);
        assert_eq!(bank.class_window(2), 4..6);
    }

    #[test]
    fn bank_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bank = PrototypeBank::new(
            array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]],
            2,
            2,
            BankLocation::Composite { depth_from: 3 },
            BankMeta {
                seed: Some(9),
                row_cap: Some(100),
                fit_samples: Some(vec![0, 2, 5]),
            },
        )
        .unwrap();
        let path = bank.save(dir.path(), "bank").unwrap();
        let loaded = PrototypeBank::load(&path).unwrap();
        assert_eq!(loaded, bank);
        let json = std::fs::read_to_string(dir.path().join("bank.json")).unwrap();
        assert!(json.contains("\"class_of_cluster\""));
        assert!(json.contains("\"location\": \"composite\""));
    }
}
