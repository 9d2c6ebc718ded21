//! Nearest-prototype classifier over pooled embeddings, replacing the linear head.
//!
//! Prototypes are class-wise k-means centroids of the training embeddings. The
//! similarity is `exp(-‖z - p_k‖²)` and the prediction is the class owning the most
//! similar prototype.

use ndarray::ArrayView2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kmeans::{fit_classwise, KMeansConfig};
use crate::linalg;
use crate::sem_core::{BankLocation, PrototypeBank};

#[derive(Debug, Clone, PartialEq)]
pub struct KmexModel {
    bank: PrototypeBank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmexPrediction {
    pub class: usize,
    pub one_hot: Vec<f32>,
    pub winning_prototype: usize,
}

impl KmexModel {
    pub fn new(bank: PrototypeBank) -> Result<Self> {
        if bank.location() != BankLocation::Embedding {
            return Err(Error::Config(format!(
                "KMEx needs an embedding bank, got {:?}",
                bank.location()
            )));
        }
        Ok(Self { bank })
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    pub fn into_bank(self) -> PrototypeBank {
        self.bank
    }

    pub fn num_classes(&self) -> usize {
        self.bank.num_classes()
    }

    pub fn predict(&self, z: &[f32]) -> Result<KmexPrediction> {
        predict(z, self)
    }

    /// Predicts every row of `embeddings` in parallel.
    pub fn predict_batch(&self, embeddings: ArrayView2<f32>) -> Result<Vec<KmexPrediction>> {
        let embeddings = embeddings.as_standard_layout();
        embeddings
            .as_slice()
            .expect("standard layout")
            .par_chunks(embeddings.ncols().max(1))
            .map(|z| self.predict(z))
            .collect()
    }
}

/// Fits `k_per_class` prototypes per class on the training embeddings.
pub fn fit_kmex(
    embeddings: ArrayView2<f32>,
    labels: &[usize],
    num_classes: usize,
    k_per_class: usize,
    cfg: &KMeansConfig,
) -> Result<KmexModel> {
    let bank = fit_classwise(
        embeddings,
        labels,
        num_classes,
        k_per_class,
        cfg,
        BankLocation::Embedding,
    )?;
    KmexModel::new(bank)
}

fn check_dim(z: &[f32], bank: &PrototypeBank) -> Result<()> {
    if z.len() != bank.dim() {
        return Err(Error::shape("embedding dim", bank.dim(), z.len()));
    }
    Ok(())
}

/// `‖z - p_k‖²` for every prototype, in f64.
pub fn squared_distances(z: &[f32], bank: &PrototypeBank) -> Result<Vec<f64>> {
    check_dim(z, bank)?;
    Ok((0..bank.len())
        .map(|k| linalg::squared_l2(z, bank.prototype(k)))
        .collect())
}

/// `exp(-‖z - p_k‖²)` per prototype. Values lie in `[0, 1]`; far prototypes underflow to 0.
pub fn similarity(z: &[f32], bank: &PrototypeBank) -> Result<Vec<f32>> {
    Ok(squared_distances(z, bank)?
        .into_iter()
        .map(|d| (-d).exp() as f32)
        .collect())
}

/// Most similar prototype. Similarity ties (including underflow to 0) are ranked by the
/// underlying distance, then by the lowest prototype index.
pub fn predict(z: &[f32], model: &KmexModel) -> Result<KmexPrediction> {
    let bank = model.bank();
    let distances = squared_distances(z, bank)?;
    let mut best = 0;
    let mut best_sim = (-distances[0]).exp();
    for (k, &d) in distances.iter().enumerate().skip(1) {
        let sim = (-d).exp();
        if sim > best_sim || (sim == best_sim && d < distances[best]) {
            best = k;
            best_sim = sim;
        }
    }
    let class = bank.class_of()[best];
    let mut one_hot = vec![0.0; bank.num_classes()];
    one_hot[class] = 1.0;
    Ok(KmexPrediction {
        class,
        one_hot,
        winning_prototype: best,
    })
}
