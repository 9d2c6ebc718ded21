//! Dataset-level fitting, prediction and evaluation shared by the CLI and the tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder_explainer::{
    explain_record, fit_composite_bank, predict_counts, CompositeFitConfig, DEFAULT_ROW_CAP,
};
use crate::error::{Error, Result};
use crate::eval_report::{accuracy, check_split_integrity, cosine_alignment, Report};
use crate::kmeans::KMeansConfig;
use crate::kmex::{fit_kmex, KmexModel};
use crate::linalg;
use crate::sem_core::{avg_pool_grid, classifier_as_bank, classify, BankMeta, PrototypeBank};
use crate::tensor_store::{Dataset, DatasetManifest, Split};

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Shallowest block of the deepest-to-shallowest composite family.
    pub depth_from: u32,
    pub k_per_class: usize,
    pub seed: u64,
    pub n_init: usize,
    pub row_cap: usize,
    pub parallel: bool,
}

impl FitConfig {
    pub fn new(depth_from: u32, k_per_class: usize, seed: u64) -> Self {
        Self {
            depth_from,
            k_per_class,
            seed,
            n_init: KMeansConfig::new(1, 0).n_init,
            row_cap: DEFAULT_ROW_CAP,
            parallel: true,
        }
    }

    fn kmeans(&self) -> KMeansConfig {
        KMeansConfig::new(self.k_per_class, self.seed)
            .with_n_init(self.n_init)
            .with_parallel(self.parallel)
    }
}

/// Model name for the composite family starting at `depth_from`, e.g. `b234` for blocks
/// 2, 3 and 4, or `b4` for the encoder output alone.
pub fn composite_model_name(manifest: &DatasetManifest, depth_from: u32) -> Result<String> {
    let ids: Vec<String> = manifest
        .blocks_from(depth_from)?
        .iter()
        .map(|b| b.id.to_string())
        .collect();
    let sep = if ids.iter().all(|s| s.len() == 1) { "" } else { "_" };
    Ok(format!("b{}", ids.join(sep)))
}

/// Every bank fitted for a dataset.
#[derive(Debug, Clone)]
pub struct Banks {
    pub classifier: PrototypeBank,
    pub kmex: PrototypeBank,
    /// Composite banks keyed by their starting block.
    pub composite: BTreeMap<u32, PrototypeBank>,
}

impl Banks {
    pub fn composite_stem(depth: u32) -> String {
        format!("composite_d{depth}")
    }

    pub fn composite_path(dir: impl AsRef<Path>, depth: u32) -> PathBuf {
        dir.as_ref().join(format!("{}.npy", Self::composite_stem(depth)))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.classifier.save(dir, "classifier")?;
        self.kmex.save(dir, "kmex")?;
        for (depth, bank) in &self.composite {
            bank.save(dir, &Self::composite_stem(*depth))?;
        }
        Ok(())
    }

    /// Loads `classifier`, `kmex` and every `composite_d<N>` bank found in `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let classifier = PrototypeBank::load(dir.join("classifier.npy"))?;
        let kmex = PrototypeBank::load(dir.join("kmex.npy"))?;
        let mut composite = BTreeMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(depth) = name
                .strip_prefix("composite_d")
                .and_then(|r| r.strip_suffix(".npy"))
                .and_then(|d| d.parse::<u32>().ok())
            else {
                continue;
            };
            let bank = PrototypeBank::load(entry.path())?;
            if bank.depth_from() != Some(depth) {
                return Err(Error::Format(format!(
                    "{name} holds a bank at {:?}",
                    bank.location()
                )));
            }
            composite.insert(depth, bank);
        }
        Ok(Self {
            classifier,
            kmex,
            composite,
        })
    }

    pub fn composite_bank(&self, depth: u32) -> Result<&PrototypeBank> {
        self.composite.get(&depth).ok_or_else(|| {
            Error::Config(format!("no composite bank fitted from block {depth}"))
        })
    }
}

/// Fits the KMEx bank and one composite bank per block from `depth_from` to the encoder
/// output, all on the train split only.
pub fn fit_banks(dataset: &Dataset, cfg: &FitConfig) -> Result<Banks> {
    let manifest = dataset.manifest();
    let depths: Vec<u32> = manifest
        .blocks_from(cfg.depth_from)?
        .iter()
        .map(|b| b.id)
        .collect();
    let train = dataset.sample_ids(Some(Split::Train));
    if train.is_empty() {
        return Err(Error::Validation("dataset has no train samples".into()));
    }
    let num_classes = dataset.num_classes();
    let kmeans = cfg.kmeans();

    let train_labels: Vec<usize> = train.iter().map(|&i| dataset.labels()[i]).collect();
    let train_embeddings = dataset.embeddings().select(ndarray::Axis(0), &train);
    log::info!("fitting kmex on {} train embeddings", train.len());
    let kmex = fit_kmex(
        train_embeddings.view(),
        &train_labels,
        num_classes,
        cfg.k_per_class,
        &kmeans,
    )?
    .into_bank()
    .with_meta(BankMeta {
        seed: Some(cfg.seed),
        row_cap: None,
        fit_samples: Some(train.clone()),
    });

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for &i in &train {
        by_class[dataset.labels()[i]].push(i);
    }
    let mut composite = BTreeMap::new();
    for &depth in &depths {
        log::info!(
            "fitting composite bank {}",
            composite_model_name(manifest, depth)?
        );
        let ccfg = CompositeFitConfig {
            depth_from: depth,
            k_per_class: cfg.k_per_class,
            kmeans: kmeans.clone(),
            row_cap: cfg.row_cap,
        };
        let by_class = &by_class;
        let bank = fit_composite_bank(
            num_classes,
            |class| Ok(by_class[class].iter().map(move |&id| dataset.record(id, depth))),
            &ccfg,
        )?;
        composite.insert(depth, bank);
    }
    Ok(Banks {
        classifier: classifier_as_bank(dataset.classifier()),
        kmex,
        composite,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub sample_id: usize,
    pub label: usize,
    pub split: Split,
    /// `argmax classify(avg_pool(h))`.
    pub cnn: usize,
    pub kmex: usize,
    /// Composite model name → count-based prediction.
    pub composite: BTreeMap<String, usize>,
    /// `max |avg_pool(h) - z|` against the exported embedding.
    pub pool_deviation: f32,
}

/// Predicts every sample of `split` (or all samples) with every model in `banks`.
pub fn predict_dataset(
    dataset: &Dataset,
    banks: &Banks,
    split: Option<Split>,
) -> Result<Vec<SamplePrediction>> {
    let manifest = dataset.manifest();
    let shallowest = banks
        .composite
        .keys()
        .next()
        .copied()
        .unwrap_or(manifest.deepest_block().id);
    let names: BTreeMap<u32, String> = banks
        .composite
        .keys()
        .map(|&d| composite_model_name(manifest, d).map(|n| (d, n)))
        .collect::<Result<_>>()?;
    let kmex = KmexModel::new(banks.kmex.clone())?;
    let clf = dataset.classifier();
    dataset
        .sample_ids(split)
        .into_par_iter()
        .map(|id| {
            let record = dataset.record(id, shallowest)?;
            let (_, h) = record.encoder_output().expect("at least one block");
            let pooled = avg_pool_grid(h.view())?;
            let logits = classify(pooled.view(), clf)?;
            let cnn = linalg::argmax(logits.as_slice().expect("contiguous"))
                .ok_or_else(|| Error::Validation(format!("sample {id}: non-finite logits")))?;
            let pool_deviation = pooled
                .iter()
                .zip(record.embedding.iter())
                .fold(0f32, |m, (a, b)| m.max((a - b).abs()));
            let kmex = kmex
                .predict(record.embedding.as_slice().expect("contiguous"))?
                .class;
            let mut composite = BTreeMap::new();
            for (depth, bank) in &banks.composite {
                let map = explain_record(&record, bank)?;
                composite.insert(names[depth].clone(), predict_counts(&map)?.class);
            }
            Ok(SamplePrediction {
                sample_id: id,
                label: record.label,
                split: record.split,
                cnn,
                kmex,
                composite,
                pool_deviation,
            })
        })
        .collect()
}

/// Accuracy per model and split, plus prototype/embedding alignment on the train split.
pub fn evaluate(
    dataset: &Dataset,
    banks: &Banks,
    predictions: &[SamplePrediction],
) -> Result<Report> {
    let manifest = dataset.manifest();
    let splits = dataset.splits();
    check_split_integrity("kmex", &banks.kmex, splits)?;
    for (depth, bank) in &banks.composite {
        check_split_integrity(&composite_model_name(manifest, *depth)?, bank, splits)?;
    }

    let mut report = Report::new(manifest.dataset.clone());
    report.notes.push(format!("k_per_class={}", banks.kmex.k_per_class()));
    if let Some(seed) = banks.kmex.meta().seed {
        report.notes.push(format!("seed={seed}"));
    }
    for split in [Split::Train, Split::Test] {
        let subset: Vec<&SamplePrediction> =
            predictions.iter().filter(|p| p.split == split).collect();
        if subset.is_empty() {
            continue;
        }
        let labels: Vec<usize> = subset.iter().map(|p| p.label).collect();
        let column = |f: &dyn Fn(&SamplePrediction) -> usize| -> Vec<usize> {
            subset.iter().map(|p| f(p)).collect()
        };
        report.push("cnn", "accuracy", split.as_str(), accuracy(&column(&|p| p.cnn), &labels)?);
        report.push("kmex", "accuracy", split.as_str(), accuracy(&column(&|p| p.kmex), &labels)?);
        let names: Vec<String> = subset[0].composite.keys().cloned().collect();
        for name in names {
            let predicted = column(&|p| p.composite[&name]);
            report.push(&name, "accuracy", split.as_str(), accuracy(&predicted, &labels)?);
        }
        let deviation = subset.iter().map(|p| p.pool_deviation).fold(0f32, f32::max);
        report.push("cnn", "pool_deviation_max", split.as_str(), deviation as f64);
    }

    let train = dataset.sample_ids(Some(Split::Train));
    if !train.is_empty() {
        let embeddings = dataset.embeddings().select(ndarray::Axis(0), &train);
        let labels: Vec<usize> = train.iter().map(|&i| dataset.labels()[i]).collect();
        for (model, bank) in [("cnn", &banks.classifier), ("kmex", &banks.kmex)] {
            let row = cosine_alignment(model, bank, embeddings.view(), &labels)?;
            report.push_alignment(&row, Split::Train);
        }
        report
            .notes
            .push("cosine alignment is measured against train-split embeddings".into());
    }
    Ok(report)
}
