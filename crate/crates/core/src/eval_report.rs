//! Prototype/data alignment, accuracy, and report/CSV emission.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::sem_core::PrototypeBank;
use crate::tensor_store::Split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub model: String,
    pub cos_class: f64,
    pub cos_out: f64,
}

fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let na = linalg::dot(a, a).sqrt();
    let nb = linalg::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((linalg::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
    }
}

/// Average cosine between each prototype and the points of its own class (`cos_class`)
/// and of every other class (`cos_out`), averaged over prototypes. Zero vectors count
/// as cosine 0.
pub fn cosine_alignment(
    model: &str,
    bank: &PrototypeBank,
    embeddings: ArrayView2<f32>,
    labels: &[usize],
) -> Result<AlignmentRow> {
    if embeddings.ncols() != bank.dim() {
        return Err(Error::shape("alignment embedding dim", bank.dim(), embeddings.ncols()));
    }
    if embeddings.nrows() != labels.len() {
        return Err(Error::shape("alignment labels", embeddings.nrows(), labels.len()));
    }
    let embeddings = embeddings.as_standard_layout();
    let points: Vec<&[f32]> = embeddings
        .as_slice()
        .expect("standard layout")
        .chunks_exact(bank.dim())
        .collect();
    let zero_points = points
        .iter()
        .filter(|p| p.iter().all(|&v| v == 0.0))
        .count();
    if zero_points > 0 {
        log::warn!("{model}: {zero_points} zero embeddings contribute cosine 0");
    }

    // (class mean, out mean) per prototype, None when that side has no points
    let per_proto: Vec<(Option<f64>, Option<f64>)> = (0..bank.len())
        .into_par_iter()
        .map(|k| {
            let p = bank.prototype(k);
            let owner = bank.class_of()[k];
            let (mut s_in, mut n_in, mut s_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
            for (z, &label) in points.iter().zip(labels) {
                let c = cosine(p, z).unwrap_or(0.0);
                if label == owner {
                    s_in += c;
                    n_in += 1;
                } else {
                    s_out += c;
                    n_out += 1;
                }
            }
            (
                (n_in > 0).then(|| s_in / n_in as f64),
                (n_out > 0).then(|| s_out / n_out as f64),
            )
        })
        .collect();
    if (0..bank.len()).any(|k| bank.prototype(k).iter().all(|&v| v == 0.0)) {
        log::warn!("{model}: zero prototypes contribute cosine 0");
    }
    let mean = |vals: Vec<f64>| {
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    Ok(AlignmentRow {
        model: model.to_string(),
        cos_class: mean(per_proto.iter().filter_map(|p| p.0).collect()),
        cos_out: mean(per_proto.iter().filter_map(|p| p.1).collect()),
    })
}

/// Percentage of `predicted` equal to `labels`.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::shape("accuracy inputs", labels.len(), predicted.len()));
    }
    if labels.is_empty() {
        return Err(Error::Validation("accuracy over an empty split".into()));
    }
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Refuses banks whose recorded fitting samples include anything outside the train split.
pub fn check_split_integrity(model: &str, bank: &PrototypeBank, splits: &[Split]) -> Result<()> {
    let Some(ids) = &bank.meta().fit_samples else {
        return Ok(());
    };
    for &id in ids {
        match splits.get(id) {
            Some(Split::Train) => {}
            Some(Split::Test) => {
                return Err(Error::Integrity(format!(
                    "{model} bank was fitted on test sample {id}"
                )))
            }
            None => {
                return Err(Error::Integrity(format!(
                    "{model} bank references sample {id} outside the dataset"
                )))
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub metric: String,
    pub split: String,
    pub value: f64,
}

/// Machine-readable report: `{dataset, rows: [{model, metric, split, value}]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset: String,
    pub rows: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Report {
    pub fn new(dataset: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, model: &str, metric: &str, split: &str, value: f64) {
        self.rows.push(ReportRow {
            model: model.to_string(),
            metric: metric.to_string(),
            split: split.to_string(),
            value,
        });
    }

    pub fn push_alignment(&mut self, row: &AlignmentRow, split: Split) {
        self.push(&row.model, "cos_class", split.as_str(), row.cos_class);
        self.push(&row.model, "cos_out", split.as_str(), row.cos_out);
    }

    pub fn value(&self, model: &str, metric: &str, split: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.metric == metric && r.split == split)
            .map(|r| r.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let headers = ["model", "metric", "split", "value"];
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    r.metric.clone(),
                    r.split.clone(),
                    format!("{:.4}", r.value),
                ]
            })
            .collect();
        let mut widths = headers.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = format!("dataset: {}\n", self.dataset);
        let line = |out: &mut String, row: [&str; 4]| {
            let _ = writeln!(
                out,
                "{:<w0$}  {:<w1$}  {:<w2$}  {:>w3$}",
                row[0],
                row[1],
                row[2],
                row[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
        };
        line(&mut out, headers);
        for row in &cells {
            line(&mut out, [&row[0], &row[1], &row[2], &row[3]]);
        }
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        for (ext, body) in [("json", self.to_json()), ("txt", self.to_text())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// A bank to include in the projection CSV.
pub struct ProjectionBank<'a> {
    pub model: &'a str,
    pub bank: &'a PrototypeBank,
    /// Also emit each prototype rescaled to the mean embedding norm of its class.
    pub rescale_to_class_norm: bool,
}

/// Writes points and prototypes in a layout ready for an external 2-D projection.
///
/// Header: `id,role,class,dim_0..dim_{D-1}`. Points carry their split as role and their
/// sample index as id; prototypes carry `prototype_<model>` (or
/// `prototype_<model>_rescaled`) and their bank index.
pub fn emit_projection_csv(
    path: impl AsRef<Path>,
    embeddings: ArrayView2<f32>,
    labels: &[usize],
    splits: Option<&[Split]>,
    banks: &[ProjectionBank<'_>],
) -> Result<()> {
    let path = path.as_ref();
    let dim = embeddings.ncols();
    if labels.len() != embeddings.nrows() || splits.is_some_and(|s| s.len() != labels.len()) {
        return Err(Error::shape("projection rows", embeddings.nrows(), labels.len()));
    }
    for b in banks {
        if b.bank.dim() != dim {
            return Err(Error::shape(format!("{} bank dim", b.model), dim, b.bank.dim()));
        }
    }
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(err) => Error::io(path, err),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    };
    let mut writer = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["id".to_string(), "role".to_string(), "class".to_string()];
    header.extend((0..dim).map(|d| format!("dim_{d}")));
    writer.write_record(&header).map_err(io)?;

    let record = |id: usize, role: &str, class: usize, values: &mut dyn Iterator<Item = f32>| {
        let mut row = vec![id.to_string(), role.to_string(), class.to_string()];
        row.extend(values.map(|v| v.to_string()));
        row
    };
    for (i, (z, &label)) in embeddings.outer_iter().zip(labels).enumerate() {
        let role = splits.map_or("point", |s| s[i].as_str());
        writer
            .write_record(record(i, role, label, &mut z.iter().copied()))
            .map_err(io)?;
    }
    for b in banks {
        let role = format!("prototype_{}", b.model);
        for k in 0..b.bank.len() {
            let class = b.bank.class_of()[k];
            writer
                .write_record(record(k, &role, class, &mut b.bank.prototype(k).iter().copied()))
                .map_err(io)?;
        }
        if b.rescale_to_class_norm {
            let role = format!("prototype_{}_rescaled", b.model);
            for k in 0..b.bank.len() {
                let class = b.bank.class_of()[k];
                let norms: Vec<f64> = embeddings
                    .outer_iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == class)
                    .map(|(z, _)| z.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
                    .collect();
                let target = if norms.is_empty() {
                    0.0
                } else {
                    norms.iter().sum::<f64>() / norms.len() as f64
                };
                let p = b.bank.prototype(k);
                let own = linalg::dot(p, p).sqrt();
                let scale = if own > 0.0 { target / own } else { 0.0 };
                writer
                    .write_record(record(
                        k,
                        &role,
                        class,
                        &mut p.iter().map(|&v| (v as f64 * scale) as f32),
                    ))
                    .map_err(io)?;
            }
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
