//! Dataset manifests and streaming access to per-sample activations.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Ix1, Ix2, Ix3};
use serde::{Deserialize, Serialize};

use super::npy::NpyFile;
use super::Dtype;
use crate::error::{Error, Result};
use crate::sem_core::LinearClassifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn code(self) -> i64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub id: u32,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub path: String,
}

impl BlockEntry {
    pub fn resolution(&self) -> usize {
        self.h * self.w
    }
}

/// The JSON manifest describing one exported dataset.
///
/// Paths are resolved relative to the manifest's own directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset: String,
    pub num_classes: usize,
    pub embedding_dim: usize,
    pub blocks: Vec<BlockEntry>,
    pub embeddings: String,
    pub classifier: String,
    pub labels: String,
    pub split: String,
    /// Optional per-sample input images, used only for rendering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<Vec<String>>,
    /// How the exporter handled the classifier bias (always "dropped" for now).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
    /// Where block activations were tapped, e.g. "post_relu".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_tap: Option<String>,
    #[serde(skip)]
    pub(crate) base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir.join(relative)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn block_ids(&self) -> Vec<u32> {
        self.blocks.iter().map(|b| b.id).collect()
    }

    pub fn deepest_block(&self) -> &BlockEntry {
        self.blocks.last().expect("validated manifests have blocks")
    }

    /// Blocks from `depth_from` to the deepest one, in ascending depth.
    pub fn blocks_from(&self, depth_from: u32) -> Result<&[BlockEntry]> {
        let start = self
            .blocks
            .iter()
            .position(|b| b.id == depth_from)
            .ok_or_else(|| {
                Error::Config(format!(
                    "depth {depth_from} is not a block of this manifest (blocks: {:?})",
                    self.block_ids()
                ))
            })?;
        Ok(&self.blocks[start..])
    }

    /// Structural checks that need no file access.
    pub fn validate_structure(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Validation("num_classes must be positive".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Validation("embedding_dim must be positive".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Validation("manifest lists no blocks".into()));
        }
        for block in &self.blocks {
            if block.h == 0 || block.w == 0 || block.c == 0 {
                return Err(Error::Validation(format!(
                    "block {} has a zero dimension ({}x{}x{})",
                    block.id, block.h, block.w, block.c
                )));
            }
        }
        for pair in self.blocks.windows(2) {
            if pair[1].id <= pair[0].id {
                return Err(Error::Validation(format!(
                    "block ids must increase with depth, got {} after {}",
                    pair[1].id, pair[0].id
                )));
            }
            if pair[1].resolution() > pair[0].resolution() {
                return Err(Error::Validation(format!(
                    "block {} ({}x{}) is larger than shallower block {} ({}x{})",
                    pair[1].id, pair[1].h, pair[1].w, pair[0].id, pair[0].h, pair[0].w
                )));
            }
        }
        let deepest = self.deepest_block();
        if deepest.c != self.embedding_dim {
            return Err(Error::Validation(format!(
                "deepest block {} has {} channels but embedding_dim is {}",
                deepest.id, deepest.c, self.embedding_dim
            )));
        }
        Ok(())
    }

    /// Writes the manifest as pretty JSON.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Parses a manifest file and runs the structural checks.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = manifest.with_base_dir(base);
    manifest.validate_structure()?;
    Ok(manifest)
}

/// One sample's activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub sample_id: usize,
    pub label: usize,
    pub split: Split,
    pub embedding: Array1<f32>,
    /// Block id → (H_b, W_b, D_b) activations.
    pub blocks: BTreeMap<u32, Array3<f32>>,
}

impl ActivationRecord {
    pub fn block(&self, id: u32) -> Result<&Array3<f32>> {
        self.blocks.get(&id).ok_or_else(|| {
            Error::Config(format!(
                "record {} has no activations for block {id}",
                self.sample_id
            ))
        })
    }

    /// The deepest block present, i.e. the encoder output h.
    pub fn encoder_output(&self) -> Option<(u32, &Array3<f32>)> {
        self.blocks.iter().next_back().map(|(id, a)| (*id, a))
    }
}

/// A manifest whose files have all been checked, with labels, splits, embeddings and
/// classifier held in memory. Block activations stay on disk and are read per sample.
#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: DatasetManifest,
    labels: Vec<usize>,
    splits: Vec<Split>,
    embeddings: Array2<f32>,
    classifier: LinearClassifier,
    block_files: Vec<NpyFile>,
}

fn open_checked(manifest: &DatasetManifest, rel: &str, what: &str) -> Result<NpyFile> {
    let path = manifest.resolve(rel);
    if !path.exists() {
        return Err(Error::Validation(format!(
            "{what} file {} does not exist",
            path.display()
        )));
    }
    NpyFile::open(&path).map_err(|e| Error::Validation(format!("{what} file: {e}")))
}

fn expect_layout(file: &NpyFile, what: &str, dtype: Dtype, shape: &[usize]) -> Result<()> {
    if file.dtype() != dtype || file.shape() != shape {
        return Err(Error::Validation(format!(
            "{what} file {} has {:?} {:?}, expected {:?} {:?}",
            file.path().display(),
            file.dtype(),
            file.shape(),
            dtype,
            shape
        )));
    }
    Ok(())
}

impl Dataset {
    pub fn open(manifest_path: impl AsRef<Path>) -> Result<Self> {
        Self::from_manifest(load_manifest(manifest_path)?)
    }

    /// Validates every referenced file against the manifest before anything is streamed.
    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        manifest.validate_structure()?;
        let classes = manifest.num_classes;
        let dim = manifest.embedding_dim;

        let labels_file = open_checked(&manifest, &manifest.labels, "labels")?;
        if labels_file.dtype() != Dtype::I64 || labels_file.shape().len() != 1 {
            return Err(Error::Validation(format!(
                "labels file {} must be a rank-1 i64 array, found {:?} {:?}",
                labels_file.path().display(),
                labels_file.dtype(),
                labels_file.shape()
            )));
        }
        let n = labels_file.shape()[0];

        let split_file = open_checked(&manifest, &manifest.split, "split")?;
        expect_layout(&split_file, "split", Dtype::I64, &[n])?;
        let embeddings_file = open_checked(&manifest, &manifest.embeddings, "embeddings")?;
        expect_layout(&embeddings_file, "embeddings", Dtype::F32, &[n, dim])?;
        let classifier_file = open_checked(&manifest, &manifest.classifier, "classifier")?;
        expect_layout(&classifier_file, "classifier", Dtype::F32, &[dim, classes])?;

        let mut block_files = Vec::with_capacity(manifest.blocks.len());
        for block in &manifest.blocks {
            let what = format!("block {}", block.id);
            let file = open_checked(&manifest, &block.path, &what)?;
            expect_layout(&file, &what, Dtype::F32, &[n, block.h, block.w, block.c])?;
            block_files.push(file);
        }

        let labels = labels_file
            .read_all()?
            .into_i64_array::<Ix1>()?
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                usize::try_from(l)
                    .ok()
                    .filter(|&l| l < classes)
                    .ok_or_else(|| {
                        Error::Validation(format!(
                            "labels file {}: sample {i} has label {l} outside [0, {classes})",
                            labels_file.path().display()
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let splits = split_file
            .read_all()?
            .into_i64_array::<Ix1>()?
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                Split::from_code(s).ok_or_else(|| {
                    Error::Validation(format!(
                        "split file {}: sample {i} has tag {s}, expected 0 (train) or 1 (test)",
                        split_file.path().display()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let embeddings = embeddings_file.read_all()?.into_f32_array::<Ix2>()?;
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "embeddings file {} contains non-finite values",
                embeddings_file.path().display()
            )));
        }
        let classifier = LinearClassifier::new(classifier_file.read_all()?.into_f32_array::<Ix2>()?)
            .map_err(|e| {
                Error::Validation(format!(
                    "classifier file {}: {e}",
                    classifier_file.path().display()
                ))
            })?;
        if let Some(images) = &manifest.images {
            if images.len() != n {
                return Err(Error::Validation(format!(
                    "manifest lists {} images for {n} samples",
                    images.len()
                )));
            }
        }

        Ok(Self {
            manifest,
            labels,
            splits,
            embeddings,
            classifier,
            block_files,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn embeddings(&self) -> &Array2<f32> {
        &self.embeddings
    }

    pub fn classifier(&self) -> &LinearClassifier {
        &self.classifier
    }

    /// Sample ids in ascending order, optionally restricted to one split.
    pub fn sample_ids(&self, split: Option<Split>) -> Vec<usize> {
        (0..self.num_samples())
            .filter(|&i| split.is_none_or(|s| self.splits[i] == s))
            .collect()
    }

    pub fn image_path(&self, sample_id: usize) -> Option<PathBuf> {
        self.manifest
            .images
            .as_ref()
            .and_then(|images| images.get(sample_id))
            .map(|p| self.manifest.resolve(p))
    }

    /// Loads one sample with only the blocks at or deeper than `depth_from`.
    pub fn record(&self, sample_id: usize, depth_from: u32) -> Result<ActivationRecord> {
        if sample_id >= self.num_samples() {
            return Err(Error::Validation(format!(
                "sample {sample_id} out of range for {} samples",
                self.num_samples()
            )));
        }
        let wanted = self.manifest.blocks_from(depth_from)?.len();
        let first = self.block_files.len() - wanted;
        let mut blocks = BTreeMap::new();
        for (entry, file) in self.manifest.blocks[first..]
            .iter()
            .zip(&self.block_files[first..])
        {
            let activations = file.read_row(sample_id)?.into_f32_array::<Ix3>()?;
            blocks.insert(entry.id, activations);
        }
        Ok(ActivationRecord {
            sample_id,
            label: self.labels[sample_id],
            split: self.splits[sample_id],
            embedding: self.embeddings.row(sample_id).to_owned(),
            blocks,
        })
    }

    /// Streams records in ascending sample id.
    pub fn iter_records(&self, split: Option<Split>, depth_from: u32) -> Result<RecordIter<'_>> {
        self.manifest.blocks_from(depth_from)?;
        Ok(RecordIter {
            dataset: self,
            ids: self.sample_ids(split).into_iter(),
            depth_from,
        })
    }
}

pub struct RecordIter<'a> {
    dataset: &'a Dataset,
    ids: std::vec::IntoIter<usize>,
    depth_from: u32,
}

impl Iterator for RecordIter<'_> {
    type Item = Result<ActivationRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let id = self.ids.next()?;
        Some(self.dataset.record(id, self.depth_from))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.ids.size_hint()
    }
}
