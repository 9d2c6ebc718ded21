//! Gaussian-blob activation datasets with a known answer.
//!
//! Each sample of class `c` carries, at every block, one vector `a·e_c + σ·n` repeated at
//! every grid position (`n` standard normal, drawn per sample and block). Class means are
//! `a = margin·σ·√2` apart along axis directions, so each mean sits `margin·σ` from every
//! pairwise decision boundary. The classifier columns are the deepest block's class
//! means, and the embedding is the pooled deepest block.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::render::save_png;
use crate::tensor_store::{write_tensor, BlockEntry, DatasetManifest, TensorBlob};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub name: String,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// `(id, h, w, c)` per block, shallowest first.
    pub blocks: Vec<(u32, usize, usize, usize)>,
    pub sigma: f32,
    /// Distance from each class mean to the nearest decision boundary, in units of σ.
    pub margin: f32,
    pub seed: u64,
    /// Side of the square PNG written per sample; `None` skips images.
    pub image_size: Option<u32>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            num_classes: 5,
            train_per_class: 16,
            test_per_class: 8,
            blocks: vec![(2, 8, 8, 8), (3, 4, 4, 12), (4, 2, 2, 16)],
            sigma: 1.0,
            margin: 6.0,
            seed: 7,
            image_size: Some(224),
        }
    }
}

impl SyntheticConfig {
    pub fn num_samples(&self) -> usize {
        self.num_classes * (self.train_per_class + self.test_per_class)
    }

    /// Distance of each class mean from the origin.
    pub fn mean_scale(&self) -> f32 {
        self.margin * self.sigma * std::f32::consts::SQRT_2
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.train_per_class == 0 || self.blocks.is_empty() {
            return Err(Error::Config(
                "synthetic data needs classes, train samples and blocks".into(),
            ));
        }
        if let Some(&(id, ..)) = self.blocks.iter().find(|b| b.3 < self.num_classes) {
            return Err(Error::Config(format!(
                "block {id} has fewer channels than the {} classes",
                self.num_classes
            )));
        }
        if !(self.sigma >= 0.0 && self.margin > 0.0) {
            return Err(Error::Config("sigma must be >= 0 and margin > 0".into()));
        }
        Ok(())
    }
}

fn class_color(class: usize, num_classes: usize) -> [u8; 3] {
    let hue = class as f32 / num_classes as f32;
    let channel = |offset: f32| {
        let x = ((hue + offset).fract() * 6.0 - 3.0).abs() - 1.0;
        (x.clamp(0.0, 1.0) * 200.0 + 30.0) as u8
    };
    [channel(0.0), channel(2.0 / 3.0), channel(1.0 / 3.0)]
}

fn sample_image(size: u32, class: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let base = class_color(class, num_classes);
    let side = size / 3;
    let x0 = rng.random_range(0..=size - side);
    let y0 = rng.random_range(0..=size - side);
    RgbImage::from_fn(size, size, |x, y| {
        let inside = (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y);
        if inside {
            Rgb(base.map(|v| v / 2 + 120))
        } else {
            Rgb(base)
        }
    })
}

/// Writes a complete dataset (manifest, NPY files, optional images) into `dir` and
/// returns the manifest.
pub fn generate(dir: impl AsRef<Path>, cfg: &SyntheticConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = cfg.num_samples();
    let c = cfg.num_classes;
    let a = cfg.mean_scale();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let n_train = c * cfg.train_per_class;
    let labels: Vec<i64> = (0..n).map(|i| (i % c) as i64).collect();
    let split: Vec<i64> = (0..n).map(|i| i64::from(i >= n_train)).collect();

    let mut blocks: Vec<Array4<f32>> = cfg
        .blocks
        .iter()
        .map(|&(_, h, w, d)| Array4::zeros((n, h, w, d)))
        .collect();
    for i in 0..n {
        let class = i % c;
        for (arr, &(_, _, _, d)) in blocks.iter_mut().zip(&cfg.blocks) {
            let v: Vec<f32> = (0..d)
                .map(|ch| {
                    let noise: f32 = rng.sample(StandardNormal);
                    let mean = if ch == class { a } else { 0.0 };
                    mean + cfg.sigma * noise
                })
                .collect();
            for mut pixel in arr
                .index_axis_mut(ndarray::Axis(0), i)
                .lanes_mut(ndarray::Axis(2))
            {
                pixel.assign(&ndarray::ArrayView1::from(&v));
            }
        }
    }

    let deepest = blocks.last().expect("validated");
    let dim = cfg.blocks.last().expect("validated").3;
    let embeddings = Array2::from_shape_fn((n, dim), |(i, ch)| deepest[[i, 0, 0, ch]]);
    let classifier = Array2::from_shape_fn((dim, c), |(ch, j)| if ch == j { a } else { 0.0 });

    let mut entries = Vec::new();
    for (arr, &(id, h, w, d)) in blocks.iter().zip(&cfg.blocks) {
        let rel = format!("block{id}.npy");
        write_tensor(&TensorBlob::from_f32_array(arr)?, dir.join(&rel))?;
        entries.push(BlockEntry {
            id,
            h,
            w,
            c: d,
            path: rel,
        });
    }
    write_tensor(&TensorBlob::from_f32_array(&embeddings)?, dir.join("embeddings.npy"))?;
    write_tensor(&TensorBlob::from_f32_array(&classifier)?, dir.join("classifier.npy"))?;
    write_tensor(&TensorBlob::from_i64(vec![n], labels)?, dir.join("labels.npy"))?;
    write_tensor(&TensorBlob::from_i64(vec![n], split)?, dir.join("split.npy"))?;

    let images = match cfg.image_size {
        Some(size) => {
            let img_dir = dir.join("images");
            std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
            let mut img_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
            let mut paths = Vec::with_capacity(n);
            for i in 0..n {
                let rel = format!("images/sample_{i:04}.png");
                let path = dir.join(&rel);
                save_png(&sample_image(size, i % c, c, &mut img_rng), &path)?;
                paths.push(rel);
            }
            Some(paths)
        }
        None => None,
    };

    let manifest = DatasetManifest {
        dataset: cfg.name.clone(),
        num_classes: c,
        embedding_dim: dim,
        blocks: entries,
        embeddings: "embeddings.npy".into(),
        classifier: "classifier.npy".into(),
        labels: "labels.npy".into(),
        split: "split.npy".into(),
        images,
        bias: None,
        activation_tap: None,
        base_dir: Default::default(),
    }
    .with_base_dir(dir);
    manifest.validate_structure()?;
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::Dataset;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            train_per_class: 3,
            test_per_class: 1,
            image_size: None,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generated_dataset_opens() {
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), &small()).unwrap();
        let ds = Dataset::open(dir.path().join("manifest.json")).unwrap();
        assert_eq!(ds.num_samples(), 20);
        assert_eq!(ds.sample_ids(Some(crate::tensor_store::Split::Test)).len(), 5);
        let r = ds.record(7, 2).unwrap();
        assert_eq!(r.label, 2);
        let h = r.block(4).unwrap();
        assert_eq!(h.slice(ndarray::s![0, 0, ..]), r.embedding);
        assert_eq!(h.slice(ndarray::s![1, 1, ..]), r.embedding);
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate(a.path(), &small()).unwrap();
        generate(b.path(), &small()).unwrap();
        for f in ["block2.npy", "block4.npy", "embeddings.npy", "manifest.json"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn rejects_too_few_channels() {
        let cfg = SyntheticConfig {
            blocks: vec![(4, 2, 2, 3)],
            ..small()
        };
        assert!(generate(tempfile::tempdir().unwrap().path(), &cfg).is_err());
    }
}
