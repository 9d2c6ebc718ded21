//! Gradient-free attribution maps.
//!
//! At the encoder output the score of a pixel for class `j` is its dot product with
//! `c_j` divided by `‖c_j‖²`, so a pixel equal to `c_j` scores exactly 1 and scores are
//! comparable across classes. Shallower maps are obtained by upsampling the deeper map
//! onto the shallower explanation map's grid and averaging it within each segment
//! (all cells sharing a prototype id).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder_explainer::{explain_record, upsample_bilinear, ExplanationMap};
use crate::error::{Error, Result};
use crate::linalg;
use crate::sem_core::{LinearClassifier, PrototypeBank};
use crate::tensor_store::{write_tensor, ActivationRecord, TensorBlob};

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    /// `H × W` scores.
    pub values: Array2<f32>,
    /// Block the map lives at (the `b` of a `b:` configuration).
    pub depth: u32,
    pub class: usize,
    /// True for refined maps, which are piecewise constant per segment.
    pub discrete: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct AttributionSidecar {
    depth: u32,
    class: usize,
    discrete: bool,
    min: f32,
    max: f32,
}

impl AttributionMap {
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Values affinely mapped to `[0, 1]`; a constant map becomes all 0.5.
    pub fn normalized(&self) -> Array2<f32> {
        let (lo, hi) = self.min_max();
        if hi > lo {
            self.values.mapv(|v| (v - lo) / (hi - lo))
        } else {
            self.values.mapv(|_| 0.5)
        }
    }

    /// Writes raw values as `<stem>.npy` plus a `<stem>.json` sidecar.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let npy = dir.join(format!("{stem}.npy"));
        write_tensor(&TensorBlob::from_f32_array(&self.values)?, &npy)?;
        let (min, max) = self.min_max();
        let sidecar = AttributionSidecar {
            depth: self.depth,
            class: self.class,
            discrete: self.discrete,
            min,
            max,
        };
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
        Ok(npy)
    }
}

/// `pixel · c_j / ‖c_j‖²`.
pub fn att_score(pixel: &[f32], clf: &LinearClassifier, class: usize) -> Result<f64> {
    if class >= clf.num_classes() {
        return Err(Error::Config(format!(
            "class {class} outside [0, {})",
            clf.num_classes()
        )));
    }
    if pixel.len() != clf.dim() {
        return Err(Error::shape("attribution pixel dim", clf.dim(), pixel.len()));
    }
    Ok(linalg::dot(pixel, clf.column(class)) / clf.squared_norm(class))
}

/// Attribution of every pixel of the encoder output `h` (`H × W × D`) for `class`.
pub fn base_attribution(
    h: ArrayView3<f32>,
    depth: u32,
    clf: &LinearClassifier,
    class: usize,
) -> Result<AttributionMap> {
    let (height, width, dim) = h.dim();
    if dim != clf.dim() {
        return Err(Error::shape("encoder output channels", clf.dim(), dim));
    }
    let h = h.as_standard_layout();
    let flat = h.as_slice().expect("standard layout");
    let mut values = Array2::<f32>::zeros((height, width));
    for (v, pixel) in values.iter_mut().zip(flat.chunks_exact(dim)) {
        *v = att_score(pixel, clf, class)? as f32;
    }
    Ok(AttributionMap {
        values,
        depth,
        class,
        discrete: false,
    })
}

/// Carries `deeper` onto `segments`' grid: bilinear upsampling, then every cell takes
/// the mean of the upsampled values over all cells with the same prototype id.
pub fn refine(deeper: &AttributionMap, segments: &ExplanationMap) -> Result<AttributionMap> {
    let (h, w) = deeper.dim();
    if segments.height < h || segments.width < w {
        return Err(Error::Config(format!(
            "cannot refine a {h}x{w} map onto a smaller {}x{} explanation map",
            segments.height, segments.width
        )));
    }
    let up = upsample_bilinear(
        deeper.values.view().insert_axis(Axis(2)),
        segments.height,
        segments.width,
    )?;
    let up = up.as_slice().expect("fresh array");
    if up.len() != segments.ids.len() {
        return Err(Error::shape(
            "upsampled attribution",
            segments.ids.len(),
            up.len(),
        ));
    }
    let mut sums = vec![0f64; segments.num_prototypes];
    let mut counts = vec![0usize; segments.num_prototypes];
    for (&v, &id) in up.iter().zip(&segments.ids) {
        sums[id] += v as f64;
        counts[id] += 1;
    }
    let means: Vec<f32> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { (s / c as f64) as f32 } else { 0.0 })
        .collect();
    let values = Array2::from_shape_fn((segments.height, segments.width), |(r, c)| {
        means[segments.get(r, c)]
    });
    Ok(AttributionMap {
        values,
        depth: segments.depth_from,
        class: deeper.class,
        discrete: true,
    })
}

/// Attribution maps from the encoder output down to `depth_from`, deepest first.
///
/// `banks` maps each intermediate depth `d` to the composite bank fitted from `d`; the
/// classifier is only read at the encoder output.
pub fn attribution_cascade(
    record: &ActivationRecord,
    clf: &LinearClassifier,
    banks: &BTreeMap<u32, PrototypeBank>,
    class: usize,
    depth_from: u32,
) -> Result<Vec<AttributionMap>> {
    let depths: Vec<u32> = record.blocks.range(depth_from..).map(|(id, _)| *id).collect();
    if depths.first() != Some(&depth_from) {
        return Err(Error::Config(format!(
            "record {} has no activations for block {depth_from}",
            record.sample_id
        )));
    }
    let (deepest, h) = record.encoder_output().expect("at least one block");
    let mut maps = vec![base_attribution(h.view(), deepest, clf, class)?];
    for &depth in depths.iter().rev().skip(1) {
        let bank = banks.get(&depth).ok_or_else(|| {
            Error::Config(format!("no composite bank fitted from block {depth}"))
        })?;
        if bank.depth_from() != Some(depth) {
            return Err(Error::Config(format!(
                "bank registered for block {depth} is at {:?}",
                bank.location()
            )));
        }
        let segments = explain_record(record, bank)?;
        let next = refine(maps.last().expect("non-empty"), &segments)?;
        maps.push(next);
    }
    Ok(maps)
}
