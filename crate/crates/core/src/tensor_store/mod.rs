//! On-disk tensors (NPY v1.0) and dataset manifests.

mod manifest;
pub mod npy;

use ndarray::{ArrayBase, ArrayD, Data, Dimension, IxDyn};
use serde::{Deserialize, Serialize};

pub use manifest::{
    load_manifest, ActivationRecord, BlockEntry, Dataset, DatasetManifest, RecordIter, Split,
};
pub use npy::{decode, encode, read_tensor, write_tensor, NpyFile, NpyHeader};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I64,
}

impl Dtype {
    pub fn size_of(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense row-major array with shape metadata.
///
/// Invariants: rank ≥ 1, every dimension positive, `product(shape) == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorBlob {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Validation("tensor shape must have rank >= 1".into()));
        }
        if shape.contains(&0) {
            return Err(Error::Validation(format!(
                "tensor shape {shape:?} has a zero-length dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor data length", expected, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_i64(shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        Self::new(shape, TensorData::I64(data))
    }

    pub fn from_f32_array<S, D>(array: &ArrayBase<S, D>) -> Result<Self>
    where
        S: Data<Elem = f32>,
        D: Dimension,
    {
        Self::from_f32(array.shape().to_vec(), array.iter().copied().collect())
    }

    pub fn from_i64_array<S, D>(array: &ArrayBase<S, D>) -> Result<Self>
    where
        S: Data<Elem = i64>,
        D: Dimension,
    {
        Self::from_i64(array.shape().to_vec(), array.iter().copied().collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::I64(_) => Dtype::I64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::I64(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    /// Equality on the raw bit patterns, so NaN payloads compare equal to themselves.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && match (&self.data, &other.data) {
                (TensorData::F32(a), TensorData::F32(b)) => a
                    .iter()
                    .zip(b)
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                (TensorData::I64(a), TensorData::I64(b)) => a == b,
                _ => false,
            }
    }

    /// Converts into an f32 array of the requested dimensionality.
    pub fn into_f32_array<D: Dimension>(self) -> Result<ndarray::Array<f32, D>> {
        let shape = self.shape.clone();
        match self.data {
            TensorData::F32(v) => ArrayD::from_shape_vec(IxDyn(&shape), v)
                .expect("blob invariants guarantee the shape")
                .into_dimensionality::<D>()
                .map_err(|_| Error::shape("tensor rank", D::NDIM, shape.len())),
            TensorData::I64(_) => Err(Error::Validation(format!(
                "expected an f32 tensor, found i64 of shape {shape:?}"
            ))),
        }
    }

    pub fn into_i64_array<D: Dimension>(self) -> Result<ndarray::Array<i64, D>> {
        let shape = self.shape.clone();
        match self.data {
            TensorData::I64(v) => ArrayD::from_shape_vec(IxDyn(&shape), v)
                .expect("blob invariants guarantee the shape")
                .into_dimensionality::<D>()
                .map_err(|_| Error::shape("tensor rank", D::NDIM, shape.len())),
            TensorData::F32(_) => Err(Error::Validation(format!(
                "expected an i64 tensor, found f32 of shape {shape:?}"
            ))),
        }
    }
}
