//! Reading and writing the numpy NPY v1.0 format.
//!
//! Only little-endian C-order `<f4` and `<i8` arrays are supported. The header
//! writer reproduces numpy's own layout (dict key order, 64-byte alignment), so a
//! file written by `numpy.save` round-trips through this module byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{Dtype, TensorBlob, TensorData};
use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;
/// magic + version + u16 header length
const PREAMBLE_LEN: usize = 10;

/// Parsed NPY header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset of the first data element.
    pub data_offset: u64,
}

impl NpyHeader {
    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    fn descr(&self) -> &'static str {
        match self.dtype {
            Dtype::F32 => "<f4",
            Dtype::I64 => "<i8",
        }
    }
}

pub fn read_header<R: Read>(reader: &mut R) -> Result<NpyHeader> {
    let mut preamble = [0u8; PREAMBLE_LEN];
    reader
        .read_exact(&mut preamble)
        .map_err(|_| Error::Format("file too short for an NPY preamble".into()))?;
    if &preamble[..6] != MAGIC {
        return Err(Error::Format("missing \\x93NUMPY magic".into()));
    }
    let (major, minor) = (preamble[6], preamble[7]);
    if (major, minor) != (1, 0) {
        return Err(Error::Unsupported(format!(
            "NPY version {major}.{minor}, only 1.0 is supported"
        )));
    }
    let header_len = u16::from_le_bytes([preamble[8], preamble[9]]) as usize;
    let mut raw = vec![0u8; header_len];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::Format("truncated NPY header".into()))?;
    let text = std::str::from_utf8(&raw)
        .map_err(|_| Error::Format("NPY header is not ASCII".into()))?;
    let dict = HeaderDict::parse(text)?;

    let dtype = match dict.descr.as_str() {
        "<f4" => Dtype::F32,
        "<i8" => Dtype::I64,
        other => {
            return Err(Error::Unsupported(format!(
                "dtype descriptor {other:?}, expected '<f4' or '<i8'"
            )))
        }
    };
    if dict.fortran_order {
        return Err(Error::Unsupported("Fortran-order arrays".into()));
    }
    if dict.shape.is_empty() {
        return Err(Error::Unsupported("rank-0 (scalar) arrays".into()));
    }
    if dict.shape.contains(&0) {
        return Err(Error::Format(format!(
            "shape {:?} has a zero-length dimension",
            dict.shape
        )));
    }
    Ok(NpyHeader {
        dtype,
        shape: dict.shape,
        data_offset: (PREAMBLE_LEN + header_len) as u64,
    })
}

/// Encodes the header exactly the way `numpy.lib.format.write_array` does for v1.0.
pub fn encode_header(dtype: Dtype, shape: &[usize]) -> Vec<u8> {
    let shape_repr = match shape {
        [single] => format!("({single},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let descr = NpyHeader {
        dtype,
        shape: vec![],
        data_offset: 0,
    }
    .descr();
    let mut dict = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_repr}, }}");
    let unpadded = PREAMBLE_LEN + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(PREAMBLE_LEN + dict.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

/// Serializes a blob to NPY bytes.
pub fn encode(blob: &TensorBlob) -> Vec<u8> {
    let mut out = encode_header(blob.dtype(), blob.shape());
    match blob.data() {
        TensorData::F32(values) => {
            out.reserve(values.len() * 4);
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        TensorData::I64(values) => {
            out.reserve(values.len() * 8);
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Parses NPY bytes into a blob. Trailing bytes after the data are rejected.
pub fn decode(bytes: &[u8]) -> Result<TensorBlob> {
    let mut cursor = bytes;
    let header = read_header(&mut cursor)?;
    let payload = &bytes[header.data_offset as usize..];
    let expected = header.num_elements() * header.dtype.size_of();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {:?} of {:?} needs {expected}",
            payload.len(),
            header.shape,
            header.dtype
        )));
    }
    let data = decode_payload(header.dtype, payload);
    TensorBlob::new(header.shape, data)
}

fn decode_payload(dtype: Dtype, payload: &[u8]) -> TensorData {
    match dtype {
        Dtype::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::I64 => TensorData::I64(
            payload
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorBlob> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| annotate(e, path))
}

pub fn write_tensor(blob: &TensorBlob, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    writer
        .write_all(&encode(blob))
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}

fn annotate(err: Error, path: &Path) -> Error {
    match err {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::Unsupported(msg) => Error::Unsupported(format!("{}: {msg}", path.display())),
        other => other,
    }
}

/// An NPY file opened for random access along its leading axis.
///
/// Each read opens its own handle, so a shared `NpyFile` can serve concurrent readers.
#[derive(Debug, Clone)]
pub struct NpyFile {
    path: PathBuf,
    header: NpyHeader,
}

impl NpyFile {
    /// Parses the header and checks that the file is long enough for the declared shape.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let header = read_header(&mut BufReader::new(file)).map_err(|e| annotate(e, &path))?;
        let expected = header.data_offset + (header.num_elements() * header.dtype.size_of()) as u64;
        if file_len != expected {
            return Err(Error::Format(format!(
                "{}: file is {file_len} bytes, header declares {expected}",
                path.display()
            )));
        }
        Ok(Self { path, header })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &NpyHeader {
        &self.header
    }

    pub fn shape(&self) -> &[usize] {
        &self.header.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.header.dtype
    }

    /// Number of elements in one slice along axis 0.
    pub fn row_len(&self) -> usize {
        self.header.shape[1..].iter().product()
    }

    /// Reads the whole array.
    pub fn read_all(&self) -> Result<TensorBlob> {
        read_tensor(&self.path)
    }

    /// Reads slice `index` along axis 0; the blob has shape `shape[1..]` (or `[1]` for rank-1 files).
    pub fn read_row(&self, index: usize) -> Result<TensorBlob> {
        let rows = self.header.shape[0];
        if index >= rows {
            return Err(Error::Validation(format!(
                "{}: row {index} out of range for {rows} rows",
                self.path.display()
            )));
        }
        let row_len = self.row_len();
        let width = self.header.dtype.size_of();
        let mut file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        file.seek(SeekFrom::Start(
            self.header.data_offset + (index * row_len * width) as u64,
        ))
        .map_err(|e| Error::io(&self.path, e))?;
        let mut buf = vec![0u8; row_len * width];
        file.read_exact(&mut buf)
            .map_err(|e| Error::io(&self.path, e))?;
        let shape = if self.header.shape.len() == 1 {
            vec![1]
        } else {
            self.header.shape[1..].to_vec()
        };
        TensorBlob::new(shape, decode_payload(self.header.dtype, &buf))
    }
}

/// The three keys numpy writes, parsed from the Python dict literal.
#[derive(Debug)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl HeaderDict {
    fn parse(text: &str) -> Result<Self> {
        let body = text.trim_end_matches(['\n', ' ', '\x00']).trim();
        let body = body
            .strip_prefix('{')
            .and_then(|b| b.strip_suffix('}'))
            .ok_or_else(|| Error::Format(format!("header is not a dict literal: {text:?}")))?;

        let mut descr = None;
        let mut fortran_order = None;
        let mut shape = None;
        let mut rest = body.trim_start();
        while !rest.is_empty() {
            let (key, after_key) = parse_quoted(rest)?;
            let after_colon = after_key
                .trim_start()
                .strip_prefix(':')
                .ok_or_else(|| Error::Format(format!("expected ':' after key {key:?}")))?
                .trim_start();
            rest = match key {
                "descr" => {
                    let (value, r) = parse_quoted(after_colon)?;
                    descr = Some(value.to_string());
                    r
                }
                "fortran_order" => {
                    let (value, r) = if let Some(r) = after_colon.strip_prefix("True") {
                        (true, r)
                    } else if let Some(r) = after_colon.strip_prefix("False") {
                        (false, r)
                    } else {
                        return Err(Error::Format("fortran_order must be True or False".into()));
                    };
                    fortran_order = Some(value);
                    r
                }
                "shape" => {
                    let (value, r) = parse_shape(after_colon)?;
                    shape = Some(value);
                    r
                }
                other => return Err(Error::Format(format!("unexpected header key {other:?}"))),
            };
            rest = rest.trim_start();
            rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
        }

        match (descr, fortran_order, shape) {
            (Some(descr), Some(fortran_order), Some(shape)) => Ok(Self {
                descr,
                fortran_order,
                shape,
            }),
            _ => Err(Error::Format(
                "header must define 'descr', 'fortran_order' and 'shape'".into(),
            )),
        }
    }
}

fn parse_quoted(s: &str) -> Result<(&str, &str)> {
    let quote = s
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| Error::Format(format!("expected quoted string at {s:?}")))?;
    let inner = &s[1..];
    let end = inner
        .find(quote)
        .ok_or_else(|| Error::Format("unterminated string in header".into()))?;
    Ok((&inner[..end], &inner[end + 1..]))
}

fn parse_shape(s: &str) -> Result<(Vec<usize>, &str)> {
    let inner = s
        .strip_prefix('(')
        .ok_or_else(|| Error::Format("shape must be a tuple".into()))?;
    let end = inner
        .find(')')
        .ok_or_else(|| Error::Format("unterminated shape tuple".into()))?;
    let dims = inner[..end]
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.trim_end_matches('L')
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape entry {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dims, &inner[end + 1..]))
}
