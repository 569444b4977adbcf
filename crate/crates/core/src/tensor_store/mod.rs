//! Reading and writing safetensors checkpoints.
//!
//! Only `F32`, `F16` and `BF16` tensors are supported. Values are always
//! handed out as `f32`; the storage dtype is metadata. File access goes
//! through positioned reads and writes, so nothing is mapped and the
//! resident footprint of a pass over a checkpoint is the caller's buffers.

mod dtype;
mod header;
mod writer;

use std::fs::File;
use std::ops::Range;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use indexmap::IndexMap;

pub use dtype::{
    decode_dtype, decode_into, encode_dtype, encode_into, Dtype, CANONICAL_NAN_BF16,
    CANONICAL_NAN_F16, CANONICAL_NAN_F32,
};
pub use header::{ParseOptions, DEFAULT_HEADER_CAP, METADATA_KEY};
pub use writer::{copy_tensor_bytes, write_checkpoint, CheckpointLayout, CheckpointWriter};

use crate::error::{Error, HeaderError, Result};

/// The string map stored under `__metadata__`.
pub type Metadata = IndexMap<String, String>;

/// Bytes per positioned read when streaming a tensor.
pub const IO_CHUNK_BYTES: usize = 8 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Half-open byte range inside the data region.
    pub data_offsets: (usize, usize),
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.data_offsets.1 - self.data_offsets.0
    }
}

/// A decoded tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub meta: TensorMeta,
    pub values: Vec<f32>,
}

impl TensorData {
    /// Build a tensor with a placeholder extent `[0, bytes)`; writers
    /// assign the real offsets.
    pub fn new(name: impl Into<String>, dtype: Dtype, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::ShapeMismatch {
                name,
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(Self {
            meta: TensorMeta {
                name,
                dtype,
                shape,
                data_offsets: (0, n * dtype.size()),
            },
            values,
        })
    }

    pub fn name(&self) -> &str {
        &self.meta.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.meta.shape
    }
}

#[derive(Debug, Clone)]
enum Source {
    File { path: PathBuf, file: Arc<File> },
    Memory(Arc<[u8]>),
}

/// Immutable, lazily-read view over one checkpoint's tensor table.
///
/// Tensors are ordered by their position in the data region.
#[derive(Debug, Clone)]
pub struct CheckpointView {
    source: Source,
    tensors: IndexMap<String, TensorMeta>,
    metadata: Option<Metadata>,
    raw_header: Arc<[u8]>,
    data_start: u64,
    data_len: u64,
}

/// Parse an in-memory checkpoint: length prefix, JSON header, data region.
pub fn parse_header(raw: &[u8]) -> Result<CheckpointView> {
    parse_header_with(raw, &ParseOptions::default())
}

pub fn parse_header_with(raw: &[u8], opts: &ParseOptions) -> Result<CheckpointView> {
    let file_len = raw.len() as u64;
    let n = header::header_len(raw, file_len, opts)?;
    let json = &raw[8..8 + n as usize];
    let data_len = file_len - 8 - n;
    let parsed = header::parse_json(json, data_len)?;
    Ok(CheckpointView {
        source: Source::Memory(Arc::from(raw)),
        tensors: parsed.tensors,
        metadata: parsed.metadata,
        raw_header: Arc::from(json),
        data_start: 8 + n,
        data_len,
    })
}

impl CheckpointView {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_with(path, &ParseOptions::default())
    }

    pub fn open_with(path: impl AsRef<Path>, opts: &ParseOptions) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut prefix = [0u8; 8];
        if file_len >= 8 {
            file.read_exact_at(&mut prefix, 0).map_err(|e| Error::io(path, e))?;
        }
        let n = header::header_len(&prefix, file_len, opts)?;
        let mut json = vec![0u8; n as usize];
        file.read_exact_at(&mut json, 8).map_err(|e| Error::io(path, e))?;
        let data_len = file_len - 8 - n;
        let parsed = header::parse_json(&json, data_len)?;
        Ok(Self {
            source: Source::File {
                path: path.to_path_buf(),
                file: Arc::new(file),
            },
            tensors: parsed.tensors,
            metadata: parsed.metadata,
            raw_header: Arc::from(json),
            data_start: 8 + n,
            data_len,
        })
    }

    /// Path of the backing file, if any.
    pub fn path(&self) -> Option<&Path> {
        match &self.source {
            Source::File { path, .. } => Some(path),
            Source::Memory(_) => None,
        }
    }

    pub fn tensors(&self) -> &IndexMap<String, TensorMeta> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&TensorMeta> {
        self.tensors.get(name)
    }

    pub fn meta(&self, name: &str) -> Result<&TensorMeta> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::TensorNotFound(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> Option<&Metadata> {
        self.metadata.as_ref()
    }

    /// JSON header bytes exactly as stored, padding included.
    pub fn raw_header(&self) -> &[u8] {
        &self.raw_header
    }

    pub fn data_len(&self) -> u64 {
        self.data_len
    }

    /// Read `buf.len()` bytes starting at `offset` within the data region.
    pub fn read_data_at(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        if offset + buf.len() as u64 > self.data_len {
            return Err(Error::from(HeaderError::ExtentPastEnd {
                name: "<read>".into(),
                end: offset + buf.len() as u64,
                data_len: self.data_len,
            }));
        }
        match &self.source {
            Source::File { path, file } => file
                .read_exact_at(buf, self.data_start + offset)
                .map_err(|e| Error::io(path, e)),
            Source::Memory(bytes) => {
                let start = (self.data_start + offset) as usize;
                buf.copy_from_slice(&bytes[start..start + buf.len()]);
                Ok(())
            }
        }
    }

    /// Raw stored bytes of one tensor.
    pub fn read_raw(&self, name: &str) -> Result<Vec<u8>> {
        let meta = self.meta(name)?;
        let mut buf = vec![0u8; meta.byte_len()];
        self.read_data_at(meta.data_offsets.0 as u64, &mut buf)?;
        Ok(buf)
    }

    pub fn read_tensor(&self, name: &str) -> Result<TensorData> {
        let meta = self.meta(name)?.clone();
        let reader = TensorReader { view: self, meta: &meta };
        let mut values = Vec::with_capacity(meta.numel());
        let mut scratch = Vec::new();
        let mut chunk = Vec::new();
        let step = (IO_CHUNK_BYTES / meta.dtype.size()).max(1);
        let n = meta.numel();
        let mut start = 0;
        while start < n {
            let end = (start + step).min(n);
            reader.read(start..end, &mut scratch, &mut chunk)?;
            values.extend_from_slice(&chunk);
            start = end;
        }
        Ok(TensorData { meta, values })
    }

    pub fn reader<'a>(&'a self, meta: &'a TensorMeta) -> TensorReader<'a> {
        TensorReader { view: self, meta }
    }

}

/// Chunked element access to one tensor of a view.
#[derive(Clone, Copy)]
pub struct TensorReader<'a> {
    view: &'a CheckpointView,
    meta: &'a TensorMeta,
}

impl<'a> TensorReader<'a> {
    pub fn meta(&self) -> &TensorMeta {
        self.meta
    }

    pub fn numel(&self) -> usize {
        self.meta.numel()
    }

    /// Decode elements `range` into `out`, using `scratch` for raw bytes.
    pub fn read(&self, range: Range<usize>, scratch: &mut Vec<u8>, out: &mut Vec<f32>) -> Result<()> {
        let size = self.meta.dtype.size();
        scratch.resize((range.end - range.start) * size, 0);
        let offset = (self.meta.data_offsets.0 + range.start * size) as u64;
        self.view.read_data_at(offset, scratch)?;
        decode_into(scratch, self.meta.dtype, out)
    }
}
