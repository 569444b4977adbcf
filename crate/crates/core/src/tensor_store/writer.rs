use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use super::header::serialize_header;
use super::{encode_into, CheckpointView, Dtype, Metadata, TensorData, TensorMeta, IO_CHUNK_BYTES};
use crate::error::{Error, Result};

/// Byte layout of a checkpoint about to be written: tensors contiguous in
/// list order, header bytes fixed up front.
#[derive(Debug, Clone)]
pub struct CheckpointLayout {
    tensors: Vec<TensorMeta>,
    metadata: Option<Metadata>,
    header: Vec<u8>,
}

impl CheckpointLayout {
    pub fn new(
        entries: impl IntoIterator<Item = (String, Dtype, Vec<usize>)>,
        metadata: Option<Metadata>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut offset = 0usize;
        let mut tensors = Vec::new();
        for (name, dtype, shape) in entries {
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            let bytes = shape.iter().product::<usize>() * dtype.size();
            tensors.push(TensorMeta {
                name,
                dtype,
                shape,
                data_offsets: (offset, offset + bytes),
            });
            offset += bytes;
        }
        let header = serialize_header(&tensors, metadata.as_ref());
        Ok(Self {
            tensors,
            metadata,
            header,
        })
    }

    /// When this layout describes exactly the same table as `view`, adopt
    /// the view's stored header bytes so an unmodified rewrite is
    /// byte-identical even if the source used different JSON formatting.
    pub fn reuse_header_of(mut self, view: &CheckpointView) -> Self {
        let same_table = self.tensors.len() == view.len()
            && self
                .tensors
                .iter()
                .zip(view.tensors().values())
                .all(|(a, b)| a == b);
        if same_table && self.metadata.as_ref() == view.metadata() {
            self.header = view.raw_header().to_vec();
        }
        self
    }

    pub fn tensors(&self) -> &[TensorMeta] {
        &self.tensors
    }

    pub fn header_bytes(&self) -> &[u8] {
        &self.header
    }

    pub fn data_start(&self) -> u64 {
        8 + self.header.len() as u64
    }

    pub fn data_len(&self) -> u64 {
        self.tensors.last().map_or(0, |t| t.data_offsets.1 as u64)
    }

    pub fn file_len(&self) -> u64 {
        self.data_start() + self.data_len()
    }
}

/// Exclusive writer for one output file. Data goes to `<path>.partial` and
/// is renamed into place by [`CheckpointWriter::finish`]; dropping an
/// unfinished writer removes the partial file.
///
/// `write_at` takes `&self`, so distinct regions may be filled from
/// several threads.
pub struct CheckpointWriter {
    file: File,
    path: PathBuf,
    tmp: PathBuf,
    layout: CheckpointLayout,
    done: bool,
}

impl CheckpointWriter {
    pub fn create(path: impl AsRef<Path>, layout: CheckpointLayout) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut tmp = path.clone().into_os_string();
        tmp.push(".partial");
        let tmp = PathBuf::from(tmp);
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(&tmp)
            .map_err(|e| Error::io(&tmp, e))?;
        file.set_len(layout.file_len()).map_err(|e| Error::io(&tmp, e))?;
        let mut prefix = (layout.header.len() as u64).to_le_bytes().to_vec();
        prefix.extend_from_slice(&layout.header);
        file.write_all_at(&prefix, 0).map_err(|e| Error::io(&tmp, e))?;
        Ok(Self {
            file,
            path,
            tmp,
            layout,
            done: false,
        })
    }

    pub fn layout(&self) -> &CheckpointLayout {
        &self.layout
    }

    /// Write `bytes` at `offset` bytes into tensor `index`'s extent.
    pub fn write_at(&self, index: usize, offset: usize, bytes: &[u8]) -> Result<()> {
        let meta = &self.layout.tensors[index];
        assert!(
            offset + bytes.len() <= meta.byte_len(),
            "write past the extent of {}",
            meta.name
        );
        let pos = self.layout.data_start() + (meta.data_offsets.0 + offset) as u64;
        self.file
            .write_all_at(bytes, pos)
            .map_err(|e| Error::io(&self.tmp, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.file.sync_data().map_err(|e| Error::io(&self.tmp, e))?;
        fs::rename(&self.tmp, &self.path).map_err(|e| Error::io(&self.path, e))?;
        self.done = true;
        Ok(())
    }
}

impl Drop for CheckpointWriter {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

/// Copy a tensor's stored bytes unchanged from `view` into slot `index` of
/// `writer`, in bounded chunks.
pub fn copy_tensor_bytes(view: &CheckpointView, meta: &TensorMeta, writer: &CheckpointWriter, index: usize) -> Result<()> {
    let total = meta.byte_len();
    let mut buf = vec![0u8; total.min(IO_CHUNK_BYTES)];
    let mut done = 0;
    while done < total {
        let len = (total - done).min(IO_CHUNK_BYTES);
        view.read_data_at((meta.data_offsets.0 + done) as u64, &mut buf[..len])?;
        writer.write_at(index, done, &buf[..len])?;
        done += len;
    }
    Ok(())
}

/// Write decoded tensors, encoding each at its `meta.dtype`. Data follows
/// the list order; the header lists `__metadata__` first, then tensors in
/// the same order.
pub fn write_checkpoint(tensors: &[TensorData], metadata: Option<&Metadata>, path: impl AsRef<Path>) -> Result<()> {
    let layout = CheckpointLayout::new(
        tensors
            .iter()
            .map(|t| (t.meta.name.clone(), t.meta.dtype, t.meta.shape.clone())),
        metadata.cloned(),
    )?;
    for t in tensors {
        if t.values.len() != t.meta.numel() {
            return Err(Error::ShapeMismatch {
                name: t.meta.name.clone(),
                left: t.meta.shape.clone(),
                right: vec![t.values.len()],
            });
        }
    }
    let writer = CheckpointWriter::create(path, layout)?;
    let mut bytes = Vec::new();
    for (i, t) in tensors.iter().enumerate() {
        let step = (IO_CHUNK_BYTES / t.meta.dtype.size()).max(1);
        let mut offset = 0;
        for chunk in t.values.chunks(step) {
            bytes.clear();
            encode_into(chunk, t.meta.dtype, &mut bytes);
            writer.write_at(i, offset, &bytes)?;
            offset += bytes.len();
        }
    }
    writer.finish()
}
