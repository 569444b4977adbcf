//! Tensor-name surgery between a multimodal checkpoint and its language
//! model.
//!
//! A multimodal checkpoint nests the language model under a prefix and
//! carries extra towers (vision encoder, projector) that have no
//! counterpart in the base LLM. [`extract_submodel`] selects and renames the
//! language subtree, [`align`] pairs it with a donor checkpoint, and
//! [`inject_submodel`] writes merged tensors back into the full file while
//! every other tensor is copied byte for byte.

mod align;
mod glob;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use align::{align, AlignmentTable, Pair, RowSplit};
pub use glob::Glob;

use crate::error::{Error, Result};
use crate::tensor_store::{
    copy_tensor_bytes, encode_into, CheckpointLayout, CheckpointView, CheckpointWriter, TensorData, TensorMeta,
    IO_CHUNK_BYTES,
};

/// What to do when the two sides of an alignment disagree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchPolicy {
    #[default]
    Strict,
    Skip,
    TruncateRows,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "RulesDef")]
pub struct KeymapRules {
    pub strip_prefix: Option<String>,
    pub exclude_patterns: Vec<Glob>,
    pub include_patterns: Option<Vec<Glob>>,
    pub mismatch_policy: MismatchPolicy,
}

pub const LLAVA_PROFILE: &str = "llava";

impl KeymapRules {
    /// Every tensor, names unchanged.
    pub fn identity() -> Self {
        Self::default()
    }

    /// LLaVA-family layout: language model under `language_model.`, vision
    /// tower, projector and the image-newline parameter left alone.
    pub fn llava() -> Self {
        Self {
            strip_prefix: Some("language_model.".into()),
            exclude_patterns: vec![
                Glob::new("vision_tower.*"),
                Glob::new("multi_modal_projector.*"),
                Glob::new("image_newline*"),
            ],
            include_patterns: None,
            mismatch_policy: MismatchPolicy::Strict,
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            LLAVA_PROFILE => Ok(Self::llava()),
            "identity" => Ok(Self::identity()),
            other => Err(Error::Keymap(format!("unknown keymap profile {other:?}"))),
        }
    }

    pub fn with_policy(mut self, policy: MismatchPolicy) -> Self {
        self.mismatch_policy = policy;
        self
    }

    /// Include-first, then exclude.
    pub fn selects(&self, name: &str) -> bool {
        let included = self
            .include_patterns
            .as_ref()
            .is_none_or(|pats| pats.iter().any(|p| p.matches(name)));
        included && !self.exclude_patterns.iter().any(|p| p.matches(name))
    }

    /// Multimodal-side name to LLM-side name.
    pub fn rename(&self, name: &str) -> Result<String> {
        match &self.strip_prefix {
            None => Ok(name.to_string()),
            Some(prefix) => name.strip_prefix(prefix.as_str()).map(str::to_string).ok_or_else(|| {
                Error::Keymap(format!("selected tensor {name:?} lacks strip_prefix {prefix:?}"))
            }),
        }
    }

    /// LLM-side name back to the multimodal namespace.
    pub fn restore(&self, name: &str) -> String {
        match &self.strip_prefix {
            None => name.to_string(),
            Some(prefix) => format!("{prefix}{name}"),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RulesDef {
    profile: Option<String>,
    strip_prefix: Option<String>,
    exclude_patterns: Option<Vec<Glob>>,
    include_patterns: Option<Vec<Glob>>,
    mismatch_policy: Option<MismatchPolicy>,
}

impl TryFrom<RulesDef> for KeymapRules {
    type Error = String;

    fn try_from(def: RulesDef) -> std::result::Result<Self, String> {
        let mut rules = match def.profile.as_deref() {
            Some(p) => KeymapRules::profile(p).map_err(|e| e.to_string())?,
            None => KeymapRules::identity(),
        };
        if def.strip_prefix.is_some() {
            rules.strip_prefix = def.strip_prefix.filter(|p| !p.is_empty());
        }
        if let Some(ex) = def.exclude_patterns {
            rules.exclude_patterns = ex;
        }
        if def.include_patterns.is_some() {
            rules.include_patterns = def.include_patterns;
        }
        if let Some(p) = def.mismatch_policy {
            rules.mismatch_policy = p;
        }
        Ok(rules)
    }
}

/// One tensor of an extracted subtree.
#[derive(Debug, Clone, PartialEq)]
pub struct SubEntry {
    /// Name in the extracted (LLM) namespace.
    pub name: String,
    /// Name in the source checkpoint.
    pub source: String,
    pub meta: TensorMeta,
}

/// The renamed tensor set produced by extraction. Entries keep the source
/// order; `excluded` lists the source tensors that were not selected.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Submodel {
    pub entries: Vec<SubEntry>,
    pub excluded: Vec<String>,
}

impl Submodel {
    /// All tensors of `view`, unrenamed.
    pub fn identity(view: &CheckpointView) -> Self {
        Self {
            entries: view
                .tensors()
                .values()
                .map(|m| SubEntry {
                    name: m.name.clone(),
                    source: m.name.clone(),
                    meta: m.clone(),
                })
                .collect(),
            excluded: Vec::new(),
        }
    }

    pub fn find(&self, name: &str) -> Option<&SubEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Decode every selected tensor under its extracted name.
    pub fn read_all(&self, view: &CheckpointView) -> Result<Vec<TensorData>> {
        self.entries
            .iter()
            .map(|e| {
                let mut t = view.read_tensor(&e.source)?;
                t.meta.name = e.name.clone();
                Ok(t)
            })
            .collect()
    }

    /// Write the subtree as a standalone checkpoint, stored bytes untouched.
    pub fn write(&self, view: &CheckpointView, path: impl AsRef<Path>) -> Result<()> {
        let layout = CheckpointLayout::new(
            self.entries
                .iter()
                .map(|e| (e.name.clone(), e.meta.dtype, e.meta.shape.clone())),
            view.metadata().cloned(),
        )?;
        let writer = CheckpointWriter::create(path, layout)?;
        for (i, e) in self.entries.iter().enumerate() {
            copy_tensor_bytes(view, &e.meta, &writer, i)?;
        }
        writer.finish()
    }
}

/// Select and rename the language-model subtree of `view`.
pub fn extract_submodel(view: &CheckpointView, rules: &KeymapRules) -> Result<Submodel> {
    let mut sub = Submodel::default();
    for meta in view.tensors().values() {
        if rules.selects(&meta.name) {
            sub.entries.push(SubEntry {
                name: rules.rename(&meta.name)?,
                source: meta.name.clone(),
                meta: meta.clone(),
            });
        } else {
            sub.excluded.push(meta.name.clone());
        }
    }
    if sub.entries.is_empty() {
        return Err(Error::Keymap("keymap rules selected zero tensors".into()));
    }
    let mut seen = HashSet::new();
    for e in &sub.entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::DuplicateName(e.name.clone()));
        }
    }
    Ok(sub)
}

/// Write `vlm` to `path` with the tensors in `merged` (LLM names) replacing
/// their counterparts. Order, shapes and every other tensor's bytes are
/// taken from `vlm`; merged tensors are encoded at their own dtype.
pub fn inject_submodel(
    vlm: &CheckpointView,
    merged: &[TensorData],
    rules: &KeymapRules,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut by_source = std::collections::HashMap::new();
    for t in merged {
        let full = rules.restore(&t.meta.name);
        let target = vlm.meta(&full)?;
        if target.shape != t.meta.shape {
            return Err(Error::ShapeMismatch {
                name: full,
                left: target.shape.clone(),
                right: t.meta.shape.clone(),
            });
        }
        if t.values.len() != t.meta.numel() {
            return Err(Error::ShapeMismatch {
                name: full,
                left: t.meta.shape.clone(),
                right: vec![t.values.len()],
            });
        }
        if by_source.insert(full.clone(), t).is_some() {
            return Err(Error::DuplicateName(full));
        }
    }

    let layout = CheckpointLayout::new(
        vlm.tensors().values().map(|m| {
            let dtype = by_source.get(&m.name).map_or(m.dtype, |t| t.meta.dtype);
            (m.name.clone(), dtype, m.shape.clone())
        }),
        vlm.metadata().cloned(),
    )?
    .reuse_header_of(vlm);
    let writer = CheckpointWriter::create(path, layout)?;
    let mut bytes = Vec::new();
    for (i, meta) in vlm.tensors().values().enumerate() {
        match by_source.get(&meta.name) {
            None => copy_tensor_bytes(vlm, meta, &writer, i)?,
            Some(t) => {
                let step = IO_CHUNK_BYTES / t.meta.dtype.size();
                let mut offset = 0;
                for chunk in t.values.chunks(step) {
                    bytes.clear();
                    encode_into(chunk, t.meta.dtype, &mut bytes);
                    writer.write_at(i, offset, &bytes)?;
                    offset += bytes.len();
                }
            }
        }
    }
    writer.finish()
}

/// Like [`inject_submodel`], but the merged tensors come from a checkpoint
/// in the extracted namespace and are byte-copied at their stored dtype.
pub fn inject_checkpoint(
    vlm: &CheckpointView,
    merged: &CheckpointView,
    rules: &KeymapRules,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut by_source = std::collections::HashMap::new();
    for m in merged.tensors().values() {
        let full = rules.restore(&m.name);
        let target = vlm.meta(&full)?;
        if target.shape != m.shape {
            return Err(Error::ShapeMismatch {
                name: full,
                left: target.shape.clone(),
                right: m.shape.clone(),
            });
        }
        if by_source.insert(full.clone(), m).is_some() {
            return Err(Error::DuplicateName(full));
        }
    }

    let layout = CheckpointLayout::new(
        vlm.tensors().values().map(|m| {
            let dtype = by_source.get(&m.name).map_or(m.dtype, |t| t.dtype);
            (m.name.clone(), dtype, m.shape.clone())
        }),
        vlm.metadata().cloned(),
    )?
    .reuse_header_of(vlm);
    let writer = CheckpointWriter::create(path, layout)?;
    for (i, meta) in vlm.tensors().values().enumerate() {
        match by_source.get(&meta.name) {
            None => copy_tensor_bytes(vlm, meta, &writer, i)?,
            Some(m) => copy_tensor_bytes(merged, m, &writer, i)?,
        }
    }
    writer.finish()
}
