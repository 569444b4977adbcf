use std::collections::{HashMap, HashSet};

use serde::Serialize;

use super::{MismatchPolicy, Submodel};
use crate::error::{Error, Result};

/// Leading-row split for a vocabulary-extended rank-2 pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RowSplit {
    /// Rows `[0, merged_rows)` are merged.
    pub merged_rows: usize,
    pub base_rows: usize,
    pub donor_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pair {
    /// Extracted-namespace name on the merge-base side.
    pub base_name: String,
    /// Name of the same tensor in the full base checkpoint.
    pub base_source: String,
    /// Name in the donor checkpoint.
    pub donor_name: String,
    /// Shape of the aligned region (the common leading rows when split).
    pub shape: Vec<usize>,
    pub rows: Option<RowSplit>,
}

impl Pair {
    /// Number of aligned elements; always a prefix of both tensors in
    /// row-major order.
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Pairing of a merge base with one donor.
///
/// `pairs`, `skipped` and `passthrough` partition the full base checkpoint
/// by source name. `donor_only` lists donor tensors with no counterpart.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AlignmentTable {
    pub pairs: Vec<Pair>,
    pub skipped: Vec<(String, String)>,
    pub passthrough: Vec<String>,
    pub donor_only: Vec<String>,
}

impl AlignmentTable {
    pub fn pair_for(&self, base_source: &str) -> Option<&Pair> {
        self.pairs.iter().find(|p| p.base_source == base_source)
    }
}

/// Pair the extracted merge base with a donor tree by name.
pub fn align(base: &Submodel, donor: &Submodel, policy: MismatchPolicy) -> Result<AlignmentTable> {
    let donor_by_name: HashMap<&str, _> = donor.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut table = AlignmentTable {
        passthrough: base.excluded.clone(),
        ..Default::default()
    };

    for b in &base.entries {
        let Some(d) = donor_by_name.get(b.name.as_str()) else {
            match policy {
                MismatchPolicy::Skip => {
                    table.skipped.push((b.source.clone(), "missing from donor".into()));
                    continue;
                }
                _ => {
                    return Err(Error::Alignment {
                        name: b.name.clone(),
                        reason: "missing from donor".into(),
                    })
                }
            }
        };
        let (bs, ds) = (&b.meta.shape, &d.meta.shape);
        if bs == ds {
            table.pairs.push(Pair {
                base_name: b.name.clone(),
                base_source: b.source.clone(),
                donor_name: d.source.clone(),
                shape: bs.clone(),
                rows: None,
            });
            continue;
        }
        match policy {
            MismatchPolicy::Strict => {
                return Err(Error::ShapeMismatch {
                    name: b.name.clone(),
                    left: bs.clone(),
                    right: ds.clone(),
                })
            }
            MismatchPolicy::Skip => {
                table
                    .skipped
                    .push((b.source.clone(), format!("shape {bs:?} vs donor {ds:?}")));
            }
            MismatchPolicy::TruncateRows => {
                if bs.len() != 2 || ds.len() != 2 || bs[1] != ds[1] {
                    return Err(Error::Alignment {
                        name: b.name.clone(),
                        reason: format!("truncate_rows needs rank-2 shapes differing only in rows, got {bs:?} vs {ds:?}"),
                    });
                }
                let merged_rows = bs[0].min(ds[0]);
                table.pairs.push(Pair {
                    base_name: b.name.clone(),
                    base_source: b.source.clone(),
                    donor_name: d.source.clone(),
                    shape: vec![merged_rows, bs[1]],
                    rows: Some(RowSplit {
                        merged_rows,
                        base_rows: bs[0],
                        donor_rows: ds[0],
                    }),
                });
            }
        }
    }

    let base_names: HashSet<&str> = base.names().collect();
    for d in &donor.entries {
        if !base_names.contains(d.name.as_str()) {
            if policy == MismatchPolicy::Skip {
                table.donor_only.push(d.source.clone());
            } else {
                return Err(Error::Alignment {
                    name: d.name.clone(),
                    reason: "present in donor only".into(),
                });
            }
        }
    }
    Ok(table)
}
