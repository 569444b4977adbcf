use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::keymap::{extract_submodel, KeymapRules, SubEntry, Submodel};
use crate::merge_core::{chunk_ranges, CHUNK_ELEMS};
use crate::tensor_store::{CheckpointView, Dtype};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffStatus {
    Identical,
    Different,
    Incomparable,
}

/// Distance `b − a` for one common tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDiff {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype_a: Dtype,
    pub dtype_b: Dtype,
    pub l2: f64,
    pub linf: f64,
    /// Flat index of the first element with the largest `|Δ|`.
    pub max_index: Option<usize>,
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeConflict {
    pub name: String,
    pub shape_a: Vec<usize>,
    pub shape_b: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub status: DiffStatus,
    pub tensors: Vec<TensorDiff>,
    pub shape_conflicts: Vec<ShapeConflict>,
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
}

#[derive(Clone, Copy)]
struct Partial {
    sum_sq: f64,
    linf: f64,
    argmax: Option<usize>,
    equal: bool,
}

impl Partial {
    fn then(self, later: Partial) -> Partial {
        let take_later = match (self.argmax, later.argmax) {
            (None, _) => true,
            (_, None) => false,
            _ => later.linf > self.linf || (later.linf.is_nan() && !self.linf.is_nan()),
        };
        Partial {
            sum_sq: self.sum_sq + later.sum_sq,
            linf: if take_later { later.linf } else { self.linf },
            argmax: if take_later { later.argmax } else { self.argmax },
            equal: self.equal && later.equal,
        }
    }
}

/// Compare two checkpoints tensor by tensor. When `keymap` is given it is
/// applied to `a` only, so a multimodal checkpoint can be compared with a
/// plain language model.
pub fn diff_checkpoints(a: &CheckpointView, b: &CheckpointView, keymap: Option<&KeymapRules>) -> Result<DiffReport> {
    let sa = match keymap {
        Some(rules) => extract_submodel(a, rules)?,
        None => Submodel::identity(a),
    };
    let sb = Submodel::identity(b);
    let by_name: HashMap<&str, &SubEntry> = sb.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let names_a: HashSet<&str> = sa.names().collect();

    let mut report = DiffReport {
        status: DiffStatus::Identical,
        tensors: Vec::new(),
        shape_conflicts: Vec::new(),
        only_in_a: Vec::new(),
        only_in_b: sb
            .entries
            .iter()
            .filter(|e| !names_a.contains(e.name.as_str()))
            .map(|e| e.name.clone())
            .collect(),
    };
    for ea in &sa.entries {
        let Some(eb) = by_name.get(ea.name.as_str()) else {
            report.only_in_a.push(ea.name.clone());
            continue;
        };
        if ea.meta.shape != eb.meta.shape {
            report.shape_conflicts.push(ShapeConflict {
                name: ea.name.clone(),
                shape_a: ea.meta.shape.clone(),
                shape_b: eb.meta.shape.clone(),
            });
            continue;
        }
        let (ra, rb) = (a.reader(&ea.meta), b.reader(&eb.meta));
        let parts = chunk_ranges(ea.meta.numel(), CHUNK_ELEMS)
            .into_par_iter()
            .map(|r| {
                let (mut scratch, mut va, mut vb) = (Vec::new(), Vec::new(), Vec::new());
                ra.read(r.clone(), &mut scratch, &mut va)?;
                rb.read(r.clone(), &mut scratch, &mut vb)?;
                let mut p = Partial {
                    sum_sq: 0.0,
                    linf: 0.0,
                    argmax: None,
                    equal: true,
                };
                for (k, (&x, &y)) in va.iter().zip(&vb).enumerate() {
                    let d = (y as f64 - x as f64).abs();
                    p.sum_sq += d * d;
                    if p.argmax.is_none() || d > p.linf || (d.is_nan() && !p.linf.is_nan()) {
                        p.linf = d;
                        p.argmax = Some(r.start + k);
                    }
                    p.equal &= x.to_bits() == y.to_bits();
                }
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        let total = parts.into_iter().fold(
            Partial {
                sum_sq: 0.0,
                linf: 0.0,
                argmax: None,
                equal: true,
            },
            Partial::then,
        );
        report.tensors.push(TensorDiff {
            name: ea.name.clone(),
            shape: ea.meta.shape.clone(),
            dtype_a: ea.meta.dtype,
            dtype_b: eb.meta.dtype,
            l2: total.sum_sq.sqrt(),
            linf: total.linf,
            max_index: total.argmax,
            identical: total.equal && ea.meta.dtype == eb.meta.dtype,
        });
    }

    let both_empty = sa.entries.is_empty() && sb.entries.is_empty();
    report.status = if !report.shape_conflicts.is_empty() || (report.tensors.is_empty() && !both_empty) {
        DiffStatus::Incomparable
    } else if report.only_in_a.is_empty() && report.only_in_b.is_empty() && report.tensors.iter().all(|t| t.identical) {
        DiffStatus::Identical
    } else {
        DiffStatus::Different
    };
    Ok(report)
}
