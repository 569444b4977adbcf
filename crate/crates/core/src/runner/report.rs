use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge_core::StatsAccumulator;

/// Norms of one donor's raw task vector over the aligned elements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonorStats {
    pub donor: usize,
    pub l2: f64,
    pub linf: f64,
    pub kept_fraction: f64,
}

/// Per-tensor merge statistics. `l2` and `linf` cover the raw deltas of all
/// donors (`l2 = sqrt(Σ ‖δᵢ‖²)`); `kept_fraction` is the share of aligned
/// entries that are nonzero and survive trimming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub name: String,
    pub l2: f64,
    pub linf: f64,
    pub kept_fraction: f64,
    pub sign_conflicts: u64,
    pub max_roundoff: f64,
    pub donors: Vec<DonorStats>,
}

impl TensorReport {
    pub(crate) fn from_parts(
        name: String,
        present: impl Iterator<Item = bool>,
        stats: &[StatsAccumulator],
        sign_conflicts: u64,
        max_roundoff: f64,
    ) -> Self {
        let mut all = StatsAccumulator::default();
        let mut donors = Vec::new();
        for (i, (present, s)) in present.zip(stats).enumerate() {
            if !present {
                continue;
            }
            all.absorb(s);
            let f = s.finish();
            donors.push(DonorStats {
                donor: i,
                l2: f.l2,
                linf: f.linf,
                kept_fraction: f.nonzero_fraction,
            });
        }
        let f = all.finish();
        Self {
            name,
            l2: f.l2,
            linf: f.linf,
            kept_fraction: f.nonzero_fraction,
            sign_conflicts,
            max_roundoff,
            donors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedTensor {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub parameter_count: u64,
    pub merged_parameters: u64,
    pub tensors_merged: usize,
    pub tensors_passthrough: usize,
    pub sign_conflicts: u64,
    pub max_roundoff: f64,
}

/// Written next to every merge output as `<stem>.report.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub alphas: Vec<f64>,
    pub density: f64,
    pub tensors: Vec<TensorReport>,
    /// Output tensors copied unchanged from the base.
    pub passthrough: Vec<String>,
    /// Base tensors a donor could not be paired with (skip policy).
    pub skipped: Vec<SkippedTensor>,
    /// Per donor, tensors with no counterpart in the base.
    pub donor_only: Vec<Vec<String>>,
    pub totals: Totals,
}

impl MergeReport {
    pub(crate) fn finish_totals(&mut self) {
        let t = &mut self.totals;
        t.tensors_merged = self.tensors.len();
        t.tensors_passthrough = self.passthrough.len();
        t.sign_conflicts = self.tensors.iter().map(|r| r.sign_conflicts).sum();
        t.max_roundoff = self.tensors.iter().map(|r| r.max_roundoff).fold(0.0, f64::max);
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorReport> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidParam(format!("{}: {e}", path.display())))
    }
}
