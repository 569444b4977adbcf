//! Task arithmetic with TIES-style trimming and sign election.
//!
//! A task vector is the elementwise difference `donor − base`, where `base`
//! is the model being edited. Merging adds a weighted, trimmed sum of task
//! vectors back onto the base:
//!
//! ```text
//! M = base + Σᵢ αᵢ · δ̃ᵢ
//! ```
//!
//! `δ̃ᵢ` is the trimmed delta with entries that disagree with the elected
//! sign removed. With one donor and `K = 1` this is linear interpolation:
//! `α = 0` returns the base and `α = 1` returns the donor.
//!
//! Inputs are decoded `f32` values. Deltas and sums are carried in `f64`
//! and rounded to `f32` once per element. `α = 0` always returns the base
//! bit for bit. `α = 1` returns the donor exactly whenever the f64
//! difference is exact, i.e. whenever nonzero base and donor entries are
//! within a factor of 2^28 of each other.

mod stats;
mod trim;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use stats::{delta_stats, DeltaStats, StatsAccumulator};
pub use trim::{trim, trim_mask, DeltaSource, Density, TrimPlan, CHUNK_ELEMS};
pub(crate) use trim::chunk_ranges;

use crate::error::{Error, Result};
use crate::tensor_store::TensorData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// `base + Σ αᵢ δ̃ᵢ`.
    #[default]
    WeightedSum,
    /// Per element, the α-weighted mean over donors whose entry survived.
    DisjointMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeParams {
    pub alphas: Vec<f64>,
    pub density: Density,
    pub elect_sign: bool,
    pub mode: MergeMode,
}

impl MergeParams {
    pub fn single(alpha: f64, density: Density) -> Self {
        Self {
            alphas: vec![alpha],
            density,
            elect_sign: true,
            mode: MergeMode::WeightedSum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::InvalidParam("at least one donor is required".into()));
        }
        for &a in &self.alphas {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::InvalidParam(format!("alpha must be finite and >= 0, got {a}")));
            }
        }
        if self.mode == MergeMode::DisjointMean && self.alphas.len() < 2 {
            return Err(Error::InvalidParam("disjoint_mean needs at least two donors".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    #[inline]
    fn of_total(total: f64) -> Sign {
        // zero mass elects positive
        if total < 0.0 {
            Sign::Negative
        } else {
            Sign::Positive
        }
    }

    #[inline]
    fn conflicts(self, d: f64) -> bool {
        match self {
            Sign::Positive => d < 0.0,
            Sign::Negative => d > 0.0,
        }
    }
}

/// Elementwise `donor − base`.
pub fn task_vector(base: &TensorData, donor: &TensorData) -> Result<Vec<f64>> {
    if base.meta.shape != donor.meta.shape {
        return Err(Error::ShapeMismatch {
            name: base.meta.name.clone(),
            left: base.meta.shape.clone(),
            right: donor.meta.shape.clone(),
        });
    }
    Ok(base
        .values
        .iter()
        .zip(&donor.values)
        .map(|(&b, &d)| d as f64 - b as f64)
        .collect())
}

/// Per-element sign of the weighted total `Σ αᵢ δ̂ᵢ`.
pub fn elect_sign(trimmed: &[&[f64]], weights: &[f64]) -> Result<Vec<Sign>> {
    let n = check_donors(trimmed, weights)?;
    Ok((0..n)
        .map(|j| {
            let total: f64 = trimmed.iter().zip(weights).map(|(d, &w)| w * d[j]).sum();
            Sign::of_total(total)
        })
        .collect())
}

fn check_donors(trimmed: &[&[f64]], weights: &[f64]) -> Result<usize> {
    let Some(first) = trimmed.first() else {
        return Err(Error::InvalidParam("at least one donor is required".into()));
    };
    if weights.len() != trimmed.len() {
        return Err(Error::InvalidParam(format!(
            "{} weights for {} donors",
            weights.len(),
            trimmed.len()
        )));
    }
    let n = first.len();
    if let Some(bad) = trimmed.iter().find(|d| d.len() != n) {
        return Err(Error::ShapeMismatch {
            name: "<donor delta>".into(),
            left: vec![n],
            right: vec![bad.len()],
        });
    }
    Ok(n)
}

/// Combine one element. `deltas` holds the trimmed entry of each donor and
/// is zeroed in place where it conflicts with the elected sign. Returns the
/// merged value and the number of conflicting entries dropped.
///
/// When no donor contributes (every weight or entry is zero) the base value
/// is returned unchanged, bit for bit.
#[inline]
pub fn combine(base: f32, deltas: &mut [f64], weights: &[f64], mode: MergeMode, elect: bool) -> (f32, u32) {
    let mut conflicts = 0;
    if elect && deltas.len() > 1 {
        let total: f64 = deltas.iter().zip(weights).map(|(d, &w)| w * d).sum();
        let sign = Sign::of_total(total);
        for d in deltas.iter_mut() {
            if sign.conflicts(*d) {
                *d = 0.0;
                conflicts += 1;
            }
        }
    }
    let mut acc = 0.0f64;
    let mut wsum = 0.0f64;
    let mut active = false;
    for (&d, &w) in deltas.iter().zip(weights) {
        if d != 0.0 && w != 0.0 {
            acc += w * d;
            wsum += w;
            active = true;
        }
    }
    if !active {
        return (base, conflicts);
    }
    let step = match mode {
        MergeMode::WeightedSum => acc,
        MergeMode::DisjointMean => acc / wsum,
    };
    ((base as f64 + step) as f32, conflicts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub values: Vec<f32>,
    pub sign_conflicts: u64,
}

/// Merge trimmed deltas onto `base`.
pub fn merge(base: &TensorData, trimmed: &[&[f64]], params: &MergeParams) -> Result<MergeOutcome> {
    params.validate()?;
    let n = check_donors(trimmed, &params.alphas)?;
    if n != base.values.len() {
        return Err(Error::ShapeMismatch {
            name: base.meta.name.clone(),
            left: base.meta.shape.clone(),
            right: vec![n],
        });
    }
    let mut scratch = vec![0.0f64; trimmed.len()];
    let mut sign_conflicts = 0u64;
    let values = base
        .values
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            for (s, d) in scratch.iter_mut().zip(trimmed) {
                *s = d[j];
            }
            let (v, c) = combine(b, &mut scratch, &params.alphas, params.mode, params.elect_sign);
            sign_conflicts += c as u64;
            v
        })
        .collect();
    Ok(MergeOutcome {
        values,
        sign_conflicts,
    })
}

/// `base + α·(donor − base)`, through the same kernel as [`merge`].
pub fn lerp(base: &TensorData, donor: &TensorData, alpha: f64) -> Result<Vec<f32>> {
    let delta = task_vector(base, donor)?;
    let weights = [alpha];
    Ok(base
        .values
        .iter()
        .zip(&delta)
        .map(|(&b, &d)| combine(b, &mut [d], &weights, MergeMode::WeightedSum, false).0)
        .collect())
}

/// Per-tensor deltas between two aligned tensor sets, optionally trimmed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskVector {
    pub deltas: IndexMap<String, Vec<f64>>,
    pub density: Option<Density>,
    pub masks: Option<IndexMap<String, Vec<bool>>>,
}

impl TaskVector {
    /// Deltas `donor − base` for every tensor of `base`, matched by name.
    pub fn between(base: &[TensorData], donor: &[TensorData]) -> Result<Self> {
        let donors: IndexMap<&str, &TensorData> = donor.iter().map(|t| (t.name(), t)).collect();
        let mut deltas = IndexMap::new();
        for b in base {
            let d = donors
                .get(b.name())
                .ok_or_else(|| Error::TensorNotFound(b.name().to_string()))?;
            deltas.insert(b.name().to_string(), task_vector(b, d)?);
        }
        Ok(Self {
            deltas,
            ..Default::default()
        })
    }

    /// Trim every tensor independently at density `K`.
    pub fn trimmed(mut self, density: Density) -> Self {
        let mut masks = IndexMap::new();
        for (name, delta) in self.deltas.iter_mut() {
            let mask = trim_mask(delta, density);
            for (d, &k) in delta.iter_mut().zip(&mask) {
                if !k {
                    *d = 0.0;
                }
            }
            masks.insert(name.clone(), mask);
        }
        self.density = Some(density);
        self.masks = Some(masks);
        self
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.deltas.get(name).map(Vec::as_slice)
    }

    pub fn stats(&self, name: &str) -> Option<DeltaStats> {
        let delta = self.deltas.get(name)?;
        let mask = self.masks.as_ref().and_then(|m| m.get(name)).map(Vec::as_slice);
        Some(delta_stats(delta, mask))
    }
}
