use std::collections::HashSet;
use std::ops::Range;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rayon::prelude::*;

use super::recipe::MergeRecipe;
use super::report::{MergeReport, SkippedTensor, TensorReport};
use crate::error::{Error, Result, Stage};
use crate::keymap::{align, extract_submodel, AlignmentTable, KeymapRules, Submodel};
use crate::merge_core::{chunk_ranges, combine, DeltaSource, StatsAccumulator, TrimPlan, CHUNK_ELEMS};
use crate::tensor_store::{
    copy_tensor_bytes, encode_into, CheckpointLayout, CheckpointView, CheckpointWriter, Dtype, TensorMeta,
    TensorReader,
};

/// `<output stem>.report.json` next to the output file.
pub fn report_path(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    output.with_file_name(format!("{stem}.report.json"))
}

/// One donor's contribution to one output tensor.
struct DonorSlot<'a> {
    base: TensorReader<'a>,
    donor: TensorReader<'a>,
    /// Elements `[0, len)` of the base tensor are paired with the donor.
    len: usize,
}

impl DeltaSource for DonorSlot<'_> {
    fn len(&self) -> usize {
        self.len
    }

    fn fill(&self, range: Range<usize>, out: &mut Vec<f64>) -> Result<()> {
        let (mut scratch, mut b, mut d) = (Vec::new(), Vec::new(), Vec::new());
        self.base.read(range.clone(), &mut scratch, &mut b)?;
        self.donor.read(range, &mut scratch, &mut d)?;
        out.clear();
        out.extend(b.iter().zip(&d).map(|(&b, &d)| d as f64 - b as f64));
        Ok(())
    }
}

#[derive(Default)]
struct ChunkOutcome {
    stats: Vec<StatsAccumulator>,
    sign_conflicts: u64,
    max_roundoff: f32,
}

/// Execute a recipe: merge, inject, write the output and its report.
///
/// Work is sequential over tensors and parallel over fixed-size element
/// chunks inside each tensor, on the current rayon pool. The chunk grid
/// does not depend on the pool size, so output bytes do not either.
pub fn run_merge(recipe: &MergeRecipe) -> Result<MergeReport> {
    recipe.validate()?;
    let params = recipe.params();
    let base_view = CheckpointView::open(&recipe.base)?;
    let donor_views = recipe
        .donors
        .iter()
        .map(|d| CheckpointView::open(&d.path))
        .collect::<Result<Vec<_>>>()?;

    let rules = recipe.keymap.clone().unwrap_or_else(KeymapRules::identity);
    let base_sub = match &recipe.keymap {
        Some(rules) => extract_submodel(&base_view, rules)?,
        None => Submodel::identity(&base_view),
    };
    let tables = donor_views
        .iter()
        .map(|v| align(&base_sub, &Submodel::identity(v), rules.mismatch_policy))
        .collect::<Result<Vec<AlignmentTable>>>()?;

    let plan: Vec<Vec<Option<(&TensorMeta, usize)>>> = base_view
        .tensors()
        .values()
        .map(|m| {
            tables
                .iter()
                .zip(&donor_views)
                .map(|(t, v)| {
                    t.pair_for(&m.name)
                        .map(|p| (v.get(&p.donor_name).expect("aligned donor tensor exists"), p.numel()))
                })
                .collect()
        })
        .collect();

    let layout = CheckpointLayout::new(
        base_view.tensors().values().zip(&plan).map(|(m, slots)| {
            let merged = slots.iter().any(Option::is_some);
            let dtype = if merged { recipe.dtype_policy.resolve(m.dtype) } else { m.dtype };
            (m.name.clone(), dtype, m.shape.clone())
        }),
        base_view.metadata().cloned(),
    )?
    .reuse_header_of(&base_view);
    let out_metas = layout.tensors().to_vec();
    let writer = CheckpointWriter::create(&recipe.output, layout)?;

    let mut report = MergeReport {
        alphas: params.alphas.clone(),
        density: params.density.get(),
        ..Default::default()
    };
    let skipped: HashSet<&str> = tables.iter().flat_map(|t| t.skipped.iter().map(|(n, _)| n.as_str())).collect();
    for (index, (meta, slots)) in base_view.tensors().values().zip(&plan).enumerate() {
        report.totals.parameter_count += meta.numel() as u64;
        if slots.iter().all(Option::is_none) {
            copy_tensor_bytes(&base_view, meta, &writer, index).map_err(|e| e.at(Stage::Inject, &meta.name))?;
            // skipped tensors are copied too but reported under `skipped`
            if !skipped.contains(meta.name.as_str()) {
                report.passthrough.push(meta.name.clone());
            }
            continue;
        }
        let slots: Vec<Option<DonorSlot>> = slots
            .iter()
            .zip(&donor_views)
            .map(|(s, v)| {
                s.map(|(dm, len)| DonorSlot {
                    base: base_view.reader(meta),
                    donor: v.reader(dm),
                    len,
                })
            })
            .collect();
        let entry = merge_tensor(meta, out_metas[index].dtype, &base_view, &slots, recipe, &writer, index)?;
        debug!("merged {} ({} elements)", meta.name, meta.numel());
        report.totals.merged_parameters += slots.iter().flatten().map(|s| s.len as u64).max().unwrap_or(0);
        report.tensors.push(entry);
    }
    for t in &tables {
        report.skipped.extend(t.skipped.iter().map(|(name, reason)| SkippedTensor {
            name: name.clone(),
            reason: reason.clone(),
        }));
        report.donor_only.push(t.donor_only.clone());
    }
    report.skipped.sort_by(|a, b| a.name.cmp(&b.name));
    report.skipped.dedup_by(|a, b| a.name == b.name);
    report.finish_totals();

    writer.finish()?;
    report.write(&report_path(&recipe.output))?;
    info!(
        "wrote {} ({} merged, {} passthrough)",
        recipe.output.display(),
        report.tensors.len(),
        report.passthrough.len()
    );
    Ok(report)
}

fn merge_tensor(
    meta: &TensorMeta,
    out_dtype: Dtype,
    base_view: &CheckpointView,
    slots: &[Option<DonorSlot>],
    recipe: &MergeRecipe,
    writer: &CheckpointWriter,
    index: usize,
) -> Result<TensorReport> {
    let trims = slots
        .iter()
        .map(|s| match s {
            Some(s) if !recipe.density.is_full() => TrimPlan::compute(s, recipe.density),
            Some(s) => Ok(TrimPlan::keep_all(s.len)),
            None => Ok(TrimPlan::keep_all(0)),
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at(Stage::Trim, &meta.name))?;

    let alphas: Vec<f64> = recipe.donors.iter().map(|d| d.alpha).collect();
    let base = base_view.reader(meta);
    let chunks = chunk_ranges(meta.numel(), CHUNK_ELEMS);
    let parts = chunks
        .par_iter()
        .map(|r| {
            merge_chunk(r.clone(), base, slots, &trims, &alphas, recipe, out_dtype, writer, index)
        })
        .collect::<Result<Vec<ChunkOutcome>>>()
        .map_err(|e| e.at(Stage::Merge, &meta.name))?;

    let mut total = ChunkOutcome {
        stats: vec![StatsAccumulator::default(); slots.len()],
        ..Default::default()
    };
    for p in &parts {
        for (acc, s) in total.stats.iter_mut().zip(&p.stats) {
            acc.absorb(s);
        }
        total.sign_conflicts += p.sign_conflicts;
        total.max_roundoff = total.max_roundoff.max(p.max_roundoff);
    }
    Ok(TensorReport::from_parts(
        meta.name.clone(),
        slots.iter().map(Option::is_some),
        &total.stats,
        total.sign_conflicts,
        total.max_roundoff as f64,
    ))
}

#[allow(clippy::too_many_arguments)]
fn merge_chunk(
    range: Range<usize>,
    base: TensorReader,
    slots: &[Option<DonorSlot>],
    trims: &[TrimPlan],
    alphas: &[f64],
    recipe: &MergeRecipe,
    out_dtype: Dtype,
    writer: &CheckpointWriter,
    index: usize,
) -> Result<ChunkOutcome> {
    let mut scratch = Vec::new();
    let mut base_vals = Vec::new();
    base.read(range.clone(), &mut scratch, &mut base_vals)?;

    let mut deltas: Vec<Vec<f64>> = Vec::with_capacity(slots.len());
    let mut donor_vals = Vec::new();
    for s in slots {
        let mut d = Vec::new();
        if let Some(s) = s {
            let end = range.end.min(s.len);
            if range.start < end {
                s.donor.read(range.start..end, &mut scratch, &mut donor_vals)?;
                d.extend(
                    base_vals
                        .iter()
                        .zip(&donor_vals)
                        .map(|(&b, &v)| v as f64 - b as f64),
                );
            }
        }
        deltas.push(d);
    }

    let mut out = ChunkOutcome {
        stats: vec![StatsAccumulator::default(); slots.len()],
        ..Default::default()
    };
    let mut entry = vec![0.0f64; slots.len()];
    let mut merged = Vec::with_capacity(base_vals.len());
    for (k, &b) in base_vals.iter().enumerate() {
        let j = range.start + k;
        for (i, e) in entry.iter_mut().enumerate() {
            *e = match deltas[i].get(k) {
                Some(&d) => {
                    let keep = trims[i].keeps(j, d);
                    out.stats[i].push(d, keep);
                    if keep {
                        d
                    } else {
                        0.0
                    }
                }
                None => 0.0,
            };
        }
        let (v, c) = combine(b, &mut entry, alphas, recipe.merge_mode, recipe.elect_sign);
        out.sign_conflicts += c as u64;
        merged.push(v);
    }

    let mut bytes = Vec::with_capacity(merged.len() * out_dtype.size());
    out.max_roundoff = encode_into(&merged, out_dtype, &mut bytes);
    writer.write_at(index, range.start * out_dtype.size(), &bytes)?;
    Ok(out)
}

/// Run `f` on a dedicated pool of `threads` workers; 0 picks the rayon
/// default.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParam(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}
