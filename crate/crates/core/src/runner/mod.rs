//! Recipes, end-to-end merges, grid sweeps and checkpoint diffs.

mod diff;
mod pipeline;
mod recipe;
mod report;
mod sweep;

pub use diff::{diff_checkpoints, DiffReport, DiffStatus, ShapeConflict, TensorDiff};
pub use pipeline::{report_path, run_merge, with_threads};
pub use recipe::{load_recipe, parse_recipe, DonorEntry, DtypePolicy, MergeRecipe, RECIPE_VERSION};
pub use report::{DonorStats, MergeReport, SkippedTensor, TensorReport, Totals};
pub use sweep::{
    file_sha256, render_name, run_sweep, GridPoint, InputDigest, Manifest, PointRecord, PointStatus, SweepSpec,
    DEFAULT_ALPHA_GRID, DEFAULT_DENSITY_GRID, DEFAULT_NAME_TEMPLATE, MANIFEST_NAME,
};
