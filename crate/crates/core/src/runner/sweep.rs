use std::collections::HashSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pipeline::{report_path, run_merge};
use super::recipe::MergeRecipe;
use crate::error::{Error, Result};
use crate::merge_core::Density;

pub const DEFAULT_NAME_TEMPLATE: &str = "merge_a{alpha}_k{density}.safetensors";
pub const DEFAULT_ALPHA_GRID: [f64; 6] = [0.0, 0.05, 0.1, 0.5, 0.9, 0.95];
pub const DEFAULT_DENSITY_GRID: [f64; 3] = [1.0, 0.5, 0.2];
pub const MANIFEST_NAME: &str = "manifest.json";

/// An α × K grid over one recipe. Every donor's α is set to the grid value;
/// the recipe's `output` is ignored in favour of `output_dir` and the name
/// template, which may use `{alpha}` and `{density}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub recipe: MergeRecipe,
    pub alpha_grid: Vec<f64>,
    pub density_grid: Vec<f64>,
    pub output_dir: PathBuf,
    pub name_template: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub density: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub alpha: f64,
    pub density: f64,
    pub output: PathBuf,
    pub report: PathBuf,
    pub status: PointStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub grid: Vec<GridPoint>,
    pub points: Vec<PointRecord>,
    pub inputs: Vec<InputDigest>,
    pub started_at: String,
}

impl Manifest {
    pub fn failures(&self) -> usize {
        self.points.iter().filter(|p| p.status == PointStatus::Failed).count()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidParam(format!("{}: {e}", path.display())))
    }
}

/// Substitute `{alpha}` and `{density}` with their shortest decimal forms.
pub fn render_name(template: &str, point: GridPoint) -> String {
    template
        .replace("{alpha}", &point.alpha.to_string())
        .replace("{density}", &point.density.to_string())
}

impl SweepSpec {
    pub fn new(recipe: MergeRecipe, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            recipe,
            alpha_grid: DEFAULT_ALPHA_GRID.to_vec(),
            density_grid: DEFAULT_DENSITY_GRID.to_vec(),
            output_dir: output_dir.into(),
            name_template: DEFAULT_NAME_TEMPLATE.into(),
        }
    }

    /// Grid points, α-major.
    pub fn points(&self) -> Vec<GridPoint> {
        self.alpha_grid
            .iter()
            .flat_map(|&alpha| self.density_grid.iter().map(move |&density| GridPoint { alpha, density }))
            .collect()
    }

    /// Checks on the grid as a whole. Individual values are validated per
    /// point so one bad value fails only its own point.
    pub fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() || self.density_grid.is_empty() {
            return Err(Error::Recipe("sweep grids must be non-empty".into()));
        }
        let mut names = HashSet::new();
        for p in self.points() {
            let name = render_name(&self.name_template, p);
            if !names.insert(name.clone()) {
                return Err(Error::Recipe(format!(
                    "name template {:?} maps two grid points to {name}",
                    self.name_template
                )));
            }
        }
        Ok(())
    }

    /// The recipe for one grid point.
    pub fn recipe_for(&self, point: GridPoint) -> Result<MergeRecipe> {
        let mut r = self.recipe.clone();
        r.set_alpha(point.alpha);
        r.density = Density::new(point.density).map_err(|e| Error::Recipe(format!("density: {e}")))?;
        r.output = self.output_dir.join(render_name(&self.name_template, point));
        r.validate()?;
        Ok(r)
    }
}

/// SHA-256 of a file's bytes, lowercase hex.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

/// Run every grid point in grid order and write `manifest.json` into the
/// output directory. Point failures are recorded, not returned.
pub fn run_sweep(spec: &SweepSpec) -> Result<Manifest> {
    spec.validate()?;
    let started_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    std::fs::create_dir_all(&spec.output_dir).map_err(|e| Error::io(&spec.output_dir, e))?;

    let mut seen = HashSet::new();
    let mut inputs = Vec::new();
    for path in std::iter::once(&spec.recipe.base).chain(spec.recipe.donors.iter().map(|d| &d.path)) {
        if seen.insert(path.clone()) {
            inputs.push(InputDigest {
                path: path.clone(),
                sha256: file_sha256(path)?,
            });
        }
    }

    let grid = spec.points();
    let mut points = Vec::with_capacity(grid.len());
    for &p in &grid {
        let output = spec.output_dir.join(render_name(&spec.name_template, p));
        let report = report_path(&output);
        let result = spec.recipe_for(p).and_then(|r| run_merge(&r));
        let (status, error) = match result {
            Ok(_) => {
                info!("sweep point alpha={} density={} done", p.alpha, p.density);
                (PointStatus::Ok, None)
            }
            Err(e) => {
                warn!("sweep point alpha={} density={} failed: {e}", p.alpha, p.density);
                (PointStatus::Failed, Some(e.to_string()))
            }
        };
        points.push(PointRecord {
            alpha: p.alpha,
            density: p.density,
            output,
            report,
            status,
            error,
        });
    }

    let manifest = Manifest {
        grid,
        points,
        inputs,
        started_at,
    };
    let path = spec.output_dir.join(MANIFEST_NAME);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
