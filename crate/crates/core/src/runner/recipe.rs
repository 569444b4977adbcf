use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keymap::KeymapRules;
use crate::merge_core::{Density, MergeMode, MergeParams};
use crate::tensor_store::Dtype;

pub const RECIPE_VERSION: u32 = 1;

/// Storage dtype for merged tensors. `Keep` uses each tensor's base dtype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypePolicy {
    #[default]
    Keep,
    F32,
    F16,
    BF16,
}

impl DtypePolicy {
    pub fn resolve(self, base: Dtype) -> Dtype {
        match self {
            DtypePolicy::Keep => base,
            DtypePolicy::F32 => Dtype::F32,
            DtypePolicy::F16 => Dtype::F16,
            DtypePolicy::BF16 => Dtype::BF16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DonorEntry {
    pub path: PathBuf,
    pub alpha: f64,
}

/// A validated merge recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub version: u32,
    pub base: PathBuf,
    pub donors: Vec<DonorEntry>,
    pub density: Density,
    #[serde(default = "default_true")]
    pub elect_sign: bool,
    #[serde(default)]
    pub merge_mode: MergeMode,
    #[serde(default)]
    pub dtype_policy: DtypePolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keymap: Option<KeymapRules>,
    pub output: PathBuf,
}

fn default_true() -> bool {
    true
}

/// Parse and validate recipe JSON. Paths are kept as written.
pub fn parse_recipe(text: &str) -> Result<MergeRecipe> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let recipe: MergeRecipe = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." || path.is_empty() {
            Error::Recipe(inner.to_string())
        } else {
            Error::Recipe(format!("{path}: {inner}"))
        }
    })?;
    recipe.validate()?;
    Ok(recipe)
}

/// Read a recipe file; relative paths inside it resolve against the file's
/// directory.
pub fn load_recipe(path: impl AsRef<Path>) -> Result<MergeRecipe> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut recipe = parse_recipe(&text)?;
    if let Some(dir) = path.parent() {
        recipe.resolve_relative_to(dir);
    }
    Ok(recipe)
}

impl MergeRecipe {
    /// Single-donor recipe with defaults for every optional field.
    pub fn new(base: impl Into<PathBuf>, donor: impl Into<PathBuf>, alpha: f64, density: Density, output: impl Into<PathBuf>) -> Self {
        Self {
            version: RECIPE_VERSION,
            base: base.into(),
            donors: vec![DonorEntry {
                path: donor.into(),
                alpha,
            }],
            density,
            elect_sign: true,
            merge_mode: MergeMode::WeightedSum,
            dtype_policy: DtypePolicy::Keep,
            keymap: None,
            output: output.into(),
        }
    }

    pub fn params(&self) -> MergeParams {
        MergeParams {
            alphas: self.donors.iter().map(|d| d.alpha).collect(),
            density: self.density,
            elect_sign: self.elect_sign,
            mode: self.merge_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != RECIPE_VERSION {
            return Err(Error::Recipe(format!(
                "version: unsupported recipe version {} (expected {RECIPE_VERSION})",
                self.version
            )));
        }
        if self.donors.is_empty() {
            return Err(Error::Recipe("donors: at least one donor is required".into()));
        }
        for (i, d) in self.donors.iter().enumerate() {
            if !d.alpha.is_finite() || d.alpha < 0.0 {
                return Err(Error::Recipe(format!(
                    "donors[{i}].alpha: alpha must be finite and >= 0, got {}",
                    d.alpha
                )));
            }
        }
        self.params()
            .validate()
            .map_err(|e| Error::Recipe(format!("merge_mode: {e}")))?;
        let inputs = std::iter::once(&self.base).chain(self.donors.iter().map(|d| &d.path));
        for p in inputs {
            if same_path(p, &self.output) {
                return Err(Error::Recipe(format!(
                    "output: {} is also an input",
                    self.output.display()
                )));
            }
        }
        Ok(())
    }

    /// Strict mode: every input must exist as a file.
    pub fn validate_files(&self) -> Result<()> {
        let inputs = std::iter::once(&self.base).chain(self.donors.iter().map(|d| &d.path));
        for p in inputs {
            if !p.is_file() {
                return Err(Error::Recipe(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn resolve_relative_to(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.base);
        fix(&mut self.output);
        for d in &mut self.donors {
            fix(&mut d.path);
        }
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        for d in &mut self.donors {
            d.alpha = alpha;
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("recipe serializes")
    }
}

fn same_path(a: &Path, b: &Path) -> bool {
    if a == b {
        return true;
    }
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}
