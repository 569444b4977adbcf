//! Two ridge-regression tasks standing in for a base model and its
//! fine-tuned descendant.
//!
//! `theta_b` (fine-tuned on task B) is the merge base and `theta_a` (task A)
//! the donor, so `α` walks from B's solution towards A's. Both are written as
//! single-tensor checkpoints and merged by the ordinary recipe runner.

mod rng;

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

pub use rng::NormalStream;

use crate::error::{Error, Result};
use crate::merge_core::Density;
use crate::runner::{run_sweep, DtypePolicy, MergeRecipe, PointStatus, SweepSpec};
use crate::tensor_store::{write_checkpoint, CheckpointView, Dtype, TensorData};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_N: usize = 64;
pub const DEFAULT_D: usize = 8;
pub const DEFAULT_NOISE: f64 = 0.01;
pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const THETA_TENSOR: &str = "theta";

/// Grid `{0, 0.05, …, 1}`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub noise: f64,
    pub ridge: f64,
    /// Use task A's ground-truth weights for task B too.
    pub shared_weights: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            n: DEFAULT_N,
            d: DEFAULT_D,
            noise: DEFAULT_NOISE,
            ridge: DEFAULT_RIDGE,
            shared_weights: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub ridge: f64,
}

impl ToyTask {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, ridge: f64) -> Result<Self> {
        let (n, d) = x.shape();
        if d == 0 || n < d {
            return Err(Error::InvalidParam(format!("toy task needs n >= d >= 1, got n={n}, d={d}")));
        }
        if y.len() != n {
            return Err(Error::InvalidParam(format!("{} targets for {n} rows", y.len())));
        }
        if !(ridge >= 0.0 && ridge.is_finite()) || x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("toy task values must be finite, ridge >= 0".into()));
        }
        Ok(Self { x, y, ridge })
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Solve `(XᵀX + λI) θ = Xᵀy` by Cholesky.
    pub fn solve(&self) -> Result<Vec<f64>> {
        let xt = self.x.transpose();
        let mut a = &xt * &self.x;
        for i in 0..self.dim() {
            a[(i, i)] += self.ridge;
        }
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::InvalidParam("normal equations are not positive definite".into()))?;
        Ok(chol.solve(&(&xt * &self.y)).iter().copied().collect())
    }

    /// `‖Xᵀ(Xθ − y) + λθ‖∞` and `‖Xᵀy‖∞`.
    pub fn optimality_residual(&self, theta: &[f64]) -> (f64, f64) {
        let t = DVector::from_column_slice(theta);
        let xt = self.x.transpose();
        let g = &xt * (&self.x * &t - &self.y) + &t * self.ridge;
        (g.amax(), (&xt * &self.y).amax())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPair {
    pub theta_a: Vec<f64>,
    pub theta_b: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyFixture {
    pub pair: ToyPair,
    pub task_a: ToyTask,
    pub task_b: ToyTask,
    pub w_a: Vec<f64>,
    pub w_b: Vec<f64>,
}

/// Default noise and ridge at the given seed and size.
pub fn make_toy_pair(seed: u64, n: usize, d: usize) -> Result<ToyFixture> {
    make_toy(&ToyConfig {
        seed,
        n,
        d,
        ..Default::default()
    })
}

/// Draw order from one stream: `X_A` (row-major), `w_A`, noise `A`, `X_B`,
/// `w_B`, noise `B`. `y = X w + σ ε`.
pub fn make_toy(cfg: &ToyConfig) -> Result<ToyFixture> {
    if cfg.d == 0 || cfg.n < cfg.d {
        return Err(Error::InvalidParam(format!(
            "toy task needs n >= d >= 1, got n={}, d={}",
            cfg.n, cfg.d
        )));
    }
    let mut rng = NormalStream::new(cfg.seed);
    let mut draw = |w_override: Option<&[f64]>| {
        let x = DMatrix::from_row_slice(cfg.n, cfg.d, &rng.normals(cfg.n * cfg.d));
        let mut w = rng.normals(cfg.d);
        if let Some(o) = w_override {
            w.copy_from_slice(o);
        }
        let eps = DVector::from_vec(rng.normals(cfg.n));
        let y = &x * DVector::from_column_slice(&w) + eps * cfg.noise;
        (x, w, y)
    };
    let (xa, w_a, ya) = draw(None);
    let (xb, w_b, yb) = draw(cfg.shared_weights.then_some(w_a.as_slice()));
    let task_a = ToyTask::new(xa, ya, cfg.ridge)?;
    let task_b = ToyTask::new(xb, yb, cfg.ridge)?;
    let pair = ToyPair {
        theta_a: task_a.solve()?,
        theta_b: task_b.solve()?,
        seed: cfg.seed,
    };
    Ok(ToyFixture {
        pair,
        task_a,
        task_b,
        w_a,
        w_b,
    })
}

/// `(1/n)‖Xθ − y‖² + λ‖θ‖²`, summed in index order.
pub fn eval_loss(theta: &[f64], task: &ToyTask) -> Result<f64> {
    let (n, d) = task.x.shape();
    if theta.len() != d {
        return Err(Error::ShapeMismatch {
            name: THETA_TENSOR.into(),
            left: vec![d],
            right: vec![theta.len()],
        });
    }
    let mut sse = 0.0;
    for i in 0..n {
        let mut r = -task.y[i];
        for (j, t) in theta.iter().enumerate() {
            r += task.x[(i, j)] * t;
        }
        sse += r * r;
    }
    let norm: f64 = theta.iter().map(|t| t * t).sum();
    Ok(sse / n as f64 + task.ridge * norm)
}

impl ToyFixture {
    /// Write `theta_a.safetensors` and `theta_b.safetensors` (F32, tensor
    /// `theta`) into `dir`.
    pub fn write_checkpoints(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let write = |theta: &[f64], name: &str| -> Result<PathBuf> {
            let values = theta.iter().map(|&t| t as f32).collect();
            let t = TensorData::new(THETA_TENSOR, Dtype::F32, vec![theta.len()], values)?;
            let path = dir.join(name);
            write_checkpoint(&[t], None, &path)?;
            Ok(path)
        };
        Ok((write(&self.pair.theta_a, "theta_a.safetensors")?, write(&self.pair.theta_b, "theta_b.safetensors")?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrendRow {
    pub alpha: f64,
    pub density: f64,
    #[serde(rename = "loss_A")]
    pub loss_a: f64,
    #[serde(rename = "loss_B")]
    pub loss_b: f64,
}

/// Merged parameters read back from a sweep output.
pub fn read_theta(path: &Path) -> Result<Vec<f64>> {
    let t = CheckpointView::open(path)?.read_tensor(THETA_TENSOR)?;
    Ok(t.values.iter().map(|&v| v as f64).collect())
}

/// Sweep `α` with base `theta_b` and donor `theta_a` through checkpoint
/// files in `work_dir`, then score every merged model on both tasks.
pub fn trend_curve(
    fixture: &ToyFixture,
    alpha_grid: &[f64],
    density: f64,
    dtype_policy: DtypePolicy,
    work_dir: &Path,
) -> Result<Vec<TrendRow>> {
    if let Some(a) = alpha_grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::InvalidParam(format!("toy alpha grid must lie in [0,1], got {a}")));
    }
    std::fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
    let (a, b) = fixture.write_checkpoints(work_dir)?;
    let mut recipe = MergeRecipe::new(b, a, 0.0, Density::new(density)?, work_dir.join("unused.safetensors"));
    recipe.dtype_policy = dtype_policy;
    let spec = SweepSpec {
        recipe,
        alpha_grid: alpha_grid.to_vec(),
        density_grid: vec![density],
        output_dir: work_dir.join("sweep"),
        name_template: "toy_a{alpha}.safetensors".into(),
    };
    let manifest = run_sweep(&spec)?;
    manifest
        .points
        .iter()
        .map(|p| {
            if p.status != PointStatus::Ok {
                return Err(Error::InvalidParam(format!(
                    "toy sweep point alpha={} failed: {}",
                    p.alpha,
                    p.error.as_deref().unwrap_or("unknown")
                )));
            }
            let theta = read_theta(&p.output)?;
            Ok(TrendRow {
                alpha: p.alpha,
                density: p.density,
                loss_a: eval_loss(&theta, &fixture.task_a)?,
                loss_b: eval_loss(&theta, &fixture.task_b)?,
            })
        })
        .collect()
}

/// Smallest grid `α` at which `loss_A` has dropped by at least half of its
/// first-to-last drop.
pub fn half_recovery_alpha(rows: &[TrendRow]) -> Option<f64> {
    let (first, last) = (rows.first()?, rows.last()?);
    let drop = first.loss_a - last.loss_a;
    if drop <= 0.0 {
        return None;
    }
    rows.iter()
        .find(|r| first.loss_a - r.loss_a >= 0.5 * drop)
        .map(|r| r.alpha)
}

/// Header `alpha,density,loss_A,loss_B`, one row per grid point.
pub fn write_trend_csv(rows: &[TrendRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}
