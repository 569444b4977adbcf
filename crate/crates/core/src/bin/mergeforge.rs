use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mergeforge::keymap::{extract_submodel, inject_checkpoint, Glob, KeymapRules, MismatchPolicy};
use mergeforge::merge_core::Density;
use mergeforge::runner::{
    diff_checkpoints, load_recipe, report_path, run_merge, run_sweep, with_threads, DiffStatus, DtypePolicy, SweepSpec,
    DEFAULT_ALPHA_GRID, DEFAULT_DENSITY_GRID, DEFAULT_NAME_TEMPLATE,
};
use mergeforge::toy::{self, default_alpha_grid, make_toy_pair, trend_curve, write_trend_csv};
use mergeforge::CheckpointView;

const EXIT_VALIDATION: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_PARTIAL_SWEEP: u8 = 3;
const EXIT_DIFFERENT: u8 = 4;
const EXIT_INCOMPARABLE: u8 = 5;

#[derive(Parser)]
#[command(name = "mergeforge", version, about = "Merge, sweep, inspect and diff safetensors checkpoints")]
struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, env = "MERGEFORGE_THREADS", default_value_t = 0)]
    threads: usize,

    /// Log filter, e.g. `warn`, `info`, `mergeforge=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the tensors and metadata of a checkpoint.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write the selected, renamed subtree of a checkpoint to a new file.
    Extract {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        keymap: KeymapArgs,
    },
    /// Put an extracted (possibly merged) subtree back into its full checkpoint.
    Inject {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        merged: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        keymap: KeymapArgs,
    },
    /// Run one merge recipe.
    Merge {
        #[arg(long)]
        recipe: PathBuf,
        /// Override every donor's alpha.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        density: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Fail early when an input file is missing.
        #[arg(long)]
        strict: bool,
    },
    /// Run a recipe over an alpha × density grid.
    Sweep {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long, value_delimiter = ',')]
        alpha_grid: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        density_grid: Option<Vec<f64>>,
        /// Defaults to the directory of the recipe's output.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_NAME_TEMPLATE)]
        name_template: String,
        #[arg(long)]
        strict: bool,
    },
    /// Per-tensor distance between two checkpoints. Exit 0 identical,
    /// 4 different, 5 incomparable.
    Diff {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        keymap: KeymapArgs,
        #[arg(long)]
        json: bool,
    },
    /// Ridge-regression trade-off curve, written as CSV.
    ToyBench {
        #[arg(long, default_value_t = toy::DEFAULT_SEED)]
        seed: u64,
        #[arg(long, value_delimiter = ',')]
        alpha_grid: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1.0)]
        density: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = toy::DEFAULT_N)]
        n: usize,
        #[arg(long, default_value_t = toy::DEFAULT_D)]
        d: usize,
        #[arg(long, value_enum, default_value = "keep")]
        dtype_policy: PolicyArg,
        /// Keep intermediate checkpoints here instead of a temporary directory.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct KeymapArgs {
    /// Named rule set (`llava`, `identity`).
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    strip_prefix: Option<String>,
    #[arg(long = "exclude", value_name = "GLOB")]
    exclude: Vec<String>,
    #[arg(long = "include", value_name = "GLOB")]
    include: Vec<String>,
    #[arg(long, value_enum)]
    mismatch: Option<MismatchArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MismatchArg {
    Strict,
    Skip,
    TruncateRows,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Keep,
    F32,
    F16,
    Bf16,
}

impl From<PolicyArg> for DtypePolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Keep => DtypePolicy::Keep,
            PolicyArg::F32 => DtypePolicy::F32,
            PolicyArg::F16 => DtypePolicy::F16,
            PolicyArg::Bf16 => DtypePolicy::BF16,
        }
    }
}

impl KeymapArgs {
    fn is_empty(&self) -> bool {
        self.profile.is_none()
            && self.strip_prefix.is_none()
            && self.exclude.is_empty()
            && self.include.is_empty()
            && self.mismatch.is_none()
    }

    fn rules(&self) -> mergeforge::Result<Option<KeymapRules>> {
        if self.is_empty() {
            return Ok(None);
        }
        let mut rules = match &self.profile {
            Some(p) => KeymapRules::profile(p)?,
            None => KeymapRules::identity(),
        };
        if let Some(p) = &self.strip_prefix {
            rules.strip_prefix = Some(p.clone());
        }
        if !self.exclude.is_empty() {
            rules.exclude_patterns = self.exclude.iter().map(|g| Glob::new(g)).collect();
        }
        if !self.include.is_empty() {
            rules.include_patterns = Some(self.include.iter().map(|g| Glob::new(g)).collect());
        }
        if let Some(m) = self.mismatch {
            rules.mismatch_policy = match m {
                MismatchArg::Strict => MismatchPolicy::Strict,
                MismatchArg::Skip => MismatchPolicy::Skip,
                MismatchArg::TruncateRows => MismatchPolicy::TruncateRows,
            };
        }
        Ok(Some(rules))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match with_threads(cli.threads, || run(cli.command)) {
        Ok(Ok(code)) => ExitCode::from(code),
        Ok(Err(e)) | Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_IO })
        }
    }
}

fn run(command: Command) -> mergeforge::Result<u8> {
    match command {
        Command::Inspect { path, json } => inspect(&path, json),
        Command::Extract { input, output, keymap } => {
            let view = CheckpointView::open(&input)?;
            let rules = keymap.rules()?.unwrap_or_default();
            let sub = extract_submodel(&view, &rules)?;
            sub.write(&view, &output)?;
            println!(
                "extracted {} tensors ({} left out) to {}",
                sub.entries.len(),
                sub.excluded.len(),
                output.display()
            );
            Ok(0)
        }
        Command::Inject {
            base,
            merged,
            output,
            keymap,
        } => {
            let vlm = CheckpointView::open(&base)?;
            let merged = CheckpointView::open(&merged)?;
            let rules = keymap.rules()?.unwrap_or_default();
            inject_checkpoint(&vlm, &merged, &rules, &output)?;
            println!("injected {} tensors into {}", merged.len(), output.display());
            Ok(0)
        }
        Command::Merge {
            recipe,
            alpha,
            density,
            output,
            strict,
        } => {
            let mut r = load_recipe(&recipe)?;
            if let Some(a) = alpha {
                r.set_alpha(a);
            }
            if let Some(k) = density {
                r.density = Density::new(k)?;
            }
            if let Some(o) = output {
                r.output = o;
            }
            r.validate()?;
            if strict {
                r.validate_files()?;
            }
            let report = run_merge(&r)?;
            println!(
                "wrote {} ({} merged, {} passthrough, {} sign conflicts); report {}",
                r.output.display(),
                report.totals.tensors_merged,
                report.totals.tensors_passthrough,
                report.totals.sign_conflicts,
                report_path(&r.output).display()
            );
            Ok(0)
        }
        Command::Sweep {
            recipe,
            alpha_grid,
            density_grid,
            output_dir,
            name_template,
            strict,
        } => {
            let r = load_recipe(&recipe)?;
            if strict {
                r.validate_files()?;
            }
            let output_dir = output_dir.unwrap_or_else(|| {
                r.output
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            let spec = SweepSpec {
                recipe: r,
                alpha_grid: alpha_grid.unwrap_or_else(|| DEFAULT_ALPHA_GRID.to_vec()),
                density_grid: density_grid.unwrap_or_else(|| DEFAULT_DENSITY_GRID.to_vec()),
                output_dir,
                name_template,
            };
            let manifest = run_sweep(&spec)?;
            for p in &manifest.points {
                match &p.error {
                    None => println!("ok     alpha={} density={} {}", p.alpha, p.density, p.output.display()),
                    Some(e) => println!("failed alpha={} density={} {e}", p.alpha, p.density),
                }
            }
            let failed = manifest.failures();
            println!(
                "{} of {} points succeeded; manifest {}",
                manifest.points.len() - failed,
                manifest.points.len(),
                spec.output_dir.join(mergeforge::runner::MANIFEST_NAME).display()
            );
            Ok(if failed > 0 { EXIT_PARTIAL_SWEEP } else { 0 })
        }
        Command::Diff { a, b, keymap, json } => {
            let (va, vb) = (CheckpointView::open(&a)?, CheckpointView::open(&b)?);
            let report = diff_checkpoints(&va, &vb, keymap.rules()?.as_ref())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("diff serializes"));
            } else {
                for t in &report.tensors {
                    println!(
                        "{}\tl2={}\tlinf={}\tmax_index={}",
                        t.name,
                        t.l2,
                        t.linf,
                        t.max_index.map_or("-".into(), |i| i.to_string())
                    );
                }
                for c in &report.shape_conflicts {
                    println!("{}\tshape {:?} vs {:?}", c.name, c.shape_a, c.shape_b);
                }
                for n in &report.only_in_a {
                    println!("{n}\tonly in {}", a.display());
                }
                for n in &report.only_in_b {
                    println!("{n}\tonly in {}", b.display());
                }
                println!("{}", serde_json::to_value(report.status).expect("status").as_str().unwrap_or(""));
            }
            Ok(match report.status {
                DiffStatus::Identical => 0,
                DiffStatus::Different => EXIT_DIFFERENT,
                DiffStatus::Incomparable => EXIT_INCOMPARABLE,
            })
        }
        Command::ToyBench {
            seed,
            alpha_grid,
            density,
            out,
            n,
            d,
            dtype_policy,
            work_dir,
        } => {
            let fixture = make_toy_pair(seed, n, d)?;
            let grid = alpha_grid.unwrap_or_else(default_alpha_grid);
            let (dir, cleanup) = match work_dir {
                Some(w) => (w, false),
                None => (
                    std::env::temp_dir().join(format!("mergeforge-toy-{}", std::process::id())),
                    true,
                ),
            };
            let rows = trend_curve(&fixture, &grid, density, dtype_policy.into(), &dir);
            if cleanup {
                let _ = std::fs::remove_dir_all(&dir);
            }
            let rows = rows?;
            write_trend_csv(&rows, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(0)
        }
    }
}

fn inspect(path: &Path, as_json: bool) -> mergeforge::Result<u8> {
    let view = CheckpointView::open(path)?;
    if as_json {
        let tensors: Vec<_> = view
            .tensors()
            .values()
            .map(|m| {
                json!({
                    "name": m.name,
                    "dtype": m.dtype.as_str(),
                    "shape": m.shape,
                    "data_offsets": [m.data_offsets.0, m.data_offsets.1],
                })
            })
            .collect();
        let doc = json!({
            "tensors": tensors,
            "metadata": view.metadata(),
            "data_bytes": view.data_len(),
        });
        println!("{}", serde_json::to_string_pretty(&doc).expect("inspect serializes"));
        return Ok(0);
    }
    println!("{}: {} tensors, {} data bytes", path.display(), view.len(), view.data_len());
    if let Some(meta) = view.metadata() {
        for (k, v) in meta {
            println!("  metadata {k} = {v}");
        }
    }
    for m in view.tensors().values() {
        println!("  {}\t{}\t{:?}\t{} bytes", m.name, m.dtype, m.shape, m.byte_len());
    }
    Ok(0)
}
