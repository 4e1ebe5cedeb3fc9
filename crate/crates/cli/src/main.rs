//! `dtl-lab`: train, evaluate and measure side-network fine-tuning on a toy
//! vision transformer. Every subcommand reads one TOML config and writes
//! CSV/JSON artifacts plus `run_manifest.json` into `--out`.
//!
//! Exit codes: 0 on success, 2 for config or manifest errors, 3 when training
//! hits a non-finite value, 1 for anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dtl_core::checks::{check_all, gaussian_images};
use dtl_core::config::RunConfig;
use dtl_core::data;
use dtl_core::memory::{compare, measure, rows_to_csv, scopes_to_csv, sweep_m, sweep_rows};
use dtl_core::petl::{attach, AdapterSpec};
use dtl_core::report::{to_csv, to_json};
use dtl_core::reuse::{flop_report, random_tasks, shared_prefix_infer, standalone_infer};
use dtl_core::train::{checkpoint_params, evaluate, load_checkpoint, train, TrainOptions};
use dtl_core::vit::ViT;
use dtl_core::{Error, Result};

const THREADS_VAR: &str = "DTL_LAB_THREADS";

#[derive(Parser)]
#[command(name = "dtl-lab", version, about = "Side-network fine-tuning workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune the configured adapter and write history and checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `train.seed`; also seeds adapter init and synthetic data.
        #[arg(long)]
        seed: Option<u64>,
        /// Poison the inputs of this optimizer step with a NaN.
        #[arg(long, hide = true)]
        debug_nan_step: Option<usize>,
    },
    /// Test accuracy of a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint manifest written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Reject checkpoint entries the model does not use.
        #[arg(long)]
        strict: bool,
    },
    /// Cached-activation comparison across strategies.
    Memreport {
        #[command(flatten)]
        common: Common,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',', default_value = "full,linear,bitfit,lora,dtl,dtl+")]
        specs: Vec<String>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Cached activations of a side network at each injection index.
    SweepM {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "dtl")]
        spec: String,
        /// Comma-separated injection indices; defaults to 1..=N+1.
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Multi-task inference cost with a shared frozen prefix.
    Reuse {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 19)]
        tasks: usize,
        /// Injection index; defaults to the config's adapter, else 7.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also time both inference paths.
        #[arg(long)]
        wall_clock: bool,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
    },
    /// Finite-difference gradient check of every strategy in f64.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Serialize)]
struct Versions {
    dtl_lab: &'static str,
    dtl_core: &'static str,
}

/// Written next to every run's outputs.
#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    config: String,
    seed: u64,
    versions: Versions,
    outputs: Vec<String>,
    wall_clock_seconds: f64,
}

struct Run {
    out: PathBuf,
    config_dir: PathBuf,
    cfg: RunConfig,
    outputs: Vec<String>,
}

impl Run {
    fn open(common: &Common, needs: &[&str]) -> Result<Self> {
        let text = fs::read_to_string(&common.config)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", common.config.display())]))?;
        let cfg = RunConfig::parse(&text, needs)?;
        fs::create_dir_all(&common.out)?;
        let config_dir = common.config.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { out: common.out.clone(), config_dir, cfg, outputs: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.out.join(name), contents)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(mut self, command: &'static str, seed: u64, started: Instant) -> Result<()> {
        let manifest = RunManifest {
            command,
            config: self.cfg.to_toml()?,
            seed,
            versions: Versions { dtl_lab: env!("CARGO_PKG_VERSION"), dtl_core: env!("CARGO_PKG_VERSION") },
            outputs: std::mem::take(&mut self.outputs),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        fs::write(self.out.join("run_manifest.json"), to_json(&manifest)?)?;
        Ok(())
    }
}

fn adapter(cfg: &RunConfig) -> AdapterSpec {
    cfg.adapter.clone().expect("required section")
}

fn n_classes(cfg: &RunConfig) -> usize {
    cfg.data.as_ref().map_or(10, |d| d.n_classes)
}

#[derive(Serialize)]
struct TrainSummary {
    spec: String,
    best_acc: f64,
    best_epoch: usize,
    final_acc: f64,
    trainable_params: usize,
    warnings: Vec<String>,
}

fn cmd_train(common: &Common, seed: Option<u64>, nan_step: Option<usize>) -> Result<()> {
    let started = Instant::now();
    let mut run = Run::open(common, &["adapter", "train", "data"])?;
    let mut train_cfg = run.cfg.train.clone().expect("required section");
    let seed = seed.unwrap_or(train_cfg.seed);
    train_cfg.seed = seed;
    run.cfg.train = Some(train_cfg.clone());
    let backbone = ViT::<f32>::init(run.cfg.model.vit.clone(), run.cfg.model.seed)?;
    let spec = adapter(&run.cfg);
    let data_spec = run.cfg.data.clone().expect("required section");
    let dataset = data::build(&data_spec, &backbone, seed, &run.config_dir)?;
    let mut model = attach(&spec, &backbone, data_spec.n_classes, seed)?;
    for w in &model.warnings {
        eprintln!("warning: {w}");
    }
    let checkpoint = run.out.join("checkpoint.json");
    let opts = TrainOptions { checkpoint: Some(&checkpoint), inject_nan_at_step: nan_step };
    let outcome = train(&mut model, &dataset, &train_cfg, &opts)?;
    run.outputs.extend(["checkpoint.json".to_string(), "checkpoint.bin".to_string()]);
    run.write("history.csv", &outcome.history.to_csv()?)?;
    let summary = TrainSummary {
        spec: spec.name().to_string(),
        best_acc: outcome.best_acc,
        best_epoch: outcome.best_epoch,
        final_acc: outcome.history.final_acc(),
        trainable_params: checkpoint_params(&model).trainable().map(|p| p.tensor.numel()).sum(),
        warnings: model.warnings.clone(),
    };
    run.write("summary.json", &to_json(&summary)?)?;
    println!("{}: best test accuracy {:.4} at epoch {}", summary.spec, summary.best_acc, summary.best_epoch);
    run.finish("train", seed, started)
}

#[derive(Serialize)]
struct EvalReport {
    spec: String,
    checkpoint: String,
    n_test: usize,
    test_acc: f64,
    warnings: Vec<String>,
}

fn cmd_eval(common: &Common, checkpoint: &Path, seed: Option<u64>, strict: bool) -> Result<()> {
    let started = Instant::now();
    let mut run = Run::open(common, &["adapter", "data"])?;
    let seed = seed.or(run.cfg.train.as_ref().map(|t| t.seed)).unwrap_or(0);
    let backbone = ViT::<f32>::init(run.cfg.model.vit.clone(), run.cfg.model.seed)?;
    let spec = adapter(&run.cfg);
    let data_spec = run.cfg.data.clone().expect("required section");
    let dataset = data::build(&data_spec, &backbone, seed, &run.config_dir)?;
    let mut model = attach(&spec, &backbone, data_spec.n_classes, seed)?;
    let warnings = load_checkpoint(&mut model, checkpoint, strict)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let report = EvalReport {
        spec: spec.name().to_string(),
        checkpoint: checkpoint.display().to_string(),
        n_test: dataset.test.len(),
        test_acc: evaluate(&model, &dataset.test)?,
        warnings,
    };
    run.write("eval.json", &to_json(&report)?)?;
    println!("{}: test accuracy {:.4}", report.spec, report.test_acc);
    run.finish("eval", seed, started)
}

/// Resolves every name, reporting all unknown ones together.
fn parse_specs(cfg: &RunConfig, names: &[String]) -> Result<Vec<AdapterSpec>> {
    let mut errs = Vec::new();
    let mut specs = Vec::new();
    for name in names {
        match resolve_spec(cfg, name.trim()) {
            Ok(s) => specs.push(s),
            Err(Error::Config(items)) => errs.extend(items),
            Err(e) => return Err(e),
        }
    }
    if errs.is_empty() {
        Ok(specs)
    } else {
        Err(Error::Config(errs))
    }
}

/// The config's adapter when it has the requested name, else the named defaults.
fn resolve_spec(cfg: &RunConfig, name: &str) -> Result<AdapterSpec> {
    match &cfg.adapter {
        Some(a) if a.name() == name => Ok(a.clone()),
        _ => AdapterSpec::from_name(name, cfg.model.vit.depth),
    }
}

fn cmd_memreport(common: &Common, names: &[String], batch: usize) -> Result<()> {
    let started = Instant::now();
    let mut run = Run::open(common, &[])?;
    let specs = parse_specs(&run.cfg, names)?;
    let backbone = ViT::<f32>::init(run.cfg.model.vit.clone(), run.cfg.model.seed)?;
    let cmp = compare(&specs, &backbone, n_classes(&run.cfg), batch)?;
    run.write("memory_compare.csv", &rows_to_csv(&cmp.rows)?)?;
    run.write("memory_compare.json", &to_json(&cmp)?)?;
    for r in &cmp.reports {
        run.write(&format!("memory_blocks_{}.csv", r.spec), &scopes_to_csv(r)?)?;
    }
    for row in &cmp.rows {
        println!("{:<12} {:>12} bytes  {:.3} of full", row.spec, row.cached_bytes, row.ratio_vs_full);
    }
    let seed = run.cfg.model.seed;
    run.finish("memreport", seed, started)
}

fn cmd_sweep_m(common: &Common, name: &str, ms: &[usize], batch: usize) -> Result<()> {
    let started = Instant::now();
    let mut run = Run::open(common, &[])?;
    let depth = run.cfg.model.vit.depth;
    let spec = resolve_spec(&run.cfg, name)?;
    let ms: Vec<usize> = if ms.is_empty() { (1..=depth + 1).collect() } else { ms.to_vec() };
    let backbone = ViT::<f32>::init(run.cfg.model.vit.clone(), run.cfg.model.seed)?;
    let classes = n_classes(&run.cfg);
    let reports = sweep_m(&spec, &backbone, classes, batch, &ms)?;
    let full = measure(&attach(&AdapterSpec::Full, &backbone, classes, 0)?, batch)?;
    let rows = sweep_rows(&reports, full.cached_activation_bytes);
    run.write("sweep_m.csv", &to_csv(&rows)?)?;
    run.write("sweep_m.json", &to_json(&reports)?)?;
    for row in &rows {
        println!("M={:<3} {:>12} bytes", row.m.unwrap_or(0), row.cached_bytes);
    }
    let seed = run.cfg.model.seed;
    run.finish("sweep-m", seed, started)
}

#[derive(Serialize)]
struct WallClock {
    repeats: usize,
    standalone_seconds: f64,
    shared_seconds: f64,
}

#[derive(Serialize)]
struct ReuseReport {
    #[serde(flatten)]
    analytic: dtl_core::reuse::FlopReport,
    spec: String,
    batch: usize,
    measured_block_runs_standalone: usize,
    measured_block_runs_shared: usize,
    outputs_bitwise_equal: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_clock: Option<WallClock>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_reuse(common: &Common, tasks: usize, m: Option<usize>, batch: usize, seed: u64, wall: bool, repeats: usize) -> Result<()> {
    let started = Instant::now();
    let mut run = Run::open(common, &[])?;
    let vit_cfg = run.cfg.model.vit.clone();
    let base = match &run.cfg.adapter {
        Some(a) if a.csn_config().is_some() => a.clone(),
        _ => AdapterSpec::from_name("dtl", vit_cfg.depth)?,
    };
    let spec = match m {
        Some(m) => base.with_m(m),
        None => base,
    };
    spec.validate(&vit_cfg)?;
    let csn = spec.csn_config().expect("side-network spec");
    let analytic = flop_report(&vit_cfg, &csn, tasks)?;
    let backbone = ViT::<f32>::init(vit_cfg.clone(), run.cfg.model.seed)?;
    let bundles = random_tasks(&backbone, &spec, tasks, n_classes(&run.cfg), seed)?;
    let images = gaussian_images(&vit_cfg, batch, seed);
    let alone = standalone_infer(&backbone, &bundles, &images)?;
    let shared = shared_prefix_infer(&backbone, &bundles, &images)?;
    let equal = alone.logits.iter().zip(&shared.logits).all(|(a, b)| a.bit_eq(b));
    let wall_clock = if wall {
        let time = |f: &dyn Fn() -> Result<()>| -> Result<f64> {
            let t = Instant::now();
            for _ in 0..repeats {
                f()?;
            }
            Ok(t.elapsed().as_secs_f64())
        };
        Some(WallClock {
            repeats,
            standalone_seconds: time(&|| standalone_infer(&backbone, &bundles, &images).map(drop))?,
            shared_seconds: time(&|| shared_prefix_infer(&backbone, &bundles, &images).map(drop))?,
        })
    } else {
        None
    };
    let report = ReuseReport {
        analytic,
        spec: spec.name().to_string(),
        batch,
        measured_block_runs_standalone: alone.block_runs,
        measured_block_runs_shared: shared.block_runs,
        outputs_bitwise_equal: equal,
        wall_clock,
    };
    run.write("reuse.json", &to_json(&report)?)?;
    println!(
        "{} tasks, M={}: saving {:.4}, outputs bitwise equal: {}",
        report.analytic.tasks, report.analytic.m, report.analytic.saving_fraction, equal
    );
    run.finish("reuse", seed, started)
}

fn cmd_gradcheck(common: &Common, threshold: f64, eps: f64, seed: u64) -> Result<bool> {
    let started = Instant::now();
    let mut run = Run::open(common, &[])?;
    let rows = check_all(&run.cfg.model.vit, seed, eps)?;
    run.write("gradcheck.csv", &to_csv(&rows)?)?;
    run.write("gradcheck.json", &to_json(&rows)?)?;
    let mut ok = true;
    for r in &rows {
        let pass = r.max_relative_error <= threshold;
        ok &= pass;
        println!("{:<16} {:.3e} {}", r.spec, r.max_relative_error, if pass { "ok" } else { "FAIL" });
    }
    run.finish("gradcheck", seed, started)?;
    Ok(ok)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(vec![format!("{THREADS_VAR} must be a positive integer, got {value:?}")]))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Io(e.to_string()))
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Manifest(_) => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Train { common, seed, debug_nan_step } => cmd_train(&common, seed, debug_nan_step)?,
        Command::Eval { common, checkpoint, seed, strict } => cmd_eval(&common, &checkpoint, seed, strict)?,
        Command::Memreport { common, specs, batch } => cmd_memreport(&common, &specs, batch)?,
        Command::SweepM { common, spec, m, batch } => cmd_sweep_m(&common, &spec, &m, batch)?,
        Command::Reuse { common, tasks, m, batch, seed, wall_clock, repeats } => {
            cmd_reuse(&common, tasks, m, batch, seed, wall_clock, repeats)?
        }
        Command::Gradcheck { common, threshold, eps, seed } => return cmd_gradcheck(&common, threshold, eps, seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            match &err {
                Error::Config(items) | Error::Manifest(items) if items.len() > 1 => {
                    eprintln!("error:");
                    for item in items {
                        eprintln!("  {item}");
                    }
                }
                _ => eprintln!("error: {err}"),
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
