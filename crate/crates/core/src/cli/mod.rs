//! The `hfn` command line: train, eval, compress, inspect, report, estimate
//! and sweep.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 for
//! numerical failures during training.

mod config;
mod manifest;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

pub use config::{
    DataSection, DataSource, ModelSection, NormalizationKind, Overrides, RunConfig, Splits, TrainSection,
    DATA_DIR_ENV, PRESETS,
};
pub use manifest::RunManifest;

use crate::compress::{compress, decompress, file_size, read_header, size_report};
use crate::cost::{dram_load_energy, energy_report, format_energy, mult_count, EnergyParams};
use crate::error::{Error, Result};
use crate::model::{count_params, ArchConfig, Method, Model};
use crate::report::{paper_tables, Benchmark};
use crate::train::{evaluate, train};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Parser)]
#[command(name = "hfn", version, about = "Train, compress and cost supermasked folded ResNets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write the best checkpoint, metrics log and manifest.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Top-1 accuracy of a model file on a data split.
    Eval {
        model: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Strip the training appendix from a checkpoint, keeping seed, masks and BN.
    Compress {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Describe a model file.
    Inspect {
        file: PathBuf,
        /// Print only the header fields.
        #[arg(long)]
        dump_header: bool,
    },
    /// Size and energy comparison of model files, or of the published zoo.
    Report {
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_name = "cifar100|imagenet")]
        paper_tables: Option<String>,
        /// Print comma-separated tables.
        #[arg(long)]
        csv: bool,
        /// Write bar-plot data of the load energy here.
        #[arg(long)]
        plot_data: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Parameter, storage, compute and energy estimates without training.
    Estimate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input side length; defaults to the configured data.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Train (or with --dry-run, only account) one model per axis value.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values; fold sets are separated by ';', e.g. "4;3,4;2,3,4".
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        dry_run: bool,
        /// Run every point as its own process at once.
        #[arg(long)]
        parallel: bool,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Topk,
    Fold,
    Depth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration (desk-hfn, paper-cifar100). Default: desk-hfn.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub method: Option<Method>,
    /// Percentage of connections kept by each supermask.
    #[arg(long)]
    pub topk: Option<f64>,
    /// Folded stages, e.g. 3,4.
    #[arg(long, value_delimiter = ',')]
    pub fold: Option<Vec<usize>>,
    /// Stage depths of ResNet-50/101/152/200.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Share one non-affine BN across fold iterations.
    #[arg(long)]
    pub no_ubn: bool,
    /// Dataset directory (overrides the config and $HFN_DATA_DIR).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match (&self.config, &self.preset) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => RunConfig::preset("desk-hfn")?,
        };
        c.apply(&Overrides {
            method: self.method,
            topk: self.topk,
            fold: self.fold.clone(),
            depth: self.depth,
            epochs: self.epochs,
            seed: self.seed,
            batch_size: self.batch_size,
            lr: self.lr,
            ubn: self.no_ubn.then_some(false),
        })?;
        if let Some(d) = &self.data_dir {
            c.data.dir = Some(d.clone());
        }
        c.arch()?;
        Ok(c)
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    match cli.command {
        Command::Train { cfg, out } => {
            let config = cfg.resolve()?;
            let summary = run_training(&config, &out)?;
            let mut m = RunManifest::new("train", argv);
            m.arch = Some(config.arch()?);
            m.config = Some(config);
            m.artifacts = summary.artifacts.clone();
            m.metrics = serde_json::to_value(&summary).expect("summary serializes");
            m.write(&out.join("manifest.json"), started)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            Ok(())
        }
        Command::Eval {
            model,
            cfg,
            split,
            manifest,
        } => {
            let config = cfg.resolve()?;
            let bytes = read_file(&model)?;
            let mut net = decompress(&bytes)?.model;
            let (splits, norm) = config.load_data()?;
            let ds = match split {
                SplitArg::Train => &splits.train,
                SplitArg::Val => &splits.val,
                SplitArg::Test => &splits.test,
            };
            let top1 = evaluate(&mut net, ds, &norm, config.train.batch_size)?;
            println!("top1 {:.4} ({} records)", top1, ds.len());
            if let Some(path) = manifest {
                let mut m = RunManifest::new("eval", argv);
                m.arch = Some(net.config().clone());
                m.config = Some(config);
                m.artifacts = vec![model];
                m.metrics = json!({ "split": format!("{:?}", split).to_lowercase(), "top1": top1 });
                m.write(&path, started)?;
            }
            Ok(())
        }
        Command::Compress { input, out, manifest } => {
            if input == out {
                return Err(Error::InvalidArgument("refusing to overwrite the input file".into()));
            }
            let bytes = read_file(&input)?;
            let d = decompress(&bytes)?;
            let packed = compress(&d.model, None)?;
            write_file(&out, &packed)?;
            println!("{} -> {}: {} -> {} bytes", input.display(), out.display(), bytes.len(), packed.len());
            if let Some(path) = manifest {
                let mut m = RunManifest::new("compress", argv);
                m.arch = Some(d.model.config().clone());
                m.artifacts = vec![input, out];
                m.metrics = json!({ "input_bytes": bytes.len(), "output_bytes": packed.len() });
                m.write(&path, started)?;
            }
            Ok(())
        }
        Command::Inspect { file, dump_header } => {
            let bytes = read_file(&file)?;
            let header = read_header(&bytes)?;
            println!("{}", header);
            if dump_header {
                return Ok(());
            }
            let d = decompress(&bytes)?;
            let density = d.model.density_report();
            println!();
            println!("{:<24} {:>10} {:>10} {:>8}", "layer", "weights", "kept", "density");
            for l in &density.layers {
                println!("{:<24} {:>10} {:>10} {:>8.4}", l.name, l.n, l.ones, l.density);
            }
            let s = size_report(&header.arch)?;
            println!();
            println!("reported params    {}", s.reported_params);
            println!("masks + UBN bytes  {}", s.compressed_bytes);
            println!("running stat bytes {}", s.running_stat_bytes);
            println!("reduction          {:.2}x vs the unfolded dense model", s.reduction_vs_dense);
            // Weights are regenerated from the seed; the checksum lets two
            // machines confirm they rebuilt the same ones.
            println!("weights checksum   {:#018x}", d.model.weights_checksum());
            if let Some(e) = d.training_epoch {
                println!("checkpoint epoch   {}", e);
                println!("scores checksum    {:#018x}", d.model.scores_checksum());
            }
            Ok(())
        }
        Command::Report {
            checkpoints,
            paper_tables: table,
            csv,
            plot_data,
            manifest,
        } => {
            let metrics = cmd_report(&checkpoints, table.as_deref(), csv, plot_data.as_deref())?;
            if let Some(path) = manifest {
                let mut m = RunManifest::new("report", argv);
                m.artifacts = checkpoints;
                m.metrics = metrics;
                m.write(&path, started)?;
            }
            Ok(())
        }
        Command::Estimate { cfg, resolution } => {
            let config = cfg.resolve()?;
            let res = resolution.unwrap_or(match config.data.source {
                DataSource::Synthetic => config.data.size,
                DataSource::Cifar100 => 32,
            });
            cmd_estimate(&config.arch()?, res)
        }
        Command::Sweep {
            cfg,
            axis,
            values,
            dry_run,
            parallel,
            out,
        } => cmd_sweep(&cfg, axis, &values, dry_run, parallel, &out, argv, started),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::InvalidArgument(format!("cannot read {}: {}", path.display(), e)))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub method: Method,
    pub k_permille: u16,
    pub reported_params: u64,
    pub initial_loss: f64,
    pub final_train_loss: f64,
    pub best_epoch: usize,
    pub best_val_top1: f64,
    pub test_top1: f64,
    pub checkpoint: Option<PathBuf>,
    pub artifacts: Vec<PathBuf>,
}

/// Trains `config` into `out`: `metrics.jsonl` (one record per epoch),
/// `config.toml`, and for supermask methods the best checkpoint `model.hfnm`.
pub fn run_training(config: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let arch = config.arch()?;
    let (splits, norm) = config.load_data()?;
    let cfg = config.train_config(norm)?;
    fs::create_dir_all(out)?;
    let config_path = out.join("config.toml");
    fs::write(&config_path, config.to_toml())?;
    let log_path = out.join("metrics.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);

    let mut model = Model::<f32>::build(&arch, config.seed)?;
    let mut io_err = None;
    let outcome = train(&mut model, &splits.train, &splits.val, &cfg, |m| {
        let line = json!({
            "epoch": m.epoch,
            "lr": m.lr,
            "loss": m.train_loss,
            "train_top1": m.train_top1,
            "val_top1": m.val_top1,
            "mask_flips": m.mask_flips,
        });
        eprintln!(
            "epoch {:>3}  lr {:.4}  loss {:.4}  train {:.3}  val {}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.train_top1,
            m.val_top1.map(|v| format!("{:.3}", v)).unwrap_or_else(|| "-".into())
        );
        if let Err(e) = writeln!(log, "{}", line).and_then(|_| log.flush()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    outcome.best.restore(&mut model)?;
    let test_top1 = evaluate(&mut model, &splits.test, &cfg.normalization, cfg.batch_size)?;
    let mut artifacts = vec![config_path, log_path];
    let checkpoint = if arch.method.uses_supermask() {
        let path = out.join("model.hfnm");
        fs::write(&path, compress(&model, Some(outcome.best.epoch as u32))?)?;
        artifacts.push(path.clone());
        Some(path)
    } else {
        None
    };
    Ok(TrainSummary {
        method: arch.method,
        k_permille: arch.effective_k_permille(),
        reported_params: count_params(&arch)?.reported(),
        initial_loss: outcome.initial_loss,
        final_train_loss: outcome.history.last().map(|m| m.train_loss).unwrap_or(f64::NAN),
        best_epoch: outcome.best.epoch,
        best_val_top1: outcome.best.val_top1,
        test_top1,
        checkpoint,
        artifacts,
    })
}

fn cmd_report(
    checkpoints: &[PathBuf],
    table: Option<&str>,
    csv: bool,
    plot_data: Option<&Path>,
) -> Result<serde_json::Value> {
    let p = EnergyParams::default();
    let mut plots = String::new();
    let mut metrics = Vec::new();
    if let Some(name) = table {
        let bench: Benchmark = name.parse()?;
        for t in paper_tables(bench)? {
            let e = t.energy(&p)?;
            if csv {
                println!("{}", t.to_csv());
                println!("{}", e.to_csv());
            } else {
                println!("{}", t.to_text());
                for r in &e.rows {
                    println!("  {:<28} {:>12} {:>8.2}x", r.label, format_energy(r.picojoules), r.reduction_vs_baseline);
                }
                println!();
            }
            plots.push_str(&e.to_plot_data());
            plots.push('\n');
            metrics.push(serde_json::to_value(&t).expect("table serializes"));
        }
    }
    if !checkpoints.is_empty() {
        let mut models = Vec::new();
        println!(
            "{:<32} {:<26} {:>12} {:>12} {:>12}",
            "file", "model", "params", "masks+UBN", "model bytes"
        );
        for path in checkpoints {
            let header = read_header(&read_file(path)?)?;
            let s = size_report(&header.arch)?;
            let bytes = file_size(&header.arch, false)?;
            println!(
                "{:<32} {:<26} {:>12} {:>12} {:>12}",
                path.display(),
                s.label,
                s.reported_params,
                s.compressed_bytes,
                bytes
            );
            models.push((path.display().to_string(), bytes));
        }
        let e = energy_report(&models, &p)?;
        println!();
        if csv {
            println!("{}", e.to_csv());
        } else {
            for r in &e.rows {
                println!("{:<32} {:>12} {:>8.2}x", r.label, format_energy(r.picojoules), r.reduction_vs_baseline);
            }
        }
        plots.push_str(&e.to_plot_data());
        metrics.push(serde_json::to_value(&e).expect("report serializes"));
    }
    if table.is_none() && checkpoints.is_empty() {
        return Err(Error::InvalidArgument("give model files or --paper-tables".into()));
    }
    if let Some(path) = plot_data {
        write_file(path, plots.as_bytes())?;
    }
    Ok(serde_json::Value::Array(metrics))
}

fn cmd_estimate(arch: &ArchConfig, resolution: usize) -> Result<()> {
    let p = EnergyParams::default();
    let pc = count_params(arch)?;
    let s = size_report(arch)?;
    let macs = mult_count(arch, resolution)?;
    println!("model              {}", arch.label());
    println!("dense params       {}", pc.dense);
    println!("surviving params   {}", pc.surviving);
    println!("ubn params         {}", pc.ubn);
    println!("reported params    {}", pc.reported());
    println!("stored bytes       {}", s.compressed_bytes);
    if let Some(f) = s.file_bytes {
        println!("model file bytes   {}", f);
    }
    println!("reduction          {:.2}x", s.reduction_vs_dense);
    let load = dram_load_energy(s.compressed_bytes, &p);
    println!("dram load energy   {} ({:.0} pJ)", format_energy(load), load);
    println!("macs @{}px         {}", resolution, macs.total);
    println!("sparse macs        {}", macs.sparse_total);
    println!("fp32 mult energy   {}", format_energy(macs.mult_energy(&p, false)));
    Ok(())
}

/// One sweep point: the axis value as text and the resulting configuration.
fn sweep_points(base: &RunConfig, axis: Axis, values: &str) -> Result<Vec<(String, RunConfig)>> {
    let trimmed = values.trim();
    if trimmed.is_empty() {
        return Err(Error::InvalidArgument("sweep axis has no values".into()));
    }
    let bad = |v: &str| Error::InvalidArgument(format!("bad {:?} value '{}'", axis, v));
    let groups: Vec<&str> = match axis {
        Axis::Fold => trimmed.split(';').map(str::trim).collect(),
        _ => trimmed.split(',').map(str::trim).collect(),
    };
    groups
        .into_iter()
        .map(|v| {
            let mut c = base.clone();
            let mut o = Overrides::default();
            match axis {
                Axis::Topk => o.topk = Some(v.parse().map_err(|_| bad(v))?),
                Axis::Depth => o.depth = Some(v.parse().map_err(|_| bad(v))?),
                Axis::Fold => {
                    let f: std::result::Result<Vec<usize>, _> =
                        v.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse()).collect();
                    o.fold = Some(f.map_err(|_| bad(v))?);
                }
            }
            c.apply(&o)?;
            c.arch()?;
            Ok((v.to_string(), c))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    cfg: &ConfigArgs,
    axis: Axis,
    values: &str,
    dry_run: bool,
    parallel: bool,
    out: &Path,
    argv: &[String],
    started: Instant,
) -> Result<()> {
    let base = cfg.resolve()?;
    let points = sweep_points(&base, axis, values)?;
    println!(
        "{:<10} {:>6} {:<10} {:>12} {:>12} {:>12} {:>8} {:>8}",
        "value", "k", "fold", "dense", "reported", "bytes", "val", "test"
    );
    let mut rows = Vec::new();
    let mut results: Vec<Option<TrainSummary>> = vec![None; points.len()];
    if !dry_run {
        if parallel {
            let exe = std::env::current_exe()?;
            let mut children = Vec::new();
            for (i, (_, c)) in points.iter().enumerate() {
                let dir = out.join(format!("point-{}", i));
                fs::create_dir_all(&dir)?;
                let path = dir.join("point.toml");
                fs::write(&path, c.to_toml())?;
                let child = Process::new(&exe)
                    .arg("train")
                    .arg("--config")
                    .arg(&path)
                    .arg("--out")
                    .arg(&dir)
                    .stdout(std::process::Stdio::null())
                    .spawn()?;
                children.push(child);
            }
            for (i, mut child) in children.into_iter().enumerate() {
                let status = child.wait()?;
                if !status.success() {
                    return Err(match status.code() {
                        Some(EXIT_NUMERICAL) => Error::Numerical(format!("sweep point {} diverged", i)),
                        _ => Error::Config(format!("sweep point {} failed", i)),
                    });
                }
                let m: serde_json::Value = serde_json::from_slice(&fs::read(
                    out.join(format!("point-{}", i)).join("manifest.json"),
                )?)
                .map_err(|e| Error::Format(e.to_string()))?;
                results[i] = Some(summary_from_json(&m["metrics"])?);
            }
        } else {
            for (i, (_, c)) in points.iter().enumerate() {
                let dir = out.join(format!("point-{}", i));
                let summary = run_training(c, &dir)?;
                let mut m = RunManifest::new("sweep", argv);
                m.arch = Some(c.arch()?);
                m.config = Some(c.clone());
                m.artifacts = summary.artifacts.clone();
                m.metrics = serde_json::to_value(&summary).expect("summary serializes");
                m.write(&dir.join("manifest.json"), started)?;
                results[i] = Some(summary);
            }
        }
    }
    for ((value, c), r) in points.iter().zip(&results) {
        let arch = c.arch()?;
        let s = size_report(&arch)?;
        let fold: Vec<String> = arch.folded_stages.iter().map(|f| f.to_string()).collect();
        let fmt = |v: Option<f64>| v.map(|v| format!("{:.3}", v)).unwrap_or_else(|| "-".into());
        println!(
            "{:<10} {:>6} {:<10} {:>12} {:>12} {:>12} {:>8} {:>8}",
            value,
            arch.effective_k_permille(),
            if fold.is_empty() { "-".into() } else { fold.join(",") },
            s.dense_params,
            s.reported_params,
            s.compressed_bytes,
            fmt(r.as_ref().map(|r| r.best_val_top1)),
            fmt(r.as_ref().map(|r| r.test_top1))
        );
        rows.push(json!({
            "value": value,
            "k_permille": arch.effective_k_permille(),
            "folded_stages": arch.folded_stages,
            "dense_params": s.dense_params,
            "reported_params": s.reported_params,
            "bytes": s.compressed_bytes,
            "val_top1": r.as_ref().map(|r| r.best_val_top1),
            "test_top1": r.as_ref().map(|r| r.test_top1),
        }));
    }
    if !dry_run {
        let mut m = RunManifest::new("sweep", argv);
        m.config = Some(base);
        m.metrics = serde_json::Value::Array(rows);
        m.artifacts = (0..points.len()).map(|i| out.join(format!("point-{}", i))).collect();
        m.write(&out.join("manifest.json"), started)?;
    }
    Ok(())
}

fn summary_from_json(v: &serde_json::Value) -> Result<TrainSummary> {
    let f = |k: &str| v[k].as_f64().ok_or_else(|| Error::Format(format!("manifest lacks {}", k)));
    Ok(TrainSummary {
        method: serde_json::from_value(v["method"].clone()).map_err(|e| Error::Format(e.to_string()))?,
        k_permille: f("k_permille")? as u16,
        reported_params: f("reported_params")? as u64,
        initial_loss: f("initial_loss")?,
        final_train_loss: f("final_train_loss")?,
        best_epoch: f("best_epoch")? as usize,
        best_val_top1: f("best_val_top1")?,
        test_top1: f("test_top1")?,
        checkpoint: v["checkpoint"].as_str().map(PathBuf::from),
        artifacts: Vec::new(),
    })
}
