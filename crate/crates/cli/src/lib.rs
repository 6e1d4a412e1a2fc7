//! Command-line front end: `train`, `eval`, `merge`, `analyze`, `sweep` and
//! `init-config`.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration, format or I/O
//! error, 3 training divergence, 4 checkpoint corruption.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use mlae::analysis::model_similarity;
use mlae::checkpoint::{load_model, save_model};
use mlae::config::{RunConfig, TaskSource};
use mlae::data::Split;
use mlae::trainer::{evaluate, metrics_csv, prepare, sweep, train_with, SweepAxis};
use mlae::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CORRUPT: i32 = 4;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(name = "mlae", version, about = "Masked rank-1 LoRA experts on a small frozen transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train adapters and the head; writes a checkpoint and metrics.csv.
    Train(RunArgs),
    /// Print top-1 accuracy (percent) of a checkpoint on a dataset file.
    Eval { checkpoint: PathBuf, dataset: PathBuf },
    /// Fold every adapter into its projection.
    Merge { input: PathBuf, output: PathBuf },
    /// Write per-block expert similarity CSVs, SVG heatmaps and a summary.
    Analyze {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate once per value and seed.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// p, coeff_init, strategy, sub_rank or budget.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the axis' default grid when absent.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// Write the default configuration.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a field by dotted path, e.g. `train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Switch adapter components: `decomposition`, `masking`, `adaptive`, `freeze_lambda`.
    #[arg(long = "flag", value_name = "NAME=on|off", num_args = 1..)]
    flags: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the init, data and dropout seeds.
    #[arg(long)]
    seed: Option<u64>,
}

fn resolve_config(args: &RunArgs) -> mlae::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &args.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("--set expects KEY=VALUE, got `{s}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    for f in &args.flags {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("--flag expects NAME=on|off, got `{f}`")))?;
        let on = match v.trim() {
            "on" | "true" => "true",
            "off" | "false" => "false",
            other => return Err(Error::Format(format!("--flag {k}: expected on or off, got `{other}`"))),
        };
        let key = k.trim();
        if !matches!(key, "decomposition" | "masking" | "adaptive" | "freeze_lambda") {
            return Err(Error::Format(format!("unknown adapter flag `{key}`")));
        }
        cfg.set(&format!("adapter.flags.{key}"), on)?;
    }
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Maps a library error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Corrupt(_) => EXIT_CORRUPT,
        Error::Format(_)
        | Error::Parameter(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Shape { .. }
        | Error::State(_) => EXIT_CONFIG,
        Error::NonFinite(_) | Error::Contract(_) => EXIT_INTERNAL,
    }
}

/// Manifest path for a checkpoint argument: `.json` files as given,
/// anything else as a directory holding `checkpoint.json`.
pub fn checkpoint_path(p: &Path) -> PathBuf {
    if p.extension().is_some_and(|e| e == "json") {
        p.to_path_buf()
    } else {
        p.join(CHECKPOINT_FILE)
    }
}

fn log_line(dir: &Path, msg: &str) -> mlae::Result<()> {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join("train.log"))?;
    writeln!(f, "{ts} {msg}")?;
    Ok(())
}

fn cmd_train(args: &RunArgs) -> mlae::Result<()> {
    let cfg = resolve_config(args)?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), cfg.to_json()?)?;
    log_line(&dir, "train start")?;
    let (mut model, data, schedule) = prepare::<f64>(&cfg)?;
    if matches!(cfg.task, TaskSource::Synthetic(_)) {
        data.val.write(&dir.join("data").join("val.csv"))?;
        if let Some(test) = &data.test {
            test.write(&dir.join("data").join("test.csv"))?;
        }
    }
    let mut history = Vec::new();
    let result = train_with(&mut model, &data, &schedule, &cfg.train, &mut history);
    fs::write(dir.join(METRICS_FILE), metrics_csv(&history))?;
    save_model(&dir.join(CHECKPOINT_FILE), &model, cfg.to_value()?)?;
    match &result {
        Ok(()) => log_line(&dir, "train done")?,
        Err(e) => log_line(&dir, &format!("train aborted: {e}"))?,
    }
    result?;
    let experts: usize = model.adapters().into_iter().flatten().map(|b| b.active_count()).sum();
    println!(
        "trained {} epochs, {experts} experts, checkpoint {}",
        history.len(),
        dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, dataset: &Path) -> mlae::Result<()> {
    let split = Split::<f64>::read(dataset)?;
    let (model, _) = load_model::<f64>(&checkpoint_path(checkpoint))?;
    let c = model.config();
    if split.tokens != c.patch_tokens || split.token_dim() != c.token_dim {
        return Err(Error::Format(format!(
            "dataset grid {}x{} does not match model {}x{}",
            split.tokens,
            split.token_dim(),
            c.patch_tokens,
            c.token_dim
        )));
    }
    if let Some(&y) = split.labels.iter().find(|&&y| y >= c.n_classes) {
        return Err(Error::Format(format!("label {y} with {} classes", c.n_classes)));
    }
    let acc = evaluate(&model, &split, 64)?;
    println!("{:.1}", 100.0 * acc);
    Ok(())
}

fn cmd_merge(input: &Path, output: &Path) -> mlae::Result<()> {
    let (model, manifest) = load_model::<f64>(&checkpoint_path(input))?;
    let merged = model.merged()?;
    let out = checkpoint_path(output);
    save_model(&out, &merged, manifest.config)?;
    println!("merged checkpoint {}", out.display());
    Ok(())
}

fn cmd_analyze(checkpoint: &Path, out: &Path) -> mlae::Result<()> {
    let (model, _) = load_model::<f64>(&checkpoint_path(checkpoint))?;
    let report = model_similarity(&model)?;
    report.write(out)?;
    let show = |v: Option<f64>| v.map_or("NaN".to_string(), |x| format!("{x:.4}"));
    println!(
        "mean similarity {} (abs {}) over {} blocks",
        show(report.model_mean_signed()),
        show(report.model_mean_abs()),
        report.per_block.len()
    );
    Ok(())
}

fn cmd_sweep(run: &RunArgs, axis: &str, values: &[String], seeds: &[u64]) -> mlae::Result<()> {
    let cfg = resolve_config(run)?;
    let axis: SweepAxis = axis.parse()?;
    let values = if values.is_empty() { axis.grid() } else { values.to_vec() };
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let rows = sweep(
        &cfg,
        axis,
        &values,
        seeds,
        &dir.join("sweep_runs.csv"),
        &dir.join("sweep_summary.csv"),
    )?;
    println!("{} runs recorded in {}", rows.len(), dir.join("sweep_runs.csv").display());
    Ok(())
}

fn cmd_init_config(out: Option<&Path>) -> mlae::Result<()> {
    let text = RunConfig::default().to_json()?;
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval { checkpoint, dataset } => cmd_eval(checkpoint, dataset),
        Command::Merge { input, output } => cmd_merge(input, output),
        Command::Analyze { checkpoint, out } => cmd_analyze(checkpoint, out),
        Command::Sweep {
            run,
            axis,
            values,
            seeds,
        } => cmd_sweep(run, axis, values, seeds),
        Command::InitConfig { out } => cmd_init_config(out.as_deref()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes() {
        assert_eq!(exit_code(&Error::Diverged { step: 3 }), EXIT_DIVERGED);
        assert_eq!(exit_code(&Error::Corrupt("x".into())), EXIT_CORRUPT);
        assert_eq!(exit_code(&Error::Format("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Contract("x".into())), EXIT_INTERNAL);
    }

    #[test]
    fn flags_and_sets_override_config() {
        let args = RunArgs {
            config: None,
            sets: vec!["train.epochs=2".into()],
            flags: vec!["decomposition=off".into(), "masking=off".into(), "adaptive=off".into()],
            out: Some("x".into()),
            seed: Some(7),
        };
        let c = resolve_config(&args).unwrap();
        assert_eq!(c.train.epochs, 2);
        assert!(!c.adapter.flags.decomposition && !c.adapter.flags.masking && !c.adapter.flags.adaptive);
        assert_eq!(c.train.seeds.dropout, 7);
        assert_eq!(c.output_dir, PathBuf::from("x"));
    }

    #[test]
    fn bad_flag_is_rejected() {
        let args = RunArgs {
            config: None,
            sets: vec![],
            flags: vec!["sparkle=on".into()],
            out: None,
            seed: None,
        };
        assert!(matches!(resolve_config(&args), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_paths() {
        assert_eq!(checkpoint_path(Path::new("a/m.json")), PathBuf::from("a/m.json"));
        assert_eq!(checkpoint_path(Path::new("run")), PathBuf::from("run/checkpoint.json"));
    }
}
