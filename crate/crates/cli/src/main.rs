//! `mtlam`: generate toy data, train, evaluate, ablate and inspect memories.
//!
//! Exit codes: 0 success, 2 config or validation error, 3 numerical failure
//! (non-finite loss or failed gradient check), 1 anything else.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtlam::config::ExperimentConfig;
use mtlam::pipeline::{
    ablate, build_model, evaluate, infer_visual_only, model_gradcheck, train, Checkpoint, HeadAccuracy,
    TrainOptions, TrainOutcome, EPOCH_CSV_HEADER,
};
use mtlam::losses::LOSS_CSV_HEADER;
use mtlam::toytask::{bayes_oracle, generate_splits, load_split, load_splits, save_splits, split_path, Split};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] mtlam::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use mtlam::Error as E;
        match self {
            CliError::Invalid(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                E::InvalidConfig { .. }
                | E::ConfigParse(_)
                | E::Misaligned { .. }
                | E::InvalidArgument(_)
                | E::ConfigHashMismatch => 2,
                E::NonFiniteLoss { .. } => 3,
                _ => 1,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_context<T>(r: std::io::Result<T>, context: impl FnOnce() -> String) -> Result<T> {
    r.map_err(|source| CliError::Io {
        context: context(),
        source,
    })
}

#[derive(Parser)]
#[command(name = "mtlam", version, about = "Cross-modal audio memories for visual word recognition on a toy task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test sample files and report the visual Bayes oracle.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes best.mtlc, last.mtlc and metrics CSVs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated memory levels overriding the config ("" for none).
        #[arg(long)]
        levels: Option<String>,
        /// Continue from a `last.mtlc` of an earlier, interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Accuracy of every head on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// CSV report path; defaults to `eval_<split>.csv` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every level subset over every seed and tabulate test accuracy.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV path; defaults to `ablation.csv` in the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Addressing scores of one sample at one memory level, as CSV.
    DumpAddressing {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        level: usize,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of randomly chosen model parameters.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        n_params: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-2)]
        tol: f64,
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { config, out } => cmd_gen(&config, &out),
        Command::Train {
            config,
            data,
            out,
            levels,
            resume,
            stop_after,
        } => cmd_train(&config, &data, &out, levels.as_deref(), resume.as_deref(), stop_after),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => cmd_eval(&checkpoint, &data, split, out),
        Command::Ablate { config, data, out } => cmd_ablate(&config, &data, out),
        Command::DumpAddressing {
            checkpoint,
            data,
            sample,
            level,
            split,
            out,
        } => cmd_dump_addressing(&checkpoint, &data, sample, level, split, out.as_deref()),
        Command::Gradcheck {
            config,
            n_params,
            eps,
            tol,
            inject_sign_flip,
        } => cmd_gradcheck(&config, n_params, eps, tol, inject_sign_flip),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    match ExperimentConfig::load(path) {
        Err(mtlam::Error::Io(e)) => Err(CliError::Io {
            context: format!("reading {}", path.display()),
            source: e,
        }),
        r => Ok(r?),
    }
}

fn parse_levels(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| CliError::Invalid(format!("bad level `{s}` in --levels")))
        })
        .collect()
}

fn cmd_gen(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let splits = generate_splits(&cfg.toytask, cfg.data.sizes(), cfg.data.split_seed)?;
    io_context(save_splits(out, &splits).map_err(into_io), || {
        format!("writing samples to {}", out.display())
    })?;
    for (split, samples) in [
        (Split::Train, &splits.train),
        (Split::Val, &splits.val),
        (Split::Test, &splits.test),
    ] {
        println!("{}: {} samples -> {}", split.name(), samples.len(), split_path(out, split).display());
    }
    let oracle = bayes_oracle(&cfg.toytask, &splits.test, true)?;
    let center = bayes_oracle(&cfg.toytask, &splits.test, false)?;
    println!(
        "visual Bayes oracle on test: {:.2}% ± {:.2} (center frames only: {:.2}%)",
        100.0 * oracle.accuracy,
        100.0 * oracle.half_width_95(),
        100.0 * center.accuracy
    );
    Ok(())
}

/// Unwrap an I/O error so it can carry a path in its context.
fn into_io(e: mtlam::Error) -> std::io::Error {
    match e {
        mtlam::Error::Io(e) => e,
        other => std::io::Error::other(other.to_string()),
    }
}

fn write_metrics(dir: &Path, outcome: &TrainOutcome, append: bool) -> Result<()> {
    let write = |name: &str, header: &str, full: String| -> Result<()> {
        let path = dir.join(name);
        let body = if append && path.exists() {
            full.strip_prefix(header)
                .and_then(|s| s.strip_prefix('\n'))
                .unwrap_or(&full)
                .to_string()
        } else {
            full
        };
        let mut f = io_context(
            OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path),
            || format!("opening {}", path.display()),
        )?;
        io_context(f.write_all(body.as_bytes()), || format!("writing {}", path.display()))
    };
    write("losses.csv", LOSS_CSV_HEADER, outcome.log.loss_csv())?;
    write("epochs.csv", EPOCH_CSV_HEADER, outcome.log.epoch_csv())
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    levels: Option<&str>,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<()> {
    let exp = load_config(config)?;
    let mut cfg = exp.model_config()?;
    if let Some(levels) = levels {
        cfg.levels = parse_levels(levels)?;
        cfg.validate()?;
    }
    let train_set = load_split(data, Split::Train)?;
    let val_set = load_split(data, Split::Val)?;
    let resume = resume.map(|p| Checkpoint::load_for(p, &cfg)).transpose()?;
    if let Some(ck) = &resume {
        log::info!("resuming from step {}", ck.step);
    }
    let resumed = resume.is_some();
    let outcome = train(&cfg, &train_set, &val_set, TrainOptions { resume, stop_after })?;
    io_context(fs::create_dir_all(out), || format!("creating {}", out.display()))?;
    outcome.best.save(&out.join("best.mtlc"))?;
    outcome.last.save(&out.join("last.mtlc"))?;
    write_metrics(out, &outcome, resumed)?;
    match outcome.log.epochs.last() {
        Some(e) => println!(
            "epoch {}: val acc_v {:.2}% acc_a {:.2}% acc_va {:.2}%",
            e.epoch,
            100.0 * e.acc.acc_v,
            100.0 * e.acc.acc_a,
            100.0 * e.acc.acc_va
        ),
        None => println!("no epoch completed"),
    }
    println!(
        "{} at step {} -> {}",
        if outcome.finished { "finished" } else { "stopped" },
        outcome.last.step,
        out.display()
    );
    Ok(())
}

fn accuracy_csv(split: Split, acc: &HeadAccuracy) -> String {
    format!(
        "split,acc_v,acc_a,acc_va\n{},{:.4},{:.4},{:.4}\n",
        split.name(),
        acc.acc_v,
        acc.acc_a,
        acc.acc_va
    )
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: Split, out: Option<PathBuf>) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.model()?;
    let samples = load_split(data, split)?;
    let acc = evaluate(&model, &samples)?;
    let csv = accuracy_csv(split, &acc);
    let out = out.unwrap_or_else(|| checkpoint.with_file_name(format!("eval_{}.csv", split.name())));
    io_context(fs::write(&out, &csv), || format!("writing {}", out.display()))?;
    print!("{csv}");
    Ok(())
}

fn threads_from_env() -> Result<usize> {
    match std::env::var("MTLAM_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Invalid(format!("MTLAM_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn cmd_ablate(config: &Path, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let exp = load_config(config)?;
    let cfg = exp.model_config()?;
    let threads = threads_from_env()?;
    let splits = load_splits(data)?;
    let table = ablate(&cfg, &exp.ablation.subsets, &exp.ablation.seeds, &splits, threads)?;
    let csv = table.to_csv();
    let out = out.unwrap_or_else(|| exp.output_dir.join("ablation.csv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        io_context(fs::create_dir_all(dir), || format!("creating {}", dir.display()))?;
    }
    io_context(fs::write(&out, &csv), || format!("writing {}", out.display()))?;
    print!("{csv}");
    Ok(())
}

fn cmd_dump_addressing(
    checkpoint: &Path,
    data: &Path,
    sample: usize,
    level: usize,
    split: Split,
    out: Option<&Path>,
) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.model()?;
    let levels: Vec<usize> = model.banks().iter().map(|b| b.level()).collect();
    if !levels.contains(&level) {
        return Err(CliError::Invalid(format!(
            "level {level} has no memory in this model (levels: {levels:?})"
        )));
    }
    let samples = load_split(data, split)?;
    let s = samples.get(sample).ok_or_else(|| {
        CliError::Invalid(format!(
            "sample {sample} out of range: {} split has {} samples",
            split.name(),
            samples.len()
        ))
    })?;
    let inference = infer_visual_only(&model, &s.visual)?;
    let (_, scores) = inference
        .scores
        .iter()
        .find(|(l, _)| *l == level)
        .expect("every memory level reports scores");
    let csv = scores.to_csv();
    match out {
        Some(path) => io_context(fs::write(path, &csv), || format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_gradcheck(config: &Path, n_params: usize, eps: f64, tol: f64, flip: bool) -> Result<()> {
    if n_params == 0 {
        return Err(CliError::Invalid("--n-params must be at least 1".into()));
    }
    let exp = load_config(config)?;
    let cfg = exp.model_config()?;
    let model = build_model(&cfg, cfg.train.seed)?;
    let sizes = mtlam::toytask::SplitSizes { train: 0, val: 4, test: 0 };
    let batch = generate_splits(&exp.toytask, sizes, exp.data.split_seed)?.val;
    let check = model_gradcheck(&model, &batch, n_params, eps, cfg.train.seed, flip)?;
    println!("param,index,analytic,numeric,rel_error");
    for (s, name) in check.report.samples.iter().zip(&check.names) {
        println!("{name},{},{:e},{:e},{:e}", s.index, s.analytic, s.numeric, s.rel_error);
    }
    let worst = check.report.max_rel_error();
    if check.report.passes(tol) {
        println!("PASS: max relative error {worst:e} < {tol:e} over {n_params} parameters");
        Ok(())
    } else {
        println!("FAIL: max relative error {worst:e} >= {tol:e}");
        Err(CliError::Numerical(format!("gradient check failed (max relative error {worst:e})")))
    }
}
