//! `acl`: meta-train, meta-test and inspect self-referential weight matrix
//! learners.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime or numerical
//! error, 4 I/O or file-format error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acl_core::checkpoint::Checkpoint;
use acl_core::config::{read_json, EvalConfig, SnapshotConfig, TrainConfig};
use acl_core::eval::curves::{curve_extract, curves_to_csv, divergence_signature, read_term_log, series_names};
use acl_core::eval::{dump_weight_snapshots, meta_test};
use acl_core::exec::{stream_rng, Executor};
use acl_core::gradcheck::{check_model, ModelCheckConfig};
use acl_core::model::LabeledInput;
use acl_core::tasks::{sample_cl_sequence, TaskSource};
use acl_core::trainer::{meta_train, Sources};
use acl_core::Error;
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "acl", version, about = "In-context continual learning with self-referential weight matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (1 = sequential and deterministic, 0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Base directory for relative dataset paths.
    #[arg(long, env = "ACL_DATA_ROOT")]
    data_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model; writes checkpoints and logs.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a progress line every this many steps (0 = quiet).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Evaluate a checkpoint on continual-learning sequences.
    MetaTest {
        #[command(flatten)]
        common: Common,
        /// Overrides the checkpoint named in the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Turn a term log into per-term loss curves.
    Analyze {
        /// `terms.csv` written by meta-train.
        #[arg(long)]
        log: PathBuf,
        /// Curve CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Also report whether backward losses rise after the learning
        /// loss drops below this value.
        #[arg(long)]
        threshold: Option<f64>,
        /// Trailing smoothing window (logged steps) for that report.
        #[arg(long, default_value_t = 50)]
        window: usize,
    },
    /// Dump fast-weight sub-blocks while a demo stream is processed.
    Snapshots {
        #[command(flatten)]
        common: Common,
    },
    /// Compare tape gradients of a small model with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::Io { .. } | Error::Format { .. } | Error::Parse { .. } | Error::Checkpoint(_)) => 4,
        Some(_) => 3,
        None if err.chain().any(|e| e.downcast_ref::<std::io::Error>().is_some()) => 4,
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::MetaTrain { common, resume, log_every } => cmd_meta_train(&common, resume.as_deref(), log_every),
        Command::MetaTest { common, checkpoint } => cmd_meta_test(&common, checkpoint),
        Command::Analyze { log, out, threshold, window } => cmd_analyze(&log, &out, threshold, window),
        Command::Snapshots { common } => cmd_snapshots(&common),
        Command::Gradcheck { common } => cmd_gradcheck(&common),
    }
}

fn require_config(common: &Common) -> Result<&Path> {
    common
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()).into())
}

fn write_resolved<T: Serialize>(dir: &Path, cfg: &T) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(cfg)?;
    std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_meta_train(common: &Common, resume: Option<&Path>, log_every: u64) -> Result<()> {
    let mut cfg = TrainConfig::load(require_config(common)?)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    let sources = Sources::open(&cfg, common.data_root.as_deref())?;
    let init = resume.map(|p| Checkpoint::load_for(p, &cfg.model)).transpose()?;
    write_resolved(&common.out, &cfg)?;

    let outcome = meta_train(&cfg, &sources, init, &mut |l| {
        if log_every > 0 && (l.step % log_every == 0 || l.step == cfg.steps) {
            let val = l.val_acc.map(|v| format!(" val_acc {v:.4}")).unwrap_or_default();
            eprintln!("step {:>6}  lr {:.3e}  loss {:.4}  grad_norm {:.3}{val}", l.step, l.lr, l.loss, l.grad_norm);
        }
    })?;
    outcome.write(&common.out)?;
    if let Some((step, detail)) = outcome.diverged {
        return Err(Error::Diverged { step, detail }.into());
    }
    eprintln!("wrote {}", common.out.display());
    Ok(())
}

fn cmd_meta_test(common: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let mut cfg: EvalConfig = read_json(require_config(common)?, "meta-test")?;
    if let Some(c) = checkpoint {
        cfg.checkpoint = c;
    }
    if let Some(s) = common.seed {
        cfg.protocol.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    let model = Checkpoint::load(&cfg.checkpoint)?.to_model()?;
    let tasks = cfg.tasks.open(&cfg.protocol, common.data_root.as_deref())?;
    let report = meta_test(&model, &tasks, &cfg.protocol, &Executor::new(cfg.threads)?)?;
    write_resolved(&common.out, &cfg)?;
    report.write(&common.out)?;
    let fmt = |s: Option<acl_core::eval::Summary>| s.map_or("n/a".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.std));
    println!(
        "avg_acc {:.4} ± {:.4}  backward_transfer {}  forward_transfer {}",
        report.avg_acc.mean,
        report.avg_acc.std,
        fmt(report.backward_transfer),
        fmt(report.forward_transfer)
    );
    Ok(())
}

fn cmd_analyze(log: &Path, out: &Path, threshold: Option<f64>, window: usize) -> Result<()> {
    let text = std::fs::read_to_string(log).map_err(|e| Error::Io { path: log.to_path_buf(), source: e })?;
    let rows = read_term_log(&text)?;
    let points = curve_extract(&rows);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(out, curves_to_csv(&points)).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let names = series_names(&points);
    println!("{} series", names.len());
    for n in &names {
        println!("  {n}");
    }
    if let Some(t) = threshold {
        match divergence_signature(&points, t as acl_core::Real, window) {
            Some(d) => println!(
                "learning loss below {t} at step {}; backward loss {:.4} there, {:.4} at the end ({})",
                d.cross_step,
                d.bwd_at_cross,
                d.bwd_final,
                if d.holds { "rising" } else { "not rising" }
            ),
            None => println!("learning loss never drops below {t}"),
        }
    }
    Ok(())
}

fn cmd_snapshots(common: &Common) -> Result<()> {
    let mut cfg: SnapshotConfig = read_json(require_config(common)?, "snapshots")?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let model = Checkpoint::load(&cfg.checkpoint)?.to_model()?;
    let sources = cfg
        .sources
        .iter()
        .map(|s| s.open(common.data_root.as_deref()))
        .collect::<acl_core::Result<Vec<_>>>()?;
    let refs: Vec<&dyn TaskSource> = sources.iter().map(|s| s.as_ref()).collect();
    let seq = sample_cl_sequence(&refs, cfg.n_way, cfg.k_shot, 0, cfg.mode, &mut stream_rng(cfg.seed, 0))?;
    let stream: Vec<LabeledInput> =
        seq.episodes.iter().flat_map(|e| &e.demos).map(|d| LabeledInput::demo(d.x.clone(), d.label)).collect();

    write_resolved(&common.out, &cfg)?;
    let path = common.out.join("snapshots.csv");
    let file = std::fs::File::create(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let mut w = std::io::BufWriter::new(file);
    let n = dump_weight_snapshots(&model, &stream, cfg.stride, &cfg.selection, &mut w)?;
    std::io::Write::flush(&mut w).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    println!("{n} snapshots of {} inputs written to {}", stream.len(), path.display());
    Ok(())
}

fn cmd_gradcheck(common: &Common) -> Result<()> {
    let mut cfg: ModelCheckConfig = match &common.config {
        Some(p) => read_json(p, "gradcheck")?,
        None => ModelCheckConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let report = check_model(&cfg)?;
    for t in &report.tensors {
        println!("{:<28} max_rel_err {:.3e}  max_abs_grad {:.3e}", t.name, t.max_rel_err, t.max_abs_grad);
    }
    let worst = report.max_rel_err();
    println!("max relative error {worst:.3e} (tolerance {:.0e})", cfg.tolerance);
    if !report.passes(cfg.tolerance) {
        return Err(Error::Tensor(acl_core::TensorError::Contract(format!(
            "gradient check failed: {worst:.3e} ≥ {:.0e}",
            cfg.tolerance
        )))
        .into());
    }
    Ok(())
}
