use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use jlwsod_cli::commands::{self, Split};
use jlwsod_cli::config::{help_text, RunConfig};

#[derive(Parser)]
#[command(name = "jlwsod", version, about = "Weakly supervised detection on synthetic scenes", after_help = help_text())]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train.jsonl and test.jsonl.
    #[command(after_help = help_text())]
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training split; writes a checkpoint and a metrics CSV.
    #[command(after_help = help_text())]
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the checkpoint path with a .metrics.csv extension.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from an existing checkpoint up to `epochs`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint: CorLoc on train, mAP on test.
    #[command(after_help = help_text())]
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train sub-methods A-F over the ablation seeds; writes median metrics.
    #[command(after_help = help_text())]
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write one row per (sub-method, seed).
        #[arg(long)]
        runs: Option<PathBuf>,
    },
    /// Finite-difference check of every loss gradient.
    #[command(after_help = help_text())]
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Detection, localization and (optionally) ablation results in one JSON file.
    #[command(after_help = help_text())]
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Table written by `ablate --out`.
        #[arg(long)]
        ablation: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::GenData { cfg, out } => {
            let (tr, te) = commands::cmd_gen_data(&cfg.load()?, &out)?;
            println!("wrote {} train and {} test scenes to {}", tr, te, out.display());
        }
        Cmd::Train {
            cfg,
            data,
            checkpoint,
            metrics,
            resume,
        } => {
            let metrics = metrics.unwrap_or_else(|| commands::metrics_path_for(&checkpoint));
            let o = commands::cmd_train(&cfg.load()?, &data, &checkpoint, &metrics, resume)?;
            match o.metrics.last() {
                Some(m) => println!(
                    "epoch {} loss {:.6} (ins {:.6}, sem {:.6}, igcl {:.6})",
                    m.epoch, m.loss_total, m.loss_ins, m.loss_sem, m.loss_igcl
                ),
                None => println!("no epochs run (state at epoch {})", o.state.epoch),
            }
            println!("checkpoint {}, metrics {}", checkpoint.display(), metrics.display());
        }
        Cmd::Eval {
            cfg,
            checkpoint,
            data,
            split,
            report,
        } => {
            let r = commands::cmd_eval(&cfg.load()?, &checkpoint, &data, split.into(), &report)?;
            match r.corloc {
                Some(c) => println!("CorLoc {:.4}  mAP@0.5 {:.4}", c, r.map50),
                None => println!("mAP@0.5 {:.4}  mAP@[.5:.95] {:.4}", r.map50, r.coco_map),
            }
        }
        Cmd::Ablate { cfg, data, out, runs } => {
            let a = commands::cmd_ablate(&cfg.load()?, &data, &out, runs.as_deref())?;
            print!("{}", commands::ablation_csv(&a));
        }
        Cmd::GradCheck { cfg, corrupt_backward } => {
            let o = commands::cmd_grad_check(&cfg.load()?, corrupt_backward)?;
            print!("{}", o.table());
            println!("{} in {:.2}s", if o.passed() { "passed" } else { "FAILED" }, o.seconds);
            return Ok(o.passed());
        }
        Cmd::Report {
            cfg,
            checkpoint,
            data,
            ablation,
            out,
        } => {
            commands::cmd_report(&cfg.load()?, &checkpoint, &data, ablation.as_deref(), &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(2)
        }
    }
}
