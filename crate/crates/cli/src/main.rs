//! `kdetect`: generate the synthetic corpora, train teacher and student
//! detectors, evaluate them, and run the distillation comparison and the
//! augmentation cross-validation.
//!
//! Every command writes the resolved configuration next to its outputs. On
//! failure the process exits with status 1 and prints one JSON object
//! `{"error": <kind>, "message": <text>}` on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use kdetect::experiment::{
    self, echo_config, load_model, load_split_or_corpus, load_train_val, ExperimentConfig, CONFIG_FILE,
};
use kdetect::synthdata::{CorpusKind, RenderParams, Split};
use kdetect::train::{freeze, train_student, train_teacher, RunDir};

#[derive(Parser)]
#[command(name = "kdetect", version, about = "Class-aware teacher/student distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    PolypProxy,
    EddProxy,
    Unseen,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Teacher,
    Student,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus (all of its splits) to disk.
    GenData {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Experiment configuration whose `[data]` rendering settings apply.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a teacher (single class) or a student (three classes).
    Train {
        #[arg(long, value_enum)]
        role: Role,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory with `train` and `val` splits.
        #[arg(long)]
        data: PathBuf,
        /// Teacher `model.json` or `checkpoint.json`; required for students.
        #[arg(long)]
        teacher_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint or a prediction file on a dataset.
    Eval {
        #[arg(long, conflicts_with = "pred", required_unless_present = "pred")]
        ckpt: Option<PathBuf>,
        /// Line-delimited JSON predictions.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// A split directory, or a corpus directory (its `test` split is used).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment configuration whose `[eval]` settings apply.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Full comparison: corpora, teacher, kd-off and kd-on students per seed,
    /// held-out and unseen evaluation, comparison table.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validation table over augmentation variants.
    Kfold {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory; its train and val splits are pooled.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading configuration {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn gen_data(kind: Kind, seed: u64, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let (kind, render) = match kind {
        Kind::PolypProxy => (CorpusKind::PolypProxy, RenderParams::default()),
        Kind::EddProxy => (CorpusKind::EddProxy, cfg.data.edd_render.clone()),
        Kind::Unseen => (CorpusKind::Unseen, cfg.data.unseen_render.clone()),
    };
    let sets = experiment::write_corpus(kind, seed, &render, out)?;
    echo_config(out, &serde_json::json!({ "kind": kind, "seed": seed, "render": render }))?;
    for ds in &sets {
        let counts = ds.class_counts();
        println!("{}: {} images, instances ndbe/neoplasia/polyp = {:?}", ds.name, ds.len(), counts);
    }
    Ok(())
}

fn train(role: Role, config: Option<&Path>, data: &Path, teacher_ckpt: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let (train_set, val_set) = load_train_val(data)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_toml()?).with_context(|| format!("writing {}", out.display()))?;
    let outcome = match role {
        Role::Teacher => train_teacher(&train_set, &val_set, &cfg.teacher, &RunDir::at(out))?,
        Role::Student => {
            let Some(ckpt) = teacher_ckpt else { bail!("--teacher-ckpt is required for --role student") };
            let teacher = freeze(load_model(ckpt)?)?;
            let before = teacher.current_hash();
            let outcome = train_student(&train_set, &val_set, Some(&teacher), &cfg.student, &RunDir::at(out))?;
            if teacher.current_hash() != before {
                bail!("teacher parameters changed during student training");
            }
            outcome
        }
    };
    println!(
        "best epoch {} with validation mAP50 {:.4}; model written to {}",
        outcome.best_epoch + 1,
        outcome.best_val_map50,
        out.join(kdetect::train::MODEL_FILE).display()
    );
    Ok(())
}

fn eval(ckpt: Option<&Path>, pred: Option<&Path>, data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let dataset = load_split_or_corpus(data, Split::Test)?;
    let report = match (ckpt, pred) {
        (Some(c), None) => experiment::eval_checkpoint(&load_model(c)?, &dataset, &cfg.eval, out)?,
        (None, Some(p)) => experiment::eval_predictions(p, &dataset, out)?,
        _ => bail!("exactly one of --ckpt and --pred is required"),
    };
    print!("{}", report.to_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { kind, seed, out, config } => gen_data(kind, seed, &out, config.as_deref()),
        Command::Train { role, config, data, teacher_ckpt, out } => {
            train(role, config.as_deref(), &data, teacher_ckpt.as_deref(), &out)
        }
        Command::Eval { ckpt, pred, data, out, config } => {
            eval(ckpt.as_deref(), pred.as_deref(), &data, &out, config.as_deref())
        }
        Command::Experiment { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let report = experiment::run_experiment(&cfg, &out)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Kfold { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let (train_set, val_set) = load_train_val(&data)?;
            let pooled = train_set.concat(&val_set, &format!("{}+val", train_set.name));
            let table = experiment::run_kfold_table(&cfg, &pooled, &out)?;
            print!("{}", table.to_text(false));
            Ok(())
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    err.chain().find_map(|e| e.downcast_ref::<kdetect::Error>()).map(kdetect::Error::kind).unwrap_or("cli")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) if !err.use_stderr() => {
            // --help and --version
            let _ = err.print();
            return ExitCode::SUCCESS;
        }
        Err(err) => {
            let record = serde_json::json!({ "error": "usage", "message": err.to_string().trim_end() });
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = serde_json::json!({ "error": error_kind(&err), "message": format!("{err:#}") });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
