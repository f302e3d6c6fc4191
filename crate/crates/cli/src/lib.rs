//! `mcle` command-line harness: training, evaluation, mining queries,
//! synthetic data and the annotation workflow.

pub mod config;
pub mod server;

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use mcle_core::annotation::{export_annotation_tasks, read_jsonl, read_responses, write_jsonl, ResponseStore};
use mcle_core::data::{generate_synthetic, load_dataset, save_dataset_json, LoadOptions, SplitKind, SyntheticConfig};
use mcle_core::metrics::{aggregate_human, evaluate_split, AnswerMatch};
use mcle_core::mining::build_mining_index;
use mcle_core::train::{
    evaluate, load_trained, predict, read_predictions, write_predictions, RunConfig, TrainedModel,
};
use mcle_core::{DatasetSplit, EvalMode, Trainer};

use config::FlatConfig;

#[derive(Debug, Parser)]
#[command(name = "mcle", version, about = "Multi-level contrastive explanation training for VQA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic train/test pair as JSON lines.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long = "train-size", default_value_t = 500)]
        train_size: usize,
        #[arg(long = "test-size", default_value_t = 100)]
        test_size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train from a config file and/or flags; evaluates on `eval` if set.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a training checkpoint; its stored config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        flags: FlatConfig,
    },
    /// Greedy-decode a split, write predictions and print the metric report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `train`, `test` (the checkpoint's configured paths) or a dataset path.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "unfiltered")]
        mode: EvalMode,
        /// Predictions file; defaults to `predictions-<split>.jsonl` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "synthetic_json")]
        format: String,
    },
    /// Top-k counterfactual images for one training sample.
    Mine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        anchor: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value = "synthetic_json")]
        format: String,
    },
    /// Human-evaluation workflow.
    Annotate {
        #[command(subcommand)]
        action: AnnotateCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum AnnotateCommand {
    /// Join predictions with their questions into a shuffled task file.
    Export {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synthetic_json")]
        format: String,
    },
    /// Serve tasks and collect responses over HTTP.
    Serve {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Human score and error-type fractions of a responses file.
    Aggregate {
        #[arg(long)]
        responses: PathBuf,
    },
}

fn load_split(path: &Path, format: &str, cfg: &RunConfig, kind: SplitKind) -> Result<DatasetSplit> {
    let opts = LoadOptions {
        feature_dir: cfg.paths.feature_dir.clone(),
        m: cfg.model.m,
        d_raw: cfg.model.d_raw,
        default_split: kind,
    };
    load_dataset(path, format.parse()?, &opts).with_context(|| format!("loading {}", path.display()))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn synth(out_dir: &Path, train_size: usize, test_size: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let train = generate_synthetic(seed, train_size, &SyntheticConfig::default());
    let test = generate_synthetic(
        seed + 1000,
        test_size,
        &SyntheticConfig {
            split: SplitKind::Test,
            id_prefix: "tst".into(),
            ..SyntheticConfig::default()
        },
    );
    save_dataset_json(&train, &out_dir.join("train.jsonl"))?;
    save_dataset_json(&test, &out_dir.join("test.jsonl"))?;
    println!("wrote {} train and {} test samples to {}", train.len(), test.len(), out_dir.display());
    Ok(())
}

fn train(config: Option<&Path>, resume: Option<&Path>, flags: FlatConfig) -> Result<()> {
    let (cfg, flat) = config::resolve(config, flags)?;
    let format = flat.format.clone().unwrap_or_else(|| "synthetic_json".into());
    let out_dir = cfg.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs/mcle"));
    let train_path = cfg.paths.train.clone().expect("resolve checks train");
    let train = load_split(&train_path, &format, &cfg, SplitKind::Train)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(p, train)?,
        None => Trainer::new(cfg.clone(), train, &[])?,
    };
    trainer.run(Some(&out_dir))?;
    let c = &trainer.counters;
    println!(
        "trained {} epochs ({} steps); degenerate negatives {}, mining shortfall {}; checkpoint {}",
        trainer.epoch,
        trainer.step,
        c.degenerate_negatives,
        c.mining_shortfall,
        out_dir.join("latest.ckpt").display()
    );
    if let Some(eval_path) = &trainer.config.paths.eval {
        let split = load_split(eval_path, &format, &trainer.config, SplitKind::Test)?;
        let order = trainer.config.ablations.order();
        let preds = predict(&trainer.model, &trainer.vocab, &split, order, trainer.config.max_text_len)?;
        write_predictions(&preds, &out_dir.join("predictions-test.jsonl"))?;
        let reports = [EvalMode::Unfiltered, EvalMode::Filtered]
            .into_iter()
            .map(|mode| evaluate_split(&preds, &split, mode, AnswerMatch::Normalized))
            .collect::<mcle_core::Result<Vec<_>>>()?;
        fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(&reports)?)?;
        print_json(&reports)?;
    }
    Ok(())
}

fn split_for(saved: &TrainedModel, split: &str, format: &str) -> Result<(String, DatasetSplit)> {
    let cfg = &saved.config;
    let (name, path, kind) = match split {
        "train" => ("train".to_owned(), cfg.paths.train.clone(), SplitKind::Train),
        "test" | "eval" => ("test".to_owned(), cfg.paths.eval.clone(), SplitKind::Test),
        other => {
            let p = PathBuf::from(other);
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("data").to_owned();
            (stem, Some(p), SplitKind::Test)
        }
    };
    let path = path.ok_or_else(|| anyhow!("checkpoint config has no path for split {split:?}"))?;
    Ok((name, load_split(&path, format, cfg, kind)?))
}

fn eval(ckpt: &Path, split: &str, mode: EvalMode, out: Option<&Path>, format: &str) -> Result<()> {
    let saved = load_trained(ckpt)?;
    let (name, data) = split_for(&saved, split, format)?;
    let order = saved.config.ablations.order();
    let (preds, report) = evaluate(&saved.model, &saved.vocab, &data, order, saved.config.max_text_len, mode)?;
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => ckpt
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("predictions-{name}.jsonl")),
    };
    write_predictions(&preds, &out)?;
    eprintln!("predictions written to {}", out.display());
    print_json(&report)
}

fn mine(ckpt: &Path, anchor: &str, k: usize, format: &str) -> Result<()> {
    let saved = load_trained(ckpt)?;
    let (_, data) = split_for(&saved, "train", format)?;
    let index = build_mining_index(&data, &saved.vocab, &saved.model)?;
    let mined = index.mine(anchor, k)?;
    let scores = index.scores_vs(anchor)?;
    let rows: Vec<_> = mined
        .sample_ids
        .iter()
        .zip(&mined.image_refs)
        .map(|(id, img)| {
            let score = scores.iter().find(|(s, _)| s == id).map(|(_, v)| *v);
            serde_json::json!({ "sample_id": id, "image_ref": img, "score": score })
        })
        .collect();
    print_json(&serde_json::json!({ "anchor": anchor, "mined": rows, "shortfall": mined.shortfall }))
}

fn annotate(action: AnnotateCommand) -> Result<()> {
    match action {
        AnnotateCommand::Export {
            predictions,
            data,
            out,
            seed,
            format,
        } => {
            let preds = read_predictions(&predictions)?;
            let split = load_split(&data, &format, &RunConfig::default(), SplitKind::Test)?;
            let tasks = export_annotation_tasks(&preds, &split, seed)?;
            write_jsonl(&tasks, &out)?;
            println!("wrote {} tasks to {}", tasks.len(), out.display());
            Ok(())
        }
        AnnotateCommand::Serve { tasks, responses, addr } => {
            let tasks = read_jsonl(&tasks)?;
            let store = ResponseStore::open(tasks, Some(responses))?;
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            rt.block_on(server::serve(store, addr))
        }
        AnnotateCommand::Aggregate { responses } => {
            let list = read_responses(&responses)?;
            if list.is_empty() {
                bail!("{} holds no responses", responses.display());
            }
            print_json(&aggregate_human(&list)?)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out_dir,
            train_size,
            test_size,
            seed,
        } => synth(&out_dir, train_size, test_size, seed),
        Command::Train { config, resume, flags } => train(config.as_deref(), resume.as_deref(), flags),
        Command::Eval {
            ckpt,
            split,
            mode,
            out,
            format,
        } => eval(&ckpt, &split, mode, out.as_deref(), &format),
        Command::Mine { ckpt, anchor, k, format } => mine(&ckpt, &anchor, k, &format),
        Command::Annotate { action } => annotate(action),
    }
}
