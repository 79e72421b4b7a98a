//! `attnp` command-line driver: synthetic data generation, training with
//! adversarial perturbations, evaluation, ε sweeps and attention heatmaps.

mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use attnp::data::{self, DatasetMode, Instance, SplitSizes, Vocabulary};
use attnp::evaluator::{self, Task};
use attnp::model::{forward, EncodedInstance, ModelConfig, ModelParameters, TaskKind};
use attnp::trainer::{self, Checkpoint};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::RunConfig;

const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Parser)]
#[command(name = "attnp", version, about = "Adversarial training on attention for text models")]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for render-attention).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic bAbI-style train/valid/test files.
    GenData {
        /// Number of supporting facts (1, 2 or 3).
        #[arg(long, default_value_t = 1)]
        task: u8,
        /// Split sizes as train/valid/test.
        #[arg(long, default_value = "8500/1500/1000", value_parser = parse_sizes)]
        sizes: SplitSizes,
        /// File name prefix; defaults to babi<task>.
        #[arg(long)]
        name: Option<String>,
    },
    /// Train a model and evaluate it on the test split.
    Train(RunArgs),
    /// Evaluate a checkpoint on a dataset file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file in JSON-lines format.
        #[arg(long)]
        split: PathBuf,
        /// Overrides the task stored in the checkpoint.
        #[arg(long)]
        task: Option<Task>,
    },
    /// Train once per random ε and report validation metrics.
    SweepEpsilon {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        /// Inclusive ε range as lo:hi.
        #[arg(long, default_value = "0:30", value_parser = parse_range)]
        range: (f64, f64),
    },
    /// Render attention and saliency for one instance as HTML.
    RenderAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file in JSON-lines format.
        #[arg(long)]
        split: PathBuf,
        /// Zero-based line of the instance.
        #[arg(long)]
        index: usize,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Path prefix of the <data>.{train,valid,test}.jsonl files.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// Any other configuration key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self, seed: Option<u64>) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for s in &self.set {
            let Some((k, v)) = s.split_once('=') else {
                bail!("--set expects key=value, got '{s}'");
            };
            out.insert(k.trim().to_string(), v.trim().to_string());
        }
        let named = [
            ("data", &self.data),
            ("method", &self.method),
            ("epsilon", &self.epsilon),
            ("lambda", &self.lambda),
            ("epochs", &self.epochs),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                out.insert(k.to_string(), v.clone());
            }
        }
        if let Some(s) = seed {
            out.insert("seed".into(), s.to_string());
        }
        Ok(out)
    }
}

fn parse_sizes(s: &str) -> std::result::Result<SplitSizes, String> {
    let parts: Vec<&str> = s.split('/').collect();
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match nums[..] {
        [train, valid, test] if train > 0 && valid > 0 && test > 0 => Ok(SplitSizes { train, valid, test }),
        _ => Err("expected three positive counts as train/valid/test".into()),
    }
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("'{lo}': {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("'{hi}': {e}"))?;
    if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
        return Err(format!("need 0 <= lo <= hi, got {lo}:{hi}"));
    }
    Ok((lo, hi))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.clone();
    match cli.command {
        Command::GenData { task, sizes, name } => {
            let out = out.context("--out DIR is required")?;
            gen_data(task, sizes, cli.seed.unwrap_or(0), &out, name)
        }
        Command::Train(args) => {
            let cfg = RunConfig::load(cli.config.as_deref(), &args.overrides(cli.seed)?)?;
            train(&cfg, &out.context("--out DIR is required")?)
        }
        Command::Evaluate { checkpoint, split, task } => evaluate(&checkpoint, &split, task, out.as_deref()),
        Command::SweepEpsilon { run, trials, range } => {
            let cfg = RunConfig::load(cli.config.as_deref(), &run.overrides(cli.seed)?)?;
            sweep(&cfg, trials as usize, range, &out.context("--out DIR is required")?)
        }
        Command::RenderAttention {
            checkpoint,
            split,
            index,
        } => render(&checkpoint, &split, index, &out.context("--out FILE is required")?),
    }
}

fn gen_data(task: u8, sizes: SplitSizes, seed: u64, out: &Path, name: Option<String>) -> Result<()> {
    let splits = data::generate_babi_like(task, sizes, seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let name = name.unwrap_or_else(|| format!("babi{task}"));
    for (split, items) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        let path = out.join(format!("{name}.{split}.jsonl"));
        data::write_dataset(&path, items).with_context(|| format!("writing {}", path.display()))?;
    }
    let prefix = out.join(&name);
    let conf = format!(
        "# synthetic task {task}, seed {seed}\ndata = {}\nmode = pair\ntask = qa\nlabel_count = {}\nmin_count = 1\n",
        prefix.display(),
        data::PLACES.len()
    );
    fs::write(out.join(format!("{name}.conf")), conf)?;
    let vocab = data::build_vocab(&splits.train, 1)?;
    println!(
        "task {task}: {} train, {} valid, {} test instances, vocabulary {} (including reserved ids), written to {}",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        vocab.len(),
        prefix.display()
    );
    Ok(())
}

struct Prepared {
    vocab: Vocabulary,
    model: ModelConfig,
    train: Vec<EncodedInstance>,
    valid: Vec<EncodedInstance>,
    test: Vec<Instance>,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let load = |split: &str| -> Result<Vec<Instance>> {
        let path = cfg.split_path(split);
        data::load_dataset(&path, cfg.mode, cfg.label_count).with_context(|| format!("loading {}", path.display()))
    };
    let (train, valid, test) = (load("train")?, load("valid")?, load("test")?);
    let vocab = data::build_vocab(&train, cfg.min_count)?;
    Ok(Prepared {
        model: cfg.model_config(vocab.len()),
        train: data::encode_split(&train, &vocab),
        valid: data::encode_split(&valid, &vocab),
        test,
        vocab,
    })
}

fn initial_params(cfg: &RunConfig, prep: &Prepared) -> Result<ModelParameters> {
    let mut params = ModelParameters::init(&prep.model, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    if let Some(path) = &cfg.embeddings {
        let table = data::load_embeddings(path, &prep.vocab)?;
        if table.dim() != cfg.embed_dim {
            bail!("embedding file has dimension {}, but embed_dim = {}", table.dim(), cfg.embed_dim);
        }
        let found = table.apply(&prep.vocab, &mut params.embedding)?;
        log::info!("initialised {found} of {} embedding rows from {}", prep.vocab.len(), path.display());
    }
    Ok(params)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let prep = prepare(cfg)?;
    let params = initial_params(cfg, &prep)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.echo"), cfg.echo())?;
    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    log::info!(
        "training {} ({} parameters) on {} instances",
        cfg.train.adv.method,
        params.count(),
        prep.train.len()
    );
    let (params, history) = trainer::train_from(params, &prep.train, &prep.valid, &prep.model, &cfg.train, |rec| {
        let line = serde_json::to_string(rec).map_err(attnp::Error::from)?;
        writeln!(metrics, "{line}")
            .and_then(|_| metrics.flush())
            .map_err(attnp::Error::from)
    })?;
    drop(metrics);
    Checkpoint::new(&prep.model, &params, Some(&prep.vocab), Some(&cfg.train)).save(out.join(CHECKPOINT_FILE))?;

    let test = data::encode_split(&prep.test, &prep.vocab);
    let report = evaluator::evaluate(&test, &params, &prep.model, cfg.task)?;
    write_json(&out.join("report.json"), &report)?;

    let dir = out.join("heatmaps");
    fs::create_dir_all(&dir)?;
    for (i, (inst, enc)) in prep.test.iter().zip(&test).take(cfg.heatmaps).enumerate() {
        let html = heatmap(inst, enc, &params, &prep.model)?.0;
        fs::write(dir.join(format!("test_{i}.html")), html)?;
    }
    println!(
        "best epoch {:?}: valid {} = {:.4}; test {} = {:.4}, mean attention/saliency correlation {}",
        history.best_epoch,
        cfg.task.metric_name(),
        history.best_valid_metric.unwrap_or(f64::NAN),
        report.metric_name,
        report.metric,
        report.mean_correlation.map_or("n/a".to_string(), |c| format!("{c:.4}"))
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, ModelParameters, Vocabulary)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let params = ck.params()?;
    let vocab = ck
        .vocab
        .clone()
        .context("checkpoint has no vocabulary; it cannot encode text")?;
    Ok((ck, params, vocab))
}

fn load_split(path: &Path, model: &ModelConfig) -> Result<Vec<Instance>> {
    let mode = match model.task_kind {
        TaskKind::Single => DatasetMode::Single,
        TaskKind::Pair => DatasetMode::Pair,
    };
    data::load_dataset(path, mode, model.label_count).with_context(|| format!("loading {}", path.display()))
}

fn evaluate(checkpoint: &Path, split: &Path, task: Option<Task>, out: Option<&Path>) -> Result<()> {
    let (ck, params, vocab) = load_checkpoint(checkpoint)?;
    let task = task
        .or(ck.train_config.as_ref().map(|t| t.task))
        .context("checkpoint does not record a task; pass --task")?;
    let instances = data::encode_split(&load_split(split, &ck.model_config)?, &vocab);
    let report = evaluator::evaluate(&instances, &params, &ck.model_config, task)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("report.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn sweep(cfg: &RunConfig, trials: usize, range: (f64, f64), out: &Path) -> Result<()> {
    let prep = prepare(cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.echo"), cfg.echo())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(2);
    let rows = trainer::epsilon_sweep(&prep.train, &prep.valid, &prep.model, &cfg.train, trials, range, &mut rng)?;
    let mut text = String::new();
    for r in &rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
        println!("epsilon {:>8.4}  valid {} {:.4}", r.epsilon, cfg.task.metric_name(), r.valid_metric);
    }
    fs::write(out.join("sweep.jsonl"), text)?;
    Ok(())
}

/// HTML page plus the per-token rows `(token, attention, saliency)`.
type Rendered = (String, Vec<(String, f64, f64)>);

fn heatmap(inst: &Instance, enc: &EncodedInstance, params: &ModelParameters, model: &ModelConfig) -> Result<Rendered> {
    let attention = forward(enc, params, model, None)?.attention;
    let saliency = evaluator::gradient_importance(enc, params, model)?;
    let html = evaluator::render_heatmap(&inst.tokens, &attention, &saliency)?;
    let rows = inst
        .tokens
        .iter()
        .zip(&attention.weights)
        .zip(&saliency.values)
        .map(|((t, &a), &s)| (t.clone(), a, s))
        .collect();
    Ok((html, rows))
}

fn render(checkpoint: &Path, split: &Path, index: usize, out: &Path) -> Result<()> {
    let (ck, params, vocab) = load_checkpoint(checkpoint)?;
    let instances = load_split(split, &ck.model_config)?;
    let Some(inst) = instances.get(index) else {
        bail!("index {index} is out of range for {} instances", instances.len());
    };
    let (html, rows) = heatmap(inst, &inst.encode(&vocab), &params, &ck.model_config)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, html).with_context(|| format!("writing {}", out.display()))?;
    println!("token\tattention\tsaliency");
    for (t, a, s) in rows {
        println!("{t}\t{a:.6}\t{s:.6}");
    }
    Ok(())
}
