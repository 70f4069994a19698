//! `cgt` subcommands. Data goes to files, diagnostics to stderr.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::codec::{RelationInventory, Triple};
use crate::decoding::{extract, DecodeConfig, Extraction};
use crate::eval::{
    check_instance, generate_synthetic, inventory_from, load_dataset, plot_csv, save_dataset,
    DatasetInstance, EvalReport, MatchMode, SyntheticSpec, DEFAULT_BUCKET_EDGES,
};
use crate::model::{load_checkpoint, save_checkpoint, CgtModel, ModelConfig};
use crate::tokenizer::Vocabulary;
use crate::training::{train, TrainConfig};

pub const DATA_DIR_ENV: &str = "CGT_DATA_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "cgt",
    version,
    about = "Joint triple extraction with a contrastive generative transformer"
)]
pub struct Cli {
    /// Default directory for datasets and runs.
    #[arg(long, global = true, env = DATA_DIR_ENV, default_value = "data")]
    pub data_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic train/dev/test corpus.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Extract triples from one sentence per line.
    Extract(ExtractArgs),
    /// Score predictions against gold.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Output directory (defaults to the data directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub entities: usize,
    #[arg(long, default_value_t = 8)]
    pub relations: usize,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 40)]
    pub dev: usize,
    #[arg(long, default_value_t = 40)]
    pub test: usize,
    #[arg(long, default_value_t = 0.5)]
    pub overlap: f64,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Directory holding train.jsonl, dev.jsonl and optionally relations.txt.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory for the checkpoint, vocabulary, logs and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML file with `[train]` and `[model]` tables; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Multiply the learning rate by this factor every `--decay-every` epochs.
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Validate every N epochs; 0 disables validation.
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub val_beam: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub relations: PathBuf,
    /// One sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    /// One JSON record per input line.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 0.6)]
    pub theta: f64,
    #[arg(long)]
    pub no_calibration: bool,
    #[arg(long, default_value_t = 64)]
    pub max_target_length: usize,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Predictions (extract output, or any dataset-format file).
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Sentence-length bucket edges.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BUCKET_EDGES)]
    pub edges: Vec<usize>,
    /// A second prediction file to report alongside, e.g. without calibration.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Report destination; defaults to stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub plot_csv: Option<PathBuf>,
    /// Match on the last word of head and tail instead of full spans.
    #[arg(long)]
    pub partial: bool,
}

/// What was run, with which settings, producing which files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub vocab_hash: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub git_describe: String,
    pub started_at: u64,
    pub finished_at: Option<u64>,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            vocab_hash: None,
            checkpoint: None,
            artifacts: Vec::new(),
            git_describe: git_describe(),
            started_at: unix_now(),
            finished_at: None,
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        write_atomic(
            &dir.join("manifest.json"),
            serde_json::to_string_pretty(self)?.as_bytes(),
        )
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&cli.data_dir, &args),
        Command::Train(args) => cmd_train(&cli.data_dir, &args).map(|_| ()),
        Command::Extract(args) => cmd_extract(&args),
        Command::Eval(args) => cmd_eval(&args).map(|_| ()),
    }
}

pub fn cmd_gen_data(data_dir: &Path, args: &GenDataArgs) -> anyhow::Result<()> {
    let out = args.out.clone().unwrap_or_else(|| data_dir.to_path_buf());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let spec = SyntheticSpec {
        entity_count: args.entities,
        relation_count: args.relations,
        train_sentences: args.train,
        dev_sentences: args.dev,
        test_sentences: args.test,
        overlap_fraction: args.overlap,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let mut manifest = RunManifest::new("gen-data", serde_json::to_value(&spec)?, args.seed);
    manifest.write(&out)?;
    let corpus = generate_synthetic(&spec)?;
    for (name, split) in [
        ("train", &corpus.train),
        ("dev", &corpus.dev),
        ("test", &corpus.test),
    ] {
        let path = out.join(format!("{name}.jsonl"));
        save_dataset(&path, split)?;
        manifest.artifacts.push(path);
    }
    let rel = out.join("relations.txt");
    corpus.inventory.save(&rel)?;
    manifest.artifacts.push(rel);
    manifest.finished_at = Some(unix_now());
    manifest.write(&out)?;
    log::info!(
        "wrote {}/{}/{} sentences to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

/// The `[train]` and `[model]` tables of a run configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub vocab_size: Option<usize>,
}

const DEFAULT_VOCAB_SIZE: usize = 8000;

fn resolve_run_config(args: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut rc = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let t = &mut rc.train;
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(t.epochs, args.epochs);
    set!(t.batch_size, args.batch_size);
    set!(t.learning_rate, args.lr);
    set!(t.lr_decay_factor, args.lr_decay);
    set!(t.decay_every, args.decay_every);
    set!(t.alpha, args.alpha);
    set!(t.gamma, args.gamma);
    set!(t.temperature, args.temperature);
    set!(t.seed, args.seed);
    set!(t.eval_every, args.eval_every);
    set!(t.val_beam_size, args.val_beam);
    let m = &mut rc.model;
    set!(m.num_layers, args.layers);
    set!(m.hidden_size, args.hidden);
    set!(m.num_heads, args.heads);
    set!(m.ffn_size, args.ffn);
    set!(m.max_sequence_length, args.max_len);
    if args.vocab_size.is_some() {
        rc.vocab_size = args.vocab_size;
    }
    m.alpha = rc.train.alpha;
    m.temperature = rc.train.temperature;
    rc.train.validate()?;
    Ok(rc)
}

pub struct TrainRun {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub fn cmd_train(data_dir: &Path, args: &TrainArgs) -> anyhow::Result<TrainRun> {
    let data = args.data.clone().unwrap_or_else(|| data_dir.to_path_buf());
    let out = args.out.clone().unwrap_or_else(|| data.join("run"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let rc = resolve_run_config(args)?;

    let train_set = load_dataset(&data.join("train.jsonl")).context("loading train.jsonl")?;
    let dev_path = data.join("dev.jsonl");
    let dev_set = if dev_path.exists() {
        load_dataset(&dev_path).context("loading dev.jsonl")?
    } else {
        Vec::new()
    };
    let rel_path = data.join("relations.txt");
    let inventory = if rel_path.exists() {
        RelationInventory::load(&rel_path)?
    } else {
        inventory_from(&train_set)?
    };
    for (name, split) in [("train", &train_set), ("dev", &dev_set)] {
        for (i, inst) in split.iter().enumerate() {
            for problem in check_instance(inst, &inventory) {
                log::warn!("{name}.jsonl line {}: {problem}", i + 1);
            }
        }
    }

    let texts: Vec<&str> = train_set.iter().map(|i| i.text.as_str()).collect();
    let vocab = Vocabulary::build(&texts, rc.vocab_size.unwrap_or(DEFAULT_VOCAB_SIZE))?;
    let mut model_config = rc.model.clone();
    model_config.vocab_size = vocab.len();

    let mut manifest = RunManifest::new(
        "train",
        serde_json::json!({
            "data": data,
            "train": rc.train,
            "model": model_config,
        }),
        rc.train.seed,
    );
    manifest.vocab_hash = Some(vocab.hash());
    let checkpoint = out.join("checkpoint.bin");
    let metrics_path = out.join("metrics.jsonl");
    manifest.checkpoint = Some(checkpoint.clone());
    manifest.write(&out)?;

    let vocab_path = out.join("vocab.txt");
    vocab.save(&vocab_path)?;
    let run_rel = out.join("relations.txt");
    inventory.save(&run_rel)?;
    let config_path = out.join("train_config.toml");
    let snapshot = RunConfig {
        train: rc.train.clone(),
        model: model_config.clone(),
        vocab_size: rc.vocab_size,
    };
    fs::write(&config_path, toml::to_string(&snapshot)?)?;

    let mut model = CgtModel::new(model_config, rc.train.seed)?;
    log::info!(
        "training {} parameters on {} sentences ({} dev), vocabulary {}",
        model.params().numel(),
        train_set.len(),
        dev_set.len(),
        vocab.len()
    );
    let mut log_file = BufWriter::new(fs::File::create(&metrics_path)?);
    let mut write_err = None;
    let outcome = train(
        &mut model,
        &vocab,
        &inventory,
        &train_set,
        &dev_set,
        &rc.train,
        |m| {
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            log::info!(
                "epoch {:>3} lr {:.2e} gen {} con {} val_f1 {}",
                m.epoch,
                m.lr,
                fmt(m.gen_loss),
                fmt(m.con_loss),
                fmt(m.val_f1)
            );
            let line = serde_json::to_string(m).expect("metrics serialize");
            if let Err(e) = writeln!(log_file, "{line}") {
                write_err.get_or_insert(e);
            }
        },
    );
    log_file.flush()?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics log");
    }
    let outcome = outcome?;
    if let (Some(epoch), Some(f1)) = (outcome.best_epoch, outcome.best_val_f1) {
        log::info!("keeping epoch {epoch} (validation F1 {f1:.4})");
    }
    save_checkpoint(&checkpoint, &model, &vocab.hash())?;

    manifest.artifacts = vec![
        vocab_path,
        run_rel,
        config_path,
        metrics_path.clone(),
        checkpoint.clone(),
    ];
    manifest.finished_at = Some(unix_now());
    manifest.write(&out)?;
    Ok(TrainRun {
        out_dir: out,
        checkpoint,
        metrics: metrics_path,
    })
}

pub fn cmd_extract(args: &ExtractArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let vocab = Vocabulary::load(&args.vocab)?;
    if vocab.hash() != ckpt.vocab_hash {
        bail!(
            "vocabulary {} does not match the checkpoint",
            args.vocab.display()
        );
    }
    let inventory = RelationInventory::load(&args.relations)?;
    let config = DecodeConfig {
        beam_size: args.beam,
        max_target_length: args.max_target_length,
        match_threshold: args.theta,
        calibration_enabled: !args.no_calibration,
        ..DecodeConfig::default()
    };
    config.validate()?;

    let input = BufReader::new(
        fs::File::open(&args.input).with_context(|| format!("opening {}", args.input.display()))?,
    );
    let tmp = args.output.with_extension("tmp");
    let mut out = BufWriter::new(fs::File::create(&tmp)?);
    let mut n = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let record = if line.trim().is_empty() {
            Extraction {
                text: line,
                ..Extraction::default()
            }
        } else {
            extract(&ckpt.model, &vocab, &inventory, &line, &config)
                .with_context(|| format!("input line {}", i + 1))?
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    drop(out);
    fs::rename(&tmp, &args.output)?;
    log::info!("extracted {n} sentences into {}", args.output.display());
    Ok(())
}

/// Reads prediction records; dataset files are accepted as well.
pub fn load_predictions(path: &Path) -> anyhow::Result<Vec<Extraction>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

fn aligned_predictions(
    pred: &[Extraction],
    gold: &[DatasetInstance],
    path: &Path,
) -> anyhow::Result<Vec<Vec<Triple>>> {
    if pred.is_empty() {
        return Ok(vec![Vec::new(); gold.len()]);
    }
    if pred.len() != gold.len() {
        bail!(
            "{} has {} records for {} gold sentences",
            path.display(),
            pred.len(),
            gold.len()
        );
    }
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.text.trim() != g.text.trim() {
            log::warn!("line {}: prediction text differs from gold text", i + 1);
        }
    }
    Ok(pred.iter().map(|p| p.triples.clone()).collect())
}

fn system_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "system".into(), |s| s.to_string_lossy().into_owned())
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<Vec<EvalReport>> {
    let gold = load_dataset(&args.gold)?;
    let mode = if args.partial {
        MatchMode::Partial
    } else {
        MatchMode::Exact
    };
    let mut reports = Vec::new();
    for path in std::iter::once(&args.pred).chain(&args.compare) {
        let preds = aligned_predictions(&load_predictions(path)?, &gold, path)?;
        reports.push(EvalReport::new(
            &system_name(path),
            &gold,
            &preds,
            &args.edges,
            mode,
        )?);
    }
    let mut text: String = reports.iter().map(|r| r.to_text() + "\n").collect();
    if let [a, b] = &reports[..] {
        text.push_str(&format!(
            "difference ({} - {}): P {:+.4} R {:+.4} F1 {:+.4}\n",
            a.system,
            b.system,
            a.global.precision - b.global.precision,
            a.global.recall - b.global.recall,
            a.global.f1 - b.global.f1
        ));
    }
    match &args.output {
        Some(p) => fs::write(p, &text)?,
        None => print!("{text}"),
    }
    if let Some(p) = &args.plot_csv {
        fs::write(p, plot_csv(&reports)?)?;
    }
    Ok(reports)
}
