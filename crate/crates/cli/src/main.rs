//! Batch CLI wiring the full pipeline: vocabulary mining, fragmentation,
//! two-stage pretraining, fine-tuning, evaluation, and interpretability
//! dumps.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 runtime or numeric
//! failure.

mod manifest;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use mol_mamba::fragmenter::{build_vocabulary, fragment_molecule, FragError, FragmentVocab};
use mol_mamba::model::{node_weights, predict, prepare, ModelState};
use mol_mamba::molgraph::{normalize_descriptors, read_corpus, write_corpus, MolError, Molecule};
use mol_mamba::synthdata::synth_corpus;
use mol_mamba::tensor::TensorError;
use mol_mamba::training::{
    finetune_folds, mae, pretrain, rmse, roc_auc, write_curves_csv, MetricsReport, TaskType,
    TrainConfig, TrainError,
};

use manifest::ManifestBuilder;

#[derive(Parser)]
#[command(name = "mol-mamba", version, about = "Molecular representation pipeline", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine a fragment vocabulary from a molecule corpus.
    BuildVocab {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lenient: bool,
    },
    /// Fragment every molecule under an existing vocabulary.
    Fragment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lenient: bool,
    },
    /// Two-stage self-supervised pretraining.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lenient: bool,
    },
    /// Supervised fine-tuning on a labeled task.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: String,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lenient: bool,
    },
    /// Compute metrics of a fine-tuned checkpoint on a labeled file.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lenient: bool,
    },
    /// Dump per-atom node weights (row sums of the sequence output).
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lenient: bool,
    },
    /// Generate a deterministic synthetic corpus.
    SynthData {
        #[arg(long)]
        molecules: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    /// Bad input data, bad flags, bad config: exit 1.
    Validation(String),
    /// Numeric failure or I/O breakage mid-run: exit 2.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<MolError> for CliError {
    fn from(e: MolError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<FragError> for CliError {
    fn from(e: FragError) -> Self {
        match e {
            FragError::Io(io) => CliError::Runtime(io.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match &e {
            // checkpoint/model mismatches are user-input problems
            TensorError::Invalid { op: "checkpoint", .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_)
            | TrainError::UnknownTask(_)
            | TrainError::EmptySplit(_)
            | TrainError::Metric(_) => CliError::Validation(e.to_string()),
            TrainError::Molecule(m) => m.into(),
            TrainError::Fragment(f) => f.into(),
            TrainError::Tensor(t) => t.into(),
            TrainError::Diverged { .. } => CliError::Runtime(e.to_string()),
            TrainError::Io(io) => CliError::Runtime(io.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() {
    if let Ok(threads) = std::env::var("MOLMAMBA_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) => mol_mamba::configure_threads(Some(n)),
            Err(_) => {
                eprintln!("error: MOLMAMBA_THREADS must be a positive integer");
                std::process::exit(1);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful outputs; anything else is usage
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    std::process::exit(0);
                }
                _ => {
                    eprint!("{e}");
                    std::process::exit(1);
                }
            }
        }
    };
    match dispatch(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::BuildVocab { input, size, out, lenient } => cmd_build_vocab(&input, size, &out, lenient),
        Command::Fragment { input, vocab, out, lenient } => cmd_fragment(&input, &vocab, &out, lenient),
        Command::Pretrain { config, corpus, vocab, out, seed, lenient } => {
            cmd_pretrain(config.as_deref(), &corpus, &vocab, &out, seed, lenient)
        }
        Command::Finetune { config, corpus, vocab, checkpoint, task, folds, out, seed, lenient } => {
            cmd_finetune(
                config.as_deref(),
                &corpus,
                &vocab,
                checkpoint.as_deref(),
                &task,
                folds.unwrap_or(1),
                &out,
                seed,
                lenient,
            )
        }
        Command::Evaluate { config, corpus, vocab, checkpoint, task, out, lenient } => {
            cmd_evaluate(config.as_deref(), &corpus, &vocab, &checkpoint, &task, &out, lenient)
        }
        Command::Inspect { config, corpus, vocab, checkpoint, out, lenient } => {
            cmd_inspect(config.as_deref(), &corpus, &vocab, &checkpoint, &out, lenient)
        }
        Command::SynthData { molecules, seed, out } => cmd_synth_data(molecules, seed, &out),
    }
}

fn load_corpus(path: &Path, lenient: bool) -> Result<Vec<Molecule>, CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!("input file {} not found", path.display())));
    }
    let (molecules, warnings) = read_corpus(path, !lenient)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    if molecules.is_empty() {
        return Err(CliError::Validation(format!("{} holds no molecules", path.display())));
    }
    Ok(molecules)
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Validation(format!("config file {} not found", p.display())));
            }
            TrainConfig::from_toml_str(&std::fs::read_to_string(p)?)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn cmd_build_vocab(input: &Path, size: usize, out: &Path, lenient: bool) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("build-vocab");
    let corpus = load_corpus(input, lenient)?;
    m.input("corpus", input)?;
    let vocab = build_vocabulary(&corpus, size)?;
    vocab.write(out)?;
    m.output("vocab", out)?;
    m.write(&sibling_manifest(out))?;
    Ok(())
}

fn cmd_fragment(input: &Path, vocab_path: &Path, out: &Path, lenient: bool) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("fragment");
    let corpus = load_corpus(input, lenient)?;
    m.input("corpus", input)?;
    if !vocab_path.exists() {
        return Err(CliError::Validation(format!("vocabulary {} not found", vocab_path.display())));
    }
    let vocab = FragmentVocab::read(vocab_path)?;
    m.input("vocab", vocab_path)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    for mol in &corpus {
        let frag = fragment_molecule(mol, &vocab)?;
        let line = serde_json::json!({
            "id": mol.id,
            "h": frag.h,
            "assignment": frag.assignment,
            "frag_vocab_ids": frag.frag_vocab_ids,
        });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    drop(w);
    m.output("fragments", out)?;
    m.write(&sibling_manifest(out))?;
    Ok(())
}

fn cmd_pretrain(
    config: Option<&Path>,
    corpus_path: &Path,
    vocab_path: &Path,
    out: &Path,
    seed: Option<u64>,
    lenient: bool,
) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("pretrain");
    let cfg = load_config(config, seed)?;
    m.config(&cfg);
    m.seed(cfg.seed);
    let mut corpus = load_corpus(corpus_path, lenient)?;
    m.input("corpus", corpus_path)?;
    if !vocab_path.exists() {
        return Err(CliError::Validation(format!("vocabulary {} not found", vocab_path.display())));
    }
    let vocab = FragmentVocab::read(vocab_path)?;
    m.input("vocab", vocab_path)?;
    if let Some(p) = config {
        m.input("config", p)?;
    }
    std::fs::create_dir_all(out)?;
    let outcome = pretrain(&mut corpus, &vocab, &cfg)?;
    let ckpt = out.join("model.ckpt");
    outcome.state.save(&ckpt)?;
    let curves = out.join("curves.csv");
    write_curves_csv(&curves, &outcome.curves)?;
    m.output("checkpoint", &ckpt)?;
    m.output("curves", &curves)?;
    m.write(&out.join("manifest.json"))?;
    println!(
        "pretrained {} epochs, best validation total {:.6}",
        outcome.curves.len(),
        outcome.best_val_total
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    config: Option<&Path>,
    corpus_path: &Path,
    vocab_path: &Path,
    checkpoint: Option<&Path>,
    task: &str,
    folds: usize,
    out: &Path,
    seed: Option<u64>,
    lenient: bool,
) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("finetune");
    let cfg = load_config(config, seed)?;
    m.config(&cfg);
    m.seed(cfg.seed);
    let corpus = load_corpus(corpus_path, lenient)?;
    m.input("corpus", corpus_path)?;
    if !vocab_path.exists() {
        return Err(CliError::Validation(format!("vocabulary {} not found", vocab_path.display())));
    }
    let vocab = FragmentVocab::read(vocab_path)?;
    m.input("vocab", vocab_path)?;
    if let Some(p) = config {
        m.input("config", p)?;
    }
    if let Some(ckpt) = checkpoint {
        if !ckpt.exists() {
            return Err(CliError::Validation(format!("checkpoint {} not found", ckpt.display())));
        }
        m.input("checkpoint", ckpt)?;
    }
    std::fs::create_dir_all(out)?;
    let dims = cfg.dims();
    let vocab_size = vocab.size();
    let init = |fold_seed: u64| -> Result<ModelState, TrainError> {
        match checkpoint {
            Some(path) => Ok(ModelState::load(path, &dims, vocab_size)?),
            None => Ok(ModelState::new(&dims, vocab_size, fold_seed)?),
        }
    };
    let (report, outcomes) = finetune_folds(&corpus, &vocab, &cfg, task, folds, init)?;
    let metrics_path = out.join("metrics.json");
    std::fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&report).expect("metrics serialization") + "\n",
    )?;
    let ckpt_path = out.join("model.ckpt");
    outcomes[0].state.save(&ckpt_path)?;
    m.output("metrics", &metrics_path)?;
    m.output("checkpoint", &ckpt_path)?;
    m.write(&out.join("manifest.json"))?;
    println!("{}: {} = {:.4} (± {:.4}) over {} fold(s)", task, report.metric, report.mean, report.std, folds);
    Ok(())
}

fn cmd_evaluate(
    config: Option<&Path>,
    corpus_path: &Path,
    vocab_path: &Path,
    checkpoint: &Path,
    task: &str,
    out: &Path,
    lenient: bool,
) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("evaluate");
    let cfg = load_config(config, None)?;
    m.config(&cfg);
    let mut corpus = load_corpus(corpus_path, lenient)?;
    m.input("corpus", corpus_path)?;
    if !vocab_path.exists() {
        return Err(CliError::Validation(format!("vocabulary {} not found", vocab_path.display())));
    }
    let vocab = FragmentVocab::read(vocab_path)?;
    m.input("vocab", vocab_path)?;
    if !checkpoint.exists() {
        return Err(CliError::Validation(format!("checkpoint {} not found", checkpoint.display())));
    }
    m.input("checkpoint", checkpoint)?;
    if let Some(p) = config {
        m.input("config", p)?;
    }
    let state = ModelState::load(checkpoint, &cfg.dims(), vocab.size())?;
    normalize_descriptors(&mut corpus)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for mol in &corpus {
        let Some(label) = mol.labels.as_ref().and_then(|l| l.get(task)).copied() else {
            continue;
        };
        let prep = prepare(mol.clone(), &vocab)?;
        let logits =
            mol_mamba::tensor::no_grad(|| predict(&state, &prep, cfg.ablation(), cfg.seed))?;
        scores.push(logits.data()[0]);
        labels.push(label);
    }
    if scores.is_empty() {
        return Err(CliError::Validation(format!("no molecule carries task \"{task}\"")));
    }
    let (metric_name, value, extra) = match cfg.task_type {
        TaskType::Classification => {
            let bools: Vec<bool> = labels.iter().map(|&v| v >= 0.5).collect();
            ("roc_auc", roc_auc(&scores, &bools)?, None)
        }
        TaskType::Regression => {
            ("rmse", rmse(&scores, &labels), Some(mae(&scores, &labels)))
        }
    };
    let mut curves = BTreeMap::new();
    if let Some(mae_v) = extra {
        curves.insert("mae".to_string(), vec![mae_v]);
    }
    let report = MetricsReport::from_folds(task, metric_name, vec![value], curves);
    std::fs::create_dir_all(out)?;
    let metrics_path = out.join("metrics.json");
    std::fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&report).expect("metrics serialization") + "\n",
    )?;
    m.output("metrics", &metrics_path)?;
    m.write(&out.join("manifest.json"))?;
    println!("{task}: {metric_name} = {value:.4} over {} molecules", scores.len());
    Ok(())
}

fn cmd_inspect(
    config: Option<&Path>,
    corpus_path: &Path,
    vocab_path: &Path,
    checkpoint: &Path,
    out: &Path,
    lenient: bool,
) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("inspect");
    let cfg = load_config(config, None)?;
    m.config(&cfg);
    let mut corpus = load_corpus(corpus_path, lenient)?;
    m.input("corpus", corpus_path)?;
    if !vocab_path.exists() {
        return Err(CliError::Validation(format!("vocabulary {} not found", vocab_path.display())));
    }
    let vocab = FragmentVocab::read(vocab_path)?;
    m.input("vocab", vocab_path)?;
    if !checkpoint.exists() {
        return Err(CliError::Validation(format!("checkpoint {} not found", checkpoint.display())));
    }
    m.input("checkpoint", checkpoint)?;
    if let Some(p) = config {
        m.input("config", p)?;
    }
    let state = ModelState::load(checkpoint, &cfg.dims(), vocab.size())?;
    normalize_descriptors(&mut corpus)?;
    std::fs::create_dir_all(out)?;
    let dump_path = out.join("node_weights.jsonl");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&dump_path)?);
    for mol in &corpus {
        let prep = prepare(mol.clone(), &vocab)?;
        let weights = node_weights(&state, &prep)?;
        writeln!(w, "{}", serde_json::json!({ "id": mol.id, "node_weights": weights }))?;
    }
    w.flush()?;
    drop(w);
    m.output("node_weights", &dump_path)?;
    m.write(&out.join("manifest.json"))?;
    Ok(())
}

fn cmd_synth_data(molecules: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    if molecules == 0 {
        return Err(CliError::Validation("--molecules must be at least 1".into()));
    }
    let mut m = ManifestBuilder::new("synth-data");
    m.seed(seed);
    let corpus = synth_corpus(molecules, seed);
    write_corpus(out, &corpus)?;
    m.output("corpus", out)?;
    m.write(&sibling_manifest(out))?;
    Ok(())
}
