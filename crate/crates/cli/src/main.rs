mod config;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mmaae_core::embedding::expand_vocab;
use mmaae_core::eval::{
    probe_eval, read_probe, read_similarity, similarity_eval, MetricRecord, ProbeConfig,
};
use mmaae_core::io::write_atomic;
use mmaae_core::model::{Model, ModelConfig, Pooling};
use mmaae_core::text::{encode_corpus, read_corpus, Vocab, EOS};
use mmaae_core::training::{load_checkpoint, train, Clock, TrainOptions, Trainer};

use config::{ConfigArgs, Settings};

/// Bad flags, config values or missing paths; exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "mmaae", version, about = "Mean-max attention autoencoder for sentence embeddings")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a corpus, keeping the checkpoint with the best dev accuracy
    Train {
        /// JSON-lines training log [default: <checkpoint>.log.jsonl]
        #[arg(long)]
        log: Option<PathBuf>,
        /// Vocabulary file written next to the checkpoint [default: <checkpoint>.vocab]
        #[arg(long)]
        vocab_out: Option<PathBuf>,
        /// Continue from a checkpoint that carries optimizer state
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write zero for log timestamps so identical runs give identical logs
        #[arg(long)]
        no_wall_clock: bool,
    },
    /// Write one sentence embedding per input line
    Encode {
        /// Sentences, one per line
        #[arg(long)]
        input: PathBuf,
    },
    /// Greedily decode each input line from its own embedding
    Reconstruct {
        /// Sentences, one per line
        #[arg(long)]
        input: PathBuf,
    },
    /// Score embeddings on a similarity or probe dataset
    Eval {
        #[arg(long, value_enum)]
        task: Task,
        /// Similarity TSV (a, b, score) or probe test TSV (label, sentence)
        #[arg(long)]
        data: PathBuf,
        /// Probe training TSV
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Probe L2 penalty [default: 0.001]
        #[arg(long, default_value_t = 1e-3)]
        l2: f64,
        /// Probe gradient-descent epochs [default: 300]
        #[arg(long, default_value_t = 300)]
        probe_epochs: usize,
    },
    /// Export the mean-max attention weights of one sentence
    InspectAttention {
        #[arg(long)]
        sentence: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    Similarity,
    Probe,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use mmaae_core::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<E>() {
        Some(E::InvalidHyperparameter(_) | E::InvalidDimension(_) | E::Dimension { .. }) => 1,
        Some(E::Numeric(_) | E::NonFiniteLoss { .. } | E::Determinism { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::resolve(&cli.config)?;
    match cli.command {
        Command::Train {
            log,
            vocab_out,
            resume,
            no_wall_clock,
        } => cmd_train(&settings, log, vocab_out, resume, no_wall_clock),
        Command::Encode { input } => cmd_encode(&settings, &input),
        Command::Reconstruct { input } => cmd_reconstruct(&settings, &input),
        Command::Eval {
            task,
            data,
            train_data,
            l2,
            probe_epochs,
        } => cmd_eval(&settings, task, &data, train_data.as_deref(), l2, probe_epochs),
        Command::InspectAttention { sentence } => cmd_inspect(&settings, &sentence),
    }
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, UsageError> {
    path.as_deref()
        .ok_or_else(|| UsageError(format!("--{flag} is required")))
}

fn readable(path: &Path, flag: &str) -> Result<(), UsageError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("--{flag} {} is not a readable file", path.display())))
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(
    s: &Settings,
    log: Option<PathBuf>,
    vocab_out: Option<PathBuf>,
    resume: Option<PathBuf>,
    no_wall_clock: bool,
) -> Result<()> {
    let corpus_path = require(&s.corpus, "corpus")?;
    let dev_path = require(&s.dev, "dev")?;
    let checkpoint = require(&s.checkpoint, "checkpoint")?.to_path_buf();
    readable(corpus_path, "corpus")?;
    readable(dev_path, "dev")?;
    if let Some(v) = &s.vectors {
        readable(v, "vectors")?;
    }
    if let Some(r) = &resume {
        readable(r, "resume")?;
    }
    let log_path = log.unwrap_or_else(|| with_suffix(&checkpoint, ".log.jsonl"));
    let vocab_path = vocab_out.unwrap_or_else(|| with_suffix(&checkpoint, ".vocab"));

    let corpus = read_corpus(corpus_path)?;
    let dev = read_corpus(dev_path)?;
    let (trainer, vocab) = match &resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let (adam, snapshot) = ck
                .adam
                .zip(ck.trainer)
                .ok_or_else(|| UsageError(format!("{} has no optimizer state", path.display())))?;
            let trainer = Trainer::restore(ck.model, s.train.clone(), adam, &snapshot)?;
            (trainer, ck.vocab)
        }
        None => {
            let vocab = Vocab::build(&corpus, s.vocab_size)?;
            let config = ModelConfig {
                vocab_size: vocab.len(),
                ..s.model.clone()
            };
            let (model, report) = Model::initialize(config, &vocab, s.vectors.as_deref())?;
            log::info!(
                "vocabulary {} ({} pretrained vectors, {} random)",
                vocab.len(),
                report.pretrained,
                report.missing
            );
            log::info!("{} trainable parameters", model.params.num_parameters());
            (Trainer::new(model, s.train.clone())?, vocab)
        }
    };
    let max_len = trainer.model.config.max_len;
    let (train_ids, _) = encode_corpus(&vocab, &corpus, max_len);
    let (dev_ids, _) = encode_corpus(&vocab, &dev, max_len);
    if train_ids.is_empty() || dev_ids.is_empty() {
        return Err(mmaae_core::Error::Ingestion(format!(
            "no sentences of at most {max_len} tokens in the corpus or dev set"
        ))
        .into());
    }
    vocab.save(&vocab_path)?;

    let mut log_buf: Vec<u8> = Vec::new();
    let outcome = train(
        trainer,
        &vocab,
        &train_ids,
        &dev_ids,
        TrainOptions {
            log: Some(&mut log_buf),
            clock: if no_wall_clock { Clock::Off } else { Clock::Wall },
            checkpoint: Some(checkpoint.clone()),
            diagnostic: Some(with_suffix(&checkpoint, ".diverged")),
        },
    );
    write_atomic(&log_path, |w| w.write_all(&log_buf))?;
    let outcome = outcome?;
    log::info!(
        "best dev accuracy {:.4} at epoch {}; checkpoint {}",
        outcome.best_dev_acc,
        outcome.best_epoch,
        checkpoint.display()
    );
    Ok(())
}

fn load_model(s: &Settings) -> Result<(Model<f32>, Vocab)> {
    let path = require(&s.checkpoint, "checkpoint")?;
    readable(path, "checkpoint")?;
    let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok((ck.model, ck.vocab))
}

fn input_lines(path: &Path) -> Result<Vec<String>> {
    readable(path, "input")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Writes to `--output` atomically when given, otherwise to stdout.
fn emit(output: &Option<PathBuf>, text: &str) -> Result<()> {
    match output {
        Some(p) => write_atomic(p, |w| w.write_all(text.as_bytes()))?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct LineError<'a> {
    line: usize,
    error: &'a str,
}

fn report_line_error(line: usize, err: &mmaae_core::Error) {
    let msg = err.to_string();
    eprintln!("{}", serde_json::to_string(&LineError { line, error: &msg }).unwrap_or_default());
}

fn cmd_encode(s: &Settings, input: &Path) -> Result<()> {
    let (mut model, mut vocab) = load_model(s)?;
    if let Some(path) = &s.vectors {
        readable(path, "vectors")?;
        let (table, expanded, report) = expand_vocab(model.embeddings(), &vocab, path)?;
        log::info!("vocabulary expanded by {} words", report.added);
        model = model.with_embeddings(table)?;
        vocab = expanded;
    }
    let lines = input_lines(input)?;
    let mut encodable = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let ids = vocab.encode(line);
        if ids.len() > model.config.max_len {
            report_line_error(
                i + 1,
                &mmaae_core::Error::Truncation {
                    len: ids.len(),
                    limit: model.config.max_len,
                },
            );
            continue;
        }
        let unknown = vocab.count_unknown(line);
        if unknown > 0 {
            log::warn!("line {}: {unknown} tokens mapped to <unk>", i + 1);
        }
        encodable.push((i, ids));
    }
    let mut out = String::new();
    for chunk in encodable.chunks(64) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|(_, ids)| ids.as_slice()).collect();
        let zs = model.encode_ids_batch(&seqs)?;
        for ((i, _), z) in chunk.iter().zip(zs) {
            let values: Vec<String> = z.values.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{}\t{}\n", i + 1, values.join(" ")));
        }
    }
    emit(&s.output, &out)
}

fn cmd_reconstruct(s: &Settings, input: &Path) -> Result<()> {
    let (model, vocab) = load_model(s)?;
    let lines = input_lines(input)?;
    let (mut hits, mut total) = (0, 0);
    let mut out = String::new();
    for (i, line) in lines.iter().enumerate() {
        let ids = vocab.encode(line);
        let z = match model.encode_ids(&ids) {
            Ok(z) => z,
            Err(e) => {
                report_line_error(i + 1, &e);
                continue;
            }
        };
        let decoded = model.greedy_decode(&z, model.config.max_len)?;
        let exact = decoded == ids;
        total += 1;
        hits += exact as usize;
        let text = vocab.decode(&decoded);
        let ended = if decoded.last() == Some(&EOS) { "" } else { " [no eos]" };
        out.push_str(&format!("{}\t{}{}\n", exact as u8, text, ended));
    }
    emit(&s.output, &out)?;
    if total > 0 {
        log::info!("exact match {hits}/{total} ({:.3})", hits as f64 / total as f64);
    }
    Ok(())
}

fn cmd_eval(
    s: &Settings,
    task: Task,
    data: &Path,
    train_data: Option<&Path>,
    l2: f64,
    epochs: usize,
) -> Result<()> {
    readable(data, "data")?;
    let (model, vocab) = load_model(s)?;
    let encode = |text: &str| Ok(model.encode(&vocab, text)?.values);
    let name = data
        .file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    let records = match task {
        Task::Similarity => {
            let ds = read_similarity(data)?;
            let c = similarity_eval(&ds, encode)?;
            vec![
                MetricRecord {
                    task: name.clone(),
                    metric: "pearson".into(),
                    value: c.pearson,
                },
                MetricRecord {
                    task: name,
                    metric: "spearman".into(),
                    value: c.spearman,
                },
            ]
        }
        Task::Probe => {
            let train_path = train_data.ok_or_else(|| UsageError("--train-data is required for probe".into()))?;
            readable(train_path, "train-data")?;
            let train_ds = read_probe(train_path)?;
            let test_ds = read_probe(data)?;
            let config = ProbeConfig {
                l2,
                epochs,
                ..ProbeConfig::default()
            };
            let acc = probe_eval(&train_ds, &test_ds, encode, &config)?;
            vec![MetricRecord {
                task: name,
                metric: "accuracy".into(),
                value: acc,
            }]
        }
    };
    let mut out = String::new();
    for r in &records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    if s.output.is_some() {
        print!("{out}");
    }
    emit(&s.output, &out)
}

fn cmd_inspect(s: &Settings, sentence: &str) -> Result<()> {
    let (model, vocab) = load_model(s)?;
    if model.config.pooling != Pooling::MeanMax {
        return Err(UsageError("attention inspection needs a mean-max checkpoint".into()).into());
    }
    let att = model.attention_trace(&vocab, sentence)?;
    let json = serde_json::to_string_pretty(&att.heatmap(sentence))?;
    match &s.output {
        Some(p) => write_atomic(p, |w| writeln!(w, "{json}"))?,
        None => println!("{json}"),
    }
    let width = att.inputs.iter().map(|t| t.len()).max().unwrap_or(5).max(5);
    let mut table = format!("{:>4}  {:<width$}  {:>6}  {:>6}\n", "step", "input", "mean", "max");
    for (t, (tok, row)) in att.inputs.iter().zip(&att.grid).enumerate() {
        table.push_str(&format!("{:>4}  {:<width$}  {:>6.2}  {:>6.2}\n", t + 1, tok, row[1], row[0]));
    }
    if s.output.is_some() {
        print!("{table}");
    } else {
        eprint!("{table}");
    }
    Ok(())
}
