//! Flat `key=value` configuration merged under command-line flags.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use mmaae_core::model::{ModelConfig, Pooling};
use mmaae_core::training::TrainConfig;

use crate::UsageError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

/// Every tunable field. Unset flags fall back to the config file, then to
/// the preset.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Flat key=value file; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base profile [default: desk]
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Word-embedding width d_w [default: 50; paper: 300]
    #[arg(long, global = true)]
    pub d_w: Option<usize>,
    /// Hidden width d_m [default: 128; paper: 2048]
    #[arg(long, global = true)]
    pub d_m: Option<usize>,
    /// Feed-forward inner width d_f [default: 256; paper: 4096]
    #[arg(long, global = true)]
    pub d_f: Option<usize>,
    /// Attention heads l [default: 4; paper: 8]
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    /// Longest sentence in ids, EOS included [default: 64]
    #[arg(long, global = true)]
    pub max_len: Option<usize>,
    /// Vocabulary cap, special tokens included [default: 20000]
    #[arg(long, global = true)]
    pub vocab_size: Option<usize>,
    /// Blocks per side [default: 1]
    #[arg(long, global = true)]
    pub n_blocks: Option<usize>,
    /// Sentence pooling: mean-max, mean or max [default: mean-max]
    #[arg(long, global = true)]
    pub pooling: Option<String>,
    /// Dropout rate [default: 0.5; paper: 0.5]
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    /// Random seed for initialization, shuffling and dropout [default: 1]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Adam learning rate [default: 0.0002; paper: 2e-4]
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Global gradient-norm clip threshold [default: 5; paper: 5]
    #[arg(long, global = true)]
    pub clip_norm: Option<f64>,
    /// Sentences per mini-batch [default: 64; paper: 64]
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Epochs without dev improvement before stopping [default: 3]
    #[arg(long, global = true)]
    pub patience: Option<usize>,
    /// Epoch cap [default: 20]
    #[arg(long, global = true)]
    pub max_epochs: Option<usize>,
    /// Adam beta1 [default: 0.9]
    #[arg(long, global = true)]
    pub beta1: Option<f64>,
    /// Adam beta2 [default: 0.999]
    #[arg(long, global = true)]
    pub beta2: Option<f64>,
    /// Adam epsilon [default: 1e-8]
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    /// Dev sentences greedily decoded per epoch [default: 32]
    #[arg(long, global = true)]
    pub exact_match_limit: Option<usize>,
    /// Training corpus, one sentence per line
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Development corpus for early stopping
    #[arg(long, global = true)]
    pub dev: Option<PathBuf>,
    /// Word-vector text file (`word v1 .. vd` per line)
    #[arg(long, global = true)]
    pub vectors: Option<PathBuf>,
    /// Model checkpoint (written by train, read by the other commands)
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output file of the command
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab_size: usize,
    pub corpus: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

const DEFAULT_VOCAB: usize = 20_000;

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| UsageError(format!("bad value `{value}` for {key}: {e}")))
}

impl Settings {
    pub fn preset(preset: Preset) -> Self {
        let model = match preset {
            Preset::Desk => ModelConfig::desk(DEFAULT_VOCAB),
            Preset::Paper => ModelConfig::paper(DEFAULT_VOCAB),
        };
        Self {
            train: TrainConfig {
                dropout: model.dropout,
                seed: model.seed,
                ..TrainConfig::default()
            },
            model,
            vocab_size: DEFAULT_VOCAB,
            corpus: None,
            dev: None,
            vectors: None,
            checkpoint: None,
            output: None,
        }
    }

    /// Applies one `key=value` setting; dashes and underscores are equivalent.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "d_w" => self.model.d_w = parse(k, value)?,
            "d_m" => self.model.d_m = parse(k, value)?,
            "d_f" => self.model.d_f = parse(k, value)?,
            "heads" | "l" => self.model.heads = parse(k, value)?,
            "max_len" | "t_max" => self.model.max_len = parse(k, value)?,
            "vocab_size" => self.vocab_size = parse(k, value)?,
            "n_blocks" => self.model.n_blocks = parse(k, value)?,
            "pooling" => self.model.pooling = parse::<Pooling>(k, value)?,
            "dropout" => {
                let d = parse(k, value)?;
                self.model.dropout = d;
                self.train.dropout = d;
            }
            "seed" => {
                let s = parse(k, value)?;
                self.model.seed = s;
                self.train.seed = s;
            }
            "lr" => self.train.lr = parse(k, value)?,
            "clip_norm" => self.train.clip_norm = parse(k, value)?,
            "batch_size" => self.train.batch_size = parse(k, value)?,
            "patience" => self.train.patience = parse(k, value)?,
            "max_epochs" => self.train.max_epochs = parse(k, value)?,
            "beta1" => self.train.beta1 = parse(k, value)?,
            "beta2" => self.train.beta2 = parse(k, value)?,
            "eps" => self.train.eps = parse(k, value)?,
            "exact_match_limit" => self.train.exact_match_limit = parse(k, value)?,
            "corpus" => self.corpus = Some(value.trim().into()),
            "dev" => self.dev = Some(value.trim().into()),
            "vectors" => self.vectors = Some(value.trim().into()),
            "checkpoint" => self.checkpoint = Some(value.trim().into()),
            "output" => self.output = Some(value.trim().into()),
            _ => return Err(UsageError(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), UsageError> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                UsageError(format!("{}:{}: expected key=value", path.display(), n + 1))
            })?;
            self.set(k, v)
                .map_err(|e| UsageError(format!("{}:{}: {}", path.display(), n + 1, e.0)))?;
        }
        Ok(())
    }

    /// Preset, then file, then flags.
    pub fn resolve(args: &ConfigArgs) -> Result<Self, UsageError> {
        let mut s = Self::preset(args.preset.unwrap_or(Preset::Desk));
        if let Some(path) = &args.config {
            s.apply_file(path)?;
        }
        for (k, v) in args.pairs() {
            s.set(k, &v)?;
        }
        Ok(s)
    }
}

impl ConfigArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        fn push<T: ToString>(out: &mut Vec<(&'static str, String)>, k: &'static str, v: &Option<T>) {
            if let Some(v) = v {
                out.push((k, v.to_string()));
            }
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut out = Vec::new();
        push(&mut out, "d_w", &self.d_w);
        push(&mut out, "d_m", &self.d_m);
        push(&mut out, "d_f", &self.d_f);
        push(&mut out, "heads", &self.heads);
        push(&mut out, "max_len", &self.max_len);
        push(&mut out, "vocab_size", &self.vocab_size);
        push(&mut out, "n_blocks", &self.n_blocks);
        push(&mut out, "pooling", &self.pooling);
        push(&mut out, "dropout", &self.dropout);
        push(&mut out, "seed", &self.seed);
        push(&mut out, "lr", &self.lr);
        push(&mut out, "clip_norm", &self.clip_norm);
        push(&mut out, "batch_size", &self.batch_size);
        push(&mut out, "patience", &self.patience);
        push(&mut out, "max_epochs", &self.max_epochs);
        push(&mut out, "beta1", &self.beta1);
        push(&mut out, "beta2", &self.beta2);
        push(&mut out, "eps", &self.eps);
        push(&mut out, "exact_match_limit", &self.exact_match_limit);
        push(&mut out, "corpus", &path(&self.corpus));
        push(&mut out, "dev", &path(&self.dev));
        push(&mut out, "vectors", &path(&self.vectors));
        push(&mut out, "checkpoint", &path(&self.checkpoint));
        push(&mut out, "output", &path(&self.output));
        out
    }
}
