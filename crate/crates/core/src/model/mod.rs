//! The mean-max attention autoencoder.
//!
//! One encoder block (self-attention without residual, then a residual
//! feed-forward sub-layer), mean-max pooling into a two-slot memory, and one
//! decoder block whose cross-attention sees only that memory.

mod forward;
mod inference;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{glorot, MultiHeadParams};
use crate::embedding::{EmbeddingTable, LoadReport, PositionalTable};
use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tensor};
use crate::text::Vocab;

pub use forward::{BatchOutput, ForwardCache, LossStats, Mode};
pub use inference::{mean_max_pool, Heatmap, MeanMaxAttention, SentenceEmbedding};

/// How encoder states are summarized into the sentence vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    MeanMax,
    Mean,
    Max,
}

impl Pooling {
    /// Number of `d_m` vectors in the decoder memory.
    pub fn slots(self) -> usize {
        match self {
            Pooling::MeanMax => 2,
            Pooling::Mean | Pooling::Max => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pooling::MeanMax => "mean-max",
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-max" | "meanmax" => Ok(Pooling::MeanMax),
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(Error::InvalidHyperparameter(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Word-embedding width.
    pub d_w: usize,
    /// Hidden width.
    pub d_m: usize,
    /// Feed-forward inner width.
    pub d_f: usize,
    pub heads: usize,
    /// Longest sequence (EOS included) the positional table covers.
    pub max_len: usize,
    /// Decoder output vocabulary size.
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Stacked blocks per side; 1 is the reference architecture.
    pub n_blocks: usize,
    pub pooling: Pooling,
}

impl ModelConfig {
    /// Small profile that trains on a laptop CPU.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_w: 50,
            d_m: 128,
            d_f: 256,
            heads: 4,
            max_len: 64,
            vocab_size,
            dropout: 0.5,
            seed: 1,
            n_blocks: 1,
            pooling: Pooling::MeanMax,
        }
    }

    /// Full-size profile (4,096-dimensional sentence vectors).
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            d_w: 300,
            d_m: 2048,
            d_f: 4096,
            heads: 8,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_w", self.d_w),
            ("d_m", self.d_m),
            ("d_f", self.d_f),
            ("heads", self.heads),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
            ("n_blocks", self.n_blocks),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidHyperparameter(format!("{name} must be positive")));
        }
        if !self.d_m.is_multiple_of(self.heads) {
            return Err(Error::InvalidHyperparameter(format!(
                "heads ({}) must divide d_m ({})",
                self.heads, self.d_m
            )));
        }
        if self.d_f < self.d_m {
            return Err(Error::InvalidHyperparameter(format!(
                "d_f ({}) must be at least d_m ({})",
                self.d_f, self.d_m
            )));
        }
        if !self.d_w.is_multiple_of(2) {
            return Err(Error::InvalidHyperparameter(format!("d_w ({}) must be even", self.d_w)));
        }
        if self.d_m < 2 {
            return Err(Error::InvalidHyperparameter("d_m must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidHyperparameter(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Length of the sentence vector.
    pub fn embedding_dim(&self) -> usize {
        self.pooling.slots() * self.d_m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<F = f32> {
    pub gain: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Real> LayerNormParams<F> {
    fn init(d: usize) -> Self {
        Self {
            gain: Tensor::filled(&[d], F::one()),
            bias: Tensor::zeros(&[d]),
        }
    }
}

/// `max(0, x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<F = f32> {
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

impl<F: Real> FeedForward<F> {
    fn init(d_m: usize, d_f: usize, rng: &mut Rng) -> Self {
        Self {
            w1: glorot(d_m, d_f, d_m, d_f, rng),
            b1: Tensor::zeros(&[d_f]),
            w2: glorot(d_f, d_m, d_f, d_m, rng),
            b2: Tensor::zeros(&[d_m]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<F = f32> {
    pub attn: MultiHeadParams<F>,
    pub ln_attn: LayerNormParams<F>,
    pub ffn: FeedForward<F>,
    pub ln_out: LayerNormParams<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock<F = f32> {
    pub self_attn: MultiHeadParams<F>,
    pub ln_self: LayerNormParams<F>,
    /// Cross-attention over the pooled memory.
    pub mm_attn: MultiHeadParams<F>,
    pub ln_mm: LayerNormParams<F>,
    pub ffn: FeedForward<F>,
    pub ln_out: LayerNormParams<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputLayer<F = f32> {
    /// `[d_m x V]`.
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

/// Every trainable tensor. The embedding table lives on [`Model`] and is frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F = f32> {
    pub encoder: Vec<EncoderBlock<F>>,
    pub decoder: Vec<DecoderBlock<F>>,
    pub output: OutputLayer<F>,
}

impl<F: Real> ModelParams<F> {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d_w, d_m, d_f, l) = (config.d_w, config.d_m, config.d_f, config.heads);
        let mut encoder = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let d_in = if b == 0 { d_w } else { d_m };
            encoder.push(EncoderBlock {
                attn: MultiHeadParams::init(d_in, d_in, d_m, l, rng)?,
                ln_attn: LayerNormParams::init(d_m),
                ffn: FeedForward::init(d_m, d_f, rng),
                ln_out: LayerNormParams::init(d_m),
            });
        }
        let mut decoder = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let d_in = if b == 0 { d_w } else { d_m };
            decoder.push(DecoderBlock {
                self_attn: MultiHeadParams::init(d_in, d_in, d_m, l, rng)?,
                ln_self: LayerNormParams::init(d_m),
                mm_attn: MultiHeadParams::init(d_m, d_m, d_m, l, rng)?,
                ln_mm: LayerNormParams::init(d_m),
                ffn: FeedForward::init(d_m, d_f, rng),
                ln_out: LayerNormParams::init(d_m),
            });
        }
        let output = OutputLayer {
            w: glorot(d_m, config.vocab_size, d_m, config.vocab_size, rng),
            b: Tensor::zeros(&[config.vocab_size]),
        };
        Ok(Self {
            encoder,
            decoder,
            output,
        })
    }

    /// Named references in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            let p = format!("encoder.{i}");
            push_mha(&mut out, &format!("{p}.attn"), &b.attn);
            push_ln(&mut out, &format!("{p}.ln_attn"), &b.ln_attn);
            push_ffn(&mut out, &format!("{p}.ffn"), &b.ffn);
            push_ln(&mut out, &format!("{p}.ln_out"), &b.ln_out);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            let p = format!("decoder.{i}");
            push_mha(&mut out, &format!("{p}.self_attn"), &b.self_attn);
            push_ln(&mut out, &format!("{p}.ln_self"), &b.ln_self);
            push_mha(&mut out, &format!("{p}.mm_attn"), &b.mm_attn);
            push_ln(&mut out, &format!("{p}.ln_mm"), &b.ln_mm);
            push_ffn(&mut out, &format!("{p}.ffn"), &b.ffn);
            push_ln(&mut out, &format!("{p}.ln_out"), &b.ln_out);
        }
        out.push(("output.w".into(), &self.output.w));
        out.push(("output.b".into(), &self.output.b));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter_mut().enumerate() {
            let p = format!("encoder.{i}");
            push_mha_mut(&mut out, &format!("{p}.attn"), &mut b.attn);
            push_ln_mut(&mut out, &format!("{p}.ln_attn"), &mut b.ln_attn);
            push_ffn_mut(&mut out, &format!("{p}.ffn"), &mut b.ffn);
            push_ln_mut(&mut out, &format!("{p}.ln_out"), &mut b.ln_out);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            let p = format!("decoder.{i}");
            push_mha_mut(&mut out, &format!("{p}.self_attn"), &mut b.self_attn);
            push_ln_mut(&mut out, &format!("{p}.ln_self"), &mut b.ln_self);
            push_mha_mut(&mut out, &format!("{p}.mm_attn"), &mut b.mm_attn);
            push_ln_mut(&mut out, &format!("{p}.ln_mm"), &mut b.ln_mm);
            push_ffn_mut(&mut out, &format!("{p}.ffn"), &mut b.ffn);
            push_ln_mut(&mut out, &format!("{p}.ln_out"), &mut b.ln_out);
        }
        out.push(("output.w".into(), &mut self.output.w));
        out.push(("output.b".into(), &mut self.output.b));
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let ln = |p: &LayerNormParams<F>| LayerNormParams {
            gain: p.gain.cast(),
            bias: p.bias.cast(),
        };
        let ffn = |p: &FeedForward<F>| FeedForward {
            w1: p.w1.cast(),
            b1: p.b1.cast(),
            w2: p.w2.cast(),
            b2: p.b2.cast(),
        };
        ModelParams {
            encoder: self
                .encoder
                .iter()
                .map(|b| EncoderBlock {
                    attn: b.attn.cast(),
                    ln_attn: ln(&b.ln_attn),
                    ffn: ffn(&b.ffn),
                    ln_out: ln(&b.ln_out),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|b| DecoderBlock {
                    self_attn: b.self_attn.cast(),
                    ln_self: ln(&b.ln_self),
                    mm_attn: b.mm_attn.cast(),
                    ln_mm: ln(&b.ln_mm),
                    ffn: ffn(&b.ffn),
                    ln_out: ln(&b.ln_out),
                })
                .collect(),
            output: OutputLayer {
                w: self.output.w.cast(),
                b: self.output.b.cast(),
            },
        }
    }
}

fn push_mha<'a, F>(out: &mut Vec<(String, &'a Tensor<F>)>, p: &str, m: &'a MultiHeadParams<F>) {
    out.push((format!("{p}.w_q"), &m.w_q));
    out.push((format!("{p}.w_k"), &m.w_k));
    out.push((format!("{p}.w_v"), &m.w_v));
}

fn push_ln<'a, F>(out: &mut Vec<(String, &'a Tensor<F>)>, p: &str, m: &'a LayerNormParams<F>) {
    out.push((format!("{p}.gain"), &m.gain));
    out.push((format!("{p}.bias"), &m.bias));
}

fn push_ffn<'a, F>(out: &mut Vec<(String, &'a Tensor<F>)>, p: &str, m: &'a FeedForward<F>) {
    out.push((format!("{p}.w1"), &m.w1));
    out.push((format!("{p}.b1"), &m.b1));
    out.push((format!("{p}.w2"), &m.w2));
    out.push((format!("{p}.b2"), &m.b2));
}

fn push_mha_mut<'a, F>(out: &mut Vec<(String, &'a mut Tensor<F>)>, p: &str, m: &'a mut MultiHeadParams<F>) {
    out.push((format!("{p}.w_q"), &mut m.w_q));
    out.push((format!("{p}.w_k"), &mut m.w_k));
    out.push((format!("{p}.w_v"), &mut m.w_v));
}

fn push_ln_mut<'a, F>(out: &mut Vec<(String, &'a mut Tensor<F>)>, p: &str, m: &'a mut LayerNormParams<F>) {
    out.push((format!("{p}.gain"), &mut m.gain));
    out.push((format!("{p}.bias"), &mut m.bias));
}

fn push_ffn_mut<'a, F>(out: &mut Vec<(String, &'a mut Tensor<F>)>, p: &str, m: &'a mut FeedForward<F>) {
    out.push((format!("{p}.w1"), &mut m.w1));
    out.push((format!("{p}.b1"), &mut m.b1));
    out.push((format!("{p}.w2"), &mut m.w2));
    out.push((format!("{p}.b2"), &mut m.b2));
}

/// Configuration, trainable parameters and the frozen input tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<F>,
    embeddings: EmbeddingTable<F>,
    positions: PositionalTable<F>,
}

/// Seed offset for the embedding-table stream, so that parameter init and
/// embedding init draw from independent streams of the same config seed.
const EMBEDDING_SEED_OFFSET: u64 = 0x5eed_0000_0000_0001;

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig, params: ModelParams<F>, embeddings: EmbeddingTable<F>) -> Result<Self> {
        config.validate()?;
        let expected = ModelParams::<F>::init(&config, &mut Rng::new(0))?;
        for ((name, want), (_, got)) in expected.tensors().iter().zip(params.tensors()) {
            if want.shape() != got.shape() {
                return Err(Error::Corruption {
                    tensor: name.clone(),
                    message: format!("shape {:?}, expected {:?}", got.shape(), want.shape()),
                });
            }
        }
        if expected.tensors().len() != params.tensors().len() {
            return Err(Error::Corruption {
                tensor: "params".into(),
                message: "block count does not match n_blocks".into(),
            });
        }
        Self::check_embeddings(&config, &embeddings)?;
        let positions = PositionalTable::new(config.max_len, config.d_w)?;
        Ok(Self {
            config,
            params,
            embeddings,
            positions,
        })
    }

    fn check_embeddings(config: &ModelConfig, table: &EmbeddingTable<F>) -> Result<()> {
        if table.dim() != config.d_w || table.vocab_size() < config.vocab_size {
            return Err(Error::dims(
                &[table.dim(), table.vocab_size()],
                &[config.d_w, config.vocab_size],
                "embedding table vs model config",
            ));
        }
        Ok(())
    }

    /// Fresh model: parameters from `config.seed`, embeddings from the vector
    /// file where available and seeded random vectors otherwise.
    pub fn initialize(
        config: ModelConfig,
        vocab: &Vocab,
        vectors: Option<&Path>,
    ) -> Result<(Self, LoadReport)> {
        if vocab.len() != config.vocab_size {
            return Err(Error::dims(&[vocab.len()], &[config.vocab_size], "vocab vs config"));
        }
        let params = ModelParams::init(&config, &mut Rng::new(config.seed))?;
        let mut erng = Rng::new(config.seed ^ EMBEDDING_SEED_OFFSET);
        let (table, report) = EmbeddingTable::initialize(vocab, config.d_w, vectors, &mut erng)?;
        Ok((Self::new(config, params, table)?, report))
    }

    /// Random embeddings for every id; convenient for tests.
    pub fn random(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config, &mut Rng::new(config.seed))?;
        let mut erng = Rng::new(config.seed ^ EMBEDDING_SEED_OFFSET);
        let table = EmbeddingTable::random(config.vocab_size, config.d_w, &mut erng);
        Self::new(config, params, table)
    }

    pub fn embeddings(&self) -> &EmbeddingTable<F> {
        &self.embeddings
    }

    pub fn positions(&self) -> &PositionalTable<F> {
        &self.positions
    }

    /// Swaps in an expanded table. Columns beyond `vocab_size` are usable as
    /// encoder inputs only; the output layer is unchanged.
    pub fn with_embeddings(mut self, table: EmbeddingTable<F>) -> Result<Self> {
        Self::check_embeddings(&self.config, &table)?;
        self.embeddings = table;
        Ok(self)
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            embeddings: self.embeddings.cast(),
            positions: PositionalTable::new(self.config.max_len, self.config.d_w)
                .expect("validated config"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_w: 4,
            d_m: 8,
            d_f: 16,
            heads: 2,
            max_len: 10,
            vocab_size: 11,
            dropout: 0.0,
            seed: 3,
            n_blocks: 1,
            pooling: Pooling::MeanMax,
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        for bad in [
            ModelConfig { heads: 3, ..tiny() },
            ModelConfig { d_f: 4, ..tiny() },
            ModelConfig { d_w: 5, ..tiny() },
            ModelConfig { d_m: 0, ..tiny() },
            ModelConfig { dropout: 1.0, ..tiny() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn parameter_shapes() {
        let m = Model::<f32>::random(tiny()).unwrap();
        let shapes: Vec<(String, Vec<usize>)> = m
            .params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let get = |name: &str| shapes.iter().find(|(n, _)| n == name).unwrap().1.clone();
        assert_eq!(get("encoder.0.attn.w_q"), vec![4, 8]);
        assert_eq!(get("encoder.0.ffn.w1"), vec![8, 16]);
        assert_eq!(get("encoder.0.ffn.w2"), vec![16, 8]);
        assert_eq!(get("decoder.0.self_attn.w_k"), vec![4, 8]);
        assert_eq!(get("decoder.0.mm_attn.w_v"), vec![8, 8]);
        assert_eq!(get("output.w"), vec![8, 11]);
        assert_eq!(get("output.b"), vec![11]);
        assert_eq!(shapes.len(), 11 + 16 + 2);
        let names: std::collections::HashSet<_> = shapes.iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), shapes.len());
        assert_eq!(m.embeddings().matrix().shape(), &[4, 11]);
    }

    #[test]
    fn paper_profile_embedding_width() {
        assert_eq!(ModelConfig::paper(100).embedding_dim(), 4096);
        assert_eq!(ModelConfig { pooling: Pooling::Mean, ..tiny() }.embedding_dim(), 8);
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::<f32>::random(tiny()).unwrap();
        let b = Model::<f32>::random(tiny()).unwrap();
        assert_eq!(a, b);
        let c = Model::<f32>::random(ModelConfig { seed: 4, ..tiny() }).unwrap();
        assert_ne!(a.params, c.params);
        // LN gains start at one, biases at zero.
        assert!(a.params.encoder[0].ln_attn.gain.data().iter().all(|&g| g == 1.0));
        assert!(a.params.output.b.data().iter().all(|&g| g == 0.0));
    }
}
