//! Inference-mode entry points: sentence encoding, greedy reconstruction and
//! the mean-max attention trace.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionTrace;
use crate::error::{Error, Result};
use crate::numerics::{argmax, Real, Tensor};
use crate::text::{make_batch, Vocab, EOS, GO};

use super::forward::{pool, Mode};
use super::{Model, Pooling};

/// Pooled sentence vector; for mean-max, `values = [z_max, z_mean]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceEmbedding {
    pub pooling: Pooling,
    pub d_m: usize,
    pub values: Vec<f32>,
}

impl SentenceEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn z_max(&self) -> Option<&[f32]> {
        match self.pooling {
            Pooling::MeanMax | Pooling::Max => Some(&self.values[..self.d_m]),
            Pooling::Mean => None,
        }
    }

    pub fn z_mean(&self) -> Option<&[f32]> {
        match self.pooling {
            Pooling::MeanMax => Some(&self.values[self.d_m..]),
            Pooling::Mean => Some(&self.values[..self.d_m]),
            Pooling::Max => None,
        }
    }

    /// The decoder memory, one `d_m` row per slot.
    pub fn memory<F: Real>(&self) -> Tensor<F> {
        let rows = self.values.len() / self.d_m;
        Tensor::new(vec![rows, self.d_m], self.values.iter().map(|&v| F::of(v as f64)).collect())
            .expect("non-empty embedding")
    }
}

/// Mean-max attention weights of a teacher-forced pass over one sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMaxAttention {
    /// Decoder input tokens, `<go>` first.
    pub inputs: Vec<String>,
    /// Per-head weights `[l x T x slots]`, top decoder block.
    pub trace: AttentionTrace,
    /// Head-averaged `[T x slots]` grid.
    pub grid: Vec<Vec<f64>>,
}

/// Figure-style heatmap export of a [`MeanMaxAttention`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub sentence: String,
    pub tokens: Vec<String>,
    /// Column labels, in memory slot order.
    pub slots: Vec<String>,
    /// Head-averaged `[T x slots]` weights.
    pub grid: Vec<Vec<f64>>,
    /// Per-head `[l x T x slots]` weights.
    pub heads: Vec<Vec<Vec<f64>>>,
}

impl MeanMaxAttention {
    pub fn heatmap(&self, sentence: &str) -> Heatmap {
        Heatmap {
            sentence: sentence.to_string(),
            tokens: self.inputs.clone(),
            slots: vec!["max".into(), "mean".into()],
            grid: self.grid.clone(),
            heads: self.trace.weights.clone(),
        }
    }
}

/// Mean-max pooling over the rows of `h` where `mask` is true: row 0 of the
/// result is the elementwise max, row 1 the mean. Ties keep the first row.
pub fn mean_max_pool<F: Real>(h: &Tensor<F>, mask: &[bool]) -> Result<Tensor<F>> {
    if mask.len() != h.rows() {
        return Err(Error::dims(&[mask.len()], &[h.rows()], "pooling mask"));
    }
    let rows: Vec<&[F]> = (0..h.rows()).filter(|&r| mask[r]).map(|r| h.row(r)).collect();
    if rows.is_empty() {
        return Err(Error::Masking("pooling needs at least one unmasked row".into()));
    }
    let kept = Tensor::from_rows(&rows)?;
    let (memory, _) = pool(&kept, &[rows.len()], rows.len(), Pooling::MeanMax)?;
    Ok(memory)
}

impl<F: Real> Model<F> {
    fn check_length(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Masking("cannot encode an empty id sequence".into()));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::Truncation {
                len: ids.len(),
                limit: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Encodes id sequences (EOS included) in one padded pass.
    pub fn encode_ids_batch<S: AsRef<[u32]>>(&self, sequences: &[S]) -> Result<Vec<SentenceEmbedding>> {
        for s in sequences {
            self.check_length(s.as_ref())?;
        }
        let batch = make_batch(sequences, None)?;
        let run = self.run_encoder(&batch.ids, &batch.pad_mask, batch.max_len, &mut Mode::Infer)?;
        let (memory, _) = pool(&run.states, &batch.lengths, batch.max_len, self.config.pooling)?;
        let slots = self.config.pooling.slots();
        let width = slots * self.config.d_m;
        Ok(memory
            .data()
            .chunks(width)
            .map(|z| SentenceEmbedding {
                pooling: self.config.pooling,
                d_m: self.config.d_m,
                values: z.iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect())
    }

    /// Top encoder states `[N x d_m]` of one sequence.
    pub fn encoder_states(&self, ids: &[u32]) -> Result<Tensor<F>> {
        self.check_length(ids)?;
        let run = self.run_encoder(ids, &vec![true; ids.len()], ids.len(), &mut Mode::Infer)?;
        Ok(run.states)
    }

    /// Top decoder states `[T x d_m]` for explicit decoder inputs.
    pub fn decoder_states(&self, inputs: &[u32], z: &SentenceEmbedding) -> Result<Tensor<F>> {
        self.check_length(inputs)?;
        let memory = z.memory::<F>();
        let run = self.run_decoder(inputs, &vec![true; inputs.len()], inputs.len(), &memory, &mut Mode::Infer)?;
        Ok(run.states)
    }

    pub fn encode_ids(&self, ids: &[u32]) -> Result<SentenceEmbedding> {
        Ok(self.encode_ids_batch(&[ids])?.remove(0))
    }

    pub fn encode(&self, vocab: &Vocab, sentence: &str) -> Result<SentenceEmbedding> {
        self.encode_ids(&vocab.encode(sentence))
    }

    /// Decoder logits `[T x V]` for explicit decoder inputs and a memory.
    pub fn decoder_logits(&self, inputs: &[u32], z: &SentenceEmbedding) -> Result<Tensor<F>> {
        Ok(self.output_logits(&self.decoder_states(inputs, z)?))
    }

    /// Argmax decoding from `<go>`, recomputing the prefix at every step.
    /// Stops after emitting EOS (included) or `max_len` tokens.
    pub fn greedy_decode(&self, z: &SentenceEmbedding, max_len: usize) -> Result<Vec<u32>> {
        let limit = max_len.min(self.config.max_len);
        let mut inputs = vec![GO];
        let mut out = Vec::new();
        while out.len() < limit {
            let logits = self.decoder_logits(&inputs, z)?;
            let next = argmax(logits.row(logits.rows() - 1)) as u32;
            out.push(next);
            if next == EOS {
                break;
            }
            inputs.push(next);
        }
        Ok(out)
    }

    /// Teacher-forced mean-max attention weights over a sentence's own tokens.
    pub fn attention_trace(&self, vocab: &Vocab, sentence: &str) -> Result<MeanMaxAttention> {
        let ids = vocab.encode(sentence);
        self.check_length(&ids)?;
        let z = self.encode_ids(&ids)?;
        let mut inputs = vec![GO];
        inputs.extend_from_slice(&ids[..ids.len() - 1]);
        let memory = z.memory::<F>();
        let run = self.run_decoder(&inputs, &vec![true; inputs.len()], inputs.len(), &memory, &mut Mode::Infer)?;
        let trace = run.mm_trace();
        let grid = trace.head_average();
        let labels = inputs
            .iter()
            .map(|&id| vocab.token(id).unwrap_or("<unk>").to_string())
            .collect();
        Ok(MeanMaxAttention {
            inputs: labels,
            trace,
            grid,
        })
    }
}
