//! Batched teacher-forced forward pass and its hand-wired backward pass.
//!
//! A batch of `B` sentences padded to `N` ids is processed as `B` stacked
//! items of `N` rows each. Row-wise ops (LN, FFN, output) see `[B*N x d]`
//! matrices; attention is told the item count and builds per-item grids.

use crate::attention::{
    multihead_backward, multihead_forward, AttentionCache, AttentionMask, AttentionTrace,
};
use crate::embedding::embed_grid;
use crate::error::{Error, Result};
use crate::numerics::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::numerics::{
    argmax, cross_entropy_logits, dropout, dropout_backward, layer_norm, layer_norm_backward,
    relu, relu_backward, DropoutMask, LayerNormCache, Real, Rng, Tensor, LAYER_NORM_EPS,
};
use crate::text::{Batch, GO};

use super::{DecoderBlock, EncoderBlock, FeedForward, LayerNormParams, Model, Pooling};

/// Dropout is active only in `Train`, and draws from the supplied stream.
pub enum Mode<'a> {
    Infer,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    fn drop<F: Real>(&mut self, x: Tensor<F>, rate: f64) -> Result<(Tensor<F>, Option<DropoutMask<F>>)> {
        match self {
            Mode::Infer => Ok((x, None)),
            Mode::Train(rng) => dropout(&x, rate, rng, true),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    /// Mean cross-entropy per target token.
    pub loss: f64,
    /// Summed cross-entropy (the unnormalized objective).
    pub loss_sum: f64,
    pub tokens: usize,
    pub correct: usize,
}

impl LossStats {
    pub fn accuracy(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.correct as f64 / self.tokens as f64
        }
    }

    /// Token-weighted merge of two batches.
    pub fn merge(&mut self, other: &LossStats) {
        self.loss_sum += other.loss_sum;
        self.tokens += other.tokens;
        self.correct += other.correct;
        self.loss = if self.tokens == 0 { 0.0 } else { self.loss_sum / self.tokens as f64 };
    }
}

struct LnCache<F> {
    inner: LayerNormCache<F>,
}

struct FfnCache<F> {
    input: Tensor<F>,
    pre: Tensor<F>,
    act: Tensor<F>,
}

struct EncoderCache<F> {
    attn: AttentionCache<F>,
    drop_attn: Option<DropoutMask<F>>,
    ln_attn: LnCache<F>,
    ffn: FfnCache<F>,
    drop_ffn: Option<DropoutMask<F>>,
    ln_out: LnCache<F>,
}

struct DecoderCache<F> {
    self_attn: AttentionCache<F>,
    drop_self: Option<DropoutMask<F>>,
    ln_self: LnCache<F>,
    mm_attn: AttentionCache<F>,
    drop_mm: Option<DropoutMask<F>>,
    ln_mm: LnCache<F>,
    ffn: FfnCache<F>,
    drop_ffn: Option<DropoutMask<F>>,
    ln_out: LnCache<F>,
}

/// Pooling bookkeeping: the winning row of every max coordinate.
pub(crate) struct PoolCache {
    pub pooling: Pooling,
    pub lengths: Vec<usize>,
    pub seq_len: usize,
    /// `[items x d_m]` absolute row index into the encoder output.
    pub argmax: Vec<usize>,
}

/// Encoder output for a padded batch.
pub(crate) struct EncoderRun<F> {
    /// Top-block states `[items*seq_len x d_m]`.
    pub states: Tensor<F>,
    blocks: Vec<EncoderCache<F>>,
}

pub(crate) struct DecoderRun<F> {
    /// Top-block states `[items*seq_len x d_m]`.
    pub states: Tensor<F>,
    blocks: Vec<DecoderCache<F>>,
}

impl<F: Real> DecoderRun<F> {
    /// Mean-max attention weights of the top block for item 0.
    pub fn mm_trace(&self) -> AttentionTrace {
        self.blocks.last().expect("at least one block").mm_attn.trace(0)
    }
}

/// Everything `backward` needs from a training forward pass.
pub struct ForwardCache<F> {
    encoder: EncoderRun<F>,
    pool: PoolCache,
    decoder: DecoderRun<F>,
    /// Rows of the decoder output that carry a target.
    target_rows: Vec<usize>,
    gathered: Tensor<F>,
    dlogits: Tensor<F>,
}

/// Loss statistics plus the cache of a forward pass.
pub struct BatchOutput<F> {
    pub stats: LossStats,
    pub cache: ForwardCache<F>,
}

fn linear<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (rows, d_in, d_out) = (x.rows(), x.cols(), w.cols());
    let mut y = Tensor::zeros(&[rows, d_out]);
    for r in 0..rows {
        y.row_mut(r).copy_from_slice(b.data());
    }
    gemm_nn(rows, d_in, d_out, x.data(), w.data(), y.data_mut(), true);
    y
}

/// Accumulates `dW = x^T dy`, `db = sum(dy)` and returns `dx = dy W^T`.
fn linear_backward<F: Real>(x: &Tensor<F>, w: &mut Tensor<F>, b: &mut Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let (rows, d_in, d_out) = (x.rows(), x.cols(), w.cols());
    let mut dw = vec![F::zero(); d_in * d_out];
    gemm_tn(d_in, rows, d_out, x.data(), dy.data(), &mut dw, false);
    w.accumulate_grad(&dw);
    let mut db = vec![F::zero(); d_out];
    for r in 0..rows {
        for (s, &g) in db.iter_mut().zip(dy.row(r)) {
            *s += g;
        }
    }
    b.accumulate_grad(&db);
    let mut dx = Tensor::zeros(&[rows, d_in]);
    gemm_nt(rows, d_out, d_in, dy.data(), w.data(), dx.data_mut(), false);
    dx
}

fn ln_forward<F: Real>(x: &Tensor<F>, p: &LayerNormParams<F>) -> Result<(Tensor<F>, LnCache<F>)> {
    let (y, inner) = layer_norm(x, &p.gain, &p.bias, F::of(LAYER_NORM_EPS))?;
    Ok((y, LnCache { inner }))
}

fn ln_backward<F: Real>(dy: &Tensor<F>, p: &mut LayerNormParams<F>, c: &LnCache<F>) -> Result<Tensor<F>> {
    let (dx, dg, db) = layer_norm_backward(dy, &p.gain, &c.inner)?;
    p.gain.accumulate_grad(dg.data());
    p.bias.accumulate_grad(db.data());
    Ok(dx)
}

fn ffn_forward<F: Real>(x: &Tensor<F>, p: &FeedForward<F>) -> (Tensor<F>, FfnCache<F>) {
    let pre = linear(x, &p.w1, &p.b1);
    let act = relu(&pre);
    let out = linear(&act, &p.w2, &p.b2);
    let mut input = x.clone();
    input.clear_grad();
    (out, FfnCache { input, pre, act })
}

fn ffn_backward<F: Real>(dy: &Tensor<F>, p: &mut FeedForward<F>, c: &FfnCache<F>) -> Tensor<F> {
    let dact = linear_backward(&c.act, &mut p.w2, &mut p.b2, dy);
    let dpre = relu_backward(&c.pre, &dact);
    linear_backward(&c.input, &mut p.w1, &mut p.b1, &dpre)
}

fn add<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let mut out = a.clone();
    out.clear_grad();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    out
}

fn add_assign<F: Real>(a: &mut Tensor<F>, b: &Tensor<F>) {
    for (o, &v) in a.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
}

fn encoder_block_forward<F: Real>(
    x: &Tensor<F>,
    p: &EncoderBlock<F>,
    items: usize,
    mask: &AttentionMask,
    rate: f64,
    mode: &mut Mode,
) -> Result<(Tensor<F>, EncoderCache<F>)> {
    let (a, attn) = multihead_forward(x, x, x, &p.attn, items, Some(mask))?;
    let (a, drop_attn) = mode.drop(a, rate)?;
    // No residual around self-attention: widths differ in the first block.
    let (a_bar, ln_attn) = ln_forward(&a, &p.ln_attn)?;
    let (f, ffn) = ffn_forward(&a_bar, &p.ffn);
    let (f, drop_ffn) = mode.drop(f, rate)?;
    let (h, ln_out) = ln_forward(&add(&f, &a_bar), &p.ln_out)?;
    Ok((
        h,
        EncoderCache {
            attn,
            drop_attn,
            ln_attn,
            ffn,
            drop_ffn,
            ln_out,
        },
    ))
}

/// Returns the gradient with respect to the block input.
fn encoder_block_backward<F: Real>(dh: &Tensor<F>, p: &mut EncoderBlock<F>, c: &EncoderCache<F>) -> Result<Tensor<F>> {
    let ds = ln_backward(dh, &mut p.ln_out, &c.ln_out)?;
    let df = dropout_backward(&ds, c.drop_ffn.as_ref());
    let mut da_bar = ffn_backward(&df, &mut p.ffn, &c.ffn);
    add_assign(&mut da_bar, &ds);
    let da = ln_backward(&da_bar, &mut p.ln_attn, &c.ln_attn)?;
    let da = dropout_backward(&da, c.drop_attn.as_ref());
    let (dq, dk, dv) = multihead_backward(&mut p.attn, &c.attn, &da)?;
    Ok(add(&add(&dq, &dk), &dv))
}

#[allow(clippy::too_many_arguments)]
fn decoder_block_forward<F: Real>(
    y: &Tensor<F>,
    memory: &Tensor<F>,
    p: &DecoderBlock<F>,
    items: usize,
    causal: &AttentionMask,
    rate: f64,
    mode: &mut Mode,
) -> Result<(Tensor<F>, DecoderCache<F>)> {
    let (a, self_attn) = multihead_forward(y, y, y, &p.self_attn, items, Some(causal))?;
    let (a, drop_self) = mode.drop(a, rate)?;
    let (a_bar, ln_self) = ln_forward(&a, &p.ln_self)?;
    let (az, mm_attn) = multihead_forward(&a_bar, memory, memory, &p.mm_attn, items, None)?;
    let (az, drop_mm) = mode.drop(az, rate)?;
    let (az_bar, ln_mm) = ln_forward(&add(&az, &a_bar), &p.ln_mm)?;
    let (f, ffn) = ffn_forward(&az_bar, &p.ffn);
    let (f, drop_ffn) = mode.drop(f, rate)?;
    let (h, ln_out) = ln_forward(&add(&f, &az_bar), &p.ln_out)?;
    Ok((
        h,
        DecoderCache {
            self_attn,
            drop_self,
            ln_self,
            mm_attn,
            drop_mm,
            ln_mm,
            ffn,
            drop_ffn,
            ln_out,
        },
    ))
}

/// Returns `(d input, d memory)`.
fn decoder_block_backward<F: Real>(
    dh: &Tensor<F>,
    p: &mut DecoderBlock<F>,
    c: &DecoderCache<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let ds2 = ln_backward(dh, &mut p.ln_out, &c.ln_out)?;
    let df = dropout_backward(&ds2, c.drop_ffn.as_ref());
    let mut daz_bar = ffn_backward(&df, &mut p.ffn, &c.ffn);
    add_assign(&mut daz_bar, &ds2);
    let ds1 = ln_backward(&daz_bar, &mut p.ln_mm, &c.ln_mm)?;
    let daz = dropout_backward(&ds1, c.drop_mm.as_ref());
    let (mut da_bar, dmk, dmv) = multihead_backward(&mut p.mm_attn, &c.mm_attn, &daz)?;
    add_assign(&mut da_bar, &ds1);
    let da = ln_backward(&da_bar, &mut p.ln_self, &c.ln_self)?;
    let da = dropout_backward(&da, c.drop_self.as_ref());
    let (dq, dk, dv) = multihead_backward(&mut p.self_attn, &c.self_attn, &da)?;
    Ok((add(&add(&dq, &dk), &dv), add(&dmk, &dmv)))
}

/// Pools each item's unmasked rows into its memory slots `[items*slots x d]`.
pub(crate) fn pool<F: Real>(
    h: &Tensor<F>,
    lengths: &[usize],
    seq_len: usize,
    pooling: Pooling,
) -> Result<(Tensor<F>, PoolCache)> {
    let d = h.cols();
    let items = lengths.len();
    if h.rows() != items * seq_len {
        return Err(Error::dims(&[h.rows()], &[items, seq_len], "pooling input"));
    }
    let slots = pooling.slots();
    let mut memory = Tensor::zeros(&[items * slots, d]);
    let mut winners = vec![0; items * d];
    for (b, &len) in lengths.iter().enumerate() {
        if len == 0 || len > seq_len {
            return Err(Error::Masking(format!("item {b} has {len} unmasked positions")));
        }
        let rows = b * seq_len..b * seq_len + len;
        let mut zmax: Vec<F> = h.row(rows.start).to_vec();
        let mut arg = vec![rows.start; d];
        let mut sum: Vec<F> = vec![F::zero(); d];
        for r in rows {
            for (i, &v) in h.row(r).iter().enumerate() {
                sum[i] += v;
                // Strict comparison keeps the earliest row on ties.
                if v > zmax[i] {
                    zmax[i] = v;
                    arg[i] = r;
                }
            }
        }
        let inv = F::one() / F::of(len as f64);
        let zmean: Vec<F> = sum.iter().map(|&s| s * inv).collect();
        match pooling {
            Pooling::MeanMax => {
                memory.row_mut(2 * b).copy_from_slice(&zmax);
                memory.row_mut(2 * b + 1).copy_from_slice(&zmean);
            }
            Pooling::Max => memory.row_mut(b).copy_from_slice(&zmax),
            Pooling::Mean => memory.row_mut(b).copy_from_slice(&zmean),
        }
        winners[b * d..(b + 1) * d].copy_from_slice(&arg);
    }
    Ok((
        memory,
        PoolCache {
            pooling,
            lengths: lengths.to_vec(),
            seq_len,
            argmax: winners,
        },
    ))
}

pub(crate) fn pool_backward<F: Real>(dmemory: &Tensor<F>, c: &PoolCache) -> Tensor<F> {
    let d = dmemory.cols();
    let items = c.lengths.len();
    let mut dh = Tensor::zeros(&[items * c.seq_len, d]);
    for (b, &len) in c.lengths.iter().enumerate() {
        let (dmax, dmean) = match c.pooling {
            Pooling::MeanMax => (Some(dmemory.row(2 * b)), Some(dmemory.row(2 * b + 1))),
            Pooling::Max => (Some(dmemory.row(b)), None),
            Pooling::Mean => (None, Some(dmemory.row(b))),
        };
        if let Some(g) = dmax {
            for (i, &gi) in g.iter().enumerate() {
                let r = c.argmax[b * d + i];
                dh.data_mut()[r * d + i] += gi;
            }
        }
        if let Some(g) = dmean {
            let inv = F::one() / F::of(len as f64);
            for r in b * c.seq_len..b * c.seq_len + len {
                for (o, &gi) in dh.row_mut(r).iter_mut().zip(g) {
                    *o += gi * inv;
                }
            }
        }
    }
    dh
}

impl<F: Real> Model<F> {
    /// Encoder stack over a padded id grid `[items x seq_len]`.
    pub(crate) fn run_encoder(
        &self,
        ids: &[u32],
        pad_mask: &[bool],
        seq_len: usize,
        mode: &mut Mode,
    ) -> Result<EncoderRun<F>> {
        let items = ids.len() / seq_len.max(1);
        let x = embed_grid(ids, seq_len, &self.embeddings, &self.positions)?;
        let rate = self.config.dropout;
        let (mut x, _) = mode.drop(x, rate)?;
        let mask = AttentionMask::key_padding(pad_mask, seq_len, seq_len);
        let mut blocks = Vec::with_capacity(self.params.encoder.len());
        for p in &self.params.encoder {
            let (h, c) = encoder_block_forward(&x, p, items, &mask, rate, mode)?;
            blocks.push(c);
            x = h;
        }
        Ok(EncoderRun { states: x, blocks })
    }

    /// Decoder stack over shifted inputs `[items x seq_len]` and a pooled memory.
    pub(crate) fn run_decoder(
        &self,
        inputs: &[u32],
        pad_mask: &[bool],
        seq_len: usize,
        memory: &Tensor<F>,
        mode: &mut Mode,
    ) -> Result<DecoderRun<F>> {
        let items = inputs.len() / seq_len.max(1);
        let y = embed_grid(inputs, seq_len, &self.embeddings, &self.positions)?;
        let rate = self.config.dropout;
        let (mut y, _) = mode.drop(y, rate)?;
        let causal = AttentionMask::causal_padded(pad_mask, seq_len);
        let mut blocks = Vec::with_capacity(self.params.decoder.len());
        for p in &self.params.decoder {
            let (h, c) = decoder_block_forward(&y, memory, p, items, &causal, rate, mode)?;
            blocks.push(c);
            y = h;
        }
        Ok(DecoderRun { states: y, blocks })
    }

    /// `h W3 + b3` for the given rows.
    pub fn output_logits(&self, h: &Tensor<F>) -> Tensor<F> {
        linear(h, &self.params.output.w, &self.params.output.b)
    }

    /// Teacher-forced pass: encode, pool, decode `[GO, w_1 .. w_{N-1}]`
    /// against targets `[w_1 .. w_{N-1}, EOS]`, masked mean cross-entropy.
    pub fn forward_batch(&self, batch: &Batch, mut mode: Mode) -> Result<BatchOutput<F>> {
        let n = batch.max_len;
        let items = batch.size();
        let encoder = self.run_encoder(&batch.ids, &batch.pad_mask, n, &mut mode)?;
        let (memory, pool_cache) = pool(&encoder.states, &batch.lengths, n, self.config.pooling)?;

        let mut inputs = Vec::with_capacity(items * n);
        for b in 0..items {
            let row = batch.row(b);
            inputs.push(GO);
            inputs.extend_from_slice(&row[..n - 1]);
        }
        let decoder = self.run_decoder(&inputs, &batch.pad_mask, n, &memory, &mut mode)?;

        // Only rows with a target reach the (wide) output layer.
        let target_rows: Vec<usize> = (0..items * n).filter(|&r| batch.pad_mask[r]).collect();
        let d_m = self.config.d_m;
        let mut gathered = Tensor::zeros(&[target_rows.len(), d_m]);
        for (i, &r) in target_rows.iter().enumerate() {
            gathered.row_mut(i).copy_from_slice(decoder.states.row(r));
        }
        let logits = self.output_logits(&gathered);
        let targets: Vec<usize> = target_rows.iter().map(|&r| batch.ids[r] as usize).collect();
        let (loss, dlogits) = cross_entropy_logits(&logits, &targets, &vec![true; targets.len()])?;
        let correct = targets
            .iter()
            .enumerate()
            .filter(|&(i, &t)| argmax(logits.row(i)) == t)
            .count();
        let tokens = targets.len();
        let stats = LossStats {
            loss: loss.as_f64(),
            loss_sum: loss.as_f64() * tokens as f64,
            tokens,
            correct,
        };
        Ok(BatchOutput {
            stats,
            cache: ForwardCache {
                encoder,
                pool: pool_cache,
                decoder,
                target_rows,
                gathered,
                dlogits,
            },
        })
    }

    /// Accumulates the gradient of the mean loss into every parameter's slot.
    pub fn backward(&mut self, cache: &ForwardCache<F>) -> Result<()> {
        let params = &mut self.params;
        let dgathered = linear_backward(
            &cache.gathered,
            &mut params.output.w,
            &mut params.output.b,
            &cache.dlogits,
        );
        let d_m = self.config.d_m;
        let mut dh = Tensor::zeros(cache.decoder.states.shape());
        for (i, &r) in cache.target_rows.iter().enumerate() {
            dh.row_mut(r).copy_from_slice(dgathered.row(i));
        }

        let slots = self.config.pooling.slots();
        let items = cache.pool.lengths.len();
        let mut dmemory = Tensor::zeros(&[items * slots, d_m]);
        for (p, c) in params.decoder.iter_mut().zip(&cache.decoder.blocks).rev() {
            let (dy, dm) = decoder_block_backward(&dh, p, c)?;
            add_assign(&mut dmemory, &dm);
            dh = dy;
        }

        let mut dh = pool_backward(&dmemory, &cache.pool);
        for (p, c) in params.encoder.iter_mut().zip(&cache.encoder.blocks).rev() {
            dh = encoder_block_backward(&dh, p, c)?;
        }
        // `dh` is now the gradient at the frozen input embeddings; discarded.
        Ok(())
    }

    /// Mean loss and accuracy in inference mode, without keeping the cache.
    pub fn evaluate_batch(&self, batch: &Batch) -> Result<LossStats> {
        Ok(self.forward_batch(batch, Mode::Infer)?.stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::{grad_check, GradCheckOptions};
    use crate::text::make_batch;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_w: 4,
            d_m: 8,
            d_f: 16,
            heads: 2,
            max_len: 10,
            vocab_size: 11,
            dropout: 0.0,
            seed: 7,
            n_blocks: 1,
            pooling: Pooling::MeanMax,
        }
    }

    #[test]
    fn pooling_examples() {
        let h = Tensor::<f64>::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let (m, _) = pool(&h, &[2], 2, Pooling::MeanMax).unwrap();
        assert_eq!(m.row(0), &[1.0, 1.0]);
        assert_eq!(m.row(1), &[0.5, 0.5]);
        let (m, _) = pool(&h, &[1], 2, Pooling::MeanMax).unwrap();
        assert_eq!(m.row(0), m.row(1));
        assert!(matches!(pool(&h, &[0], 2, Pooling::Mean), Err(Error::Masking(_))));
    }

    #[test]
    fn zero_output_weights_give_log_v() {
        let mut m = Model::<f64>::random(tiny()).unwrap();
        m.params.output.w = Tensor::zeros(&[8, 11]);
        let batch = make_batch(&[vec![5, 6, 3], vec![7, 3]], None).unwrap();
        let s = m.evaluate_batch(&batch).unwrap();
        assert!((s.loss - (11f64).ln()).abs() < 1e-12, "{}", s.loss);
        assert_eq!(s.tokens, 5);
    }

    #[test]
    fn duplicated_sentence_keeps_mean_loss() {
        let m = Model::<f64>::random(tiny()).unwrap();
        let one = m.evaluate_batch(&make_batch(&[vec![4, 9, 5, 3]], None).unwrap()).unwrap();
        let two = m
            .evaluate_batch(&make_batch(&[vec![4, 9, 5, 3], vec![4, 9, 5, 3]], None).unwrap())
            .unwrap();
        assert!((one.loss - two.loss).abs() < 1e-12);
    }

    #[test]
    fn full_model_gradient_check() {
        let mut model = Model::<f64>::random(tiny()).unwrap();
        let batch = make_batch(&[vec![4, 9, 5, 6, 3], vec![7, 8, 3]], None).unwrap();
        let (names, mut tensors): (Vec<String>, Vec<Tensor<f64>>) = model
            .params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .unzip();
        let out = model.forward_batch(&batch, Mode::Infer).unwrap();
        model.params.zero_grad();
        model.backward(&out.cache).unwrap();
        for (t, (_, p)) in tensors.iter_mut().zip(model.params.tensors()) {
            t.zero_grad();
            t.accumulate_grad(p.grad().unwrap());
        }
        let mut probe = model.clone();
        let report = grad_check(
            |ts: &[Tensor<f64>]| {
                for ((_, p), t) in probe.params.tensors_mut().into_iter().zip(ts) {
                    p.data_mut().copy_from_slice(t.data());
                }
                Ok(probe.evaluate_batch(&batch)?.loss)
            },
            &mut tensors,
            &names,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
