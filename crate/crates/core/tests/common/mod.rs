//! Plain nested-loop reference implementation of the architecture in `f64`,
//! written from the equations without touching the library's kernels.
#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

use mmaae_core::attention::MultiHeadParams;
use mmaae_core::model::{DecoderBlock, EncoderBlock, LayerNormParams, Model, ModelConfig, Pooling};
use mmaae_core::numerics::{Rng, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        d_w: 4,
        d_m: 8,
        d_f: 16,
        heads: 2,
        max_len: 12,
        vocab_size: 11,
        dropout: 0.0,
        seed,
        n_blocks: 1,
        pooling: Pooling::MeanMax,
    }
}

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.symmetric(1.0)).collect()).collect()
}

pub fn mat_tensor(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

/// Random sentence ids `w_1 .. w_{n-1}, EOS` drawn from non-special tokens.
pub fn random_ids(n: usize, vocab: usize, rng: &mut Rng) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..n - 1).map(|_| 4 + rng.below(vocab - 4) as u32).collect();
    ids.push(3);
    ids
}

fn matmul(a: &Mat, w: &Tensor<f64>) -> Mat {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..n)
                .map(|j| (0..k).map(|i| row[i] * w.get(&[i, j])).sum())
                .collect()
        })
        .collect()
}

fn affine(a: &Mat, w: &Tensor<f64>, b: &Tensor<f64>) -> Mat {
    let mut out = matmul(a, w);
    for row in &mut out {
        for (j, v) in row.iter_mut().enumerate() {
            *v += b.data()[j];
        }
    }
    out
}

/// `Attention(Q W^q_i, K W^k_i, V W^v_i)` for each head, concatenated.
pub fn multihead(q: &Mat, k: &Mat, v: &Mat, p: &MultiHeadParams<f64>, allowed: impl Fn(usize, usize) -> bool) -> Mat {
    let d_m = p.w_q.shape()[1];
    let d_k = d_m / p.heads;
    let qp = matmul(q, &p.w_q);
    let kp = matmul(k, &p.w_k);
    let vp = matmul(v, &p.w_v);
    let mut out = vec![vec![0.0; d_m]; q.len()];
    for h in 0..p.heads {
        let cols = h * d_k..(h + 1) * d_k;
        for i in 0..q.len() {
            let mut scores = Vec::with_capacity(k.len());
            for j in 0..k.len() {
                let mut s = 0.0;
                for c in cols.clone() {
                    s += qp[i][c] * kp[j][c];
                }
                s /= (d_k as f64).sqrt();
                if !allowed(i, j) {
                    s += -1e9;
                }
                scores.push(s);
            }
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..k.len() {
                for c in cols.clone() {
                    out[i][c] += e[j] / z * vp[j][c];
                }
            }
        }
    }
    out
}

pub fn layer_norm(x: &Mat, p: &LayerNormParams<f64>) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| p.gain.data()[j] * (v - mean) / (var + 1e-6).sqrt() + p.bias.data()[j])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn ffn(x: &Mat, w1: &Tensor<f64>, b1: &Tensor<f64>, w2: &Tensor<f64>, b2: &Tensor<f64>) -> Mat {
    let hidden: Mat = affine(x, w1, b1)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    affine(&hidden, w2, b2)
}

/// `E[:, w_t] + p_t` with `p_t[2i] = sin(t / 10000^(2i/d))`, `p_t[2i+1] = cos(..)`.
pub fn embed(model: &Model<f64>, ids: &[u32]) -> Mat {
    let table = model.embeddings().matrix();
    let d = table.shape()[0];
    ids.iter()
        .enumerate()
        .map(|(t, &id)| {
            (0..d)
                .map(|j| {
                    let i = (j / 2) as f64;
                    let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
                    let pe = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                    table.get(&[j, id as usize]) + pe
                })
                .collect()
        })
        .collect()
}

/// Encoder block: no residual around self-attention, residual around the FFN.
pub fn encoder_block(x: &Mat, b: &EncoderBlock<f64>) -> Mat {
    let a = multihead(x, x, x, &b.attn, |_, _| true);
    let a_bar = layer_norm(&a, &b.ln_attn);
    let f = ffn(&a_bar, &b.ffn.w1, &b.ffn.b1, &b.ffn.w2, &b.ffn.b2);
    layer_norm(&add(&f, &a_bar), &b.ln_out)
}

/// `[z_max, z_mean]` as a two-row memory.
pub fn pool(h: &Mat, mask: &[bool]) -> Mat {
    let d = h[0].len();
    let rows: Vec<&Vec<f64>> = h.iter().zip(mask).filter(|(_, &m)| m).map(|(r, _)| r).collect();
    let zmax: Vec<f64> = (0..d)
        .map(|i| rows.iter().map(|r| r[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let zmean: Vec<f64> = (0..d)
        .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64)
        .collect();
    vec![zmax, zmean]
}

/// Decoder block over a memory of pooled rows.
pub fn decoder_block(y: &Mat, memory: &Mat, b: &DecoderBlock<f64>) -> Mat {
    let a = multihead(y, y, y, &b.self_attn, |i, j| j <= i);
    let a_bar = layer_norm(&a, &b.ln_self);
    let az = multihead(&a_bar, memory, memory, &b.mm_attn, |_, _| true);
    let az_bar = layer_norm(&add(&az, &a_bar), &b.ln_mm);
    let f = ffn(&az_bar, &b.ffn.w1, &b.ffn.b1, &b.ffn.w2, &b.ffn.b2);
    layer_norm(&add(&f, &az_bar), &b.ln_out)
}

pub fn output(h: &Mat, model: &Model<f64>) -> Mat {
    affine(h, &model.params.output.w, &model.params.output.b)
}

/// Teacher-forced mean cross-entropy of one sentence.
pub fn sentence_loss(model: &Model<f64>, ids: &[u32]) -> f64 {
    let h = encoder_block(&embed(model, ids), &model.params.encoder[0]);
    let memory = pool(&h, &vec![true; ids.len()]);
    let mut inputs = vec![2u32];
    inputs.extend_from_slice(&ids[..ids.len() - 1]);
    let hd = decoder_block(&embed(model, &inputs), &memory, &model.params.decoder[0]);
    let logits = output(&hd, model);
    let mut loss = 0.0;
    for (row, &t) in logits.iter().zip(ids) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lz = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lz - row[t as usize];
    }
    loss / ids.len() as f64
}

const DETS: [&str; 4] = ["the", "a", "one", "every"];
const NOUNS: [&str; 10] = ["cat", "dog", "bird", "fox", "child", "farmer", "river", "tree", "horse", "king"];
const VERBS: [&str; 8] = ["sees", "likes", "chases", "finds", "hears", "follows", "paints", "feeds"];
const ADJS: [&str; 8] = ["red", "small", "old", "quiet", "happy", "green", "tall", "brave"];
const ADVS: [&str; 6] = ["today", "slowly", "again", "often", "there", "now"];

/// `n` distinct sentences of 2 to 7 words over a 36-word grammar.
pub fn toy_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = Rng::new(seed);
    let mut out: Vec<String> = Vec::with_capacity(n);
    while out.len() < n {
        let mut words = vec![DETS[rng.below(4)]];
        if rng.uniform() < 0.4 {
            words.push(ADJS[rng.below(8)]);
        }
        words.push(NOUNS[rng.below(10)]);
        if rng.uniform() < 0.8 {
            words.push(VERBS[rng.below(8)]);
            if rng.uniform() < 0.7 {
                words.push(DETS[rng.below(4)]);
                words.push(NOUNS[rng.below(10)]);
            }
        }
        if words.len() < 7 && rng.uniform() < 0.3 {
            words.push(ADVS[rng.below(6)]);
        }
        let s = words.join(" ");
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}
