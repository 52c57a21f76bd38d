//! Checkpoint file: one JSON header line, then little-endian `f32` arrays in
//! manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig};
use crate::embedding::{EmbeddingTable, Provenance};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::numerics::{Rng, RngState, Tensor};
use crate::text::Vocab;

const FORMAT: &str = "mmaae-checkpoint";
const VERSION: u32 = 1;
const EMBEDDINGS: &str = "embeddings";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the data section.
    pub offset: usize,
}

/// Loop position and random stream, enough to resume training exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerSnapshot {
    pub step: u64,
    pub epoch: usize,
    pub best_dev_acc: Option<f64>,
    pub stale_epochs: usize,
    pub rng: RngState,
    pub adam_steps: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    seed: u64,
    vocab: Vec<(String, u64)>,
    /// One provenance code per embedding column.
    provenance: String,
    trainer: Option<TrainerSnapshot>,
    adam: Option<AdamHyper>,
    manifest: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct AdamHyper {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: Vocab,
    pub train: Option<TrainConfig>,
    pub trainer: Option<TrainerSnapshot>,
    pub adam: Option<AdamState<f32>>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    vocab: &Vocab,
    train: Option<&TrainConfig>,
    state: Option<(&TrainerSnapshot, &AdamState<f32>)>,
) -> Result<()> {
    if vocab.len() != model.embeddings().vocab_size() {
        return Err(Error::dims(
            &[vocab.len()],
            &[model.embeddings().vocab_size()],
            "checkpoint vocab vs embedding table",
        ));
    }
    let mut arrays: Vec<(String, &Tensor<f32>)> = model.params.tensors();
    arrays.push((EMBEDDINGS.into(), model.embeddings().matrix()));
    if let Some((_, adam)) = state {
        let names: Vec<String> = model.params.tensors().into_iter().map(|(n, _)| n).collect();
        for (n, m) in names.iter().zip(&adam.m) {
            arrays.push((format!("adam.m.{n}"), m));
        }
        for (n, v) in names.iter().zip(&adam.v) {
            arrays.push((format!("adam.v.{n}"), v));
        }
    }
    let mut offset = 0;
    let manifest = arrays
        .iter()
        .map(|(name, t)| {
            let e = ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        model: model.config.clone(),
        train: train.cloned(),
        seed: model.config.seed,
        vocab: vocab
            .tokens()
            .iter()
            .cloned()
            .zip(vocab.counts().iter().copied())
            .collect(),
        provenance: model.embeddings().provenance().iter().map(|p| p.code()).collect(),
        trainer: state.map(|(s, _)| s.clone()),
        adam: state.map(|(_, a)| AdamHyper {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            t: a.t,
        }),
        manifest,
    };
    let json = serde_json::to_string(&header)?;
    crate::io::write_atomic(path, |w| {
        w.write_all(json.as_bytes())?;
        w.write_all(b"\n")?;
        for (_, t) in &arrays {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    })
}

fn corrupt(tensor: &str, message: impl Into<String>) -> Error {
    Error::Corruption {
        tensor: tensor.to_string(),
        message: message.into(),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("header", "no header line"))?;
    let header: Header = serde_json::from_slice(&bytes[..split])?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(corrupt(
            "header",
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    header.model.validate()?;
    let body = &bytes[split + 1..];
    if body.len() % 4 != 0 {
        return Err(corrupt("data", format!("{} bytes is not a whole number of floats", body.len())));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut params = ModelParams::<f32>::init(&header.model, &mut Rng::new(0))?;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let table_cols = header.vocab.len();
    let mut expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    expected.push((EMBEDDINGS.into(), vec![header.model.d_w, table_cols]));
    if header.adam.is_some() {
        let shapes: Vec<(String, Vec<usize>)> = expected[..names.len()].to_vec();
        for prefix in ["adam.m", "adam.v"] {
            expected.extend(shapes.iter().map(|(n, s)| (format!("{prefix}.{n}"), s.clone())));
        }
    }
    if header.manifest.len() != expected.len() {
        let missing = expected
            .get(header.manifest.len())
            .map_or("manifest", |(n, _)| n.as_str());
        return Err(corrupt(
            missing,
            format!("manifest lists {} arrays, expected {}", header.manifest.len(), expected.len()),
        ));
    }
    let mut offset = 0;
    let mut arrays = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in header.manifest.iter().zip(&expected) {
        if &entry.name != name {
            return Err(corrupt(&entry.name, format!("expected `{name}` at this position")));
        }
        if &entry.shape != shape {
            return Err(corrupt(name, format!("shape {:?}, config implies {:?}", entry.shape, shape)));
        }
        let len: usize = shape.iter().product();
        if entry.offset != offset || offset + len > data.len() {
            return Err(corrupt(name, format!("array at offset {} overruns the data", entry.offset)));
        }
        arrays.push(Tensor::new(shape.clone(), data[offset..offset + len].to_vec())?);
        offset += len;
    }
    if offset != data.len() {
        return Err(corrupt("data", format!("{} trailing floats", data.len() - offset)));
    }

    let mut arrays = arrays.into_iter();
    for ((_, t), a) in params.tensors_mut().into_iter().zip(arrays.by_ref()) {
        *t = a;
    }
    let matrix = arrays.next().expect("embedding entry checked");
    let provenance: Vec<Provenance> = header
        .provenance
        .chars()
        .map(|c| Provenance::from_code(c).ok_or_else(|| corrupt(EMBEDDINGS, format!("bad provenance code `{c}`"))))
        .collect::<Result<_>>()?;
    let table = EmbeddingTable::new(matrix, provenance).map_err(|e| corrupt(EMBEDDINGS, e.to_string()))?;
    let model = Model::new(header.model, params, table)?;
    let vocab = Vocab::from_entries(header.vocab)?;

    let adam = header.adam.map(|h| {
        let m: Vec<Tensor<f32>> = arrays.by_ref().take(names.len()).collect();
        let v: Vec<Tensor<f32>> = arrays.by_ref().take(names.len()).collect();
        AdamState {
            lr: h.lr,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            t: h.t,
            m,
            v,
        }
    });
    Ok(Checkpoint {
        model,
        vocab,
        train: header.train,
        trainer: header.trainer,
        adam,
    })
}
