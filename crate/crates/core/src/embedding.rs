//! Frozen word embeddings, sinusoidal positions and vocabulary expansion.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tensor};
use crate::text::{Vocab, NUM_SPECIALS};

/// Half-width of the uniform range used for vectors not found in the
/// pretrained file.
pub const RANDOM_VECTOR_BOUND: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Pretrained,
    RandomSpecial,
    RandomMissing,
}

impl Provenance {
    pub fn code(self) -> char {
        match self {
            Provenance::Pretrained => 'p',
            Provenance::RandomSpecial => 's',
            Provenance::RandomMissing => 'm',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            'p' => Some(Provenance::Pretrained),
            's' => Some(Provenance::RandomSpecial),
            'm' => Some(Provenance::RandomMissing),
            _ => None,
        }
    }
}

/// Word-embedding matrix `[d_w x V]`, one column per vocabulary id. It never
/// carries a gradient: training does not update it.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<F = f32> {
    matrix: Tensor<F>,
    provenance: Vec<Provenance>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub pretrained: usize,
    pub missing: usize,
    pub duplicates: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExpansionReport {
    pub added: usize,
    pub duplicates: usize,
}

impl<F: Real> EmbeddingTable<F> {
    pub fn new(matrix: Tensor<F>, provenance: Vec<Provenance>) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.shape()[1] != provenance.len() {
            return Err(Error::dims(
                matrix.shape(),
                &[provenance.len()],
                "embedding columns vs provenance tags",
            ));
        }
        Ok(Self { matrix, provenance })
    }

    /// Seeded uniform vectors for every id.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut Rng) -> Self {
        let mut matrix = Tensor::zeros(&[dim, vocab_size]);
        for v in 0..vocab_size {
            for j in 0..dim {
                matrix.data_mut()[j * vocab_size + v] = F::of(rng.symmetric(RANDOM_VECTOR_BOUND));
            }
        }
        let provenance = (0..vocab_size)
            .map(|v| {
                if v < NUM_SPECIALS {
                    Provenance::RandomSpecial
                } else {
                    Provenance::RandomMissing
                }
            })
            .collect();
        Self { matrix, provenance }
    }

    /// Random table overwritten with pretrained vectors for every vocabulary
    /// word found in `vectors`.
    pub fn initialize(
        vocab: &Vocab,
        dim: usize,
        vectors: Option<&Path>,
        rng: &mut Rng,
    ) -> Result<(Self, LoadReport)> {
        let mut table = Self::random(vocab.len(), dim, rng);
        let mut report = LoadReport::default();
        if let Some(path) = vectors {
            let mut seen = HashSet::new();
            read_vectors(path, dim, |word, values| {
                if !seen.insert(word.to_string()) {
                    report.duplicates += 1;
                    return;
                }
                if let Some(id) = vocab.id(word) {
                    if (id as usize) >= NUM_SPECIALS {
                        table.set_column(id as usize, values);
                        table.provenance[id as usize] = Provenance::Pretrained;
                        report.pretrained += 1;
                    }
                }
            })?;
        }
        report.missing = table
            .provenance
            .iter()
            .filter(|&&p| p == Provenance::RandomMissing)
            .count();
        if report.duplicates > 0 {
            log::warn!("{} duplicate words in vector file ignored", report.duplicates);
        }
        Ok((table, report))
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor<F> {
        &self.matrix
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn column(&self, id: usize) -> Vec<F> {
        let v = self.vocab_size();
        (0..self.dim()).map(|j| self.matrix.data()[j * v + id]).collect()
    }

    fn set_column(&mut self, id: usize, values: &[f64]) {
        let v = self.vocab_size();
        for (j, &x) in values.iter().enumerate() {
            self.matrix.data_mut()[j * v + id] = F::of(x);
        }
    }

    pub fn cast<G: Real>(&self) -> EmbeddingTable<G> {
        EmbeddingTable {
            matrix: self.matrix.cast(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Streams a text vector file (`word v_1 ... v_d` per line).
pub fn read_vectors(
    path: &Path,
    dim: usize,
    mut visit: impl FnMut(&str, &[f64]),
) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::with_capacity(dim);
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let format_err = |message: String| Error::Format {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let mut fields = line.split_ascii_whitespace();
        let word = fields.next().unwrap_or_default();
        values.clear();
        for f in fields {
            values.push(
                f.parse::<f64>()
                    .map_err(|_| format_err(format!("`{f}` is not a number")))?,
            );
        }
        if values.len() != dim {
            return Err(format_err(format!(
                "vector for `{word}` has {} components, expected {dim}",
                values.len()
            )));
        }
        visit(word, &values);
    }
    Ok(())
}

/// Appends every file word missing from `vocab`, with its vector. Existing
/// columns are untouched; the appended ids are usable by the encoder only.
pub fn expand_vocab<F: Real>(
    table: &EmbeddingTable<F>,
    vocab: &Vocab,
    vectors: &Path,
) -> Result<(EmbeddingTable<F>, Vocab, ExpansionReport)> {
    if table.vocab_size() != vocab.len() {
        return Err(Error::dims(
            &[table.vocab_size()],
            &[vocab.len()],
            "embedding table vs vocabulary size",
        ));
    }
    let dim = table.dim();
    let mut vocab = vocab.clone();
    let mut new_columns: Vec<f64> = Vec::new();
    let mut seen = HashSet::new();
    let mut report = ExpansionReport::default();
    read_vectors(vectors, dim, |word, values| {
        if !seen.insert(word.to_string()) {
            report.duplicates += 1;
            return;
        }
        if !vocab.contains(word) {
            vocab.push(word, 0);
            new_columns.extend_from_slice(values);
            report.added += 1;
        }
    })?;
    if report.duplicates > 0 {
        log::warn!("{} duplicate words in vector file ignored", report.duplicates);
    }
    let old_v = table.vocab_size();
    let new_v = old_v + report.added;
    let mut matrix = Tensor::zeros(&[dim, new_v]);
    for j in 0..dim {
        let dst = &mut matrix.data_mut()[j * new_v..(j + 1) * new_v];
        dst[..old_v].copy_from_slice(&table.matrix.data()[j * old_v..(j + 1) * old_v]);
        for k in 0..report.added {
            dst[old_v + k] = F::of(new_columns[k * dim + j]);
        }
    }
    let mut provenance = table.provenance.clone();
    provenance.extend(std::iter::repeat_n(Provenance::Pretrained, report.added));
    Ok((EmbeddingTable { matrix, provenance }, vocab, report))
}

/// Sinusoid for position `t` (0-based): even dims `sin(t / 10000^(2i/d))`,
/// odd dims the matching cosine.
pub fn positional_encoding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidDimension(format!(
            "positional encoding dimension must be even and positive, got {dim}"
        )));
    }
    let mut p = vec![0.0; dim];
    for i in 0..dim / 2 {
        let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        p[2 * i] = angle.sin();
        p[2 * i + 1] = angle.cos();
    }
    Ok(p)
}

/// Wavelength `2*pi*10000^(2i/d)` of sinusoid pair `i`.
pub fn positional_wavelength(i: usize, dim: usize) -> f64 {
    2.0 * std::f64::consts::PI * 10000f64.powf(2.0 * i as f64 / dim as f64)
}

/// Precomputed `[max_len x d_w]` positional encodings.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalTable<F = f32> {
    matrix: Tensor<F>,
}

impl<F: Real> PositionalTable<F> {
    pub fn new(max_len: usize, dim: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::InvalidDimension("max_len must be positive".into()));
        }
        let mut data = Vec::with_capacity(max_len * dim);
        for t in 0..max_len {
            data.extend(positional_encoding(t, dim)?.into_iter().map(F::of));
        }
        Ok(Self {
            matrix: Tensor::new(vec![max_len, dim], data)?,
        })
    }

    pub fn max_len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn row(&self, t: usize) -> &[F] {
        self.matrix.row(t)
    }

    pub fn matrix(&self) -> &Tensor<F> {
        &self.matrix
    }
}

/// `x_t = W_e[:, id_t] + P[t]` for a `[items x seq_len]` id grid, returned
/// as `[items*seq_len x d_w]`.
pub fn embed_grid<F: Real>(
    ids: &[u32],
    seq_len: usize,
    table: &EmbeddingTable<F>,
    positions: &PositionalTable<F>,
) -> Result<Tensor<F>> {
    if seq_len == 0 || ids.is_empty() || !ids.len().is_multiple_of(seq_len) {
        return Err(Error::dims(&[ids.len()], &[seq_len], "id grid"));
    }
    if seq_len > positions.max_len() {
        return Err(Error::Range {
            index: seq_len,
            limit: positions.max_len(),
            context: "sequence length exceeds the positional table",
        });
    }
    let dim = table.dim();
    if positions.matrix.cols() != dim {
        return Err(Error::dims(&[dim], &[positions.matrix.cols()], "embedding vs positional width"));
    }
    let v = table.vocab_size();
    let mut out = Tensor::zeros(&[ids.len(), dim]);
    for (r, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= v {
            return Err(Error::Range {
                index: id,
                limit: v,
                context: "token id outside the embedding table",
            });
        }
        let p = positions.row(r % seq_len);
        let row = out.row_mut(r);
        for j in 0..dim {
            row[j] = table.matrix.data()[j * v + id] + p[j];
        }
    }
    Ok(out)
}

pub fn embed_sequence<F: Real>(
    ids: &[u32],
    table: &EmbeddingTable<F>,
    positions: &PositionalTable<F>,
) -> Result<Tensor<F>> {
    embed_grid(ids, ids.len(), table, positions)
}
