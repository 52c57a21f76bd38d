//! Embedding evaluation: cosine, correlations, nearest neighbours and a
//! logistic-regression probe, plus the TSV dataset readers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    cosine_f64(
        &u.iter().map(|&x| x as f64).collect::<Vec<_>>(),
        &v.iter().map(|&x| x as f64).collect::<Vec<_>>(),
    )
}

pub fn cosine_f64(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dims(&[u.len()], &[v.len()], "cosine operands"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateInput("cosine of a zero vector".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::dims(&[x.len()], &[y.len()], "correlation inputs"));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("{} points", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedCorrelation("non-finite value".into()));
    }
    Ok(())
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityDataset {
    pub pairs: Vec<(String, String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub examples: Vec<(String, usize)>,
    pub n_classes: usize,
}

fn format_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// `sentence_a<TAB>sentence_b<TAB>score` per line.
pub fn read_similarity(path: &Path) -> Result<SimilarityDataset> {
    let mut pairs = Vec::new();
    for (n, line) in data_lines(path)? {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(format_error(path, n, format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let score: f64 = fields[2]
            .trim()
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| format_error(path, n, format!("score `{}` is not a finite number", fields[2])))?;
        pairs.push((fields[0].to_string(), fields[1].to_string(), score));
    }
    if pairs.len() < 2 {
        return Err(Error::Ingestion(format!("{} needs at least 2 pairs", path.display())));
    }
    Ok(SimilarityDataset { pairs })
}

/// `label<TAB>sentence` per line; labels are non-negative integers.
pub fn read_probe(path: &Path) -> Result<ProbeDataset> {
    let mut examples = Vec::new();
    for (n, line) in data_lines(path)? {
        let (label, sentence) = line
            .split_once('\t')
            .ok_or_else(|| format_error(path, n, "expected `label<TAB>sentence`"))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| format_error(path, n, format!("label `{label}` is not a class id")))?;
        examples.push((sentence.to_string(), label));
    }
    let n_classes = examples.iter().map(|e| e.1 + 1).max().unwrap_or(0);
    let ds = ProbeDataset { examples, n_classes };
    ds.validate()?;
    Ok(ds)
}

impl ProbeDataset {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Ingestion("a probe needs at least 2 classes".into()));
        }
        let mut seen = vec![false; self.n_classes];
        for &(_, l) in &self.examples {
            if l >= self.n_classes {
                return Err(Error::Ingestion(format!("label {l} outside {} classes", self.n_classes)));
            }
            seen[l] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Ingestion(format!("class {c} has no examples")));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.1).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub pearson: f64,
    pub spearman: f64,
}

/// Scores each pair by the cosine of its embeddings and correlates with gold.
pub fn similarity_eval<E>(dataset: &SimilarityDataset, mut encode: E) -> Result<Correlations>
where
    E: FnMut(&str) -> Result<Vec<f32>>,
{
    let mut predicted = Vec::with_capacity(dataset.pairs.len());
    let mut gold = Vec::with_capacity(dataset.pairs.len());
    for (a, b, score) in &dataset.pairs {
        predicted.push(cosine(&encode(a)?, &encode(b)?)?);
        gold.push(*score);
    }
    Ok(Correlations {
        pearson: pearson(&predicted, &gold)?,
        spearman: spearman(&predicted, &gold)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            epochs: 300,
            lr: 0.5,
        }
    }
}

/// Multinomial logistic regression on standardized fixed features.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    pub n_classes: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[n_classes x (dim + 1)]`, bias last.
    weights: Vec<f64>,
}

impl LogisticProbe {
    /// Full-batch gradient descent from zero weights; deterministic.
    pub fn fit(features: &[Vec<f32>], labels: &[usize], n_classes: usize, config: &ProbeConfig) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::dims(&[features.len()], &[labels.len()], "probe features vs labels"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Ingestion(format!("label {l} outside {n_classes} classes")));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::InvalidDimension("probe features have mixed widths".into()));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, &x) in mean.iter_mut().zip(f) {
                *m += x as f64 / n;
            }
        }
        let mut var = vec![0.0; dim];
        for f in features {
            for ((v, &x), m) in var.iter_mut().zip(f).zip(&mean) {
                *v += (x as f64 - m).powi(2) / n;
            }
        }
        let scale: Vec<f64> = var.iter().map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        let mut probe = Self {
            n_classes,
            mean,
            scale,
            weights: vec![0.0; n_classes * (dim + 1)],
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
        let width = dim + 1;
        let mut grad = vec![0.0; probe.weights.len()];
        for _ in 0..config.epochs {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (x, &y) in xs.iter().zip(labels) {
                let p = probe.probabilities_std(x);
                for c in 0..n_classes {
                    let d = (p[c] - if c == y { 1.0 } else { 0.0 }) / n;
                    let g = &mut grad[c * width..(c + 1) * width];
                    for (gi, xi) in g.iter_mut().zip(x) {
                        *gi += d * xi;
                    }
                    g[dim] += d;
                }
            }
            for c in 0..n_classes {
                for j in 0..dim {
                    grad[c * width + j] += config.l2 * probe.weights[c * width + j];
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                *w -= config.lr * g;
            }
        }
        Ok(probe)
    }

    fn standardize(&self, f: &[f32]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((&x, m), s)| (x as f64 - m) * s)
            .collect()
    }

    fn probabilities_std(&self, x: &[f64]) -> Vec<f64> {
        let width = x.len() + 1;
        let logits: Vec<f64> = (0..self.n_classes)
            .map(|c| {
                let w = &self.weights[c * width..(c + 1) * width];
                w[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[x.len()]
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / z).collect()
    }

    pub fn predict(&self, f: &[f32]) -> usize {
        let p = self.probabilities_std(&self.standardize(f));
        crate::numerics::argmax(&p)
    }

    pub fn accuracy(&self, features: &[Vec<f32>], labels: &[usize]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &l)| self.predict(f) == l)
            .count();
        hits as f64 / features.len() as f64
    }
}

/// Fits on `train`, returns accuracy on `test`.
pub fn probe_eval<E>(
    train: &ProbeDataset,
    test: &ProbeDataset,
    mut encode: E,
    config: &ProbeConfig,
) -> Result<f64>
where
    E: FnMut(&str) -> Result<Vec<f32>>,
{
    train.validate()?;
    if test.n_classes > train.n_classes {
        return Err(Error::Ingestion(format!(
            "test set has {} classes, train set {}",
            test.n_classes, train.n_classes
        )));
    }
    let xs = train.examples.iter().map(|(s, _)| encode(s)).collect::<Result<Vec<_>>>()?;
    let probe = LogisticProbe::fit(&xs, &train.labels(), train.n_classes, config)?;
    let ts = test.examples.iter().map(|(s, _)| encode(s)).collect::<Result<Vec<_>>>()?;
    Ok(probe.accuracy(&ts, &test.labels()))
}

/// Top `k` corpus rows by cosine to `query`, ties broken by lower index.
pub fn nearest_neighbors(query: &[f32], corpus: &[Vec<f32>], k: usize) -> Result<Vec<(usize, f64)>> {
    if corpus.is_empty() {
        return Err(Error::Ingestion("nearest-neighbour corpus is empty".into()));
    }
    if k > corpus.len() {
        return Err(Error::Range {
            index: k,
            limit: corpus.len(),
            context: "k exceeds corpus size",
        });
    }
    let mut scored = corpus
        .iter()
        .enumerate()
        .map(|(i, c)| Ok((i, cosine(query, c)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// One line of evaluation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: String,
    pub metric: String,
    pub value: f64,
}
