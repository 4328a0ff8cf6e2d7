//! Skip-gram word2vec with negative sampling for the categorical geology text.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::records::tokenize;
use super::PreprocessError;
use crate::tensor::seeded_rng;

pub const NEGATIVE_SAMPLES: usize = 5;
const START_LR: f64 = 0.025;
const MIN_LR_FRACTION: f64 = 1e-4;

/// Token vectors learned by [`train_word2vec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub vocab: BTreeMap<String, usize>,
    pub vectors: Vec<Vec<f64>>,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn vector(&self, token: &str) -> Option<&[f64]> {
        self.vocab.get(token).map(|&i| self.vectors[i].as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Word2VecConfig {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Word2VecConfig {
    fn default() -> Self {
        Self {
            dim: 4,
            window: 2,
            epochs: 50,
            seed: 7,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Trains skip-gram vectors with [`NEGATIVE_SAMPLES`] negatives drawn from
/// the unigram distribution raised to 3/4. The vocabulary is indexed in
/// sorted token order, so the result depends only on the corpus and seed.
pub fn train_word2vec(
    corpus: &[Vec<String>],
    cfg: &Word2VecConfig,
) -> Result<TextEmbedding, PreprocessError> {
    let mut vocab = BTreeMap::new();
    for tok in corpus.iter().flatten() {
        vocab.entry(tok.clone()).or_insert(0usize);
    }
    if vocab.is_empty() {
        return Err(PreprocessError::EmptyCorpus);
    }
    if cfg.dim == 0 || cfg.window == 0 || cfg.epochs == 0 {
        return Err(PreprocessError::InvalidConfig(
            "word2vec dim, window and epochs must be positive".into(),
        ));
    }
    for (i, v) in vocab.values_mut().enumerate() {
        *v = i;
    }
    let n_vocab = vocab.len();
    let sentences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| s.iter().map(|t| vocab[t]).collect())
        .collect();

    let mut counts = vec![0.0f64; n_vocab];
    sentences.iter().flatten().for_each(|&i| counts[i] += 1.0);
    let mut cumulative = Vec::with_capacity(n_vocab);
    let mut acc = 0.0;
    for c in &counts {
        acc += c.powf(0.75);
        cumulative.push(acc);
    }

    let mut rng = seeded_rng(cfg.seed);
    let dim = cfg.dim;
    let mut input: Vec<Vec<f64>> = (0..n_vocab)
        .map(|_| {
            (0..dim)
                .map(|_| rng.gen_range(-0.5..0.5) / dim as f64)
                .collect()
        })
        .collect();
    let mut output = vec![vec![0.0; dim]; n_vocab];

    let total_pairs: usize = sentences
        .iter()
        .map(|s| {
            (0..s.len())
                .map(|i| {
                    let lo = i.saturating_sub(cfg.window);
                    let hi = (i + cfg.window + 1).min(s.len());
                    hi - lo - 1
                })
                .sum::<usize>()
        })
        .sum::<usize>()
        * cfg.epochs;
    let mut seen = 0usize;
    let mut grad_in = vec![0.0; dim];

    for _ in 0..cfg.epochs {
        for s in &sentences {
            for (i, &center) in s.iter().enumerate() {
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window + 1).min(s.len());
                for (j, &context) in s.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let progress = seen as f64 / total_pairs.max(1) as f64;
                    let lr = START_LR * (1.0 - progress).max(MIN_LR_FRACTION);
                    seen += 1;
                    grad_in.fill(0.0);
                    let mut update = |target: usize, label: f64, grad_in: &mut [f64]| {
                        let dot: f64 = input[center]
                            .iter()
                            .zip(&output[target])
                            .map(|(a, b)| a * b)
                            .sum();
                        let g = lr * (label - sigmoid(dot));
                        for k in 0..dim {
                            grad_in[k] += g * output[target][k];
                            output[target][k] += g * input[center][k];
                        }
                    };
                    update(context, 1.0, &mut grad_in);
                    for _ in 0..NEGATIVE_SAMPLES {
                        let r = rng.gen::<f64>() * acc;
                        let neg = cumulative.partition_point(|&c| c <= r).min(n_vocab - 1);
                        if neg == context {
                            continue;
                        }
                        update(neg, 0.0, &mut grad_in);
                    }
                    input[center]
                        .iter_mut()
                        .zip(&grad_in)
                        .for_each(|(w, g)| *w += g);
                }
            }
        }
    }
    Ok(TextEmbedding {
        vocab,
        vectors: input,
    })
}

/// Mean of the token vectors of `text`; tokens outside the vocabulary
/// count as zero vectors.
pub fn embed_category(text: &str, emb: &TextEmbedding) -> Vec<f64> {
    let tokens = tokenize(text);
    let mut out = vec![0.0; emb.dim()];
    if tokens.is_empty() {
        return out;
    }
    for t in &tokens {
        if let Some(v) = emb.vector(t) {
            out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
        }
    }
    let n = tokens.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(f64::MIN_POSITIVE)
}
