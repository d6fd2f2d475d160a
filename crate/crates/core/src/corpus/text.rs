use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Static word-vector dimensionality (GloVe convention).
pub const EMBED_DIM: usize = 300;

pub const PAD_TOKEN: &str = "[PAD]";
pub const START_TOKEN: &str = "[START]";
pub const MASK_TOKEN: &str = "[MASK]";

pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;
pub const MASK_ID: usize = 2;

/// Whitespace + lowercasing tokenizer; nothing fancier is needed because the
/// description tables are written without punctuation.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(|t| t.to_lowercase()).collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive an independent RNG stream from a base seed and a channel tag.
pub fn derive_rng(seed: u64, channel: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(channel)))
}

/// Token → id map with a fixed 300-dim embedding row per id.
///
/// Rows come from a seeded Gaussian (sigma 0.1) keyed by token id, so the
/// table is reproducible regardless of construction order; real vectors can
/// be loaded over the top from a text file.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
    embeddings: Tensor,
    seed: u64,
}

impl Vocabulary {
    /// Build from every token in `sentences`, plus the reserved specials.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>, seed: u64) -> Self {
        let mut id_to_token: Vec<String> =
            vec![PAD_TOKEN.to_string(), START_TOKEN.to_string(), MASK_TOKEN.to_string()];
        let mut token_to_id: BTreeMap<String, usize> =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for s in sentences {
            for tok in tokenize(s) {
                if !token_to_id.contains_key(&tok) {
                    token_to_id.insert(tok.clone(), id_to_token.len());
                    id_to_token.push(tok);
                }
            }
        }
        let embeddings = Self::init_embeddings(id_to_token.len(), seed);
        Vocabulary { token_to_id, id_to_token, embeddings, seed }
    }

    fn init_embeddings(n: usize, seed: u64) -> Tensor {
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut data = Vec::with_capacity(n * EMBED_DIM);
        for id in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed) ^ splitmix64(id as u64 + 1));
            for _ in 0..EMBED_DIM {
                data.push(normal.sample(&mut rng));
            }
        }
        Tensor::new(vec![n, EMBED_DIM], data).expect("embedding shape")
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    /// Token id, with out-of-vocabulary words mapped to [PAD].
    pub fn id_or_pad(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(PAD_ID)
    }

    pub fn embedding_row(&self, id: usize) -> &[f64] {
        let d = EMBED_DIM;
        &self.embeddings.data()[id * d..(id + 1) * d]
    }

    /// Embed a token sequence as [len, 300]. Out-of-vocabulary tokens use the
    /// [PAD] row; the second return value counts them.
    pub fn embed_tokens(&self, tokens: &[String]) -> (Tensor, usize) {
        let mut data = Vec::with_capacity(tokens.len() * EMBED_DIM);
        let mut oov = 0;
        for t in tokens {
            let id = match self.id(t) {
                Some(id) => id,
                None => {
                    oov += 1;
                    PAD_ID
                }
            };
            data.extend_from_slice(self.embedding_row(id));
        }
        (Tensor::new(vec![tokens.len(), EMBED_DIM], data).expect("embed shape"), oov)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_pad(t)).collect()
    }

    /// Load whitespace-separated 300-dim vectors ("word v1 ... v300" per
    /// line), overriding the rows of words present in the vocabulary.
    /// Returns how many rows were replaced.
    pub fn load_vectors(&mut self, path: &Path) -> Result<usize> {
        let text = std::fs::read_to_string(path)?;
        let mut replaced = 0;
        let mut offset = 0u64;
        for line in text.lines() {
            let line_len = line.len() as u64 + 1;
            if line.trim().is_empty() {
                offset += line_len;
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap().to_lowercase();
            let values: Vec<f64> = parts
                .map(|v| {
                    v.parse::<f64>().map_err(|_| Error::Format {
                        offset,
                        detail: format!("bad float '{v}' in vector file"),
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != EMBED_DIM {
                return Err(Error::Format {
                    offset,
                    detail: format!("expected {} components, got {}", EMBED_DIM, values.len()),
                });
            }
            if let Some(id) = self.id(&word) {
                let d = EMBED_DIM;
                self.embeddings.data_mut()[id * d..(id + 1) * d].copy_from_slice(&values);
                replaced += 1;
            }
            offset += line_len;
        }
        Ok(replaced)
    }
}

/// Number of positions masked in a sentence of length `m`.
pub fn mask_count(m: usize) -> usize {
    m.div_ceil(3)
}

/// Select ceil(m/3) mask positions, weighted sampling without replacement
/// with action verbs at twice the weight of other tokens.
pub fn mask_description(tokens: &[String], verbs: &[String], seed: u64) -> Result<Vec<usize>> {
    let m = tokens.len();
    if m < 3 {
        return Err(Error::arg("mask_description", format!("sentence too short: {m} tokens")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let mut weights: Vec<f64> =
        tokens.iter().map(|t| if verbs.iter().any(|v| v == t) { 2.0 } else { 1.0 }).collect();
    let n = mask_count(m);
    let mut picked = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = weights.iter().sum();
        let mut draw = rng.gen::<f64>() * total;
        let mut chosen = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            draw -= w;
            if draw <= 0.0 {
                chosen = Some(i);
                break;
            }
        }
        let idx = chosen.unwrap_or_else(|| {
            weights.iter().rposition(|&w| w > 0.0).expect("at least one unmasked token")
        });
        picked.push(idx);
        weights[idx] = 0.0;
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Replace the selected positions with [MASK].
pub fn apply_mask(tokens: &[String], positions: &[usize]) -> Vec<String> {
    let mut out = tokens.to_vec();
    for &p in positions {
        out[p] = MASK_TOKEN.to_string();
    }
    out
}
