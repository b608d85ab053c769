//! Instance feature extraction over a trainable token-embedding table.
//!
//! Support utterances are concatenated with their class description and
//! pooled by structured self-attention; queries are mean pooled.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcalc::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const RESERVED: [&str; 2] = ["<pad>", "<unk>"];

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token/index mapping with `<pad>` at 0 and `<unk>` at 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Self { index, tokens }
    }
}

impl Vocab {
    /// Builds a vocabulary in first-seen order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::default();
        for t in tokens {
            v.insert(t);
        }
        v
    }

    /// Non-reserved tokens in index order, as written to a vocabulary file.
    pub fn from_tokens(tokens: &[String]) -> Result<Self> {
        let mut v = Self::default();
        for t in tokens {
            if v.index.contains_key(t) {
                return Err(Error::contract(format!("duplicate vocabulary token '{t}'")));
            }
            v.insert(t);
        }
        Ok(v)
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Tokens after the reserved entries.
    pub fn user_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<TokenSeq> {
        TokenSeq::new(words.iter().map(|w| self.get(w.as_ref())).collect())
    }

    /// One token per line; line `k` (0-based) holds index `k + 2`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in self.user_tokens() {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Self::from_tokens(&tokens)
    }
}

/// Nonempty sequence of vocabulary indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::contract("token sequence must be nonempty"));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab: usize,
    /// Hidden size `d`.
    pub hidden: usize,
    /// Attention hidden size `d_a`.
    pub attn_hidden: usize,
    /// Number of attention rows `r`.
    pub attn_rows: usize,
}

/// Parameter handles for the encoder.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub embedding: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

/// Output of [`EncoderParams::encode_support`].
#[derive(Clone, Copy, Debug)]
pub struct SupportEncoding {
    /// Length-`d` feature vector.
    pub features: Var,
    /// `r x (n+m)` attention weights.
    pub attention: Var,
}

pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches")
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, dims: EncoderDims, rng: &mut impl Rng) -> Result<Self> {
        let EncoderDims {
            vocab,
            hidden: d,
            attn_hidden: da,
            attn_rows: r,
        } = dims;
        if d == 0 || da == 0 || r == 0 || vocab <= RESERVED.len() {
            return Err(Error::contract(format!("invalid encoder dims {dims:?}")));
        }
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut table: Vec<f64> = (0..vocab * d).map(|_| normal.sample(rng)).collect();
        table[PAD * d..(PAD + 1) * d].fill(0.0);
        Ok(Self {
            dims,
            embedding: store.add("encoder.embedding", Tensor::matrix(vocab, d, table)?)?,
            w1: store.add("encoder.w1", glorot(da, d, rng))?,
            b1: store.add("encoder.b1", Tensor::zeros(&[da]))?,
            w2: store.add("encoder.w2", glorot(r, da, rng))?,
            b2: store.add("encoder.b2", Tensor::zeros(&[r]))?,
            w3: store.add("encoder.w3", glorot(d, d * r, rng))?,
            b3: store.add("encoder.b3", Tensor::zeros(&[d]))?,
        })
    }

    /// Re-binds handles by name in an existing store.
    pub fn bind(store: &ParamStore, dims: EncoderDims) -> Result<Self> {
        let id = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::contract(format!("missing parameter '{name}'")))
        };
        Ok(Self {
            dims,
            embedding: id("encoder.embedding")?,
            w1: id("encoder.w1")?,
            b1: id("encoder.b1")?,
            w2: id("encoder.w2")?,
            b2: id("encoder.b2")?,
            w3: id("encoder.w3")?,
            b3: id("encoder.b3")?,
        })
    }

    /// `n x d` matrix whose row `t` is the embedding of token `t`.
    pub fn embed_tokens(&self, tape: &mut Tape, store: &ParamStore, tokens: &TokenSeq) -> Result<Var> {
        let size = store.value(self.embedding).rows();
        if let Some(&bad) = tokens.ids().iter().find(|&&i| i >= size) {
            return Err(Error::Vocabulary { index: bad, size });
        }
        let table = tape.param(store, self.embedding)?;
        tape.gather_rows(table, tokens.ids())
    }

    /// Class-aware support feature. `class_desc = None` encodes the utterance
    /// alone (class descriptions disabled).
    pub fn encode_support(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        utterance: &TokenSeq,
        class_desc: Option<&TokenSeq>,
    ) -> Result<SupportEncoding> {
        let hx = self.embed_tokens(tape, store, utterance)?;
        let hs = match class_desc {
            Some(desc) => {
                let hc = self.embed_tokens(tape, store, desc)?;
                tape.concat_rows(&[hx, hc])?
            }
            None => hx,
        };
        let w1 = tape.param(store, self.w1)?;
        let b1 = tape.param(store, self.b1)?;
        let w2 = tape.param(store, self.w2)?;
        let b2 = tape.param(store, self.b2)?;
        let w3 = tape.param(store, self.w3)?;
        let b3 = tape.param(store, self.b3)?;

        // positions x d_a, then positions x r
        let w1t = tape.transpose(w1)?;
        let proj = tape.matmul(hs, w1t)?;
        let proj = tape.add_bias(proj, b1)?;
        let act = tape.tanh(proj)?;
        let w2t = tape.transpose(w2)?;
        let logits = tape.matmul(act, w2t)?;
        let logits = tape.add_bias(logits, b2)?;
        let logits = tape.transpose(logits)?;
        let attention = tape.softmax_rows(logits)?;

        let pooled = tape.matmul(attention, hs)?; // r x d
        let flat = tape.reshape(pooled, &[1, self.dims.attn_rows * self.dims.hidden])?;
        let flat = tape.relu(flat)?;
        let w3t = tape.transpose(w3)?;
        let out = tape.matmul(flat, w3t)?;
        let out = tape.add_bias(out, b3)?;
        let features = tape.reshape(out, &[self.dims.hidden])?;
        Ok(SupportEncoding { features, attention })
    }

    /// Mean of the utterance's token embeddings.
    pub fn encode_query(&self, tape: &mut Tape, store: &ParamStore, utterance: &TokenSeq) -> Result<Var> {
        let hx = self.embed_tokens(tape, store, utterance)?;
        tape.mean_rows(hx)
    }
}
