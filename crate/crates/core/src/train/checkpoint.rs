//! Single-file checkpoints: an 8-byte little-endian header length, a JSON
//! header, then raw little-endian f64 blocks (parameters, then first
//! moments, then second moments).

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::OptimizerState;
use crate::diffcalc::{ParamStore, Tensor};
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "relprop-checkpoint";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of the value block from the start of the data section.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngEntry {
    seed: Vec<u8>,
    stream: u64,
    /// u128 kept as a decimal string.
    word_pos: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: TrainConfig,
    vocab: Vec<String>,
    params: Vec<ParamEntry>,
    /// Optimizer step; moments follow the parameters when present.
    optimizer_step: Option<u64>,
    step: u64,
    rng: Option<RngEntry>,
}

/// Everything needed to resume training or evaluate.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
    pub rng: Option<ChaCha8Rng>,
}

fn push_block(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_block(data: &[u8], offset: usize, shape: &[usize], name: &str) -> Result<Tensor> {
    let len: usize = shape.iter().product();
    let end = len.checked_mul(8).and_then(|b| b.checked_add(offset));
    let bytes = end
        .and_then(|e| data.get(offset..e))
        .ok_or_else(|| Error::Corrupt(format!("block for '{name}' runs past the end of the file")))?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape.to_vec(), values)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut params = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            params.push(ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: data.len(),
            });
            push_block(&mut data, &p.value);
        }
        if let Some(opt) = &self.optimizer {
            opt.check(&self.params)?;
            for t in opt.m.iter().chain(&opt.v) {
                push_block(&mut data, t);
            }
        }
        let header = Header {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.user_tokens().to_vec(),
            params,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            step: self.step,
            rng: self.rng.as_ref().map(|r| RngEntry {
                seed: r.get_seed().to_vec(),
                stream: r.get_stream(),
                word_pos: r.get_word_pos().to_string(),
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + data.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt(m.to_string());
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| corrupt("file shorter than the header length field"))?;
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| corrupt("header length overflow"))?;
        let json = 8usize
            .checked_add(header_len)
            .and_then(|end| bytes.get(8..end))
            .ok_or_else(|| corrupt("header runs past the end of the file"))?;
        let raw: serde_json::Value =
            serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
        if raw.get("format").and_then(|f| f.as_str()) != Some(FORMAT_TAG) {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| corrupt("missing version"))?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(Error::Incompatible {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| Error::Corrupt(format!("bad header: {e}")))?;
        let data = &bytes[8 + header_len..];

        let mut params = ParamStore::new();
        let mut end = 0;
        for entry in &header.params {
            let t = read_block(data, entry.offset, &entry.shape, &entry.name)?;
            end = end.max(entry.offset + t.len() * 8);
            params.add(entry.name.clone(), t)?;
        }
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let mut moments = Vec::with_capacity(2 * header.params.len());
                for entry in header.params.iter().chain(&header.params) {
                    let t = read_block(data, end, &entry.shape, &entry.name)?;
                    end += t.len() * 8;
                    moments.push(t);
                }
                let v = moments.split_off(header.params.len());
                Some(OptimizerState { step, m: moments, v })
            }
            None => None,
        };
        if end != data.len() {
            return Err(corrupt("trailing bytes after the last block"));
        }
        let rng = match header.rng {
            Some(r) => {
                let seed: [u8; 32] = r.seed.try_into().map_err(|_| corrupt("rng seed must be 32 bytes"))?;
                let pos: u128 = r.word_pos.parse().map_err(|_| corrupt("bad rng position"))?;
                let mut rng = ChaCha8Rng::from_seed(seed);
                rng.set_stream(r.stream);
                rng.set_word_pos(pos);
                Some(rng)
            }
            None => None,
        };
        Ok(Self {
            config: header.config,
            vocab: Vocab::from_tokens(&header.vocab)?,
            params,
            optimizer,
            step: header.step,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Parameters only, for evaluation.
    pub fn from_model(config: &TrainConfig, model: &Model) -> Self {
        Self {
            config: config.clone(),
            vocab: model.vocab.clone(),
            params: model.store.clone(),
            optimizer: None,
            step: 0,
            rng: None,
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_store(self.config.model(), self.vocab, self.params)
    }

    /// Copies parameter values into an existing model, which must have a
    /// parameter of the same name and shape for every stored one.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        for p in self.params.iter() {
            let id = model
                .store
                .id(&p.name)
                .ok_or_else(|| Error::contract(format!("model has no parameter '{}'", p.name)))?;
            let target = model.store.value_mut(id);
            if target.shape() != p.value.shape() {
                return Err(Error::Shape {
                    name: p.name.clone(),
                    found: p.value.shape().to_vec(),
                    expected: target.shape().to_vec(),
                });
            }
            *target = p.value.clone();
        }
        if self.params.len() != model.store.len() {
            return Err(Error::contract("checkpoint and model parameter counts differ"));
        }
        Ok(())
    }
}
