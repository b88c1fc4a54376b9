//! Shared checkpoint format: a versioned binary file holding the model
//! config, the vocabulary, and every named parameter tensor. Probe and
//! adapter parameters live in their own name prefixes, so a base
//! checkpoint can be extended in place and saved again.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, VlmModel};
use crate::numerics::{ParamStore, Tensor};
use crate::vocab::Vocab;
use crate::ModelError;

const MAGIC: &[u8; 4] = b"VCPK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(String),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e.to_string())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    vocab: Vec<String>,
    params: Vec<ParamHeader>,
}

pub fn save_model(model: &VlmModel, path: &Path) -> Result<(), CheckpointError> {
    let header = Header {
        version: VERSION,
        model: model.cfg.clone(),
        vocab: (0..model.vocab.len())
            .map(|i| model.vocab.word(i).unwrap().to_string())
            .collect(),
        params: model
            .store
            .iter()
            .map(|(name, t)| ParamHeader {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                trainable: t.requires_grad(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    for (_, t) in model.store.iter() {
        for v in t.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<VlmModel, CheckpointError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)?;
    let header: Header =
        serde_json::from_slice(&header_json).map_err(|e| CheckpointError::Format(e.to_string()))?;

    let mut store = ParamStore::new();
    for p in &header.params {
        let numel: usize = p.shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        file.read_exact(&mut bytes)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tensor = Tensor::from_vec(p.shape.clone(), data)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        tensor.set_requires_grad(p.trainable);
        store
            .add(&p.name, tensor)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
    }
    let mut vocab = Vocab::from_words(header.vocab.iter().skip(3).cloned());
    vocab.reindex();
    Ok(VlmModel::bind(&header.model, store, vocab)?)
}
