//! Checkpoint files: a JSON header (config, step, tensor manifest) followed by
//! little-endian `f64` parameters in row-major order.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ParamEntry, ToyLm, ToyLmConfig};
use crate::text;

const MAGIC: &[u8; 8] = b"SIUCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ToyLm,
    pub step: usize,
    pub train_log: Vec<TrainLogEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ToyLmConfig,
    step: usize,
    tensors: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn new(model: ToyLm) -> Self {
        Checkpoint { model, step: 0, train_log: Vec::new() }
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        let header = Header {
            config: self.model.config().clone(),
            step: self.step,
            tensors: self.model.layout().entries().to_vec(),
        };
        let head = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(head.len() as u32).to_le_bytes())?;
        w.write_all(&head)?;
        for p in self.model.params() {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut head = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut head)?;
        let header: Header = serde_json::from_slice(&head).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let total: usize = header.tensors.iter().map(ParamEntry::len).sum();
        let mut raw = vec![0u8; total * 8];
        r.read_exact(&mut raw)?;
        let params: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(CheckpointError::Format("non-finite parameter".into()));
        }
        let model = ToyLm::from_params(header.config, params)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        if model.layout().entries() != header.tensors.as_slice() {
            return Err(CheckpointError::Format("tensor manifest does not match config".into()));
        }
        Ok(Checkpoint { model, step: header.step, train_log: Vec::new() })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn save_log(&self, path: &Path) -> io::Result<()> {
        text::write_jsonl(path, &self.train_log)
    }
}
