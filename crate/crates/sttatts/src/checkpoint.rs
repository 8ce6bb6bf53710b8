//! Checkpoint files: an 8-byte magic, a little-endian u64 header length, a
//! JSON header and a binary payload of little-endian tensors. The header
//! records the payload's SHA-256 so truncated or altered files are refused.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sttatts_core::optim::AdamState;
use sttatts_core::textproc::Vocab;
use sttatts_core::train::{StepState, TrainSchedule};
use sttatts_core::{Model, ModelConfig, Tensor};

use crate::audio::MelConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"STTCKPT1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    /// Bit-exact; required for resumed runs to match uninterrupted ones.
    F64,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Optimizer and progress state of an unfinished run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub schedule: TrainSchedule,
    pub optimizer: AdamState,
    pub step: StepState,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    pub mel: MelConfig,
    pub precision: Precision,
    pub training: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    precision: Precision,
    model: ModelConfig,
    vocab: String,
    mel: MelConfig,
    schedule: Option<TrainSchedule>,
    step: Option<StepState>,
    adam_steps: Option<Vec<u64>>,
    tensors: Vec<TensorEntry>,
    payload_len: usize,
    payload_sha256: String,
}

/// SHA-256 over the exact bits of every parameter, in registry order.
pub fn param_hash(model: &Model) -> String {
    let mut h = Sha256::new();
    for (_, p) in model.params.iter() {
        h.update(p.name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn push_tensor(payload: &mut Vec<u8>, entries: &mut Vec<TensorEntry>, name: String, t: &Tensor, precision: Precision) {
    for &v in t.data() {
        match precision {
            Precision::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => payload.extend_from_slice(&v.to_le_bytes()),
        }
    }
    entries.push(TensorEntry { name, rows: t.rows(), cols: t.cols() });
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let p = ckpt.precision;
    for (_, param) in ckpt.model.params.iter() {
        push_tensor(&mut payload, &mut tensors, param.name.clone(), &param.value, p);
    }
    let (mean, std) = ckpt.model.mel_stats();
    // Normalization buffers are always stored at full precision.
    push_tensor(&mut payload, &mut tensors, "mel_stats.mean".into(), &Tensor::row_vector(mean.to_vec()), Precision::F64);
    push_tensor(&mut payload, &mut tensors, "mel_stats.std".into(), &Tensor::row_vector(std.to_vec()), Precision::F64);
    if let Some(tr) = &ckpt.training {
        for (id, param) in ckpt.model.params.iter() {
            let i = id.index();
            if let (Some(m), Some(v)) = (&tr.optimizer.m[i], &tr.optimizer.v[i]) {
                push_tensor(&mut payload, &mut tensors, format!("adam.m.{}", param.name), m, p);
                push_tensor(&mut payload, &mut tensors, format!("adam.v.{}", param.name), v, p);
            }
        }
    }
    let header = Header {
        precision: p,
        model: ckpt.model.config().clone(),
        vocab: ckpt.vocab.to_file_string(),
        mel: ckpt.mel.clone(),
        schedule: ckpt.training.as_ref().map(|t| t.schedule.clone()),
        step: ckpt.training.as_ref().map(|t| t.step.clone()),
        adam_steps: ckpt.training.as_ref().map(|t| t.optimizer.steps.clone()),
        tensors,
        payload_len: payload.len(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let tmp = path.with_extension("stt.tmp");
    fs::write(&tmp, &bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let corrupt = |detail: String| Error::Checkpoint { path: PathBuf::from(path), detail };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("header: {e}")))?;
    let payload = &body[hlen..];
    if payload.len() != header.payload_len || hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch".into()));
    }
    let vocab = Vocab::from_file_string(&header.vocab)?;
    let mut model = Model::new(header.model.clone(), 0)?;
    let n = model.params.len();
    let mut seen = vec![false; n];
    let mut optimizer = AdamState::new(n);
    let mut mel_mean = None;
    let mut mel_std = None;
    let mut offset = 0;
    for e in &header.tensors {
        let full = e.name.starts_with("mel_stats.");
        let width = if full { 8 } else { header.precision.width() };
        let len = e.rows * e.cols * width;
        let raw = payload.get(offset..offset + len).ok_or_else(|| corrupt(format!("tensor {} overruns the payload", e.name)))?;
        offset += len;
        let data: Vec<f64> = if width == 8 {
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        } else {
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        };
        let t = Tensor::from_vec(e.rows, e.cols, data)?;
        let (slot, name) = match e.name.split_once('.') {
            Some(("adam", rest)) => match rest.split_once('.') {
                Some(("m", name)) => (Some(0), name),
                Some(("v", name)) => (Some(1), name),
                _ => return Err(corrupt(format!("unknown tensor {}", e.name))),
            },
            _ => (None, e.name.as_str()),
        };
        match (slot, name) {
            (None, "mel_stats.mean") => mel_mean = Some(t.into_data()),
            (None, "mel_stats.std") => mel_std = Some(t.into_data()),
            (slot, name) => {
                let id = model.params.find(name).ok_or_else(|| corrupt(format!("unknown parameter {name}")))?;
                let dst = model.params.get_mut(id);
                if dst.shape() != t.shape() {
                    return Err(corrupt(format!("{name}: shape {:?}, expected {:?}", t.shape(), dst.shape())));
                }
                match slot {
                    None => {
                        *dst = t;
                        seen[id.index()] = true;
                    }
                    Some(0) => optimizer.m[id.index()] = Some(t),
                    Some(_) => optimizer.v[id.index()] = Some(t),
                }
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = model.params.iter().nth(i).map(|(_, p)| p.name.clone()).unwrap_or_default();
        return Err(corrupt(format!("parameter {name} is missing")));
    }
    if let (Some(mean), Some(std)) = (mel_mean, mel_std) {
        model.set_mel_stats(mean, std)?;
    }
    let training = match (header.schedule, header.step, header.adam_steps) {
        (Some(schedule), Some(step), Some(steps)) if steps.len() == n => {
            optimizer.steps = steps;
            Some(TrainingState { schedule, optimizer, step })
        }
        (None, None, None) => None,
        _ => return Err(corrupt("incomplete training state".into())),
    };
    Ok(Checkpoint { model, vocab, mel: header.mel, precision: header.precision, training })
}

#[cfg(test)]
mod tests;
