//! Binary parameter checkpoints with per-tensor integrity hashes.
//!
//! Layout (little endian): the 8-byte magic `VLSCKPT\x01`, a `u32` tensor
//! count, then per tensor a `u32` name length, the UTF-8 name, `u32` rows,
//! `u32` cols, the 32-byte SHA-256 of the raw data bytes, and the data as
//! `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::ParamStore;
use crate::model::{Model, ModelConfig, ModelError};
use crate::tensor::Matrix;
use crate::textproc::{TextError, Vocabulary};

pub const MAGIC: &[u8; 8] = b"VLSCKPT\x01";
pub const PARAMS_FILE: &str = "params.bin";
pub const CONFIG_FILE: &str = "model.toml";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("tensor `{name}` failed its integrity check")]
    Corrupt { name: String },
    #[error("tensor `{name}` has shape {found:?} in the checkpoint but the model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("checkpoint has no tensor `{0}` required by the model")]
    Missing(String),
    #[error("checkpoint tensor `{0}` is unknown to the model")]
    Unexpected(String),
    #[error("invalid tensor name in checkpoint")]
    BadName,
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
}

fn tensor_bytes(m: &Matrix<f64>) -> Vec<u8> {
    m.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_params(params: &ParamStore<f64>, mut w: impl Write) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for entry in params.entries() {
        let bytes = tensor_bytes(&entry.value);
        w.write_all(&(entry.name.len() as u32).to_le_bytes())?;
        w.write_all(entry.name.as_bytes())?;
        w.write_all(&(entry.value.rows() as u32).to_le_bytes())?;
        w.write_all(&(entry.value.cols() as u32).to_le_bytes())?;
        w.write_all(&Sha256::digest(&bytes))?;
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::Truncated(what.to_string()),
        _ => CheckpointError::Io(e),
    })?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<usize, CheckpointError> {
    let b = read_exact(r, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
}

/// Reads every tensor in file order, verifying hashes.
pub fn read_tensors(mut r: impl Read) -> Result<Vec<(String, Matrix<f64>)>, CheckpointError> {
    if read_exact(&mut r, 8, "header")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = read_u32(&mut r, "header")?;
    let mut out = Vec::with_capacity(count.min(4096));
    for index in 0..count {
        let name_len = read_u32(&mut r, &format!("tensor #{index}"))?;
        let name = String::from_utf8(read_exact(&mut r, name_len, &format!("tensor #{index}"))?)
            .map_err(|_| CheckpointError::BadName)?;
        let rows = read_u32(&mut r, &name)?;
        let cols = read_u32(&mut r, &name)?;
        let digest = read_exact(&mut r, 32, &name)?;
        let bytes = read_exact(&mut r, rows * cols * 8, &name)?;
        if Sha256::digest(&bytes).as_slice() != digest.as_slice() {
            return Err(CheckpointError::Corrupt { name });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok(out)
}

/// Overwrites `params` with checkpoint tensors; names and shapes must match exactly.
pub fn read_params_into(params: &mut ParamStore<f64>, r: impl Read) -> Result<(), CheckpointError> {
    let tensors = read_tensors(r)?;
    let mut seen = vec![false; params.len()];
    for (name, value) in tensors {
        let id = params.id(&name).ok_or_else(|| CheckpointError::Unexpected(name.clone()))?;
        let slot = &mut params.entries_mut()[id];
        if slot.value.shape() != value.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: slot.value.shape(),
                found: value.shape(),
            });
        }
        slot.value = value;
        seen[id] = true;
    }
    if let Some(id) = seen.iter().position(|&s| !s) {
        return Err(CheckpointError::Missing(params.entries()[id].name.clone()));
    }
    Ok(())
}

/// Writes `params.bin`, `model.toml` and `vocab.txt` into `dir`.
pub fn save_model(dir: &Path, model: &Model<f64>, vocab: &Vocabulary) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    write_params(model.params(), &mut buf)?;
    std::fs::write(dir.join(PARAMS_FILE), buf)?;
    let toml = toml::to_string(model.config()).map_err(|e| CheckpointError::Config(e.to_string()))?;
    std::fs::write(dir.join(CONFIG_FILE), toml)?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    Ok(())
}

pub fn load_config(path: &Path) -> Result<ModelConfig, CheckpointError> {
    let text = std::fs::read_to_string(path)?;
    let config: ModelConfig = toml::from_str(&text).map_err(|e| CheckpointError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_model(dir: &Path) -> Result<(Model<f64>, Vocabulary), CheckpointError> {
    let config = load_config(&dir.join(CONFIG_FILE))?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != config.vocab_size {
        return Err(CheckpointError::Config(format!(
            "vocabulary has {} entries but vocab_size is {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let mut model = Model::new(config, 0)?;
    let file = std::fs::File::open(dir.join(PARAMS_FILE))?;
    read_params_into(model.params_mut(), std::io::BufReader::new(file))?;
    Ok((model, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(seed: u64) -> Model<f64> {
        Model::new(ModelConfig::tiny(10, 3, 5), seed).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model(3);
        let mut buf = Vec::new();
        write_params(m.params(), &mut buf).unwrap();
        let mut other = model(4);
        assert_ne!(other.params(), m.params());
        read_params_into(other.params_mut(), buf.as_slice()).unwrap();
        for (a, b) in m.params().entries().iter().zip(other.params().entries()) {
            let ab: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "{}", a.name);
        }
    }

    #[test]
    fn flipped_byte_names_the_tensor() {
        let m = model(3);
        let mut buf = Vec::new();
        write_params(m.params(), &mut buf).unwrap();
        let last = buf.len() - 3;
        buf[last] ^= 0x40;
        let name = &m.params().entries().last().unwrap().name;
        let err = read_params_into(model(0).params_mut(), buf.as_slice()).unwrap_err();
        assert!(matches!(&err, CheckpointError::Corrupt { name: n } if n == name), "{err}");
    }

    #[test]
    fn shape_mismatch_and_truncation() {
        let mut cfg = ModelConfig::tiny(10, 3, 5);
        cfg.vocab_size = 11;
        let wide = Model::new(cfg, 0).unwrap();
        let mut buf = Vec::new();
        write_params(wide.params(), &mut buf).unwrap();
        let err = read_params_into(model(0).params_mut(), buf.as_slice()).unwrap_err();
        assert!(matches!(err, CheckpointError::ShapeMismatch { .. }), "{err}");
        assert!(err.to_string().contains("caption_head") || err.to_string().contains("word_emb"));

        buf.truncate(buf.len() / 2);
        assert!(matches!(read_tensors(buf.as_slice()), Err(CheckpointError::Truncated(_))));
        assert!(matches!(read_tensors(&b"NOTACKPT"[..]), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::build(&["a b c d e f"], 1);
        let cfg = ModelConfig::tiny(vocab.len(), 3, 5);
        let m = Model::new(cfg, 8).unwrap();
        save_model(dir.path(), &m, &vocab).unwrap();
        let (loaded, v2) = load_model(dir.path()).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(v2, vocab);
    }
}
