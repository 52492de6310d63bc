//! Checkpoint format: a little-endian u32 header length, a JSON header
//! (version, config, vocab hash, tensor table), then all tensor data as
//! little-endian f32 in registry order.

use super::encoder::{EncoderConfig, ParamIndex, PredictorParams, TensorSpec};
use super::PredictorError;
use crate::vocab;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    tool_version: String,
    vocab_sha256: String,
    config: EncoderConfig,
    tensors: Vec<TensorSpec>,
}

pub fn save_checkpoint(params: &PredictorParams, path: &Path) -> Result<(), PredictorError> {
    let header = Header {
        format_version: FORMAT_VERSION,
        tool_version: crate::VERSION.to_string(),
        vocab_sha256: params.vocab_hash.clone(),
        config: params.cfg,
        tensors: params.index.tensors().to_vec(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serialization");
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for &v in &params.flat {
        file.write_all(&(v as f32).to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PredictorParams, PredictorError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_buf = [0u8; 4];
    file.read_exact(&mut len_buf)
        .map_err(|_| PredictorError::Checkpoint("truncated header length".into()))?;
    let header_len = u32::from_le_bytes(len_buf) as usize;
    if header_len > 1 << 20 {
        return Err(PredictorError::Checkpoint(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| PredictorError::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| PredictorError::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(PredictorError::Checkpoint(format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let current_hash = vocab::vocab_hash();
    if header.vocab_sha256 != current_hash {
        return Err(PredictorError::Checkpoint(format!(
            "vocabulary hash mismatch: checkpoint {}, runtime {}",
            header.vocab_sha256, current_hash
        )));
    }
    let index = ParamIndex::build(&header.config);
    if index.tensors() != &header.tensors[..] {
        return Err(PredictorError::Checkpoint(
            "tensor table does not match this build's parameter registry".into(),
        ));
    }
    let mut flat = vec![0.0f64; index.total()];
    let mut buf = [0u8; 4];
    for v in flat.iter_mut() {
        file.read_exact(&mut buf)
            .map_err(|_| PredictorError::Checkpoint("truncated tensor data".into()))?;
        let x = f32::from_le_bytes(buf);
        if !x.is_finite() {
            return Err(PredictorError::Checkpoint("non-finite tensor value".into()));
        }
        *v = x as f64;
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(PredictorError::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok(PredictorParams {
        cfg: header.config,
        index,
        flat,
        vocab_hash: header.vocab_sha256,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = PredictorParams::init(EncoderConfig::default(), 5);
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.cfg, params.cfg);
        assert_eq!(loaded.flat.len(), params.flat.len());
        for (a, b) in params.flat.iter().zip(&loaded.flat) {
            assert_eq!(*a as f32, *b as f32);
        }
        // Save/load/save must be byte-identical.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = PredictorParams::init(EncoderConfig::default(), 5);
        save_checkpoint(&params, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() - 10];
        let tpath = dir.path().join("trunc.ckpt");
        std::fs::write(&tpath, truncated).unwrap();
        assert!(matches!(load_checkpoint(&tpath), Err(PredictorError::Checkpoint(_))));

        let mut vocab_swapped = bytes.clone();
        // Flip a byte inside the vocab hash field of the JSON header.
        let needle = b"vocab_sha256";
        let pos = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let hex_start = pos + needle.len() + 3;
        vocab_swapped[hex_start] =
            if vocab_swapped[hex_start] == b'0' { b'1' } else { b'0' };
        let vpath = dir.path().join("vocab.ckpt");
        std::fs::write(&vpath, vocab_swapped).unwrap();
        match load_checkpoint(&vpath) {
            Err(PredictorError::Checkpoint(msg)) => {
                assert!(msg.contains("vocabulary hash") || msg.contains("bad header"), "{msg}")
            }
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }
}
