//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic        10 bytes "NERVECKPT1"
//! version      u32
//! header_len   u32, then a TOML header (config, parcellation, training state)
//! n_tensors    u32
//! per tensor:  u32 name length, UTF-8 name, u32 ndim, u32 dims..., f64 data
//! crc32        u32 over every preceding byte
//! ```
//!
//! Optimizer moments are stored as extra tensors named `adamw.m.<param>` and
//! `adamw.v.<param>` once at least one step has been taken.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MaeConfig, MaeModel};
use crate::error::{Error, Result};
use crate::fc::Parcellation;
use crate::nn::{AdamW, AdamWConfig, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"NERVECKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENT_FIRST: &str = "adamw.m.";
const MOMENT_SECOND: &str = "adamw.v.";

#[derive(Serialize, Deserialize)]
struct Header {
    config: MaeConfig,
    state: State,
    parcellation: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct State {
    epochs_done: usize,
    optimizer_step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model with its optimizer state.
pub fn encode_checkpoint(model: &MaeModel) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config().clone(),
        state: State {
            epochs_done: model.epochs_done,
            optimizer_step: model.optimizer.step_count(),
        },
        parcellation: model.parcellation().assignment().to_vec(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());

    let (first, second) = model.optimizer.moments();
    let n_params = model.store.len();
    let n_tensors = n_params + first.len() + second.len();
    put_u32(&mut out, n_tensors as u32);
    for (name, t) in model.store.named_values() {
        put_tensor(&mut out, name, t);
    }
    let names: Vec<&str> = model.store.named_values().map(|(n, _)| n).collect();
    for (prefix, moments) in [(MOMENT_FIRST, first), (MOMENT_SECOND, second)] {
        for (name, t) in names.iter().zip(moments) {
            put_tensor(&mut out, &format!("{prefix}{name}"), t);
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt("checkpoint ends unexpectedly".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

/// Parses checkpoint bytes into a model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<MaeModel> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(hlen)?).map_err(|_| Error::Corrupt("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    let parcellation = Parcellation::new(header.parcellation)?;
    let mut model = MaeModel::new(header.config, parcellation)?;

    let count = r.u32()? as usize;
    let mut params = Vec::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if name.starts_with(MOMENT_FIRST) {
            first.push(t);
        } else if name.starts_with(MOMENT_SECOND) {
            second.push(t);
        } else {
            params.push((name, t));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes after tensors".into()));
    }
    model.store.load_from(&params).map_err(|e| Error::Corrupt(e.to_string()))?;
    if !first.is_empty() && first.len() != model.store.len() {
        return Err(Error::Corrupt("optimizer moments do not match parameters".into()));
    }
    model.optimizer = AdamW::from_state(
        AdamWConfig {
            weight_decay: model.config().weight_decay,
            ..AdamWConfig::default()
        },
        header.state.optimizer_step,
        first,
        second,
    )
    .map_err(|e| Error::Corrupt(e.to_string()))?;
    model.epochs_done = header.state.epochs_done;
    Ok(model)
}

pub fn save_checkpoint(model: &MaeModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MaeModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks its architecture against `expected`.
pub fn load_checkpoint_with(path: &Path, expected: &MaeConfig) -> Result<MaeModel> {
    let model = load_checkpoint(path)?;
    if let Some(diff) = model.config().architecture_mismatch(expected) {
        return Err(Error::ConfigMismatch(diff));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fc::FcMatrix;
    use crate::mae::{train_until, Pooling};
    use crate::tokenizers::TokenizerKind;

    fn small(kind: TokenizerKind) -> MaeModel {
        let cfg = MaeConfig {
            tokenizer: kind,
            embed_dim: 4,
            encoder_depth: 1,
            encoder_heads: 1,
            decoder_dim: 2,
            decoder_depth: 1,
            decoder_heads: 1,
            epochs: 3,
            warmup_epochs: 1,
            ..MaeConfig::desk()
        };
        MaeModel::new(cfg, Parcellation::contiguous(&[2, 3]).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = small(TokenizerKind::Bilinear);
        let fc = FcMatrix::identity(5);
        let data = vec![model.patches(&fc).unwrap(); 3];
        train_until(&mut model, &data, 2, |_| {}).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.epochs_done(), 2);
        assert_eq!(back.optimizer(), model.optimizer());
        let a: Vec<_> = model.store().named_values().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let b: Vec<_> = back.store().named_values().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert_eq!(a, b);
        let e1 = model.encode_fc(&fc, Pooling::Cls).unwrap();
        let e2 = back.encode_fc(&fc, Pooling::Cls).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_and_truncated_files_are_rejected() {
        let bytes = encode_checkpoint(&small(TokenizerKind::Shared)).unwrap();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Corrupt(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode_checkpoint(&small(TokenizerKind::Shared)).unwrap();
        bytes[10..14].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = small(TokenizerKind::Shared);
        save_checkpoint(&model, &path).unwrap();
        let mut expected = model.config().clone();
        load_checkpoint_with(&path, &expected).unwrap();
        expected.tokenizer = TokenizerKind::Bilinear;
        assert!(matches!(load_checkpoint_with(&path, &expected), Err(Error::ConfigMismatch(_))));
    }
}
