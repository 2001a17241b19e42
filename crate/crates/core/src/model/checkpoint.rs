//! Self-describing JSON checkpoints. Tensors are stored as base64 of their
//! little-endian bytes, so saving and loading is bitwise exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::input::Vocab;
use super::params::{TaggerConfig, TaggerParams};
use super::{ModelError, Tagger};
use crate::dialogue::TokenizationMode;
use crate::scalar::Scalar;

pub const FORMAT: &str = "rewrite-tagger";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    dtype: String,
    mode: TokenizationMode,
    config: TaggerConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorRecord>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl<T: Scalar> Tagger<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self
            .params
            .named()
            .into_iter()
            .map(|(name, t)| {
                let mut bytes = Vec::with_capacity(t.len() * T::BYTES);
                t.data.iter().for_each(|v| v.write_le(&mut bytes));
                TensorRecord { name, shape: t.shape.clone(), data: STANDARD.encode(bytes) }
            })
            .collect();
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            dtype: T::DTYPE.into(),
            mode: self.mode,
            config: self.params.config,
            vocab: self.vocab.tokens().to_vec(),
            tensors,
        };
        serde_json::to_vec(&file).expect("checkpoint serializes")
    }

    /// Parses a checkpoint. A checkpoint stored in the other precision is
    /// converted elementwise.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let file: CheckpointFile = serde_json::from_slice(bytes).map_err(|e| bad(format!("not a checkpoint: {e}")))?;
        if file.format != FORMAT {
            return Err(bad(format!("unexpected format `{}`", file.format)));
        }
        if file.version != VERSION {
            return Err(bad(format!("unsupported version {}", file.version)));
        }
        file.config.validate().map_err(bad)?;
        if file.vocab.len() != file.config.vocab_size {
            return Err(bad(format!("vocabulary has {} entries, config says {}", file.vocab.len(), file.config.vocab_size)));
        }
        let decode: fn(&[u8]) -> T = match file.dtype.as_str() {
            d if d == T::DTYPE => T::read_le,
            "f32" => |b| T::from_f64_lossy(f32::read_le(b) as f64),
            "f64" => |b| T::from_f64_lossy(f64::read_le(b)),
            other => return Err(bad(format!("unknown dtype `{other}`"))),
        };
        let width = if file.dtype == "f32" { 4 } else { 8 };

        let mut params = TaggerParams::<T>::init(file.config, 0);
        let slots = params.named_mut();
        if slots.len() != file.tensors.len() {
            return Err(bad(format!("expected {} tensors, found {}", slots.len(), file.tensors.len())));
        }
        for ((name, slot), rec) in slots.into_iter().zip(&file.tensors) {
            if rec.name != name || rec.shape != slot.shape {
                return Err(bad(format!("tensor `{}` {:?} does not match expected `{name}` {:?}", rec.name, rec.shape, slot.shape)));
            }
            let raw = STANDARD.decode(&rec.data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
            if raw.len() != slot.len() * width {
                return Err(bad(format!("tensor `{name}` has {} bytes, expected {}", raw.len(), slot.len() * width)));
            }
            slot.data = raw.chunks_exact(width).map(decode).collect();
        }
        Ok(Tagger { mode: file.mode, vocab: Vocab::from_tokens(file.vocab), params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::winter_weather_dialogue;

    fn tagger() -> Tagger<f32> {
        let vocab = Vocab::build([&winter_weather_dialogue()]);
        let mut config = TaggerConfig::new(vocab.len(), 8, 2);
        config.max_positions = 40;
        Tagger { mode: TokenizationMode::Word, vocab, params: TaggerParams::init(config, 11) }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let t = tagger();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        t.save(&path).unwrap();
        let back = Tagger::<f32>::load(&path).unwrap();
        assert_eq!(back, t);
        for ((_, a), (_, b)) in back.params.named().into_iter().zip(t.params.named()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.vocab.id("冬天"), t.vocab.id("冬天"));
        assert_eq!(back.to_bytes(), t.to_bytes());
    }

    #[test]
    fn precision_conversion_on_load() {
        let t = tagger();
        let wide = Tagger::<f64>::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(wide.params.heads.start.v.data[0], t.params.heads.start.v.data[0] as f64);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        assert!(matches!(Tagger::<f32>::from_bytes(b"{}"), Err(ModelError::Checkpoint(_))));
        let mut file: serde_json::Value = serde_json::from_slice(&tagger().to_bytes()).unwrap();
        file["tensors"][0]["data"] = "AAAA".into();
        let bytes = serde_json::to_vec(&file).unwrap();
        assert!(matches!(Tagger::<f32>::from_bytes(&bytes), Err(ModelError::Checkpoint(_))));
        assert!(Tagger::<f32>::load("/nonexistent/model.json").is_err());
    }
}
