//! Checkpoint container.
//!
//! Layout: the magic line `REFCAT-CKPT 1\n`, one JSON header line, then the
//! raw little-endian `f64` payload of every entry in header order. The
//! header records the model config (dims, layer count, patch size), the
//! LoRA config (policy, rank) when adapters are present, and
//! `{name, rows, cols}` per entry. Base entries are named `embed.*`,
//! `text.table`, `layer.{n}.{matrix}`, `head.*`; adapter entries
//! `lora.{target}.down|up`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LoraAdapters, LoraConfig, ModelConfig, ModelParams, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &str = "REFCAT-CKPT 1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    lora: Option<LoraConfig>,
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub lora: Option<LoraAdapters>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload: Vec<&Matrix> = Vec::new();
        let sets =
            std::iter::once(self.params.set()).chain(self.lora.as_ref().map(LoraAdapters::set));
        for set in sets {
            for (name, m) in set.iter() {
                entries.push(Entry {
                    name: name.to_string(),
                    rows: m.rows(),
                    cols: m.cols(),
                });
                payload.push(m);
            }
        }
        let header = Header {
            model: self.params.config().clone(),
            lora: self.lora.as_ref().map(|l| l.config().clone()),
            entries,
        };
        let mut out = MAGIC.as_bytes().to_vec();
        out.extend(serde_json::to_vec(&header).expect("header serialises"));
        out.push(b'\n');
        for m in payload {
            for x in m.data() {
                out.extend(x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_bytes())
            .ok_or_else(|| Error::format(origin, "not a checkpoint (bad magic)"))?;
        let nl = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::format(origin, "truncated header"))?;
        let header: Header =
            serde_json::from_slice(&rest[..nl]).map_err(|e| Error::format(origin, e))?;
        let mut data = &rest[nl + 1..];
        let mut base = ParamSet::new();
        let mut lora = ParamSet::new();
        for e in header.entries {
            let n = e.rows * e.cols;
            if data.len() < n * 8 {
                return Err(Error::format(
                    origin,
                    format!("payload truncated at `{}`", e.name),
                ));
            }
            let values = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            let m = Matrix::from_vec(e.rows, e.cols, values)?;
            if e.name.starts_with("lora.") {
                lora.push(e.name, m);
            } else {
                base.push(e.name, m);
            }
        }
        if !data.is_empty() {
            return Err(Error::format(origin, "trailing bytes after payload"));
        }
        let params = ModelParams::from_set(header.model, base)?;
        let lora = match header.lora {
            Some(cfg) => Some(LoraAdapters::from_set(&params, cfg, lora)?),
            None if lora.is_empty() => None,
            None => {
                return Err(Error::format(
                    origin,
                    "adapter tensors without a LoRA config",
                ))
            }
        };
        Ok(Checkpoint { params, lora })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::{apply_lora, Init, LoraPolicy};

    #[test]
    fn bytes_round_trip_with_and_without_adapters() {
        let params = ModelParams::init(&ModelConfig::gradcheck(), 2, Init::Dense).unwrap();
        let plain = Checkpoint {
            params: params.clone(),
            lora: None,
        };
        let back = Checkpoint::from_bytes(&plain.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, plain);

        let cfg = LoraConfig {
            policy: LoraPolicy::C,
            rank: 3,
            ..LoraConfig::default()
        };
        let adapted = Checkpoint {
            lora: Some(apply_lora(&params, &cfg, 4).unwrap()),
            params,
        };
        let bytes = adapted.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, adapted);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_input_rejected() {
        let params = ModelParams::init(&ModelConfig::gradcheck(), 2, Init::Dense).unwrap();
        let bytes = Checkpoint { params, lora: None }.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(b"nope", Path::new("x")).is_err());
    }
}
