//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "EWAC" | version: u32 | config_len: u64 | config: TOML text
//! records (count given in the header) until EOF:
//!   name_len: u32 | name | dtype: u8 (0 = f64, 1 = f32) | rank: u8 | dims: u64 × rank | payload
//! ```
//!
//! The TOML header holds the model config, routed-layer hyperparameters,
//! counters, the record count, the run generator state, provenance notes and optionally the
//! training config.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{MoeMode, Routing};
use crate::tensor::Tensor;
use crate::train::config::TrainConfig;
use crate::vit::{Model, ViTConfig};
use crate::Rng;

pub const MAGIC: &[u8; 4] = b"EWAC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

/// Serializable state of a [`Rng`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, hex.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<Rng> {
        let bad = || Error::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Counters {
    step: u64,
    epoch: u64,
    /// Number of parameter records that follow the header.
    records: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rng: Option<RngState>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    provenance: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ViTConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    routed: Option<MoeMode>,
    checkpoint: Counters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
}

/// Named parameters plus the metadata needed to rebuild a [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ViTConfig,
    /// Hyperparameters of routed MoE layers, when there are any.
    pub routed: Option<MoeMode>,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub epoch: u64,
    pub rng: Option<RngState>,
    pub provenance: Vec<String>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let routed = model.moe_layers().find_map(|l| match &l.routing {
            Routing::TopK { .. } => Some(l.mode()),
            Routing::Rup => None,
        });
        Self {
            model: model.config.clone(),
            routed,
            train: None,
            step: 0,
            epoch: 0,
            rng: None,
            provenance: Vec::new(),
            params: model
                .params()
                .into_iter()
                .map(|(n, t)| (n, t.detached()))
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::from_named(&self.model, self.params.clone(), self.routed.as_ref())
    }

    /// Whether any parameter belongs to a MoE layer.
    pub fn is_moe(&self) -> bool {
        self.params.iter().any(|(n, _)| n.contains(".moe."))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn header_text(&self) -> Result<String> {
        let h = Header {
            model: self.model.clone(),
            routed: self.routed.clone(),
            checkpoint: Counters {
                step: self.step,
                epoch: self.epoch,
                records: self.params.len() as u64,
                rng: self.rng.clone(),
                provenance: self.provenance.clone(),
            },
            train: self.train.clone(),
        };
        toml::to_string(&h).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header_text()?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (name, t) in &self.params {
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Checkpoint(format!("{name} has rank {}", t.rank())))?;
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.err_at(0, format!("bad magic {magic:?}, expected \"EWAC\"")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.err_at(4, format!("unsupported format version {version}")));
        }
        let len = r.u64("config length")? as usize;
        let config_at = r.pos;
        let text = std::str::from_utf8(r.take(len, "config text")?)
            .map_err(|e| r.err_at(config_at + e.valid_up_to(), "config text is not UTF-8".into()))?;
        let header: Header = toml::from_str(text)
            .map_err(|e| r.err_at(config_at, format!("config text: {e}")))?;
        let mut params = Vec::new();
        while r.pos < bytes.len() {
            let at = r.pos;
            let n = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| r.err_at(at + 4, "parameter name is not UTF-8".into()))?
                .to_string();
            let dtype_at = r.pos;
            let dtype = match r.take(1, "dtype")?[0] {
                0 => DType::F64,
                1 => DType::F32,
                t => return Err(r.err_at(dtype_at, format!("unknown dtype tag {t}"))),
            };
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let count: usize = shape.iter().product();
            let width = if dtype == DType::F64 { 8 } else { 4 };
            let payload_at = r.pos;
            let raw = r.take(count * width, "payload")?;
            let data: Vec<f64> = match dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            let t = Tensor::new(shape, data)
                .map_err(|e| r.err_at(payload_at, format!("record {name}: {e}")))?;
            params.push((name, t));
        }
        if params.len() as u64 != header.checkpoint.records {
            return Err(r.err_at(
                bytes.len(),
                format!(
                    "truncated: header declares {} records, found {}",
                    header.checkpoint.records,
                    params.len()
                ),
            ));
        }
        Ok(Self {
            model: header.model,
            routed: header.routed,
            train: header.train,
            step: header.checkpoint.step,
            epoch: header.checkpoint.epoch,
            rng: header.checkpoint.rng,
            provenance: header.checkpoint.provenance,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, message: String) -> Error {
        Error::Parse {
            offset: offset as u64,
            message,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err_at(
                self.bytes.len(),
                format!("truncated {what}: {n} bytes needed at offset {}", self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ewa::{build_ewa_model, Placement};

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            d_model: 8,
            n_heads: 2,
            depth: 2,
            mlp_ratio: 2,
            n_classes: 3,
            dropout: 0.0,
            stochastic_depth: 0.0,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = Rng::seed_from_u64(0);
        let model = build_ewa_model(&tiny(), Placement::Every2, 3, &MoeMode::top1(), &mut rng).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.step = 17;
        ck.epoch = 2;
        ck.rng = Some(RngState::capture(&rng));
        ck.provenance.push("test".into());
        ck.train = Some(TrainConfig::desk());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.to_model().unwrap(), model);
        assert_eq!(&bytes[..4], b"EWAC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn rng_state_resumes_stream() {
        use rand::Rng as _;
        let mut a = Rng::seed_from_u64(5);
        let _: u64 = a.random();
        let mut b = RngState::capture(&a).restore().unwrap();
        for _ in 0..10 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn f32_records_load() {
        let mut ck = Checkpoint::from_model(&Model::new_dense(&tiny(), &mut Rng::seed_from_u64(1)).unwrap());
        ck.params.push(("extra".into(), Tensor::zeros(vec![2])));
        let mut bytes = ck.to_bytes().unwrap();
        // rewrite the trailing f64 record as f32
        bytes.truncate(bytes.len() - 16);
        let dtype_at = bytes.len() - 8 - 1 - 1;
        bytes[dtype_at] = 1;
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.get("extra").unwrap().data(), &[1.5, -2.0]);
        assert!(back.to_model().is_err());
    }

    #[test]
    fn malformed_inputs() {
        let ck = Checkpoint::from_model(&Model::new_dense(&tiny(), &mut Rng::seed_from_u64(1)).unwrap());
        let bytes = ck.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Parse { offset: 4, .. })));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Parse { .. })));
        // a cut on a record boundary is caught by the record count
        let last = 4 + "head.bias".len() + 2 + 8 + 8 * tiny().n_classes;
        let cut = &bytes[..bytes.len() - last];
        assert!(matches!(
            Checkpoint::from_bytes(cut),
            Err(Error::Parse { ref message, .. }) if message.contains("records")
        ));
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut bad = bytes.clone();
        let dtype_at = 16 + header_len + 4 + "patch_embed.weight".len();
        bad[dtype_at] = 7;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Parse { offset, .. }) if offset as usize == dtype_at
        ));
    }
}
