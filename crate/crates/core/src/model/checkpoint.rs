//! Checkpoint files.
//!
//! Layout: the magic `LCKP`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then every tensor as
//! little-endian `f64` values in header order (base section first, then the
//! optional conv-head section). Saving a loaded checkpoint reproduces the
//! input byte for byte.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::weights::ModelWeights;
use crate::compressor::{ConvHead, ReluPlacement};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;

pub const MAGIC: &[u8; 4] = b"LCKP";
pub const FORMAT_VERSION: u32 = 1;

/// One conv head per layer, all with the same geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvHeadSet {
    pub heads: Vec<ConvHead>,
}

impl ConvHeadSet {
    pub fn init<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        capacity: usize,
        kernel_size: usize,
        relu: ReluPlacement,
        rng: &mut R,
    ) -> Result<Self> {
        let heads = (0..cfg.n_layers)
            .map(|l| ConvHead::init(cfg.d_model, capacity, kernel_size, relu, l, rng))
            .collect::<Result<_>>()?;
        Ok(Self { heads })
    }

    pub fn capacity(&self) -> usize {
        self.heads.first().map_or(0, |h| h.capacity())
    }

    pub fn kernel_size(&self) -> usize {
        self.heads.first().map_or(0, |h| h.kernel_size)
    }

    pub fn relu(&self) -> ReluPlacement {
        self.heads.first().map_or_else(ReluPlacement::default, |h| h.relu)
    }

    pub fn n_params(&self) -> usize {
        self.heads.iter().map(|h| h.n_params()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub conv_heads: Option<ConvHeadSet>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct ConvSection {
    kernel_size: usize,
    capacity: usize,
    relu: ReluPlacement,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    base: Vec<TensorEntry>,
    conv_heads: Option<ConvSection>,
}

fn entry(name: String, t: &Tensor2) -> TensorEntry {
    TensorEntry {
        name,
        rows: t.rows(),
        cols: t.cols(),
    }
}

impl Checkpoint {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Self {
        Self {
            config,
            weights,
            conv_heads: None,
        }
    }

    /// The same checkpoint without its conv-head section.
    pub fn without_conv_heads(&self) -> Self {
        Self {
            conv_heads: None,
            ..self.clone()
        }
    }

    pub fn with_conv_heads(&self, heads: ConvHeadSet) -> Self {
        Self {
            conv_heads: Some(heads),
            ..self.clone()
        }
    }

    fn conv_tensors(&self) -> Vec<(String, &Tensor2)> {
        let mut out = Vec::new();
        if let Some(set) = &self.conv_heads {
            for (i, h) in set.heads.iter().enumerate() {
                out.push((format!("conv_heads.{i}.weight"), &h.weight));
                out.push((format!("conv_heads.{i}.bias"), &h.bias));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let base = self.weights.named();
        let conv = self.conv_tensors();
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config,
            base: base.iter().map(|(n, t)| entry(n.clone(), t)).collect(),
            conv_heads: self.conv_heads.as_ref().map(|set| ConvSection {
                kernel_size: set.kernel_size(),
                capacity: set.capacity(),
                relu: set.relu(),
                tensors: conv.iter().map(|(n, t)| entry(n.clone(), t)).collect(),
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let n_values: usize = base.iter().chain(&conv).map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in base.iter().chain(&conv) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
        if header.format_version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        header.config.validate()?;

        let mut cursor = body_start;
        let mut read = |e: &TensorEntry| -> Result<Tensor2> {
            let n = e.rows * e.cols;
            let end = cursor + 8 * n;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("truncated tensor {}", e.name)));
            }
            let data = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = end;
            let t = Tensor2::from_vec(e.rows, e.cols, data)?;
            t.ensure_finite("checkpoint tensor")?;
            Ok(t)
        };

        let base = header.base.iter().map(&mut read).collect::<Result<Vec<_>>>()?;
        let weights = ModelWeights::from_tensors(&header.config, base)?;
        let conv_heads = match &header.conv_heads {
            None => None,
            Some(sec) => {
                if sec.tensors.len() != 2 * header.config.n_layers {
                    return Err(bad("conv-head section does not cover every layer"));
                }
                let ts = sec.tensors.iter().map(&mut read).collect::<Result<Vec<_>>>()?;
                let mut heads = Vec::with_capacity(header.config.n_layers);
                for (l, pair) in ts.chunks_exact(2).enumerate() {
                    let h = ConvHead::new(pair[0].clone(), pair[1].clone(), sec.kernel_size, sec.relu, l)?;
                    if h.capacity() != sec.capacity || h.key_dim() != header.config.d_model {
                        return Err(bad("conv head geometry disagrees with header"));
                    }
                    heads.push(h);
                }
                Some(ConvHeadSet { heads })
            }
        };
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensors"));
        }
        Ok(Self {
            config: header.config,
            weights,
            conv_heads,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Checkpoint {
        let cfg = ModelConfig::with_dims(8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Checkpoint::new(cfg, ModelWeights::init(&cfg, &mut rng))
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = tiny();
        let heads = ConvHeadSet::init(&base.config, 4, 3, ReluPlacement::PostConv, &mut rng).unwrap();
        for ck in [base.clone(), base.with_conv_heads(heads)] {
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn stripping_heads_restores_base_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = tiny();
        let heads = ConvHeadSet::init(&base.config, 4, 5, ReluPlacement::PreConv, &mut rng).unwrap();
        let with = base.with_conv_heads(heads);
        assert_eq!(with.without_conv_heads().to_bytes().unwrap(), base.to_bytes().unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = tiny().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
