//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `MYO1`                            |
//! | 4      | 4    | format version (u32, currently 1)       |
//! | 8      | 4    | in_channels (u32)                       |
//! | 12     | 4    | num_classes (u32)                       |
//! | 16     | 4    | levels (u32)                            |
//! | 20     | 4    | base_channels (u32)                     |
//! | 24     | 4    | channel_growth (u32)                    |
//! | 28     | 4    | max_channels (u32)                      |
//! | 32     | 4    | kernel (u32)                            |
//! | 36     | 4    | convs_per_block (u32)                   |
//! | 40     | 8    | negative_slope (f64)                    |
//! | 48     | 8    | norm_eps (f64)                          |
//! | 56     | 8    | parameter count P (u64)                 |
//! | 64     | 4·P  | parameters, construction order, f32     |

use std::fs;
use std::path::Path;

use super::{Model, UNetConfig};
use crate::error::{io_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MYO1";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 64;

impl<T: Real> Model<T> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let cfg = self.config();
        let count = self.parameter_count();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * count);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            cfg.in_channels,
            cfg.num_classes,
            cfg.levels,
            cfg.base_channels,
            cfg.channel_growth,
            cfg.max_channels,
            cfg.kernel,
            cfg.convs_per_block,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&cfg.negative_slope.to_le_bytes());
        out.extend_from_slice(&cfg.norm_eps.to_le_bytes());
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for p in self.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config = UNetConfig {
            in_channels: u32_at(8) as usize,
            num_classes: u32_at(12) as usize,
            levels: u32_at(16) as usize,
            base_channels: u32_at(20) as usize,
            channel_growth: u32_at(24) as usize,
            max_channels: u32_at(28) as usize,
            kernel: u32_at(32) as usize,
            convs_per_block: u32_at(36) as usize,
            negative_slope: f64_at(40),
            norm_eps: f64_at(48),
        };
        config.validate()?;
        let count = u64::from_le_bytes(bytes[56..64].try_into().unwrap()) as usize;
        if count != config.parameter_count() {
            return Err(bad(format!(
                "parameter count {count} does not match configuration ({})",
                config.parameter_count()
            )));
        }
        if bytes.len() != HEADER_LEN + 4 * count {
            return Err(bad(format!(
                "payload is {} bytes, expected {}",
                bytes.len() - HEADER_LEN,
                4 * count
            )));
        }
        let mut floats = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let params = config
            .parameter_layout()
            .iter()
            .map(|spec| {
                let n = spec.shape.iter().product();
                let data = floats.by_ref().take(n).map(|v| T::from_f32(v).unwrap()).collect();
                Tensor::new(&spec.shape, data).map(|t| t.with_requires_grad(true))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Model::from_parts(config, params)
    }
}

pub fn write_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, model.to_checkpoint_bytes()).map_err(io_err(path))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Model::from_checkpoint_bytes(&bytes)
}
