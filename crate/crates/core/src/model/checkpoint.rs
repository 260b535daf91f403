//! Binary checkpoint: magic, version, config block, then every parameter as a
//! little-endian `f64` in declaration order.

use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, FormatError, Result};
use crate::rope::RotateVariant;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LSTN";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_ROPE: u8 = 1;
const FLAG_SPATIAL: u8 = 1 << 1;
const FLAG_TEMPORAL: u8 = 1 << 2;
const FLAG_GRAPH: u8 = 1 << 3;
const FLAG_RESIDUAL: u8 = 1 << 4;

// magic + version + 4×u32 + 2×f64 + u8 + u8 + u16 + f64 + u64 + u64 count
const HEADER_LEN: usize = 4 + 4 + 16 + 16 + 4 + 8 + 8 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_count();
        if params.scalar_count() != expected {
            return Err(Error::Config(format!(
                "parameters hold {} scalars but the configuration implies {expected}",
                params.scalar_count()
            )));
        }
        Ok(Checkpoint { config, params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * c.parameter_count());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [c.num_nodes, c.window, c.embed_dim, c.depth] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.theta_spatial.to_le_bytes());
        out.extend_from_slice(&c.theta_temporal.to_le_bytes());
        out.push(match c.rotate_variant {
            RotateVariant::Standard => 0,
            RotateVariant::PaperLiteral => 1,
        });
        let mut flags = 0u8;
        for (on, bit) in [
            (c.use_rope, FLAG_ROPE),
            (c.use_spatial, FLAG_SPATIAL),
            (c.use_temporal, FLAG_TEMPORAL),
            (c.use_graph_embedding, FLAG_GRAPH),
            (c.residual, FLAG_RESIDUAL),
        ] {
            if on {
                flags |= bit;
            }
        }
        out.push(flags);
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&c.huber_delta.to_le_bytes());
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.scalar_count() as u64).to_le_bytes());
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            }
            .into());
        }
        let num_nodes = r.u32()? as usize;
        let window = r.u32()? as usize;
        let embed_dim = r.u32()? as usize;
        let depth = r.u32()? as usize;
        let theta_spatial = r.f64()?;
        let theta_temporal = r.f64()?;
        let rotate_variant = match r.take(1)?[0] {
            0 => RotateVariant::Standard,
            1 => RotateVariant::PaperLiteral,
            v => return Err(FormatError::Header(format!("unknown rotate variant tag {v}")).into()),
        };
        let flags = r.take(1)?[0];
        r.take(2)?;
        let config = ModelConfig {
            num_nodes,
            window,
            embed_dim,
            depth,
            theta_spatial,
            theta_temporal,
            rotate_variant,
            use_rope: flags & FLAG_ROPE != 0,
            use_spatial: flags & FLAG_SPATIAL != 0,
            use_temporal: flags & FLAG_TEMPORAL != 0,
            use_graph_embedding: flags & FLAG_GRAPH != 0,
            residual: flags & FLAG_RESIDUAL != 0,
            huber_delta: r.f64()?,
            seed: r.u64()?,
        };
        config
            .validate()
            .map_err(|e| FormatError::Header(format!("stored configuration is invalid: {e}")))?;
        let count = r.u64()? as usize;
        if count != config.parameter_count() {
            return Err(FormatError::Header(format!(
                "parameter count {count} disagrees with the stored configuration ({})",
                config.parameter_count()
            ))
            .into());
        }
        let need = HEADER_LEN + 8 * count;
        if bytes.len() != need {
            return Err(FormatError::Truncated {
                expected: need,
                actual: bytes.len(),
            }
            .into());
        }
        let mut params = ModelParams::init(&ModelConfig { seed: 0, ..config.clone() });
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = r.f64()?;
            }
        }
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails when the stored shape-defining settings differ from `expected`.
    pub fn check_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let pairs: [(&'static str, usize, usize); 4] = [
            ("num_nodes", self.config.num_nodes, expected.num_nodes),
            ("window", self.config.window, expected.window),
            ("embed_dim", self.config.embed_dim, expected.embed_dim),
            ("depth", self.config.depth, expected.depth),
        ];
        for (field, have, want) in pairs {
            if have != want {
                return Err(Error::Incompatible {
                    field,
                    checkpoint: have.to_string(),
                    expected: want.to_string(),
                });
            }
        }
        Ok(())
    }
}

pub fn write_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    Checkpoint::new(config.clone(), params.clone())?.save(path)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(FormatError::Truncated {
                expected: self.pos + n,
                actual: self.bytes.len(),
            }
            .into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
