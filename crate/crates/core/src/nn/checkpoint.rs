//! `ATTN` checkpoint files.
//!
//! ```text
//! "ATTN"
//! u32 x 9   L, D, H, D_F, D_I, T_I, T_T, D_O, c
//! f32 ...   parameters in declaration order (AttentionModel::params)
//! ```
//! All values little-endian.

use std::path::Path;

use super::model::{AttentionModel, ModelConfig};
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ATTN";

impl AttentionModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut w = Writer::default();
        w.magic(MAGIC);
        for v in [
            c.layers,
            c.dim,
            c.heads,
            c.ffn_dim,
            c.input_dim,
            c.seq_len,
            c.patches,
            c.outputs,
        ] {
            w.len_u32(v)?;
        }
        w.u32(c.segment_bits);
        for p in self.params() {
            for &v in p.data() {
                w.f32(v as f32);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let config = ModelConfig {
            layers: r.usize()?,
            dim: r.usize()?,
            heads: r.usize()?,
            ffn_dim: r.usize()?,
            input_dim: r.usize()?,
            seq_len: r.usize()?,
            patches: r.usize()?,
            outputs: r.usize()?,
            segment_bits: r.u32()?,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut model = AttentionModel::new(config, 0)?;
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v = f64::from(r.f32()?);
            }
        }
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
