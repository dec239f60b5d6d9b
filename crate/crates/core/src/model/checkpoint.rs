//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "FLTC" | version u32 | d_in d_model n_heads n_layers d_ff window n_classes (u32 each)
//! | dropout f64 | positional u8 | n_tensors u32
//! | per tensor: name_len u32, name, rank u32, dims u32 × rank, f32 × len
//! ```

use std::path::Path;

use super::{ModelConfig, ModelError, ModelParams, PositionalEncoding};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLTC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_to_bytes(params: &ModelParams<f32>, cfg: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * params.total_len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let put = |v: u32, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
    put(CHECKPOINT_VERSION, &mut out);
    for v in [
        cfg.d_in,
        cfg.d_model,
        cfg.n_heads,
        cfg.n_layers,
        cfg.d_ff,
        cfg.window,
        cfg.n_classes,
    ] {
        put(v as u32, &mut out);
    }
    out.extend_from_slice(&cfg.dropout.to_le_bytes());
    out.push(cfg.positional.code());
    put(params.len() as u32, &mut out);
    for (name, t) in params.iter() {
        put(name.len() as u32, &mut out);
        out.extend_from_slice(name.as_bytes());
        put(t.rank() as u32, &mut out);
        for &d in t.shape() {
            put(d as u32, &mut out);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ModelError::Checkpoint(format!("truncated at byte {} (need {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelParams<f32>, ModelConfig), ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| bad("file too short for header".into()))? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic, not a model checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let dropout = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let code = r.take(1)?[0];
    let positional =
        PositionalEncoding::from_code(code).ok_or_else(|| bad(format!("unknown positional encoding {code}")))?;
    let [d_in, d_model, n_heads, n_layers, d_ff, window, n_classes] = dims;
    let cfg = ModelConfig {
        d_in,
        d_model,
        n_heads,
        n_layers,
        d_ff,
        dropout,
        window,
        n_classes,
        positional,
    };
    cfg.validate().map_err(|e| bad(e.to_string()))?;

    let expected = cfg.param_shapes();
    let n = r.u32()? as usize;
    if n != expected.len() {
        return Err(bad(format!("expected {} tensors, found {n}", expected.len())));
    }
    let mut named = Vec::with_capacity(n);
    for (ename, eshape) in &expected {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| bad("tensor name is not UTF-8".into()))?
            .to_string();
        if &name != ename {
            return Err(bad(format!("unexpected tensor `{name}` where `{ename}` belongs")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if &shape != eshape {
            return Err(bad(format!("tensor `{name}` has shape {shape:?}, expected {eshape:?}")));
        }
        let count: usize = shape.iter().product();
        let data = r
            .take(4 * count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((ModelParams::from_named(&cfg, named)?, cfg))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>, cfg: &ModelConfig) -> Result<(), ModelError> {
    std::fs::write(path, checkpoint_to_bytes(params, cfg)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, ModelConfig), ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    checkpoint_from_bytes(&bytes)
}
