//! Base-model checkpoint: magic `TINY`, version, config, then named tensors.

use std::path::Path;

use super::{ModelConfig, TinyModel};
use crate::codec::{put_f64s, put_u32, put_u64, to_u32, Reader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TINY";
const VERSION: u32 = 1;

pub fn write_model(model: &TinyModel) -> Result<Vec<u8>> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for (v, what) in [
        (c.vocab_size, "vocab_size"),
        (c.d_model, "d_model"),
        (c.n_layers, "n_layers"),
        (c.n_heads, "n_heads"),
        (c.max_seq, "max_seq"),
    ] {
        put_u32(&mut out, to_u32(v, what)?);
    }
    put_u64(&mut out, c.seed);
    for (name, t) in model.named_tensors() {
        put_u32(&mut out, to_u32(name.len(), "tensor name length")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, to_u32(t.shape().len(), "rank")?);
        for &d in t.shape() {
            put_u32(&mut out, to_u32(d, "dimension")?);
        }
        put_f64s(&mut out, t.data());
    }
    Ok(out)
}

pub fn read_model(bytes: &[u8]) -> Result<TinyModel> {
    let mut r = Reader::new(bytes);
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected TINY".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported TINY version {version}")));
    }
    let config = ModelConfig {
        vocab_size: r.u32("vocab_size")? as usize,
        d_model: r.u32("d_model")? as usize,
        n_layers: r.u32("n_layers")? as usize,
        n_heads: r.u32("n_heads")? as usize,
        max_seq: r.u32("max_seq")? as usize,
        seed: r.u64("seed")?,
    };
    config.validate().map_err(|e| Error::Format(format!("invalid stored config: {e}")))?;
    let mut model = TinyModel::init(config.clone())?;
    let declared = config.declared_tensors();
    for ((name, shape), slot) in declared.iter().zip(model.tensors_mut()) {
        let len = r.u32("tensor name length")? as usize;
        let found_name = std::str::from_utf8(r.bytes(len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if found_name != name {
            return Err(Error::Format(format!("expected tensor {name}, found {found_name}")));
        }
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::Shape { tensor: name.clone(), expected: shape.clone(), found: dims });
        }
        let n = shape.iter().product();
        *slot = crate::numerics::Tensor::new(dims, r.f64s(n, name)?)?;
    }
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(model)
}

pub fn save_model(model: &TinyModel, path: &Path) -> Result<()> {
    std::fs::write(path, write_model(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TinyModel> {
    read_model(&std::fs::read(path)?)
}
