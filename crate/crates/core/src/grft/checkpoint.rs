//! Grft checkpoint: magic `GRFT`, version, `d`, `r`, layer, mode tag, then
//! `W_g, b_g, W, R, b` as little-endian f64.
//!
//! The seed is not part of the format; a loaded config has seed 0.

use std::path::Path;

use super::{GrftConfig, GrftMode, GrftParams};
use crate::codec::{put_f64s, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"GRFT";
const VERSION: u32 = 1;

pub fn write_grft(params: &GrftParams, cfg: &GrftConfig) -> Result<Vec<u8>> {
    if params.d() != cfg.d || params.rank() != cfg.rank {
        return Err(Error::Shape {
            tensor: "grft params".into(),
            expected: vec![cfg.rank, cfg.d],
            found: vec![params.rank(), params.d()],
        });
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(cfg.d, "d")?);
    put_u32(&mut out, to_u32(cfg.rank, "rank")?);
    put_u32(&mut out, to_u32(cfg.layer_index, "layer_index")?);
    out.push(cfg.mode.tag());
    for t in params.tensors() {
        put_f64s(&mut out, t.data());
    }
    Ok(out)
}

pub fn read_grft(bytes: &[u8]) -> Result<(GrftParams, GrftConfig)> {
    let mut r = Reader::new(bytes);
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected GRFT".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported GRFT version {version}")));
    }
    let d = r.u32("d")? as usize;
    let rank = r.u32("rank")? as usize;
    let layer_index = r.u32("layer_index")? as usize;
    let mode = GrftMode::from_tag(r.u8("mode")?)?;
    let cfg = GrftConfig { d, rank, layer_index, mode, seed: 0 };
    cfg.validate().map_err(|e| Error::Format(format!("invalid stored config: {e}")))?;
    let mut read = |shape: &[usize], what: &str| -> Result<Tensor> {
        Tensor::new(shape.to_vec(), r.f64s(shape.iter().product(), what)?)
    };
    let params = GrftParams {
        w_g: read(&[1, d], "W_g")?,
        b_g: read(&[1], "b_g")?,
        w: read(&[rank, d], "W")?,
        r: read(&[rank, d], "R")?,
        b: read(&[rank], "b")?,
    };
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after GRFT tensors".into()));
    }
    Ok((params, cfg))
}

pub fn save_grft(params: &GrftParams, cfg: &GrftConfig, path: &Path) -> Result<()> {
    std::fs::write(path, write_grft(params, cfg)?)?;
    Ok(())
}

pub fn load_grft(path: &Path) -> Result<(GrftParams, GrftConfig)> {
    read_grft(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (GrftParams, GrftConfig) {
        let cfg = GrftConfig { d: 8, rank: 2, layer_index: 1, mode: GrftMode::GrftNoGateLoss, seed: 0 };
        let mut p = GrftParams::init(&cfg).unwrap();
        p.b_g = Tensor::vector(vec![-0.125]);
        p.w_g.data_mut()[3] = f64::MIN_POSITIVE;
        (p, cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (p, cfg) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.grft");
        save_grft(&p, &cfg, &path).unwrap();
        let (q, c) = load_grft(&path).unwrap();
        assert_eq!(c, cfg);
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_and_corrupt_files() {
        let (p, cfg) = sample();
        let bytes = write_grft(&p, &cfg).unwrap();
        for cut in [0, 3, 10, 21, bytes.len() - 1] {
            assert!(matches!(read_grft(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_grft(&bad), Err(Error::Format(_))));
        let mut tag = bytes.clone();
        tag[20] = 9;
        assert!(matches!(read_grft(&tag), Err(Error::Format(_))));
    }

    #[test]
    fn different_width_is_a_shape_error() {
        let (p, cfg) = sample();
        let (_, loaded) = read_grft(&write_grft(&p, &cfg).unwrap()).unwrap();
        let model = crate::model::ModelConfig { d_model: 16, ..Default::default() };
        match loaded.check_model(&model) {
            Err(Error::Shape { expected, found, .. }) => {
                assert_eq!(expected, vec![16]);
                assert_eq!(found, vec![8]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }
}
