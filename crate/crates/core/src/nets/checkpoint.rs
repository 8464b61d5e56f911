//! `TBEVCKPT` parameter files: magic, u32 version, u32 parameter count, then
//! per parameter a u32-length UTF-8 name, u32 rank, u32 dims and raw f32
//! values, all little-endian.

use std::path::Path;

use crate::binio::{FormatError, Reader, Writer};
use crate::diffcore::{ParamSet, Scalar, Tensor};

use super::{NetError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TBEVCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Values are stored as f32; an f32 parameter set round-trips bit-exactly.
pub fn encode_checkpoint<T: Scalar>(params: &ParamSet<T>) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(params.len() as u32);
    for p in params.iter() {
        w.u32(p.name.len() as u32);
        w.bytes(p.name.as_bytes());
        w.u32(p.value.shape().len() as u32);
        for &d in p.value.shape() {
            w.u32(d as u32);
        }
        w.f32s(p.value.data().iter().map(|v| v.to_f64() as f32));
    }
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet<f32>, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError {
            offset: at,
            field: "version".into(),
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("parameter count")? as usize;
    let mut params = ParamSet::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.bytes(len, "name")?)
            .map_err(|_| FormatError {
                offset: at,
                field: "name".into(),
                reason: format!("parameter {i} name is not UTF-8"),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| r.error("dimension", format!("{name}: shape overflows")))?;
        let values = r.f32s(numel, &format!("values of {name}"))?;
        let t = Tensor::from_vec(&shape, values).expect("numel matches");
        let at = r.offset();
        params.add(&name, t).map_err(|_| FormatError {
            offset: at,
            field: "name".into(),
            reason: format!("duplicate parameter {name}"),
        })?;
    }
    r.finish()?;
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ParamSet<T>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet<f32>> {
    let bytes = std::fs::read(path).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(decode_checkpoint(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.add("a.weight", Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.1, -0.0]).unwrap())
            .unwrap();
        p.add("a.bias", Tensor::from_vec(&[2], vec![7.0, 1e-30]).unwrap()).unwrap();
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let bytes = encode_checkpoint(&p);
        let q = decode_checkpoint(&bytes).unwrap();
        assert_eq!(q.len(), 2);
        for (a, b) in p.iter().zip(q.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(encode_checkpoint(&q), bytes);
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let mut bytes = encode_checkpoint(&sample());
        let short = &bytes[..bytes.len() - 3];
        let e = decode_checkpoint(short).unwrap_err();
        assert!(e.field.starts_with("values of a.bias"), "{e}");
        assert!(e.offset > 8);
        bytes[0] = b'X';
        let e = decode_checkpoint(&bytes).unwrap_err();
        assert_eq!((e.field.as_str(), e.offset), ("magic", 0));
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = encode_checkpoint(&sample());
        bytes[8] = 9;
        let e = decode_checkpoint(&bytes).unwrap_err();
        assert_eq!((e.field.as_str(), e.offset), ("version", 8));
    }

    #[test]
    fn empty_set_round_trips() {
        let p: ParamSet<f32> = ParamSet::new();
        assert_eq!(decode_checkpoint(&encode_checkpoint(&p)).unwrap().len(), 0);
    }
}
