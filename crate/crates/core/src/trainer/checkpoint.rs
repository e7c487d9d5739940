//! `CWCK` parameter files plus a JSON sidecar holding step, rng state and
//! the run configuration.
//!
//! ```text
//! "CWCK" | version u32 | count u32
//! per parameter: name_len u32 | name (UTF-8) | rank u32 | dims u32×rank | f64 payload
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::io_util::{ByteReader, ByteWriter};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const WHAT: &str = "checkpoint";
const MAX_RANK: usize = 8;
const MAX_NAME: usize = 4096;

pub fn encode_params(params: &ParamSet<f64>) -> Vec<u8> {
    let mut out = ByteWriter::with_capacity(12 + params.numel() * 8 + params.len() * 32);
    out.bytes(CHECKPOINT_MAGIC);
    out.u32(CHECKPOINT_VERSION);
    out.u32(params.len() as u32);
    for (name, t) in params.iter() {
        out.u32(name.len() as u32);
        out.bytes(name.as_bytes());
        out.u32(t.rank() as u32);
        for &d in t.shape() {
            out.u32(d as u32);
        }
        for &v in t.data() {
            out.f64(v);
        }
    }
    out.into_inner()
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamSet<f64>> {
    let mut r = ByteReader::new(bytes, WHAT);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(WHAT, "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(WHAT, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for k in 0..count {
        let len = r.u32()? as usize;
        if len == 0 || len > MAX_NAME {
            return Err(Error::format(WHAT, format!("parameter {k} has name length {len}")));
        }
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(WHAT, format!("parameter {k} name is not UTF-8")))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(WHAT, format!("{name}: rank {rank} outside 1..={MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(Error::format(WHAT, format!("{name}: zero dimension")));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::format(WHAT, format!("{name}: size overflows")))?;
            shape.push(d);
        }
        let bytes_needed = numel
            .checked_mul(8)
            .ok_or_else(|| Error::format(WHAT, format!("{name}: size overflows")))?;
        let raw = r.take(bytes_needed)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(WHAT, format!("{name}: non-finite value")));
        }
        params
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::format(WHAT, e.to_string()))?;
    }
    r.finish()?;
    Ok(params)
}

/// Counter-based generator position: every draw after `step` derives from
/// `(seed, step, clip)`, so these two numbers restore the streams exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: String,
    pub step: u64,
    pub rng: RngState,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet<f64>,
    pub meta: CheckpointMeta,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, encode_params(&self.params)).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta).expect("metadata serializes");
        std::fs::write(&side, json).map_err(|e| Error::io(side, e))
    }

    /// Reads the parameters and, when present, the sidecar.
    pub fn load(path: &Path) -> Result<(ParamSet<f64>, Option<CheckpointMeta>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let params = decode_params(&bytes).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format {
                what,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })?;
        let side = sidecar_path(path);
        let meta = match std::fs::read_to_string(&side) {
            Ok(s) => Some(serde_json::from_str(&s).map_err(|e| Error::format(WHAT, format!("{}: {e}", side.display())))?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(side, e)),
        };
        Ok((params, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_encoder, EncoderConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = init_encoder(&EncoderConfig::default(), 5).unwrap();
        p.get_mut("layer0.bias").unwrap().data_mut()[3] = -0.0;
        p.get_mut("layer0.bias").unwrap().data_mut()[4] = f64::MIN_POSITIVE / 4.0;
        let back = decode_params(&encode_params(&p)).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), p.names().collect::<Vec<_>>());
        for ((_, a), (_, b)) in p.iter().zip(back.iter()) {
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn layout_matches_the_documented_header() {
        let mut p = ParamSet::new();
        p.insert("ab", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let bytes = encode_params(&p);
        assert_eq!(&bytes[..4], b"CWCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(&bytes[16..18], b"ab");
        assert_eq!(bytes.len(), 12 + 4 + 2 + 4 + 4 + 16);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = init_encoder(&EncoderConfig::default(), 1).unwrap();
        let good = encode_params(&p);
        for cut in [0, 3, 11, 20, good.len() - 1] {
            assert!(decode_params(&good[..cut]).is_err());
        }
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode_params(&trailing).is_err());
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(decode_params(&magic).is_err());
        let mut huge = good.clone();
        // first tensor's first dim
        let off = 12 + 4 + "layer0.weight".len() + 4;
        huge[off..off + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_params(&huge).is_err());
    }

    #[test]
    fn sidecar_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.cwck");
        let ck = Checkpoint {
            params: init_encoder(&EncoderConfig::default(), 2).unwrap(),
            meta: CheckpointMeta {
                version: "test".into(),
                step: 7,
                rng: RngState { seed: 3, next_step: 7 },
                config: serde_json::json!({"seed": 3}),
            },
        };
        ck.save(&path).unwrap();
        let (params, meta) = Checkpoint::load(&path).unwrap();
        assert_eq!(params, ck.params);
        assert_eq!(meta.unwrap(), ck.meta);
        let err = Checkpoint::load(&dir.path().join("missing.cwck")).unwrap_err();
        assert!(err.to_string().contains("missing.cwck"));
    }
}
