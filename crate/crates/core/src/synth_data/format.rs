//! `CWVD` dataset files: one sequence plus its ground truth, little-endian.
//!
//! ```text
//! "CWVD" | version u32 | T u32 | H u32 | W u32 | C u32
//! frames: T·H·W·C f32
//! S u32 | frame_rate f64
//! per frame: ownership H·W u8 | per sprite (dy i32, dx i32) | per sprite visible u8
//! ```

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph_builder::FrameSequence;
use crate::io_util::{ByteReader, ByteWriter};

use super::GroundTruth;

pub const DATASET_MAGIC: &[u8; 4] = b"CWVD";
pub const DATASET_VERSION: u32 = 1;

const WHAT: &str = "dataset";

pub fn encode_dataset(seq: &FrameSequence, gt: &GroundTruth) -> Result<Vec<u8>> {
    let (h, w, c) = seq.dims();
    if gt.frames() != seq.len() || gt.height != h || gt.width != w {
        return Err(Error::Usage("ground truth does not match the frames".into()));
    }
    gt.validate()?;
    let mut out = ByteWriter::with_capacity(24 + seq.len() * h * w * (4 * c + 1));
    out.bytes(DATASET_MAGIC);
    out.u32(DATASET_VERSION);
    for d in [seq.len(), h, w, c] {
        out.u32(checked_u32(d)?);
    }
    for f in &seq.frames {
        for &v in f.data() {
            out.f32(v);
        }
    }
    out.u32(checked_u32(gt.sprite_count)?);
    out.f64(seq.frame_rate_tag);
    for t in 0..gt.frames() {
        out.bytes(&gt.ownership[t]);
        for &(dy, dx) in &gt.displacement[t] {
            out.i32(dy);
            out.i32(dx);
        }
        for &v in &gt.visible[t] {
            out.u8(v as u8);
        }
    }
    Ok(out.into_inner())
}

fn checked_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Usage(format!("dimension {v} does not fit in u32")))
}

/// Decodes untrusted bytes; every size is checked against the remaining input
/// before anything is allocated.
pub fn decode_dataset(bytes: &[u8]) -> Result<(FrameSequence, GroundTruth)> {
    let mut r = ByteReader::new(bytes, WHAT);
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::format(WHAT, "bad magic"));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::format(WHAT, format!("unsupported version {version}")));
    }
    let t = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    if t < 2 || h == 0 || w == 0 || c == 0 {
        return Err(Error::format(WHAT, format!("degenerate dimensions T={t} H={h} W={w} C={c}")));
    }
    let frame_len = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::format(WHAT, "frame size overflows"))?;
    let total = frame_len
        .checked_mul(t)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format(WHAT, "payload size overflows"))?;
    r.ensure(total)?;
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        let raw = r.take(frame_len * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::format(WHAT, format!("pixel value {v} outside [0, 1]")));
        }
        frames.push(Tensor::new(vec![h, w, c], data)?);
    }
    let s = r.u32()? as usize;
    if s > 254 {
        return Err(Error::format(WHAT, format!("{s} sprites exceeds the limit of 254")));
    }
    let frame_rate = r.f64()?;
    let per_gt = h * w + s * 9;
    r.ensure(per_gt.checked_mul(t).ok_or_else(|| Error::format(WHAT, "ground truth size overflows"))?)?;
    let mut gt = GroundTruth {
        height: h,
        width: w,
        sprite_count: s,
        ownership: Vec::with_capacity(t),
        displacement: Vec::with_capacity(t),
        visible: Vec::with_capacity(t),
    };
    for _ in 0..t {
        gt.ownership.push(r.take(h * w)?.to_vec());
        let mut disp = Vec::with_capacity(s);
        for _ in 0..s {
            disp.push((r.i32()?, r.i32()?));
        }
        gt.displacement.push(disp);
        let mut vis = Vec::with_capacity(s);
        for _ in 0..s {
            vis.push(match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(Error::format(WHAT, format!("visibility flag {v}"))),
            });
        }
        gt.visible.push(vis);
    }
    r.finish()?;
    gt.validate().map_err(|e| Error::format(WHAT, e.to_string()))?;
    let seq = FrameSequence::new(frames, frame_rate).map_err(|e| Error::format(WHAT, e.to_string()))?;
    Ok((seq, gt))
}

pub fn write_dataset(path: &Path, seq: &FrameSequence, gt: &GroundTruth) -> Result<()> {
    let bytes = encode_dataset(seq, gt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<(FrameSequence, GroundTruth)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
