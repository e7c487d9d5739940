//! Frames to nodes: overlapping patch grids and random resized crops.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A clip of equally sized `H×W×C` frames with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Tensor<f32>>,
    /// Frames per second of the generating process; infinite for a static repeat.
    pub frame_rate_tag: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Tensor<f32>>, frame_rate_tag: f64) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Data(format!("a sequence needs at least 2 frames, got {}", frames.len())));
        }
        let shape = frames[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Data(format!("frames must be HxWxC, got rank {}", shape.len())));
        }
        if let Some(bad) = frames.iter().position(|f| f.shape() != shape.as_slice()) {
            return Err(Error::Data(format!("frame {bad} has shape {:?}, expected {shape:?}", frames[bad].shape())));
        }
        if !(frame_rate_tag > 0.0) {
            return Err(Error::Data(format!("frame rate tag must be positive, got {frame_rate_tag}")));
        }
        Ok(FrameSequence {
            frames,
            frame_rate_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames[0].shape();
        (s[0], s[1], s[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchGridConfig {
    pub patch_size: usize,
    pub stride: usize,
    /// Crop area as a fraction of the patch area.
    pub jitter_scale: (f64, f64),
    /// Crop width / height.
    pub jitter_ratio: (f64, f64),
}

impl Default for PatchGridConfig {
    fn default() -> Self {
        PatchGridConfig {
            patch_size: 16,
            stride: 8,
            jitter_scale: (0.7, 0.9),
            jitter_ratio: (0.7, 1.3),
        }
    }
}

impl PatchGridConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.jitter_scale;
        let (rlo, rhi) = self.jitter_ratio;
        if self.patch_size == 0 || self.stride == 0 {
            return Err(Error::config("patch_size and stride must be at least 1"));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("jitter scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return Err(Error::config(format!("jitter ratio range ({rlo}, {rhi}) must satisfy 0 < lo <= hi")));
        }
        Ok(())
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<GridGeometry> {
        self.validate()?;
        if self.patch_size > height || self.patch_size > width {
            return Err(Error::config(format!(
                "patch size {} does not fit a {height}x{width} frame",
                self.patch_size
            )));
        }
        Ok(GridGeometry {
            rows: (height - self.patch_size) / self.stride + 1,
            cols: (width - self.patch_size) / self.stride + 1,
            patch_size: self.patch_size,
            stride: self.stride,
        })
    }
}

/// Layout of the patch grid over a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub stride: usize,
}

impl GridGeometry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel coordinate `(row, col)` of node `i`'s center.
    pub fn center(&self, i: usize) -> (usize, usize) {
        let (gr, gc) = (i / self.cols, i % self.cols);
        (
            gr * self.stride + self.patch_size / 2,
            gc * self.stride + self.patch_size / 2,
        )
    }

    pub fn centers(&self) -> Vec<(usize, usize)> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }

    /// `(grid_row, grid_col)` of node `i`.
    pub fn cell(&self, i: usize) -> (usize, usize) {
        (i / self.cols, i % self.cols)
    }

    /// Node whose center is nearest to a pixel position; ties go to the lower index.
    pub fn nearest_node(&self, row: f64, col: f64) -> usize {
        let mut best = (f64::INFINITY, 0);
        for i in 0..self.len() {
            let (cr, cc) = self.center(i);
            let d = (cr as f64 - row).powi(2) + (cc as f64 - col).powi(2);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

/// Patches of one frame plus the grid they were cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    /// Each `patch×patch×C`, raster order.
    pub patches: Vec<Tensor<f32>>,
    pub centers: Vec<(usize, usize)>,
    pub grid: GridGeometry,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid.rows, self.grid.cols)
    }
}

pub fn extract_patches(frame: &Tensor<f32>, cfg: &PatchGridConfig) -> Result<NodeSet> {
    let (h, w, c) = match frame.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::Data(format!("frames must be HxWxC, got shape {s:?}"))),
    };
    let grid = cfg.geometry(h, w)?;
    let p = cfg.patch_size;
    let src = frame.data();
    let mut patches = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let (gr, gc) = grid.cell(i);
        let (r0, c0) = (gr * cfg.stride, gc * cfg.stride);
        let mut data = Vec::with_capacity(p * p * c);
        for r in r0..r0 + p {
            let start = (r * w + c0) * c;
            data.extend_from_slice(&src[start..start + p * c]);
        }
        patches.push(Tensor::from_parts(vec![p, p, c], data));
    }
    Ok(NodeSet {
        patches,
        centers: grid.centers(),
        grid,
    })
}

/// Crop window inside a patch, in pixel units.
///
/// Sample positions span `[top, top + height - 1]` × `[left, left + width - 1]`,
/// so the crop covers `height·width / patch²` of the patch area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl CropRect {
    pub fn full(patch: usize) -> Self {
        CropRect {
            top: 0.0,
            left: 0.0,
            height: patch as f64,
            width: patch as f64,
        }
    }

    pub fn area_fraction(&self, patch: usize) -> f64 {
        self.height * self.width / (patch * patch) as f64
    }
}

/// Random resized crop parameters: area fraction and log-uniform aspect
/// ratio, ten attempts, then a centered square at the mid-range area.
pub fn sample_crop<R: Rng + ?Sized>(rng: &mut R, patch: usize, cfg: &PatchGridConfig) -> CropRect {
    let size = patch as f64;
    let area = size * size;
    let (lo, hi) = cfg.jitter_scale;
    let (rlo, rhi) = (cfg.jitter_ratio.0.ln(), cfg.jitter_ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, lo, hi);
        let aspect = uniform(rng, rlo, rhi).exp();
        let width = (target * aspect).sqrt();
        let height = (target / aspect).sqrt();
        if width <= size && height <= size && width >= 1.0 && height >= 1.0 {
            let top = uniform(rng, 0.0, size - height);
            let left = uniform(rng, 0.0, size - width);
            return CropRect {
                top,
                left,
                height,
                width,
            };
        }
    }
    let side = (0.5 * (lo + hi)).sqrt() * size;
    let offset = 0.5 * (size - side);
    CropRect {
        top: offset,
        left: offset,
        height: side,
        width: side,
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + (hi - lo) * rng.random::<f64>()
    } else {
        lo
    }
}

/// Bilinear, corner-aligned resampling of a crop back to the full patch size.
pub fn resample_crop(patch: &Tensor<f32>, crop: &CropRect) -> Tensor<f32> {
    let (p, c) = (patch.shape()[0], patch.shape()[2]);
    let src = patch.data();
    let last = (p - 1) as f64;
    let step = |extent: f64| if p > 1 { (extent - 1.0) / last } else { 0.0 };
    let (sy, sx) = (step(crop.height), step(crop.width));
    let mut out = Vec::with_capacity(p * p * c);
    for i in 0..p {
        let y = (crop.top + i as f64 * sy).clamp(0.0, last);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(p - 1);
        let fy = (y - y0 as f64) as f32;
        for j in 0..p {
            let x = (crop.left + j as f64 * sx).clamp(0.0, last);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(p - 1);
            let fx = (x - x0 as f64) as f32;
            for ch in 0..c {
                let at = |r: usize, q: usize| src[(r * p + q) * c + ch];
                let top = lerp(at(y0, x0), at(y0, x1), fx);
                let bottom = lerp(at(y1, x0), at(y1, x1), fx);
                out.push(lerp(top, bottom, fy));
            }
        }
    }
    Tensor::from_parts(vec![p, p, c], out)
}

// exact when a == b
#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Replaces each patch by an independently sampled resized crop. Centers are kept.
pub fn spatial_jitter<R: Rng + ?Sized>(nodes: &NodeSet, rng: &mut R, cfg: &PatchGridConfig) -> Result<NodeSet> {
    cfg.validate()?;
    let patches = nodes
        .patches
        .iter()
        .map(|patch| {
            let crop = sample_crop(rng, patch.shape()[0], cfg);
            resample_crop(patch, &crop)
        })
        .collect();
    Ok(NodeSet {
        patches,
        centers: nodes.centers.clone(),
        grid: nodes.grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_frame(h: usize, w: usize) -> Tensor<f32> {
        let data = (0..h * w).map(|i| (i as f32) / (h * w) as f32).collect();
        Tensor::new(vec![h, w, 1], data).unwrap()
    }

    fn cfg(patch: usize, stride: usize) -> PatchGridConfig {
        PatchGridConfig {
            patch_size: patch,
            stride,
            ..Default::default()
        }
    }

    #[test]
    fn grid_sizes() {
        let g = cfg(64, 32).geometry(256, 256).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (7, 7, 49));
        let g = cfg(16, 8).geometry(64, 64).unwrap();
        assert_eq!((g.rows, g.cols), (7, 7));
        let nodes = extract_patches(&ramp_frame(64, 64), &cfg(64, 5)).unwrap();
        assert_eq!(nodes.len(), 1);
        assert_eq!(nodes.patches[0], ramp_frame(64, 64));
    }

    #[test]
    fn patch_larger_than_frame_is_config_error() {
        let err = extract_patches(&ramp_frame(8, 8), &cfg(16, 8)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn patches_copy_the_right_pixels() {
        let frame = ramp_frame(12, 10);
        let nodes = extract_patches(&frame, &cfg(4, 3)).unwrap();
        assert_eq!(nodes.grid_dims(), (3, 3));
        let p = &nodes.patches[4]; // grid (1, 1): origin (3, 3)
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(p.data()[r * 4 + c], frame.data()[(3 + r) * 10 + 3 + c]);
            }
        }
        assert_eq!(nodes.centers[4], (5, 5));
        assert!(nodes.centers.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn strided_grid_covers_its_span() {
        let g = cfg(16, 8).geometry(64, 60).unwrap();
        let span_r = (g.rows - 1) * g.stride + g.patch_size;
        let span_c = (g.cols - 1) * g.stride + g.patch_size;
        let mut covered = vec![false; span_r * span_c];
        for i in 0..g.len() {
            let (gr, gc) = g.cell(i);
            for r in gr * 8..gr * 8 + 16 {
                for c in gc * 8..gc * 8 + 16 {
                    covered[r * span_c + c] = true;
                }
            }
        }
        assert!(covered.into_iter().all(|c| c));
    }

    #[test]
    fn identity_jitter_is_exact() {
        let nodes = extract_patches(&ramp_frame(32, 32), &cfg(16, 8)).unwrap();
        let ident = PatchGridConfig {
            jitter_scale: (1.0, 1.0),
            jitter_ratio: (1.0, 1.0),
            ..cfg(16, 8)
        };
        let out = spatial_jitter(&nodes, &mut ChaCha8Rng::seed_from_u64(3), &ident).unwrap();
        assert_eq!(out, nodes);
    }

    #[test]
    fn crops_stay_inside_and_in_range() {
        let c = cfg(16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let crop = sample_crop(&mut rng, 16, &c);
            let frac = crop.area_fraction(16);
            assert!((0.7 - 1e-12..=0.9 + 1e-12).contains(&frac), "{frac}");
            assert!(crop.top >= 0.0 && crop.left >= 0.0);
            assert!(crop.top + crop.height <= 16.0 + 1e-9);
            assert!(crop.left + crop.width <= 16.0 + 1e-9);
            let aspect = crop.width / crop.height;
            assert!((0.7 - 1e-9..=1.3 + 1e-9).contains(&aspect) || (aspect - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_patch_stays_constant() {
        let patch = Tensor::full(&[16, 16, 1], 0.37f32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let crop = sample_crop(&mut rng, 16, &cfg(16, 8));
            assert!(resample_crop(&patch, &crop).data().iter().all(|&v| v == 0.37));
        }
    }

    #[test]
    fn jitter_is_seed_deterministic() {
        let nodes = extract_patches(&ramp_frame(32, 32), &cfg(16, 8)).unwrap();
        let a = spatial_jitter(&nodes, &mut ChaCha8Rng::seed_from_u64(9), &cfg(16, 8)).unwrap();
        let b = spatial_jitter(&nodes, &mut ChaCha8Rng::seed_from_u64(9), &cfg(16, 8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, nodes);
        assert_eq!(a.centers, nodes.centers);
    }
}
