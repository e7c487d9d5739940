//! Synthetic videos of textured sprites translating over a textured
//! background, with exact per-pixel ownership and per-sprite displacement.
//!
//! Sprites move at constant integer velocity and reflect off the frame
//! borders. Every pixel of every texture is independent smoothed noise, so a
//! patch can only be matched by appearance. Each frame also receives a global
//! brightness offset and i.i.d. sensor noise; neither affects ground truth.

mod format;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph_builder::{FrameSequence, GridGeometry};
use crate::label_prop::LabelMatrix;
use crate::rng::{item_stream, Stream};
use crate::walk_core::CorrespondenceLabels;

pub use format::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};

/// Frame rate of the underlying motion when `speed_multiplier == 1`.
pub const BASE_FRAME_RATE: f64 = 24.0;

/// Ownership value of background pixels.
pub const BACKGROUND: u8 = 0;

const PLACEMENT_ATTEMPTS: usize = 2000;

/// Pixels per base time step; `x` grows rightward, `y` downward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Velocity {
    pub x: i32,
    pub y: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpriteSceneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub sprites: usize,
    /// Inclusive side-length range in pixels.
    pub sprite_size: (usize, usize),
    /// Inclusive range of the per-axis speed bound `max(|vy|, |vx|)`, pixels per frame.
    pub speed: (i32, i32),
    /// Standard deviation of each sprite's smoothed texture field.
    pub sprite_contrast: f64,
    /// Standard deviation of the background's smoothed texture field.
    pub background_contrast: f64,
    /// Radius of the single box blur applied to the raw texture noise.
    pub texture_smoothing: usize,
    /// Per-frame global brightness offset, uniform in `±amplitude`.
    pub brightness_jitter: f64,
    /// Per-pixel, per-frame Gaussian noise.
    pub noise_sigma: f64,
    pub allow_occlusion: bool,
    /// Fixed per-sprite velocities replacing the sampled ones.
    pub velocities: Option<Vec<Velocity>>,
    /// Length of the base trajectory in time steps.
    pub frames: usize,
    /// Frames are sampled every `speed_multiplier` steps of the base
    /// trajectory, giving `(frames-1)/multiplier + 1` frames.
    pub speed_multiplier: u32,
    /// Repeat the first frame unchanged (infinite frame rate).
    pub static_frames: bool,
}

impl Default for SpriteSceneConfig {
    fn default() -> Self {
        SpriteSceneConfig {
            height: 64,
            width: 64,
            channels: 1,
            sprites: 2,
            sprite_size: (16, 24),
            speed: (2, 8),
            sprite_contrast: 0.2,
            background_contrast: 0.2,
            texture_smoothing: 3,
            brightness_jitter: 0.05,
            noise_sigma: 0.25,
            allow_occlusion: false,
            velocities: None,
            frames: 12,
            speed_multiplier: 1,
            static_frames: false,
        }
    }
}

impl SpriteSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sprite_size;
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::config("frame dimensions must be positive"));
        }
        if self.frames < 2 {
            return Err(Error::config(format!("need at least 2 frames, got {}", self.frames)));
        }
        if self.sprites > 254 {
            return Err(Error::config("at most 254 sprites"));
        }
        if self.sprites > 0 && (lo == 0 || lo > hi || hi > self.height.min(self.width)) {
            return Err(Error::config(format!(
                "sprite size range ({lo}, {hi}) must fit a {}x{} frame",
                self.height, self.width
            )));
        }
        let (smin, smax) = self.speed;
        if smin < 0 || smin > smax {
            return Err(Error::config(format!("speed range ({smin}, {smax}) is invalid")));
        }
        if self.speed_multiplier == 0 {
            return Err(Error::config("speed_multiplier must be at least 1"));
        }
        if self.output_frames() < 2 {
            return Err(Error::config(format!(
                "{} base frames at speed multiplier {} leave fewer than 2 frames",
                self.frames, self.speed_multiplier
            )));
        }
        let mut fastest = smax as i64;
        if let Some(vs) = &self.velocities {
            if vs.len() != self.sprites {
                return Err(Error::config(format!("{} velocities for {} sprites", vs.len(), self.sprites)));
            }
            fastest = vs.iter().map(|v| (v.x as i64).abs().max((v.y as i64).abs())).max().unwrap_or(0);
        }
        let hop = fastest * self.speed_multiplier as i64;
        if hop >= self.height.min(self.width) as i64 {
            return Err(Error::config(format!("per-hop displacement {hop} must be smaller than the frame")));
        }
        for (name, v) in [
            ("sprite_contrast", self.sprite_contrast),
            ("background_contrast", self.background_contrast),
            ("brightness_jitter", self.brightness_jitter),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn output_frames(&self) -> usize {
        if self.static_frames {
            self.frames
        } else {
            (self.frames - 1) / self.speed_multiplier as usize + 1
        }
    }

    /// Base-trajectory time of each output frame.
    pub fn frame_times(&self) -> Vec<i64> {
        (0..self.output_frames())
            .map(|t| if self.static_frames { 0 } else { t as i64 * self.speed_multiplier as i64 })
            .collect()
    }

    pub fn frame_rate_tag(&self) -> f64 {
        if self.static_frames {
            f64::INFINITY
        } else {
            BASE_FRAME_RATE / self.speed_multiplier as f64
        }
    }
}

/// Exact scene state per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub height: usize,
    pub width: usize,
    pub sprite_count: usize,
    /// Per frame, `H·W` owners: [`BACKGROUND`] or sprite index + 1.
    pub ownership: Vec<Vec<u8>>,
    /// Per frame, per sprite: `(dy, dx)` relative to frame 0.
    pub displacement: Vec<Vec<(i32, i32)>>,
    pub visible: Vec<Vec<bool>>,
}

impl GroundTruth {
    pub fn frames(&self) -> usize {
        self.ownership.len()
    }

    pub fn owner(&self, frame: usize, row: usize, col: usize) -> u8 {
        self.ownership[frame][row * self.width + col]
    }

    pub fn classes(&self) -> usize {
        self.sprite_count + 1
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.ownership.len();
        if self.displacement.len() != t || self.visible.len() != t {
            return Err(Error::Data("ground truth frame counts disagree".into()));
        }
        for f in 0..t {
            if self.ownership[f].len() != self.height * self.width
                || self.displacement[f].len() != self.sprite_count
                || self.visible[f].len() != self.sprite_count
            {
                return Err(Error::Data(format!("ground truth frame {f} has inconsistent sizes")));
            }
            if let Some(&o) = self.ownership[f].iter().find(|&&o| o as usize > self.sprite_count) {
                return Err(Error::Data(format!("frame {f} names sprite {o} of {}", self.sprite_count)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Sprite {
    size: (usize, usize),
    origin: (i64, i64),
    velocity: (i64, i64),
    texture: Vec<f32>,
}

/// Reflects `x` into `[0, span]`.
fn reflect(x: i64, span: i64) -> i64 {
    if span == 0 {
        return 0;
    }
    let m = x.rem_euclid(2 * span);
    if m > span {
        2 * span - m
    } else {
        m
    }
}

impl Sprite {
    fn position(&self, time: i64, dims: (usize, usize)) -> (i64, i64) {
        let span_y = (dims.0 - self.size.0) as i64;
        let span_x = (dims.1 - self.size.1) as i64;
        (
            reflect(self.origin.0 + self.velocity.0 * time, span_y),
            reflect(self.origin.1 + self.velocity.1 * time, span_x),
        )
    }

    fn overlaps(&self, other: &Sprite, a: (i64, i64), b: (i64, i64)) -> bool {
        let (ah, aw) = (self.size.0 as i64, self.size.1 as i64);
        let (bh, bw) = (other.size.0 as i64, other.size.1 as i64);
        a.0 < b.0 + bh && b.0 < a.0 + ah && a.1 < b.1 + bw && b.1 < a.1 + aw
    }
}

/// Zero-mean, `contrast`-std noise field smoothed once by a `(2r+1)²` box blur.
fn texture<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, c: usize, contrast: f64, radius: usize) -> Vec<f32> {
    let raw: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = radius as i64;
    let mut field = vec![0.0; raw.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += raw[(yy * w + xx) * c + ch];
                    }
                }
                field[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    field.iter().map(|v| ((v - mean) / std * contrast) as f32).collect()
}

fn speed_bound(v: (i64, i64)) -> i64 {
    v.0.abs().max(v.1.abs())
}

fn sample_sprites<R: Rng + ?Sized>(rng: &mut R, cfg: &SpriteSceneConfig, times: &[i64]) -> Result<Vec<Sprite>> {
    let dims = (cfg.height, cfg.width);
    let (vmin, vmax) = (cfg.speed.0 as i64, cfg.speed.1 as i64);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut sprites: Vec<Sprite> = Vec::with_capacity(cfg.sprites);
        for k in 0..cfg.sprites {
            let size = (
                rng.random_range(cfg.sprite_size.0..=cfg.sprite_size.1),
                rng.random_range(cfg.sprite_size.0..=cfg.sprite_size.1),
            );
            let origin = (
                rng.random_range(0..=(cfg.height - size.0) as i64),
                rng.random_range(0..=(cfg.width - size.1) as i64),
            );
            let velocity = match &cfg.velocities {
                Some(vs) => (vs[k].y as i64, vs[k].x as i64),
                None => loop {
                    let v = (rng.random_range(-vmax..=vmax), rng.random_range(-vmax..=vmax));
                    if speed_bound(v) >= vmin {
                        break v;
                    }
                },
            };
            sprites.push(Sprite {
                size,
                origin,
                velocity,
                texture: Vec::new(),
            });
        }
        let clash = !cfg.allow_occlusion
            && times.iter().any(|&t| {
                (0..sprites.len()).any(|i| {
                    (i + 1..sprites.len()).any(|j| {
                        sprites[i].overlaps(&sprites[j], sprites[i].position(t, dims), sprites[j].position(t, dims))
                    })
                })
            });
        if !clash {
            return Ok(sprites);
        }
    }
    Err(Error::Data(format!(
        "could not place {} non-overlapping sprites after {PLACEMENT_ATTEMPTS} attempts; use fewer or smaller sprites, fewer frames, or allow occlusion",
        cfg.sprites
    )))
}

pub fn generate_sequence(cfg: &SpriteSceneConfig, seed: u64) -> Result<(FrameSequence, GroundTruth)> {
    cfg.validate()?;
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let times = cfg.frame_times();

    let mut scene_rng = item_stream(seed, Stream::Data, 0);
    let background = texture(&mut scene_rng, h, w, c, cfg.background_contrast, cfg.texture_smoothing);
    let background_level = 0.5f32;
    let mut sprites = sample_sprites(&mut scene_rng, cfg, &times)?;
    let mut levels = Vec::with_capacity(sprites.len());
    for s in &mut sprites {
        s.texture = texture(&mut scene_rng, s.size.0, s.size.1, c, cfg.sprite_contrast, cfg.texture_smoothing);
        levels.push(scene_rng.random_range(0.3f32..0.7));
    }
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::config(e.to_string()))?;

    let mut frames = Vec::with_capacity(times.len());
    let mut gt = GroundTruth {
        height: h,
        width: w,
        sprite_count: sprites.len(),
        ownership: Vec::with_capacity(times.len()),
        displacement: Vec::with_capacity(times.len()),
        visible: Vec::with_capacity(times.len()),
    };
    let start: Vec<(i64, i64)> = sprites.iter().map(|s| s.position(0, (h, w))).collect();
    for &time in &times {
        let mut pixels: Vec<f32> = background.iter().map(|v| background_level + v).collect();
        let mut owners = vec![BACKGROUND; h * w];
        let mut disp = Vec::with_capacity(sprites.len());
        for (idx, s) in sprites.iter().enumerate() {
            let (py, px) = s.position(time, (h, w));
            disp.push(((py - start[idx].0) as i32, (px - start[idx].1) as i32));
            for y in 0..s.size.0 {
                for x in 0..s.size.1 {
                    let (fy, fx) = (py as usize + y, px as usize + x);
                    owners[fy * w + fx] = idx as u8 + 1;
                    for ch in 0..c {
                        pixels[(fy * w + fx) * c + ch] = levels[idx] + s.texture[(y * s.size.1 + x) * c + ch];
                    }
                }
            }
        }
        // noise is keyed by the base-motion time so subsampled clips see identical frames
        let mut frame_rng = item_stream(seed, Stream::Data, 1 + time as u64);
        let offset = if cfg.brightness_jitter > 0.0 {
            frame_rng.random_range(-cfg.brightness_jitter..=cfg.brightness_jitter) as f32
        } else {
            0.0
        };
        for p in pixels.iter_mut() {
            let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut frame_rng) as f32 } else { 0.0 };
            *p = (*p + offset + n).clamp(0.0, 1.0);
        }
        let visible = (0..sprites.len()).map(|i| owners.contains(&(i as u8 + 1))).collect();
        frames.push(Tensor::new(vec![h, w, c], pixels)?);
        gt.ownership.push(owners);
        gt.displacement.push(disp);
        gt.visible.push(visible);
    }
    Ok((FrameSequence::new(frames, cfg.frame_rate_tag())?, gt))
}

/// Ground-truth correspondence of grid nodes from frame `from` to frame `to`.
///
/// A node follows the sprite owning its center (background stays put) and
/// maps to the grid node nearest its displaced center. It is invalid if the
/// displaced center leaves the frame or is owned by something else at `to`.
pub fn correspondence_labels(gt: &GroundTruth, grid: &GridGeometry, from: usize, to: usize) -> Result<CorrespondenceLabels> {
    if from >= gt.frames() || to >= gt.frames() {
        return Err(Error::Usage(format!("frames {from}->{to} outside a {}-frame sequence", gt.frames())));
    }
    let targets = (0..grid.len())
        .map(|i| {
            let (r, c) = grid.center(i);
            let owner = gt.owner(from, r, c);
            let (dy, dx) = if owner == BACKGROUND {
                (0, 0)
            } else {
                let s = owner as usize - 1;
                let (a, b) = (gt.displacement[from][s], gt.displacement[to][s]);
                ((b.0 - a.0) as i64, (b.1 - a.1) as i64)
            };
            let (nr, nc) = (r as i64 + dy, c as i64 + dx);
            if nr < 0 || nc < 0 || nr >= gt.height as i64 || nc >= gt.width as i64 {
                return None;
            }
            if gt.owner(to, nr as usize, nc as usize) != owner {
                return None;
            }
            Some(grid.nearest_node(nr as f64, nc as f64))
        })
        .collect();
    Ok(CorrespondenceLabels { targets })
}

/// One-hot node labels from the owner of each grid center; `S + 1` classes.
pub fn grid_labels(gt: &GroundTruth, grid: &GridGeometry) -> Result<Vec<LabelMatrix>> {
    (0..gt.frames())
        .map(|f| {
            let classes: Vec<usize> = grid
                .centers()
                .into_iter()
                .map(|(r, c)| gt.owner(f, r, c) as usize)
                .collect();
            LabelMatrix::one_hot(&classes, gt.classes())
        })
        .collect()
}

/// Argmax class per node, per frame.
pub fn grid_classes(gt: &GroundTruth, grid: &GridGeometry) -> Vec<Vec<usize>> {
    (0..gt.frames())
        .map(|f| {
            grid.centers()
                .into_iter()
                .map(|(r, c)| gt.owner(f, r, c) as usize)
                .collect()
        })
        .collect()
}

/// Which split a generated sequence belongs to. Scene seeds never collide across splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    /// First scene index of the split; train uses `[0, 2³²)`, held-out `[2³², 2³³)`.
    pub fn base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Heldout => 1 << 32,
        }
    }
}

pub fn scene_seed(master: u64, split: Split, index: u64) -> u64 {
    crate::rng::item_seed(master, split.base() + index)
}

pub fn generate_split(
    cfg: &SpriteSceneConfig,
    master: u64,
    split: Split,
    count: usize,
) -> Result<Vec<(FrameSequence, GroundTruth)>> {
    (0..count as u64)
        .map(|i| generate_sequence(cfg, scene_seed(master, split, i)))
        .collect()
}
