//! Test-time adaptation: short self-supervised fine-tuning on a window of the
//! video being propagated, always restarting from the global parameters.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::encoder::embed_frame;
use crate::error::{Error, Result};
use crate::label_prop::{LabelMatrix, Propagation, PropagationConfig, Propagator};
use crate::rng::{item_seed, Stream};

use super::{adam_update, deterministic_clip_loss, train_step, AdamState, Clip, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub updates: u64,
    pub learning_rate: f64,
    /// Window covers `t-m ..= t+m`, clamped to the sequence.
    pub half_window: usize,
    /// Propagation steps between adaptations.
    pub every: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            updates: 100,
            learning_rate: 1e-4,
            half_window: 10,
            every: 5,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("adaptation learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.every == 0 {
            return Err(Error::config("adaptation cadence must be at least 1"));
        }
        Ok(())
    }
}

pub fn adaptation_window(len: usize, t: usize, half: usize) -> Range<usize> {
    t.saturating_sub(half)..(t + half + 1).min(len)
}

fn window_clip_len(window: &[Tensor<f32>], train: &TrainConfig) -> Result<usize> {
    if window.len() < 2 {
        return Err(Error::Usage(format!("adaptation window has {} frame(s), need at least 2", window.len())));
    }
    Ok(train.clip_len.min(window.len()))
}

/// Adapted copy of `params` after `cfg.updates` training steps on `window`.
///
/// Step `u` uses the clips starting at `(u·B + b) mod (W − T + 1)`, so every
/// start position is visited in turn. `seed` keys jitter and dropout.
pub fn test_time_adapt(
    params: &ParamSet<f64>,
    window: &[Tensor<f32>],
    train: &TrainConfig,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<ParamSet<f64>> {
    cfg.validate()?;
    let t = window_clip_len(window, train)?;
    let local = TrainConfig {
        clip_len: t,
        seed: item_seed(seed, Stream::Adapt as u64),
        ..train.clone()
    };
    local.validate()?;
    let starts = window.len() - t + 1;
    let b = local.batch_size;
    let mut adapted = params.clone();
    let mut adam = AdamState::new(&adapted);
    for u in 0..cfg.updates {
        let batch: Vec<Clip<'_>> = (0..b)
            .map(|k| {
                let start = ((u as usize) * b + k) % starts;
                Clip {
                    frames: &window[start..start + t],
                    sequence: 0,
                    start,
                }
            })
            .collect();
        let (_, grads) = train_step(&adapted, &batch, &local, u)?;
        adam_update(&mut adapted, &grads, &mut adam, cfg.learning_rate, &local.adam)?;
    }
    Ok(adapted)
}

/// Mean deterministic cycle loss over every clip start in the window.
pub fn window_loss(params: &ParamSet<f64>, window: &[Tensor<f32>], train: &TrainConfig) -> Result<f64> {
    let t = window_clip_len(window, train)?;
    let local = TrainConfig {
        clip_len: t,
        ..train.clone()
    };
    let starts = window.len() - t + 1;
    let mut total = 0.0;
    for s in 0..starts {
        total += deterministic_clip_loss(params, &window[s..s + t], &local)?.total;
    }
    Ok(total / starts as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRecord {
    /// Propagation step at which the adaptation ran.
    pub frame: usize,
    pub window: (usize, usize),
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptedPropagation {
    pub propagation: Propagation,
    pub adaptations: Vec<AdaptRecord>,
}

/// Online propagation with adaptation before steps `1, 1+every, …`. After each
/// adaptation the queued source embeddings are recomputed with the adapted encoder.
pub fn adapt_and_propagate(
    params: &ParamSet<f64>,
    frames: &[Tensor<f32>],
    l0: &LabelMatrix,
    train: &TrainConfig,
    prop: &PropagationConfig,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<AdaptedPropagation> {
    let (h, w) = match frames.first() {
        Some(f) => (f.shape()[0], f.shape()[1]),
        None => return Err(Error::Usage("propagation needs at least one frame".into())),
    };
    let grid = train.grid.geometry(h, w)?;
    let embed = |p: &ParamSet<f64>, t: usize| embed_frame(&train.encoder, &train.grid, p, &frames[t]);
    let mut propagator = Propagator::new(embed(params, 0)?, l0.clone(), grid, *prop)?;
    let mut current = params.clone();
    let mut soft = vec![l0.clone()];
    let mut adaptations = Vec::new();
    for t in 1..frames.len() {
        if (t - 1) % cfg.every == 0 {
            let range = adaptation_window(frames.len(), t, cfg.half_window);
            let window = &frames[range.clone()];
            let loss_before = window_loss(params, window, train)?;
            current = test_time_adapt(params, window, train, cfg, item_seed(seed, t as u64))?;
            let loss_after = window_loss(&current, window, train)?;
            adaptations.push(AdaptRecord {
                frame: t,
                window: (range.start, range.end),
                loss_before,
                loss_after,
            });
            propagator.refresh_embeddings(|f| embed(&current, f))?;
        }
        soft.push(propagator.step(t, embed(&current, t)?)?);
    }
    let hard = soft.iter().map(LabelMatrix::hard).collect();
    Ok(AdaptedPropagation {
        propagation: Propagation {
            soft,
            hard,
            fallbacks: propagator.fallbacks(),
        },
        adaptations,
    })
}
