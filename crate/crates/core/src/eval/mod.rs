//! Walk accuracy, node-level IoU, entropy diagnostics and ablation sweeps.

mod sweep;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Real, Tensor};
use crate::encoder::embed_frame;
use crate::error::{Error, Result};
use crate::graph_builder::FrameSequence;
use crate::label_prop::{propagate_video, PropagationConfig};
use crate::synth_data::{correspondence_labels, grid_classes, grid_labels, GroundTruth};
use crate::trainer::TrainConfig;
use crate::walk_core::{cycle_and_subcycle_losses, transition_energies, walk, CorrespondenceLabels, DropoutForm, TransitionMatrix};

pub use sweep::{run_sweep, SweepAxis, SweepCell, SweepTable};

/// Fraction of valid rows whose argmax (ties low) is the labeled target.
pub fn walk_accuracy<F: Real>(walk: &TransitionMatrix<F>, labels: &CorrespondenceLabels) -> Result<f64> {
    let (correct, valid) = walk_hits(walk, labels)?;
    if valid == 0 {
        return Err(Error::Data("no valid correspondence rows".into()));
    }
    Ok(correct as f64 / valid as f64)
}

fn walk_hits<F: Real>(walk: &TransitionMatrix<F>, labels: &CorrespondenceLabels) -> Result<(usize, usize)> {
    if walk.n() != labels.len() {
        return Err(Error::Usage(format!("walk has {} rows, labels {}", walk.n(), labels.len())));
    }
    let mut correct = 0;
    let mut valid = 0;
    for (i, target) in labels.valid() {
        valid += 1;
        if walk.row_argmax(i) == target {
            correct += 1;
        }
    }
    Ok((correct, valid))
}

pub fn mean_row_entropy<F: Real>(walk: &TransitionMatrix<F>) -> f64 {
    (0..walk.n()).map(|i| walk.row_entropy(i)).sum::<f64>() / walk.n() as f64
}

/// Mean over classes present in `truth` (frames after the first) of
/// `|pred ∩ truth| / |pred ∪ truth|`.
pub fn propagation_score(predicted: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Usage(format!("{} predicted frames vs {} truth frames", predicted.len(), truth.len())));
    }
    let classes = truth
        .iter()
        .chain(predicted)
        .flatten()
        .copied()
        .max()
        .map_or(0, |m| m + 1);
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    let mut present = vec![false; classes];
    for (p, t) in predicted.iter().zip(truth).skip(1) {
        if p.len() != t.len() {
            return Err(Error::Usage("predicted and truth grids differ in size".into()));
        }
        for (&a, &b) in p.iter().zip(t) {
            present[b] = true;
            if a == b {
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    let scores: Vec<f64> = (0..classes)
        .filter(|&c| present[c])
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    if scores.is_empty() {
        return Err(Error::Data("no frames after the first to score".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopMetrics {
    pub hop: usize,
    pub walk_accuracy: f64,
    /// Mean per-row entropy of the walk matrices.
    pub entropy: f64,
    /// Rows with a valid target, summed over sequences and start frames.
    pub valid_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hops: Vec<HopMetrics>,
    pub mean_iou: Option<f64>,
    pub mean_return_probability: f64,
    pub sequences: usize,
    pub version: String,
    pub config: serde_json::Value,
    pub wall_time_s: f64,
}

impl MetricsReport {
    pub fn accuracy_at(&self, hop: usize) -> Option<f64> {
        self.hops.iter().find(|h| h.hop == hop).map(|h| h.walk_accuracy)
    }
}

fn embed_sequence(params: &ParamSet<f64>, seq: &FrameSequence, cfg: &TrainConfig) -> Result<Vec<Tensor<f64>>> {
    seq.frames
        .iter()
        .map(|f| embed_frame(&cfg.encoder, &cfg.grid, params, f))
        .collect()
}

/// Walk accuracy and entropy per hop, micro-averaged over every start frame of
/// every sequence, plus the mean return probability of the first clip.
pub fn evaluate_walks(params: &ParamSet<f64>, data: &[(FrameSequence, GroundTruth)], cfg: &TrainConfig, hops: &[usize]) -> Result<(Vec<HopMetrics>, f64)> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut hits = vec![(0usize, 0usize); hops.len()];
    let mut entropy = vec![(0.0f64, 0usize); hops.len()];
    let mut ret = 0.0;
    for (seq, gt) in data {
        let (h, w, _) = seq.dims();
        let grid = cfg.grid.geometry(h, w)?;
        let q = embed_sequence(params, seq, cfg)?;
        let energies = (0..q.len() - 1)
            .map(|t| transition_energies(&q[t], &q[t + 1], cfg.walk.temperature))
            .collect::<Result<Vec<_>>>()?;
        let steps: Vec<TransitionMatrix<f64>> = energies.iter().map(|e| e.row_softmax()).collect();
        for (slot, &k) in hops.iter().enumerate() {
            for t in 0..q.len().saturating_sub(k) {
                let a = walk(&steps[t..t + k])?;
                let y = correspondence_labels(gt, &grid, t, t + k)?;
                let (c, v) = walk_hits(&a, &y)?;
                hits[slot].0 += c;
                hits[slot].1 += v;
                entropy[slot].0 += mean_row_entropy(&a);
                entropy[slot].1 += 1;
            }
        }
        let clip = cfg.clip_len.min(q.len()) - 1;
        ret += cycle_and_subcycle_losses(&energies[..clip], None, DropoutForm::PreSoftmax)?.mean_return_probability;
    }
    let metrics = hops
        .iter()
        .enumerate()
        .map(|(slot, &hop)| {
            let (c, v) = hits[slot];
            if v == 0 {
                return Err(Error::Data(format!("no valid rows at hop {hop}")));
            }
            Ok(HopMetrics {
                hop,
                walk_accuracy: c as f64 / v as f64,
                entropy: entropy[slot].0 / entropy[slot].1 as f64,
                valid_rows: v,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((metrics, ret / data.len() as f64))
}

/// Mean over sequences of the node-level IoU after propagating frame-0 labels.
pub fn evaluate_propagation(params: &ParamSet<f64>, data: &[(FrameSequence, GroundTruth)], cfg: &TrainConfig, prop: &PropagationConfig) -> Result<f64> {
    let mut total = 0.0;
    for (seq, gt) in data {
        total += sequence_propagation_score(params, seq, gt, cfg, prop)?;
    }
    Ok(total / data.len().max(1) as f64)
}

pub fn sequence_propagation_score(params: &ParamSet<f64>, seq: &FrameSequence, gt: &GroundTruth, cfg: &TrainConfig, prop: &PropagationConfig) -> Result<f64> {
    let (h, w, _) = seq.dims();
    let grid = cfg.grid.geometry(h, w)?;
    let q = embed_sequence(params, seq, cfg)?;
    let l0 = grid_labels(gt, &grid)?.swap_remove(0);
    let p = propagate_video(&q, &grid, &l0, prop)?;
    propagation_score(&p.hard, &grid_classes(gt, &grid))
}

pub fn evaluate(
    params: &ParamSet<f64>,
    data: &[(FrameSequence, GroundTruth)],
    cfg: &TrainConfig,
    hops: &[usize],
    prop: Option<&PropagationConfig>,
    config: serde_json::Value,
) -> Result<MetricsReport> {
    let started = Instant::now();
    let (hop_metrics, ret) = evaluate_walks(params, data, cfg, hops)?;
    let mean_iou = match prop {
        Some(p) => Some(evaluate_propagation(params, data, cfg, p)?),
        None => None,
    };
    Ok(MetricsReport {
        hops: hop_metrics,
        mean_iou,
        mean_return_probability: ret,
        sequences: data.len(),
        version: crate::version_string(),
        config,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
