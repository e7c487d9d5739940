//! k-NN label propagation over a context queue of earlier frames.
//!
//! Each target node attends to the `k_nn` most similar source nodes within a
//! Chebyshev grid radius, pooled over every queued frame at once. Weights are
//! a softmax over just the selected similarities.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph_builder::GridGeometry;

/// `N×C` label distributions; rows sum to 1 or are all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix(Tensor<f64>);

impl LabelMatrix {
    pub fn new(values: Tensor<f64>) -> Result<Self> {
        let (_, c) = values.dims2()?;
        if c == 0 {
            return Err(Error::Data("label matrix needs at least one class".into()));
        }
        for (i, row) in values.rows().enumerate() {
            if row.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Data(format!("label row {i} has a negative entry")));
            }
            let s: f64 = row.iter().sum();
            if s != 0.0 && (s - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!("label row {i} sums to {s}")));
            }
        }
        Ok(LabelMatrix(values))
    }

    pub fn one_hot(classes: &[usize], num_classes: usize) -> Result<Self> {
        let mut t = Tensor::zeros(&[classes.len(), num_classes]);
        for (i, &c) in classes.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::Data(format!("class {c} out of {num_classes}")));
            }
            t.set(i, c, 1.0);
        }
        Ok(LabelMatrix(t))
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.0
    }

    pub fn nodes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    /// Argmax per row, ties toward the lower class.
    pub fn hard(&self) -> Vec<usize> {
        self.0
            .rows()
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    pub k_nn: usize,
    pub context: usize,
    /// Chebyshev radius in grid cells.
    pub radius: f64,
    pub temperature: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            k_nn: 10,
            context: 20,
            radius: 12.0,
            temperature: 0.07,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_nn == 0 || self.context == 0 {
            return Err(Error::config("k_nn and context must be at least 1"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::config(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// One queued frame: unit-norm embeddings and (predicted) labels.
#[derive(Debug, Clone)]
pub struct SourceFrame {
    pub frame: usize,
    pub embeddings: Tensor<f64>,
    pub labels: LabelMatrix,
}

/// The first labeled frame plus a FIFO of the last `m` predictions.
#[derive(Debug, Clone)]
pub struct ContextQueue {
    first: SourceFrame,
    recent: VecDeque<SourceFrame>,
    capacity: usize,
}

impl ContextQueue {
    pub fn new(first: SourceFrame, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("context length must be at least 1"));
        }
        check_frame(&first)?;
        Ok(ContextQueue {
            first,
            recent: VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    pub fn push(&mut self, frame: SourceFrame) -> Result<()> {
        check_frame(&frame)?;
        if frame.embeddings.shape() != self.first.embeddings.shape() || frame.labels.classes() != self.first.labels.classes() {
            return Err(Error::Usage("queued frames must share node count, width and classes".into()));
        }
        if self.recent.len() == self.capacity {
            self.recent.pop_front();
        }
        self.recent.push_back(frame);
        Ok(())
    }

    /// First frame, then the recent frames oldest first. Flattened source
    /// indices follow this order.
    pub fn frames(&self) -> impl Iterator<Item = &SourceFrame> {
        std::iter::once(&self.first).chain(self.recent.iter())
    }

    pub fn frames_mut(&mut self) -> impl Iterator<Item = &mut SourceFrame> {
        std::iter::once(&mut self.first).chain(self.recent.iter_mut())
    }

    pub fn len(&self) -> usize {
        1 + self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nodes_per_frame(&self) -> usize {
        self.first.labels.nodes()
    }

    pub fn classes(&self) -> usize {
        self.first.labels.classes()
    }
}

fn check_frame(f: &SourceFrame) -> Result<()> {
    let (n, _) = f.embeddings.dims2()?;
    if n != f.labels.nodes() {
        return Err(Error::Usage(format!("{n} embeddings but {} labels", f.labels.nodes())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelRow {
    /// Flattened source indices, best first.
    pub sources: Vec<usize>,
    pub weights: Vec<f64>,
    /// No source lay within the radius; all sources were candidates.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub rows: Vec<KernelRow>,
    pub source_count: usize,
}

impl Kernel {
    pub fn fallbacks(&self) -> usize {
        self.rows.iter().filter(|r| r.fallback).count()
    }
}

/// Heap entry ordered so the heap top is the worst kept candidate: lower
/// score, then higher index.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    score: f64,
    index: usize,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.index.cmp(&other.index))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn chebyshev(a: (usize, usize), b: (usize, usize)) -> f64 {
    (a.0.abs_diff(b.0)).max(a.1.abs_diff(b.1)) as f64
}

pub fn build_kernel(target: &Tensor<f64>, grid: &GridGeometry, queue: &ContextQueue, cfg: &PropagationConfig) -> Result<Kernel> {
    cfg.validate()?;
    let (nt, d) = target.dims2()?;
    let n = queue.nodes_per_frame();
    if nt != grid.len() || n != grid.len() {
        return Err(Error::Usage(format!(
            "grid has {} nodes but target has {nt} and sources {n}",
            grid.len()
        )));
    }
    let frames: Vec<&SourceFrame> = queue.frames().collect();
    if frames[0].embeddings.shape()[1] != d {
        return Err(Error::Usage("target and source embedding widths differ".into()));
    }
    let inv_t = 1.0 / cfg.temperature;
    let mut rows = Vec::with_capacity(nt);
    for i in 0..nt {
        let cell = grid.cell(i);
        let q = target.row(i);
        let mut heap: BinaryHeap<Scored> = BinaryHeap::with_capacity(cfg.k_nn + 1);
        let scan = |restricted: bool, heap: &mut BinaryHeap<Scored>| {
            for (f, src) in frames.iter().enumerate() {
                for j in 0..n {
                    if restricted && chebyshev(cell, grid.cell(j)) > cfg.radius {
                        continue;
                    }
                    let s = Scored {
                        score: dot(q, src.embeddings.row(j)) * inv_t,
                        index: f * n + j,
                    };
                    if heap.len() < cfg.k_nn {
                        heap.push(s);
                    } else if s < *heap.peek().expect("non-empty") {
                        heap.pop();
                        heap.push(s);
                    }
                }
            }
        };
        scan(true, &mut heap);
        let fallback = heap.is_empty();
        if fallback {
            scan(false, &mut heap);
        }
        // ascending by Ord = best first
        let picked = heap.into_sorted_vec();
        let top = picked[0].score;
        let exp: Vec<f64> = picked.iter().map(|s| (s.score - top).exp()).collect();
        let z: f64 = exp.iter().sum();
        rows.push(KernelRow {
            sources: picked.iter().map(|s| s.index).collect(),
            weights: exp.iter().map(|e| e / z).collect(),
            fallback,
        });
    }
    Ok(Kernel {
        rows,
        source_count: frames.len() * n,
    })
}

/// `K · L_sources`.
pub fn apply_kernel(kernel: &Kernel, queue: &ContextQueue) -> Result<LabelMatrix> {
    let n = queue.nodes_per_frame();
    let c = queue.classes();
    let frames: Vec<&SourceFrame> = queue.frames().collect();
    if kernel.source_count != frames.len() * n {
        return Err(Error::Usage("kernel was built for a different queue".into()));
    }
    let mut out = Tensor::zeros(&[kernel.rows.len(), c]);
    for (i, row) in kernel.rows.iter().enumerate() {
        for (&s, &w) in row.sources.iter().zip(&row.weights) {
            let labels = frames[s / n].labels.row(s % n);
            for (k, &l) in labels.iter().enumerate() {
                out.set(i, k, out.get(i, k) + w * l);
            }
        }
    }
    LabelMatrix::new(out)
}

/// Online propagation state; frames must be fed in temporal order.
#[derive(Debug, Clone)]
pub struct Propagator {
    queue: ContextQueue,
    grid: GridGeometry,
    cfg: PropagationConfig,
    fallbacks: usize,
}

impl Propagator {
    pub fn new(first_embeddings: Tensor<f64>, first_labels: LabelMatrix, grid: GridGeometry, cfg: PropagationConfig) -> Result<Self> {
        cfg.validate()?;
        let queue = ContextQueue::new(
            SourceFrame {
                frame: 0,
                embeddings: first_embeddings,
                labels: first_labels,
            },
            cfg.context,
        )?;
        Ok(Propagator {
            queue,
            grid,
            cfg,
            fallbacks: 0,
        })
    }

    pub fn step(&mut self, frame: usize, embeddings: Tensor<f64>) -> Result<LabelMatrix> {
        let kernel = build_kernel(&embeddings, &self.grid, &self.queue, &self.cfg)?;
        self.fallbacks += kernel.fallbacks();
        let labels = apply_kernel(&kernel, &self.queue)?;
        self.queue.push(SourceFrame {
            frame,
            embeddings,
            labels: labels.clone(),
        })?;
        Ok(labels)
    }

    /// Replaces every queued embedding, e.g. after the encoder has been adapted.
    pub fn refresh_embeddings(&mut self, mut embed: impl FnMut(usize) -> Result<Tensor<f64>>) -> Result<()> {
        for f in self.queue.frames_mut() {
            let e = embed(f.frame)?;
            if e.shape() != f.embeddings.shape() {
                return Err(Error::Usage("refreshed embeddings changed shape".into()));
            }
            f.embeddings = e;
        }
        Ok(())
    }

    pub fn queued_frames(&self) -> Vec<usize> {
        self.queue.frames().map(|f| f.frame).collect()
    }

    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    /// Frame 0 holds the given labels.
    pub soft: Vec<LabelMatrix>,
    pub hard: Vec<Vec<usize>>,
    /// Target nodes that found no source within the radius.
    pub fallbacks: usize,
}

pub fn propagate_video(embeddings: &[Tensor<f64>], grid: &GridGeometry, l0: &LabelMatrix, cfg: &PropagationConfig) -> Result<Propagation> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Usage("propagation needs at least one frame".into()))?;
    let mut prop = Propagator::new(first.clone(), l0.clone(), *grid, *cfg)?;
    let mut soft = vec![l0.clone()];
    for (t, e) in embeddings.iter().enumerate().skip(1) {
        soft.push(prop.step(t, e.clone())?);
    }
    let hard = soft.iter().map(LabelMatrix::hard).collect();
    Ok(Propagation {
        soft,
        hard,
        fallbacks: prop.fallbacks(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub frame: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub hard: Vec<usize>,
    /// One row of per-class scores per node.
    pub soft: Vec<Vec<f64>>,
}

pub fn export_predictions(p: &Propagation, grid: &GridGeometry) -> Vec<FramePrediction> {
    p.soft
        .iter()
        .zip(&p.hard)
        .enumerate()
        .map(|(frame, (soft, hard))| FramePrediction {
            frame,
            grid_rows: grid.rows,
            grid_cols: grid.cols,
            hard: hard.clone(),
            soft: soft.tensor().rows().map(<[f64]>::to_vec).collect(),
        })
        .collect()
}
