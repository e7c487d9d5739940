//! Cycle-consistency training: clip sampling, per-clip graphs, Adam, checkpoints.

mod adam;
mod adapt;
mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, Bindings, GradCheckOptions, GradCheckReport, Graph, ParamSet, Precision, Probe, Real, Tensor};
use crate::encoder::{build_encoder, check_params, init_encoder, patch_matrix, EncoderConfig, PATCH_INPUT};
use crate::error::{Error, Result};
use crate::graph_builder::{extract_patches, spatial_jitter, FrameSequence, PatchGridConfig};
use crate::rng::{item_stream, Stream};
use crate::walk_core::{build_cycle_objective, dropout_mask, loss_report, mask_input_name, LossReport, WalkConfig};

pub use adam::{adam_update, AdamConfig, AdamState};
pub use adapt::{adapt_and_propagate, adaptation_window, test_time_adapt, window_loss, AdaptConfig, AdaptedPropagation};
pub use checkpoint::{
    decode_params, encode_params, sidecar_path, Checkpoint, CheckpointMeta, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub walk: WalkConfig,
    pub clip_len: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub precision: Precision,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Steps between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Random resized crops on every patch during training.
    pub jitter: bool,
    pub grid: PatchGridConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            walk: WalkConfig::default(),
            clip_len: 4,
            batch_size: 4,
            steps: 2000,
            precision: Precision::F64,
            seed: 0,
            adam: AdamConfig::default(),
            checkpoint_every: 500,
            jitter: true,
            grid: PatchGridConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.clip_len < 2 {
            return Err(Error::config(format!("clip_len must be at least 2, got {}", self.clip_len)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.grid.patch_size != self.encoder.patch_size {
            return Err(Error::config(format!(
                "grid patch size {} differs from encoder patch size {}",
                self.grid.patch_size, self.encoder.patch_size
            )));
        }
        self.walk.validate()?;
        self.adam.validate()?;
        self.grid.validate()?;
        self.encoder.validate()
    }
}

/// A training clip borrowed from a sequence.
#[derive(Debug, Clone, Copy)]
pub struct Clip<'a> {
    pub frames: &'a [Tensor<f32>],
    pub sequence: usize,
    pub start: usize,
}

/// Graph inputs for one clip.
#[derive(Debug, Clone)]
pub struct ClipInputs<F> {
    /// `(T·N)×D` mean-subtracted patch rows, frame-major.
    pub patches: Tensor<F>,
    pub nodes_per_frame: usize,
    pub frames: usize,
    /// One drop mask per palindrome step; empty without dropout.
    pub masks: Vec<Tensor<F>>,
}

/// Patches (optionally jittered) and drop masks for a clip, drawing from the
/// given generators in a fixed order.
pub fn prepare_clip<F: Real, R: Rng + ?Sized>(
    frames: &[Tensor<f32>],
    cfg: &TrainConfig,
    jitter_rng: Option<&mut R>,
    dropout_rng: Option<&mut R>,
) -> Result<ClipInputs<F>> {
    let mut all = Vec::new();
    let mut n = 0;
    let mut jitter_rng = jitter_rng;
    for f in frames {
        let mut nodes = extract_patches(f, &cfg.grid)?;
        if let Some(rng) = jitter_rng.as_deref_mut() {
            nodes = spatial_jitter(&nodes, rng, &cfg.grid)?;
        }
        n = nodes.len();
        all.extend(nodes.patches);
    }
    let hops = frames.len().saturating_sub(1);
    let masks = match dropout_rng {
        Some(rng) if cfg.walk.edge_dropout > 0.0 => (0..2 * hops)
            .map(|_| dropout_mask(rng, n, n, cfg.walk.edge_dropout, cfg.walk.dropout_form))
            .collect(),
        _ => Vec::new(),
    };
    Ok(ClipInputs {
        patches: patch_matrix(&all, &cfg.encoder)?,
        nodes_per_frame: n,
        frames: frames.len(),
        masks,
    })
}

/// Cycle loss of one clip and its gradient with respect to the encoder.
pub fn clip_objective<F: Real>(params: &ParamSet<F>, inputs: &ClipInputs<F>, cfg: &TrainConfig) -> Result<(LossReport, ParamSet<F>)> {
    let mut g = Graph::new();
    let x = g.input(PATCH_INPUT);
    let emb = build_encoder(&mut g, &cfg.encoder, x);
    let with_dropout = !inputs.masks.is_empty();
    let nodes = build_cycle_objective(&mut g, emb, inputs.frames, inputs.nodes_per_frame, &cfg.walk, with_dropout)?;
    let mut bind = Bindings::new();
    bind.insert(PATCH_INPUT.to_string(), inputs.patches.clone());
    for (k, m) in inputs.masks.iter().enumerate() {
        bind.insert(mask_input_name(k), m.clone());
    }
    g.forward_eval(&bind, params)?;
    let report = loss_report(&g, &nodes)?;
    let grads = g.backward(nodes.total)?;
    Ok((report, grads))
}

/// Per-clip generators for clip `b` of step `step`.
fn clip_streams(seed: u64, step: u64, batch: usize, b: usize) -> (rand_chacha::ChaCha8Rng, rand_chacha::ChaCha8Rng) {
    let item = step * batch as u64 + b as u64;
    (item_stream(seed, Stream::Jitter, item), item_stream(seed, Stream::Dropout, item))
}

/// Mean loss and gradient over `batch`. Randomness is drawn sequentially
/// from streams keyed by `(cfg.seed, step, clip)`; clip graphs may run in
/// parallel and are reduced in batch order.
pub fn train_step<F: Real>(params: &ParamSet<F>, batch: &[Clip<'_>], cfg: &TrainConfig, step: u64) -> Result<(LossReport, ParamSet<F>)> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let len = batch[0].frames.len();
    if let Some(bad) = batch.iter().position(|c| c.frames.len() != len) {
        return Err(Error::Usage(format!("clip {bad} has {} frames, expected {len}", batch[bad].frames.len())));
    }
    let inputs = batch
        .iter()
        .enumerate()
        .map(|(b, clip)| {
            let (mut j, mut d) = clip_streams(cfg.seed, step, batch.len(), b);
            prepare_clip::<F, _>(clip.frames, cfg, cfg.jitter.then_some(&mut j), Some(&mut d))
        })
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<Result<(LossReport, ParamSet<F>)>> = inputs.par_iter().map(|inp| clip_objective(params, inp, cfg)).collect();

    let mut grads = params.zeros_like();
    let mut subcycle = vec![0.0; len - 1];
    let (mut total, mut ret) = (0.0, 0.0);
    for (b, r) in results.into_iter().enumerate() {
        let (report, g) = r.map_err(|e| match e {
            Error::NonFinite(at) => Error::NonFinite(format!(
                "{at} in clip {b} of step {step} (sequence {}, frames {}..{})",
                batch[b].sequence,
                batch[b].start,
                batch[b].start + len
            )),
            other => other,
        })?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!("total loss of clip {b} in step {step}")));
        }
        grads.axpy(F::ONE, &g)?;
        for (s, v) in subcycle.iter_mut().zip(&report.subcycle) {
            *s += v;
        }
        total += report.total;
        ret += report.mean_return_probability;
    }
    let inv = 1.0 / batch.len() as f64;
    let mut mean = params.zeros_like();
    mean.axpy(F::from_f64(inv), &grads)?;
    Ok((
        LossReport {
            subcycle: subcycle.into_iter().map(|s| s * inv).collect(),
            total: total * inv,
            mean_return_probability: ret * inv,
        },
        mean,
    ))
}

/// Chooses `batch` clips of length `clip_len` uniformly over eligible sequences and starts.
pub fn sample_batch<'a>(dataset: &'a [FrameSequence], clip_len: usize, batch: usize, seed: u64, step: u64) -> Result<Vec<Clip<'a>>> {
    let eligible: Vec<usize> = (0..dataset.len()).filter(|&i| dataset[i].len() >= clip_len).collect();
    if eligible.is_empty() {
        return Err(Error::Data(format!("no sequence has at least {clip_len} frames")));
    }
    let mut rng = item_stream(seed, Stream::Clips, step);
    Ok((0..batch)
        .map(|_| {
            let sequence = eligible[rng.random_range(0..eligible.len())];
            let start = rng.random_range(0..=dataset[sequence].len() - clip_len);
            Clip {
                frames: &dataset[sequence].frames[start..start + clip_len],
                sequence,
                start,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub total_loss: f64,
    pub subcycle_losses: Vec<f64>,
    pub mean_return_probability: f64,
    pub wall_time_s: f64,
}

/// Called after each checkpointed step with the current parameters.
pub type EvalHook<'a> = dyn FnMut(u64, &ParamSet<f64>) -> Result<serde_json::Value> + 'a;

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Where checkpoints and `history.jsonl` go; nothing is written without it.
    pub out_dir: Option<PathBuf>,
    /// Embedded in every file written.
    pub config_echo: serde_json::Value,
    /// Starting parameters; fresh initialization from `cfg.seed` otherwise.
    pub init: Option<ParamSet<f64>>,
    pub eval: Option<Box<EvalHook<'a>>>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ParamSet<f64>,
    pub history: Vec<StepRecord>,
    /// `(step, metrics)` from the eval hook.
    pub evals: Vec<(u64, serde_json::Value)>,
    pub checkpoints: Vec<PathBuf>,
}

pub const HISTORY_FILE: &str = "history.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.cwck";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.cwck")
}

pub fn fit(dataset: &[FrameSequence], cfg: &TrainConfig, opts: FitOptions<'_>) -> Result<FitResult> {
    match cfg.precision {
        Precision::F64 => fit_impl::<f64>(dataset, cfg, opts),
        Precision::F32 => fit_impl::<f32>(dataset, cfg, opts),
    }
}

struct HistoryWriter {
    path: PathBuf,
    out: std::io::BufWriter<std::fs::File>,
}

impl HistoryWriter {
    fn create(dir: &Path, echo: &serde_json::Value) -> Result<Self> {
        let path = dir.join(HISTORY_FILE);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = HistoryWriter {
            path,
            out: std::io::BufWriter::new(file),
        };
        let header = serde_json::json!({"kind": "header", "version": crate::version_string(), "config": echo});
        w.line(&header)?;
        Ok(w)
    }

    fn line(&mut self, v: &serde_json::Value) -> Result<()> {
        writeln!(self.out, "{v}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn fit_impl<F: Real>(dataset: &[FrameSequence], cfg: &TrainConfig, mut opts: FitOptions<'_>) -> Result<FitResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let init = match opts.init.take() {
        Some(p) => p,
        None => init_encoder(&cfg.encoder, cfg.seed)?,
    };
    check_params(&cfg.encoder, &init)?;
    let mut params: ParamSet<F> = init.cast();
    let mut adam = AdamState::new(&params);
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut history_out = match &opts.out_dir {
        Some(dir) => Some(HistoryWriter::create(dir, &opts.config_echo)?),
        None => None,
    };
    let mut result = FitResult {
        params: ParamSet::new(),
        history: Vec::with_capacity(cfg.steps as usize),
        evals: Vec::new(),
        checkpoints: Vec::new(),
    };
    let started = Instant::now();
    let save = |result: &mut FitResult, params: &ParamSet<f64>, done: u64, name: String| -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            let path = dir.join(name);
            Checkpoint {
                params: params.clone(),
                meta: CheckpointMeta {
                    version: crate::version_string(),
                    step: done,
                    rng: RngState {
                        seed: cfg.seed,
                        next_step: done,
                    },
                    config: opts.config_echo.clone(),
                },
            }
            .save(&path)?;
            result.checkpoints.push(path);
        }
        Ok(())
    };
    for step in 0..cfg.steps {
        let batch = sample_batch(dataset, cfg.clip_len, cfg.batch_size, cfg.seed, step)?;
        let (report, grads) = train_step(&params, &batch, cfg, step)?;
        adam_update(&mut params, &grads, &mut adam, cfg.learning_rate, &cfg.adam)?;
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after step {step}")));
        }
        let record = StepRecord {
            step,
            total_loss: report.total,
            subcycle_losses: report.subcycle,
            mean_return_probability: report.mean_return_probability,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if let Some(h) = history_out.as_mut() {
            let mut v = serde_json::to_value(&record).expect("record serializes");
            v.as_object_mut().expect("object").insert("kind".into(), "step".into());
            h.line(&v)?;
        }
        result.history.push(record);
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            let snapshot: ParamSet<f64> = params.cast();
            save(&mut result, &snapshot, done, checkpoint_name(done))?;
            if let Some(hook) = opts.eval.as_mut() {
                let metrics = hook(done, &snapshot)?;
                result.evals.push((done, metrics));
            }
        }
    }
    result.params = params.cast();
    let final_params = result.params.clone();
    save(&mut result, &final_params, cfg.steps, FINAL_CHECKPOINT.to_string())?;
    if let Some(h) = history_out {
        h.finish()?;
    }
    Ok(result)
}

/// Loss of a clip with no jitter and no dropout.
pub fn deterministic_clip_loss<F: Real>(params: &ParamSet<F>, frames: &[Tensor<f32>], cfg: &TrainConfig) -> Result<LossReport> {
    let inputs = prepare_clip::<F, rand_chacha::ChaCha8Rng>(frames, cfg, None, None)?;
    Ok(clip_objective(params, &inputs, cfg)?.0)
}

/// A randomized end-to-end instance for gradient checking: `frames` random
/// 32×32 frames (a 3×3 grid), a small encoder with non-zero biases, one fixed
/// set of crops and drop masks.
pub fn gradcheck_instance(seed: u64, frames: usize, embed_dim: usize) -> Result<(TrainConfig, ParamSet<f64>, ClipInputs<f64>)> {
    let cfg = TrainConfig {
        seed,
        encoder: EncoderConfig {
            hidden_widths: vec![8],
            embed_dim,
            ..EncoderConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut rng = item_stream(seed, Stream::Data, 0);
    let clip: Vec<Tensor<f32>> = (0..frames)
        .map(|_| Tensor::new(vec![32, 32, 1], (0..32 * 32).map(|_| rng.random::<f32>()).collect()))
        .collect::<Result<_>>()?;
    let mut params = init_encoder(&cfg.encoder, seed)?;
    for (name, t) in params.iter_mut() {
        if name.ends_with("bias") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let (mut j, mut d) = clip_streams(seed, 0, 1, 0);
    let inputs = prepare_clip::<f64, _>(&clip, &cfg, Some(&mut j), Some(&mut d))?;
    Ok((cfg, params, inputs))
}

/// Central differences of the clip loss against its backward pass. ReLU
/// pattern changes between the two probes are skipped.
pub fn gradcheck_clip(params: &ParamSet<f64>, inputs: &ClipInputs<f64>, cfg: &TrainConfig, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (_, analytic) = clip_objective(params, inputs, cfg)?;
    let mut g = Graph::new();
    let x = g.input(PATCH_INPUT);
    let emb = build_encoder(&mut g, &cfg.encoder, x);
    let nodes = build_cycle_objective(&mut g, emb, inputs.frames, inputs.nodes_per_frame, &cfg.walk, !inputs.masks.is_empty())?;
    let mut bind = Bindings::new();
    bind.insert(PATCH_INPUT.to_string(), inputs.patches.clone());
    for (k, m) in inputs.masks.iter().enumerate() {
        bind.insert(mask_input_name(k), m.clone());
    }
    finite_diff_check(
        |p| {
            g.forward_eval(&bind, p)?;
            Ok(Probe {
                value: g.value(nodes.total)?.data()[0],
                region: Some(g.relu_signature()?),
            })
        },
        params,
        &analytic,
        opts,
    )
}
