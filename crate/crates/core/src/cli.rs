//! The `cyclewalk` command line.
//!
//! Settings resolve as defaults, then `--config FILE`, then flags. Every JSON
//! artifact carries the resolved configuration and the version string.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::autodiff::{GradCheckOptions, ParamSet, Precision};
use crate::config::RunConfig;
use crate::encoder::init_encoder;
use crate::error::{Error, Result};
use crate::eval::{evaluate, propagation_score, run_sweep, sequence_propagation_score, SweepAxis};
use crate::graph_builder::FrameSequence;
use crate::label_prop::{export_predictions, propagate_video};
use crate::synth_data::{generate_sequence, grid_classes, grid_labels, read_dataset, scene_seed, write_dataset, GroundTruth, Split};
use crate::trainer::{adapt_and_propagate, fit, gradcheck_clip, gradcheck_instance, Checkpoint, FitOptions};
use crate::walk_core::{autodiff_positive_coefficient, false_negative_coefficient, LemmaDraw};

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "CYCLEWALK_THREADS";

#[derive(Debug, Parser)]
#[command(name = "cyclewalk", version, about = "Contrastive random-walk correspondence on synthetic video")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
struct SceneFlags {
    /// Base trajectory length.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    sprites: Option<usize>,
    #[arg(long)]
    occlusion: bool,
    #[arg(long)]
    speed_multiplier: Option<u32>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

#[derive(Debug, Args, Default)]
struct TrainFlags {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clip_len: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    edge_dropout: Option<f64>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    train_sequences: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct EvalFlags {
    /// `none` for a freshly initialized encoder.
    #[arg(long, default_value = "none")]
    checkpoint: String,
    /// Directory of `.cwvd` files; the generated held-out split otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    heldout_sequences: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct PropFlags {
    #[arg(long)]
    k_nn: Option<usize>,
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    radius: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write generated sequences as `.cwvd` files.
    Synth {
        #[command(flatten)]
        scene: SceneFlags,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, value_parser = parse_split, default_value = "train")]
        split: Split,
    },
    /// Train an encoder; writes checkpoints and `history.jsonl`.
    Train {
        #[command(flatten)]
        scene: SceneFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Directory of `.cwvd` training files; the generated train split otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Walk accuracy per hop on held-out sequences.
    EvalWalk {
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long, value_delimiter = ',')]
        hops: Option<Vec<usize>>,
    },
    /// Propagate frame-0 labels and score node-level IoU.
    Propagate {
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        prop: PropFlags,
    },
    /// Online test-time adaptation, then propagation.
    Adapt {
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        prop: PropFlags,
        #[arg(long)]
        updates: Option<u64>,
        #[arg(long)]
        every: Option<usize>,
        #[arg(long)]
        half_window: Option<usize>,
    },
    /// Finite-difference check of the full training objective.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: u64,
    },
    /// Train or evaluate once per value of one axis.
    Sweep {
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
        /// Comma-separated; `inf` for the identical-frame rate.
        #[arg(long, value_delimiter = ',', value_parser = parse_value)]
        values: Option<Vec<f64>>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Positive-coefficient property of the contrastive gradient with duplicated positives.
    Lemma {
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
    },
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" | "32" => Ok(Precision::F32),
        "f64" | "64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got {s:?}")),
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "heldout" => Ok(Split::Heldout),
        _ => Err(format!("expected train or heldout, got {s:?}")),
    }
}

fn parse_axis(s: &str) -> std::result::Result<SweepAxis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_value(s: &str) -> std::result::Result<f64, String> {
    match s {
        "inf" | "infinity" => Ok(f64::INFINITY),
        _ => s.parse().map_err(|_| format!("not a number: {s:?}")),
    }
}

impl SceneFlags {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.data.frames, self.frames);
        set(&mut c.data.sprites, self.sprites);
        set(&mut c.data.speed_multiplier, self.speed_multiplier);
        set(&mut c.data.noise_sigma, self.noise_sigma);
        if self.occlusion {
            c.data.allow_occlusion = true;
        }
    }
}

impl TrainFlags {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.train.steps, self.steps);
        set(&mut c.train.batch_size, self.batch_size);
        set(&mut c.train.clip_len, self.clip_len);
        set(&mut c.train.learning_rate, self.learning_rate);
        set(&mut c.train.walk.temperature, self.temperature);
        set(&mut c.train.walk.edge_dropout, self.edge_dropout);
        set(&mut c.train.precision, self.precision);
        set(&mut c.train.checkpoint_every, self.checkpoint_every);
        set(&mut c.dataset.train_sequences, self.train_sequences);
    }
}

impl EvalFlags {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.dataset.heldout_sequences, self.heldout_sequences);
    }
}

impl PropFlags {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.propagation.k_nn, self.k_nn);
        set(&mut c.propagation.context, self.context);
        set(&mut c.propagation.radius, self.radius);
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::NonFinite(_) => "non-finite",
        Error::Usage(_) => "usage",
        Error::Config(_) => "config",
        Error::Format { .. } => "format",
        Error::Io { .. } => "io",
        Error::Data(_) => "data",
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 1 when a check fails, 2 on usage
/// errors and 3 on runtime errors. Errors go to stderr as JSON.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|_| execute(cli)) {
        Ok(passed) => {
            if passed {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": error_kind(&e), "message": e.to_string()}}));
            if matches!(e, Error::Usage(_) | Error::Config(_)) {
                2
            } else {
                3
            }
        }
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    set(&mut c.seed, common.seed);
    set(&mut c.out, common.out.clone());
    Ok(c)
}

fn create_out(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    Ok(&cfg.out)
}

fn write_json(path: &Path, cfg: &RunConfig, body: serde_json::Value) -> Result<()> {
    let mut doc = json!({"version": crate::version_string(), "config": cfg.echo()});
    if let (Some(d), serde_json::Value::Object(b)) = (doc.as_object_mut(), body) {
        d.extend(b);
    }
    let text = serde_json::to_string_pretty(&doc).expect("json serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cwvd"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no .cwvd files")));
    }
    Ok(files)
}

fn load_dir(dir: &Path) -> Result<Vec<(FrameSequence, GroundTruth)>> {
    dataset_files(dir)?.iter().map(|p| read_dataset(p)).collect()
}

fn eval_data(cfg: &RunConfig, data: &Option<PathBuf>) -> Result<Vec<(FrameSequence, GroundTruth)>> {
    match data {
        Some(d) => load_dir(d),
        None => cfg.heldout_set(),
    }
}

/// Parameters from a checkpoint (adopting its encoder and grid settings when
/// its sidecar records them) or a fresh initialization for `none`.
fn load_params(spec: &str, cfg: &mut RunConfig) -> Result<ParamSet<f64>> {
    if spec == "none" {
        return init_encoder(&cfg.train.encoder, cfg.seed);
    }
    let (params, meta) = Checkpoint::load(Path::new(spec))?;
    if let Some(saved) = meta.and_then(|m| serde_json::from_value::<RunConfig>(m.config).ok()) {
        cfg.train.encoder = saved.train.encoder;
        cfg.train.grid = saved.train.grid;
    }
    crate::encoder::check_params(&cfg.train.encoder, &params)?;
    Ok(params)
}

fn execute(cli: Cli) -> Result<bool> {
    let mut cfg = base_config(&cli.common)?;
    match cli.command {
        Command::Synth { scene, count, split } => {
            scene.apply(&mut cfg);
            let cfg = cfg.resolve()?;
            let out = create_out(&cfg)?;
            let mut files = Vec::new();
            for i in 0..count {
                let (seq, gt) = generate_sequence(&cfg.data, scene_seed(cfg.seed, split, i as u64))?;
                let path = out.join(format!("seq_{i:04}.cwvd"));
                write_dataset(&path, &seq, &gt)?;
                files.push(path.display().to_string());
            }
            write_json(&out.join("synth.json"), &cfg, json!({"split": split, "files": files}))?;
            println!("wrote {count} sequence(s) to {}", out.display());
            Ok(true)
        }
        Command::Train { scene, train, data } => {
            scene.apply(&mut cfg);
            train.apply(&mut cfg);
            let cfg = cfg.resolve()?;
            let out = create_out(&cfg)?.to_path_buf();
            let sequences: Vec<FrameSequence> = match &data {
                Some(d) => load_dir(d)?.into_iter().map(|(s, _)| s).collect(),
                None => cfg.train_sequences()?,
            };
            let fitted = fit(
                &sequences,
                &cfg.train,
                FitOptions {
                    out_dir: Some(out.clone()),
                    config_echo: cfg.echo(),
                    ..FitOptions::default()
                },
            )?;
            let first = fitted.history.first().map(|r| r.total_loss);
            let last = fitted.history.last().map(|r| r.total_loss);
            write_json(
                &out.join("train.json"),
                &cfg,
                json!({
                    "steps": cfg.train.steps,
                    "initial_loss": first,
                    "final_loss": last,
                    "checkpoints": fitted.checkpoints.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
                }),
            )?;
            println!("trained {} steps; loss {:?} -> {:?}", cfg.train.steps, first, last);
            Ok(true)
        }
        Command::EvalWalk { eval, hops } => {
            eval.apply(&mut cfg);
            set(&mut cfg.eval.hops, hops);
            let params = load_params(&eval.checkpoint, &mut cfg)?;
            let cfg = cfg.resolve()?;
            let data = eval_data(&cfg, &eval.data)?;
            let report = evaluate(&params, &data, &cfg.train, &cfg.eval.hops, None, cfg.echo())?;
            let out = create_out(&cfg)?;
            let body = serde_json::to_value(&report).expect("report serializes");
            std::fs::write(out.join("eval_walk.json"), serde_json::to_string_pretty(&body).expect("json") + "\n")
                .map_err(|e| Error::io(out.join("eval_walk.json"), e))?;
            for h in &report.hops {
                println!("hop {}: walk accuracy {:.4} (entropy {:.4}, {} rows)", h.hop, h.walk_accuracy, h.entropy, h.valid_rows);
            }
            Ok(true)
        }
        Command::Propagate { eval, prop } => {
            eval.apply(&mut cfg);
            prop.apply(&mut cfg);
            let params = load_params(&eval.checkpoint, &mut cfg)?;
            let cfg = cfg.resolve()?;
            let data = eval_data(&cfg, &eval.data)?;
            let mut sequences = Vec::new();
            let mut total = 0.0;
            for (i, (seq, gt)) in data.iter().enumerate() {
                let (h, w, _) = seq.dims();
                let grid = cfg.train.grid.geometry(h, w)?;
                let q = seq
                    .frames
                    .iter()
                    .map(|f| crate::encoder::embed_frame(&cfg.train.encoder, &cfg.train.grid, &params, f))
                    .collect::<Result<Vec<_>>>()?;
                let l0 = grid_labels(gt, &grid)?.swap_remove(0);
                let p = propagate_video(&q, &grid, &l0, &cfg.propagation)?;
                let iou = propagation_score(&p.hard, &grid_classes(gt, &grid))?;
                total += iou;
                sequences.push(json!({"index": i, "iou": iou, "fallbacks": p.fallbacks, "frames": export_predictions(&p, &grid)}));
            }
            let mean = total / data.len() as f64;
            let out = create_out(&cfg)?;
            write_json(&out.join("propagation.json"), &cfg, json!({"mean_iou": mean, "sequences": sequences}))?;
            println!("mean IoU {mean:.4} over {} sequence(s)", data.len());
            Ok(true)
        }
        Command::Adapt {
            eval,
            prop,
            updates,
            every,
            half_window,
        } => {
            eval.apply(&mut cfg);
            prop.apply(&mut cfg);
            set(&mut cfg.adapt.updates, updates);
            set(&mut cfg.adapt.every, every);
            set(&mut cfg.adapt.half_window, half_window);
            let params = load_params(&eval.checkpoint, &mut cfg)?;
            let cfg = cfg.resolve()?;
            let data = eval_data(&cfg, &eval.data)?;
            let mut rows = Vec::new();
            let (mut base_sum, mut adapted_sum) = (0.0, 0.0);
            for (i, (seq, gt)) in data.iter().enumerate() {
                let (h, w, _) = seq.dims();
                let grid = cfg.train.grid.geometry(h, w)?;
                let l0 = grid_labels(gt, &grid)?.swap_remove(0);
                let base = sequence_propagation_score(&params, seq, gt, &cfg.train, &cfg.propagation)?;
                let r = adapt_and_propagate(&params, &seq.frames, &l0, &cfg.train, &cfg.propagation, &cfg.adapt, scene_seed(cfg.seed, Split::Heldout, i as u64))?;
                let adapted = propagation_score(&r.propagation.hard, &grid_classes(gt, &grid))?;
                base_sum += base;
                adapted_sum += adapted;
                rows.push(json!({"index": i, "iou": base, "iou_adapted": adapted, "adaptations": r.adaptations}));
            }
            let n = data.len() as f64;
            let out = create_out(&cfg)?;
            write_json(
                &out.join("adapt.json"),
                &cfg,
                json!({"mean_iou": base_sum / n, "mean_iou_adapted": adapted_sum / n, "sequences": rows}),
            )?;
            println!("mean IoU {:.4} -> {:.4} with adaptation", base_sum / n, adapted_sum / n);
            Ok(true)
        }
        Command::Gradcheck { instances } => {
            let cfg = cfg.resolve()?;
            let mut rows = Vec::new();
            let mut worst: f64 = 0.0;
            for k in 0..instances {
                let seed = crate::rng::item_seed(cfg.seed, k);
                let frames = 2 + (k % 3) as usize;
                let (tc, params, inputs) = gradcheck_instance(seed, frames, 4)?;
                let r = gradcheck_clip(&params, &inputs, &tc, GradCheckOptions { seed, ..GradCheckOptions::default() })?;
                worst = worst.max(r.max_rel_error);
                rows.push(json!({"seed": seed, "frames": frames, "max_rel_error": r.max_rel_error, "checked": r.checked, "skipped_kinks": r.skipped_kinks}));
            }
            let passed = worst < GRADCHECK_TOLERANCE;
            let out = create_out(&cfg)?;
            write_json(&out.join("gradcheck.json"), &cfg, json!({"max_rel_error": worst, "tolerance": GRADCHECK_TOLERANCE, "passed": passed, "instances": rows}))?;
            println!("max relative error {worst:.3e} ({})", if passed { "pass" } else { "FAIL" });
            Ok(passed)
        }
        Command::Sweep { axis, values, train, eval } => {
            train.apply(&mut cfg);
            eval.apply(&mut cfg);
            let fixed = if eval.checkpoint == "none" || axis != SweepAxis::ContextLength {
                None
            } else {
                Some(load_params(&eval.checkpoint, &mut cfg)?)
            };
            let cfg = cfg.resolve()?;
            let values = values.unwrap_or_else(|| axis.default_values());
            let table = run_sweep(axis, &values, &cfg, fixed.as_ref())?;
            let out = create_out(&cfg)?;
            let stem = format!("sweep_{}", axis.name());
            let json_path = out.join(format!("{stem}.json"));
            std::fs::write(&json_path, table.to_json() + "\n").map_err(|e| Error::io(&json_path, e))?;
            let csv_path = out.join(format!("{stem}.csv"));
            std::fs::write(&csv_path, table.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
            for c in &table.cells {
                match (&c.metrics, &c.error) {
                    (Some(m), _) => println!(
                        "{} = {}: hop-{} accuracy {:.4}, IoU {:.4}",
                        axis.name(),
                        c.value,
                        m.hops.last().map_or(0, |h| h.hop),
                        m.hops.last().map_or(f64::NAN, |h| h.walk_accuracy),
                        m.mean_iou.unwrap_or(f64::NAN)
                    ),
                    (None, e) => println!("{} = {}: failed: {}", axis.name(), c.value, e.as_deref().unwrap_or("?")),
                }
            }
            Ok(true)
        }
        Command::Lemma { draws, dim } => {
            let cfg = cfg.resolve()?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (mut min_lambda, mut max_gap) = (f64::INFINITY, 0.0f64);
            for _ in 0..draws {
                let d = LemmaDraw::random(&mut rng, dim, 8, 8);
                let lambda = false_negative_coefficient(&d).lambda;
                let c = autodiff_positive_coefficient(&d)?;
                min_lambda = min_lambda.min(lambda);
                max_gap = max_gap.max((c - lambda).abs());
            }
            let passed = min_lambda >= -1e-12 && max_gap < 1e-10;
            let out = create_out(&cfg)?;
            write_json(&out.join("lemma.json"), &cfg, json!({"draws": draws, "min_lambda": min_lambda, "max_coefficient_gap": max_gap, "passed": passed}))?;
            println!("min lambda {min_lambda:.3e}, max autodiff gap {max_gap:.3e} ({})", if passed { "pass" } else { "FAIL" });
            Ok(passed)
        }
    }
}
