//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. The learning criteria train several models at
//! the desk defaults; expect roughly half an hour on one core.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cyclewalk::autodiff::{GradCheckOptions, ParamSet, Tensor};
use cyclewalk::config::RunConfig;
use cyclewalk::encoder::init_encoder;
use cyclewalk::eval::{evaluate_propagation, evaluate_walks, run_sweep, sequence_propagation_score, SweepAxis, SweepTable};
use cyclewalk::graph_builder::{FrameSequence, GridGeometry};
use cyclewalk::label_prop::{build_kernel, ContextQueue, LabelMatrix, PropagationConfig, SourceFrame};
use cyclewalk::synth_data::{grid_classes, grid_labels, scene_seed, GroundTruth, Split};
use cyclewalk::trainer::{adapt_and_propagate, gradcheck_clip, gradcheck_instance, Checkpoint, FINAL_CHECKPOINT, HISTORY_FILE};
use cyclewalk::walk_core::{
    autodiff_positive_coefficient, cycle_and_subcycle_losses, cycle_losses_from_transitions, false_negative_coefficient,
    transition_energies, walk, DropoutForm, EnergyMatrix, LemmaDraw, TransitionMatrix,
};

type Verdict = Result<(bool, String), String>;

struct Ctx {
    root: PathBuf,
    cfg: RunConfig,
    heldout: Vec<(FrameSequence, GroundTruth)>,
    trained: Option<ParamSet<f64>>,
    untrained: ParamSet<f64>,
    first_run: Option<PathBuf>,
}

fn report(id: &str, what: &str, verdict: Verdict, elapsed: f64) -> bool {
    let (pass, detail) = match verdict {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{} {id} {what}: {detail} [{elapsed:.1}s]", if pass { "PASS" } else { "FAIL" });
    let _ = out.flush();
    pass
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![n, d], data).unwrap().l2_normalize_rows(1e-12)
}

fn max_row_error(t: &Tensor<f64>) -> f64 {
    t.row_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
}

fn stochasticity() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=16);
        let d = rng.random_range(1..=8);
        let tau = rng.random_range(0.03..=1.0);
        let frames = rng.random_range(2..=6);
        let q: Vec<Tensor<f64>> = (0..frames).map(|_| unit_rows(&mut rng, n, d)).collect();
        let mut steps = Vec::new();
        for w in q.windows(2) {
            let a = transition_energies(&w[0], &w[1], tau).map_err(err)?.row_softmax();
            worst = worst.max(max_row_error(a.tensor()));
            steps.push(a);
        }
        worst = worst.max(max_row_error(walk(&steps).map_err(err)?.tensor()));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((worst <= 1e-6 && secs < 5.0, format!("max |row sum - 1| = {worst:.2e} over 1000 instances in {secs:.2}s")))
}

fn random_stochastic(rng: &mut ChaCha8Rng, n: usize) -> TransitionMatrix<f64> {
    let e: Vec<f64> = (0..n * n).map(|_| rng.random_range(-3.0..3.0)).collect();
    EnergyMatrix(Tensor::new(vec![n, n], e).unwrap()).row_softmax()
}

/// Sum over every sequence of intermediate nodes, one path at a time.
fn path_sum(steps: &[TransitionMatrix<f64>], i: usize, j: usize) -> f64 {
    let n = steps[0].n();
    let inner = steps.len() - 1;
    let mut total = 0.0;
    for code in 0..n.pow(inner as u32) {
        let mut path = vec![i];
        let mut c = code;
        for _ in 0..inner {
            path.push(c % n);
            c /= n;
        }
        path.push(j);
        total += steps.iter().enumerate().map(|(k, a)| a.get(path[k], path[k + 1])).product::<f64>();
    }
    total
}

fn path_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=5);
        let k = rng.random_range(2..=4);
        let steps: Vec<_> = (0..k).map(|_| random_stochastic(&mut rng, n)).collect();
        let a = walk(&steps).map_err(err)?;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((a.get(i, j) - path_sum(&steps, i, j)).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((worst <= 1e-10 && secs < 5.0, format!("max deviation {worst:.2e} over 100 instances in {secs:.3}s")))
}

fn constant(n: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
    Tensor::new(vec![n, n], (0..n * n).map(|k| f(k / n, k % n)).collect()).unwrap()
}

fn analytic_anchors() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for frames in [2usize, 4] {
        let eye: Vec<_> = (0..frames - 1).map(|_| TransitionMatrix(Tensor::<f64>::eye(9))).collect();
        let r = cycle_losses_from_transitions(&eye, &eye).map_err(err)?;
        ok &= r.total.abs() < 1e-8;
        notes.push(format!("identity T={frames}: {:.1e}", r.total));
        for n in [4usize, 49] {
            let u: Vec<_> = (0..frames - 1).map(|_| TransitionMatrix(constant(n, |_, _| 1.0 / n as f64))).collect();
            let r = cycle_losses_from_transitions(&u, &u).map_err(err)?;
            let gap = r.subcycle.iter().map(|l| (l - (n as f64).ln()).abs()).fold(0.0, f64::max);
            ok &= gap < 1e-8 && r.subcycle.len() == frames - 1;
            notes.push(format!("uniform N={n} T={frames}: max |l - ln N| {gap:.1e}"));
        }
    }
    // the same anchors through the softmax and palindrome path
    let sharp = EnergyMatrix(constant(9, |i, j| if i == j { 1e3 } else { 0.0 }));
    let r = cycle_and_subcycle_losses(&[sharp], None, DropoutForm::PreSoftmax).map_err(err)?;
    ok &= r.total.abs() < 1e-8;
    for n in [4usize, 49] {
        let flat = EnergyMatrix(constant(n, |_, _| 0.0));
        let r = cycle_and_subcycle_losses(&[flat], None, DropoutForm::PreSoftmax).map_err(err)?;
        let gap = (r.total - (n as f64).ln()).abs();
        ok &= gap < 1e-8;
        notes.push(format!("zero energies N={n}: {gap:.1e}"));
    }
    Ok((ok, notes.join("; ")))
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut worst = (0.0f64, 0u64);
    let mut checked = 0;
    let check = |k: u64, step: f64| -> Result<_, String> {
        let (cfg, params, inputs) = gradcheck_instance(1000 + k, 2 + (k % 3) as usize, 4).map_err(err)?;
        let opts = GradCheckOptions {
            step,
            max_coords: usize::MAX,
            seed: k,
        };
        gradcheck_clip(&params, &inputs, &cfg, opts).map_err(err)
    };
    for k in 0..20u64 {
        let r = check(k, 1e-5)?;
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, k);
        }
        checked += r.checked;
    }
    let secs = start.elapsed().as_secs_f64();
    // diagnostic only: a correct gradient leaves truncation error that falls as h^2
    let finer = check(worst.1, 1e-5 / 3.0)?.max_rel_error;
    Ok((
        worst.0 < 1e-4 && secs < 60.0,
        format!(
            "max relative error {:.2e} (seed index {}) over {checked} coordinates, 20 seeds, {secs:.1}s; same instance at h/3: {finer:.2e}",
            worst.0, worst.1
        ),
    ))
}

fn lemma() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut min_lambda, mut max_gap) = (f64::INFINITY, 0.0f64);
    for _ in 0..10_000 {
        let d = LemmaDraw::random(&mut rng, 16, 8, 8);
        let lambda = false_negative_coefficient(&d).lambda;
        let c = autodiff_positive_coefficient(&d).map_err(err)?;
        min_lambda = min_lambda.min(lambda);
        max_gap = max_gap.max((c - lambda).abs());
    }
    Ok((
        min_lambda >= -1e-12 && max_gap <= 1e-10,
        format!("min lambda {min_lambda:.3e}, max autodiff gap {max_gap:.2e} over 10^4 draws"),
    ))
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cyclewalk"));
    c.env("CYCLEWALK_THREADS", "1");
    c
}

fn cli_train(out: &Path) -> Result<f64, String> {
    let start = Instant::now();
    let o = bin().args(["train", "--seed", "0", "--out"]).arg(out).output().map_err(err)?;
    if !o.status.success() {
        return Err(format!("train exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
    }
    Ok(start.elapsed().as_secs_f64())
}

fn hop3(params: &ParamSet<f64>, ctx: &Ctx) -> Result<f64, String> {
    let (hops, _) = evaluate_walks(params, &ctx.heldout, &ctx.cfg.train, &[3]).map_err(err)?;
    Ok(hops[0].walk_accuracy)
}

fn learning(ctx: &mut Ctx) -> Verdict {
    let t = &ctx.cfg.train;
    let desk = t.batch_size == 4
        && t.clip_len == 4
        && t.encoder.embed_dim == 32
        && t.walk.temperature == 0.07
        && t.walk.edge_dropout == 0.1
        && t.learning_rate == 1e-4
        && t.steps == 2000;
    if !desk {
        return Err("default training configuration drifted from the desk setting".into());
    }
    let dir = ctx.root.join("train_a");
    let secs = cli_train(&dir)?;
    let (params, _) = Checkpoint::load(&dir.join(FINAL_CHECKPOINT)).map_err(err)?;
    ctx.first_run = Some(dir);
    let trained = hop3(&params, ctx)?;
    let untrained = hop3(&ctx.untrained, ctx)?;
    ctx.trained = Some(params);
    Ok((
        trained >= 0.90 && untrained <= 0.15 && secs <= 600.0,
        format!(
            "hop-3 walk accuracy trained {trained:.4} (need >= 0.90), untrained {untrained:.4} (need <= 0.15), training {secs:.0}s single-threaded"
        ),
    ))
}

fn iou_config() -> PropagationConfig {
    PropagationConfig {
        k_nn: 10,
        context: 4,
        radius: 12.0,
        ..PropagationConfig::default()
    }
}

fn propagation(ctx: &Ctx) -> Verdict {
    let trained = ctx.trained.as_ref().ok_or("no trained model")?;
    let prop = iou_config();
    let a = evaluate_propagation(trained, &ctx.heldout, &ctx.cfg.train, &prop).map_err(err)?;
    let b = evaluate_propagation(&ctx.untrained, &ctx.heldout, &ctx.cfg.train, &prop).map_err(err)?;
    Ok((
        a >= 2.0 * b,
        format!("mean IoU trained {a:.4}, random encoder {b:.4}, ratio {:.3} (need >= 2)", a / b),
    ))
}

/// Every in-radius source scored, sorted, cut to k; no heap.
fn dense_kernel(target: &Tensor<f64>, grid: &GridGeometry, sources: &[Tensor<f64>], cfg: &PropagationConfig) -> Vec<(Vec<usize>, Vec<f64>)> {
    let n = grid.len();
    (0..n)
        .map(|i| {
            let (ri, ci) = (i / grid.cols, i % grid.cols);
            let mut all = Vec::new();
            let mut near = Vec::new();
            for (f, s) in sources.iter().enumerate() {
                for j in 0..n {
                    let score: f64 = target.row(i).iter().zip(s.row(j)).map(|(a, b)| a * b).sum::<f64>() / cfg.temperature;
                    let (rj, cj) = (j / grid.cols, j % grid.cols);
                    let dist = ri.abs_diff(rj).max(ci.abs_diff(cj)) as f64;
                    all.push((score, f * n + j));
                    if dist <= cfg.radius {
                        near.push((score, f * n + j));
                    }
                }
            }
            let mut pool = if near.is_empty() { all } else { near };
            pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            pool.truncate(cfg.k_nn);
            let z: f64 = pool.iter().map(|p| (p.0 - pool[0].0).exp()).sum();
            let w = pool.iter().map(|p| (p.0 - pool[0].0).exp() / z).collect();
            (pool.iter().map(|p| p.1).collect(), w)
        })
        .collect()
}

fn kernel_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut rows = 0;
    for inst in 0..50 {
        let grid = GridGeometry {
            rows: rng.random_range(2..=5),
            cols: rng.random_range(2..=5),
            patch_size: 16,
            stride: 8,
        };
        let n = grid.len();
        let d = rng.random_range(2..=6);
        let cfg = PropagationConfig {
            k_nn: rng.random_range(1..=12),
            context: rng.random_range(1..=3),
            radius: [0.5, 1.0, 1.5, 2.0, 12.0][rng.random_range(0..5)],
            temperature: rng.random_range(0.03..1.0),
        };
        let classes = 3;
        let frame = |rng: &mut ChaCha8Rng, idx: usize| {
            let mut e = unit_rows(rng, n, d);
            // exact duplicates exercise the index tie-break
            if rng.random_bool(0.5) {
                let row = e.row(0).to_vec();
                for (k, v) in row.into_iter().enumerate() {
                    e.set(n - 1, k, v);
                }
            }
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            SourceFrame {
                frame: idx,
                embeddings: e,
                labels: LabelMatrix::one_hot(&labels, classes).unwrap(),
            }
        };
        let first = frame(&mut rng, 0);
        let mut kept = vec![first.embeddings.clone()];
        let mut recent: Vec<Tensor<f64>> = Vec::new();
        let mut queue = ContextQueue::new(first, cfg.context).map_err(err)?;
        for t in 1..=rng.random_range(0..=5) {
            let f = frame(&mut rng, t);
            recent.push(f.embeddings.clone());
            queue.push(f).map_err(err)?;
        }
        let skip = recent.len().saturating_sub(cfg.context);
        kept.extend(recent.into_iter().skip(skip));
        let target = if inst % 5 == 0 { kept[0].clone() } else { unit_rows(&mut rng, n, d) };
        let got = build_kernel(&target, &grid, &queue, &cfg).map_err(err)?;
        let want = dense_kernel(&target, &grid, &kept, &cfg);
        if got.source_count != kept.len() * n {
            return Ok((false, format!("instance {inst}: source count {} vs {}", got.source_count, kept.len() * n)));
        }
        for (i, (row, (idx, w))) in got.rows.iter().zip(&want).enumerate() {
            if &row.sources != idx {
                return Ok((false, format!("instance {inst} row {i}: indices {:?} vs {:?}", row.sources, idx)));
            }
            for (a, b) in row.weights.iter().zip(w) {
                worst = worst.max((a - b).abs());
            }
            rows += 1;
        }
    }
    Ok((worst <= 1e-12, format!("indices identical in {rows} rows over 50 instances, max weight gap {worst:.1e}")))
}

fn adaptation(ctx: &Ctx) -> Verdict {
    let trained = ctx.trained.as_ref().ok_or("no trained model")?;
    let prop = iou_config();
    let adapt = ctx.cfg.adapt;
    if adapt.updates != 100 {
        return Err(format!("default adaptation runs {} updates, expected 100", adapt.updates));
    }
    let (mut reduced, mut windows, mut windows_reduced) = (0, 0, 0);
    let (mut base, mut adapted) = (0.0, 0.0);
    let seqs = &ctx.heldout[..10];
    for (i, (seq, gt)) in seqs.iter().enumerate() {
        let (h, w, _) = seq.dims();
        let grid = ctx.cfg.train.grid.geometry(h, w).map_err(err)?;
        let l0 = grid_labels(gt, &grid).map_err(err)?.swap_remove(0);
        let seed = scene_seed(ctx.cfg.seed, Split::Heldout, i as u64);
        let r = adapt_and_propagate(trained, &seq.frames, &l0, &ctx.cfg.train, &prop, &adapt, seed).map_err(err)?;
        let first = r.adaptations.first().ok_or("no adaptation ran")?;
        reduced += (first.loss_after < first.loss_before) as usize;
        windows += r.adaptations.len();
        windows_reduced += r.adaptations.iter().filter(|a| a.loss_after < a.loss_before).count();
        base += sequence_propagation_score(trained, seq, gt, &ctx.cfg.train, &prop).map_err(err)?;
        adapted += cyclewalk::eval::propagation_score(&r.propagation.hard, &grid_classes(gt, &grid)).map_err(err)?;
    }
    let n = seqs.len() as f64;
    Ok((
        reduced >= 9,
        format!(
            "first-window loss reduced in {reduced}/10 sequences ({windows_reduced}/{windows} windows overall); IoU {:.4} -> {:.4} (delta {:+.4})",
            base / n,
            adapted / n,
            (adapted - base) / n
        ),
    ))
}

fn hop3_of(table: &SweepTable, value: &str) -> Option<f64> {
    table.cells.iter().find(|c| c.value == value)?.metrics.as_ref()?.accuracy_at(3)
}

fn ablations(ctx: &Ctx) -> Verdict {
    let dir = ctx.root.join("sweeps");
    std::fs::create_dir_all(&dir).map_err(err)?;
    let mut notes = Vec::new();
    let mut complete = true;
    let mut frame_rate = None;
    for axis in [SweepAxis::EdgeDropout, SweepAxis::PathLength, SweepAxis::FrameRate] {
        let values = axis.default_values();
        let table = run_sweep(axis, &values, &ctx.cfg, None).map_err(err)?;
        std::fs::write(dir.join(format!("sweep_{}.json", axis.name())), table.to_json()).map_err(err)?;
        let csv = table.to_csv();
        std::fs::write(dir.join(format!("sweep_{}.csv", axis.name())), &csv).map_err(err)?;
        let failed: Vec<&str> = table.cells.iter().filter(|c| c.metrics.is_none()).map(|c| c.value.as_str()).collect();
        complete &= failed.is_empty() && csv.lines().filter(|l| !l.starts_with('#')).count() == values.len() + 1;
        let cells: Vec<String> = table
            .cells
            .iter()
            .map(|c| format!("{}={}", c.value, c.metrics.as_ref().and_then(|m| m.accuracy_at(3)).map_or("err".into(), |a| format!("{a:.3}"))))
            .collect();
        notes.push(format!("{} [{}]", axis.name(), cells.join(" ")));
        if axis == SweepAxis::FrameRate {
            frame_rate = Some(table);
        }
    }
    let fr = frame_rate.expect("frame-rate sweep ran");
    let (still, moving) = (hop3_of(&fr, "inf"), hop3_of(&fr, "24"));
    let direction = matches!((still, moving), (Some(s), Some(m)) if s < m);
    Ok((
        complete && direction,
        format!(
            "tables in {}; hop-3 accuracy {}; identical-frame {:?} vs moving {:?} (need strictly lower)",
            dir.display(),
            notes.join("; "),
            still,
            moving
        ),
    ))
}

fn step_records(dir: &Path) -> Result<Vec<serde_json::Value>, String> {
    let text = std::fs::read_to_string(dir.join(HISTORY_FILE)).map_err(err)?;
    text.lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).map_err(err))
        .filter(|v| v.as_ref().map_or(true, |v| v["kind"] == "step"))
        .map(|v| {
            v.map(|mut v| {
                v.as_object_mut().expect("record object").remove("wall_time_s");
                v
            })
        })
        .collect()
}

fn checkpoints(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(err)? {
        let p = e.map_err(err)?.path();
        if p.extension().is_some_and(|x| x == "cwck") {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).map_err(err)?));
        }
    }
    out.sort();
    Ok(out)
}

fn determinism(ctx: &Ctx) -> Verdict {
    let a = ctx.first_run.as_ref().ok_or("first training run missing")?;
    let b = ctx.root.join("train_b");
    cli_train(&b)?;
    let (ha, hb) = (step_records(a)?, step_records(&b)?);
    let (ca, cb) = (checkpoints(a)?, checkpoints(&b)?);
    // loss values are compared as bit patterns
    let bits = |h: &[serde_json::Value]| -> Vec<u64> { h.iter().map(|r| r["total_loss"].as_f64().unwrap_or(f64::NAN).to_bits()).collect() };
    let same = ha == hb && bits(&ha) == bits(&hb) && ca == cb && !ca.is_empty();
    Ok((same, format!("{} history records and {} checkpoints compared; identical: {same}", ha.len(), ca.len())))
}

fn loss_reduction(ctx: &Ctx) -> Verdict {
    let dir = ctx.first_run.as_ref().ok_or("first training run missing")?;
    let h = step_records(dir)?;
    let loss = |r: &serde_json::Value| r["total_loss"].as_f64().unwrap_or(f64::NAN);
    let first = loss(h.first().ok_or("empty history")?);
    let tail = (h.len() / 10).max(1);
    let last = h.iter().rev().take(tail).map(loss).sum::<f64>() / tail as f64;
    let t = ctx.cfg.train.clip_len as f64;
    let level = (t - 1.0) * 49f64.ln();
    Ok((
        last < 0.25 * first,
        format!(
            "initial loss {first:.3} ((T-1) ln N = {level:.3}), mean of last 10% {last:.3} = {:.1}% of initial (need < 25%)",
            100.0 * last / first
        ),
    ))
}

fn main() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).expect("artifact directory");
    let cfg = RunConfig {
        out: root.clone(),
        ..RunConfig::default()
    }
    .resolve()
    .expect("default configuration resolves");
    let heldout = cfg.heldout_set().expect("held-out set");
    let untrained = init_encoder(&cfg.train.encoder, cfg.seed).expect("init");
    let mut ctx = Ctx {
        root,
        cfg,
        heldout,
        trained: None,
        untrained,
        first_run: None,
    };

    let mut passed = 0;
    let mut run = |id: &str, what: &str, f: &mut dyn FnMut(&mut Ctx) -> Verdict, ctx: &mut Ctx| {
        let start = Instant::now();
        let v = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(ctx))).unwrap_or_else(|_| Err("panicked".into()));
        passed += report(id, what, v, start.elapsed().as_secs_f64()) as usize;
    };
    run("1", "row-stochastic transitions and walks", &mut |_| stochasticity(), &mut ctx);
    run("2", "walk equals path enumeration", &mut |_| path_oracle(), &mut ctx);
    run("3", "analytic loss anchors", &mut |_| analytic_anchors(), &mut ctx);
    run("4", "end-to-end gradient check", &mut |_| gradients(), &mut ctx);
    run("5", "duplicate-negative coefficient", &mut |_| lemma(), &mut ctx);
    run("6", "learning at desk defaults", &mut learning, &mut ctx);
    run("7", "propagation beats a random encoder", &mut |c| propagation(c), &mut ctx);
    run("8", "sparse kernel equals dense oracle", &mut |_| kernel_oracle(), &mut ctx);
    run("9", "test-time adaptation", &mut |c| adaptation(c), &mut ctx);
    run("10", "ablation sweeps", &mut |c| ablations(c), &mut ctx);
    run("11", "training determinism", &mut |c| determinism(c), &mut ctx);

    // not one of the eleven; reported alongside them
    let start = Instant::now();
    report("note", "training loss falls below a quarter of its initial value", loss_reduction(&ctx), start.elapsed().as_secs_f64());

    println!("{passed}/11 criteria passed");
    if passed != 11 {
        std::process::exit(1);
    }
}
