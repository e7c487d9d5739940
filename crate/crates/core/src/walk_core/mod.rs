//! Transition matrices between frames and the cycle-consistency objective.
//!
//! For embeddings `Q_t` (one unit row per node) the energy between frames is
//! `E = Q_t Q_uᵀ / τ` and the one-hop transition matrix is its row softmax.
//! A clip of `T` frames yields `T-1` energies; the palindrome appends their
//! transposes in reverse order, and sub-cycle `i` walks the first `i` forward
//! hops followed by the last `i` backward hops. Its loss is the mean over
//! start nodes of `-log P(return to start)`.

mod lemma;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, ParamSet, Real, Tensor};
use crate::error::{Error, Result};

pub use lemma::{
    autodiff_positive_coefficient, false_negative_coefficient, FalseNegativeAnalysis, LemmaDraw,
};

/// Logit written into dropped edges.
pub const DROPPED_ENERGY: f64 = -1e10;

/// Logits of a transition matrix, entry `(i, j) = ⟨q_i, q'_j⟩ / τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMatrix<F>(pub Tensor<F>);

/// Row-stochastic one-hop (or multi-hop) walk probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix<F>(pub Tensor<F>);

impl<F: Real> EnergyMatrix<F> {
    pub fn tensor(&self) -> &Tensor<F> {
        &self.0
    }

    pub fn transpose(&self) -> Result<Self> {
        Ok(EnergyMatrix(self.0.transpose()?))
    }

    pub fn row_softmax(&self) -> TransitionMatrix<F> {
        TransitionMatrix(self.0.row_softmax())
    }

    /// Writes [`DROPPED_ENERGY`] wherever `mask` is nonzero.
    pub fn masked(&self, mask: &Tensor<F>) -> Result<Self> {
        if mask.shape() != self.0.shape() {
            return Err(Error::Usage(format!(
                "dropout mask shape {:?} does not match energies {:?}",
                mask.shape(),
                self.0.shape()
            )));
        }
        let fill = F::from_f64(DROPPED_ENERGY);
        let data = self
            .0
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&e, &m)| if m != F::ZERO { fill } else { e })
            .collect();
        Ok(EnergyMatrix(Tensor::new(self.0.shape().to_vec(), data)?))
    }
}

impl<F: Real> TransitionMatrix<F> {
    pub fn tensor(&self) -> &Tensor<F> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.0.get(i, j)
    }

    /// Index of the largest entry of row `i`, ties toward the lower index.
    pub fn row_argmax(&self, i: usize) -> usize {
        let row = self.0.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best
    }

    /// Shannon entropy of row `i` (natural log).
    pub fn row_entropy(&self, i: usize) -> f64 {
        -self
            .0
            .row(i)
            .iter()
            .map(|v| v.to_f64())
            .filter(|&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

/// How dropped edges are removed from a transition matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutForm {
    /// Dropped logits are set to [`DROPPED_ENERGY`] before the softmax.
    #[default]
    PreSoftmax,
    /// Dropped probabilities are zeroed after the softmax and rows renormalized.
    Renormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkConfig {
    pub temperature: f64,
    pub edge_dropout: f64,
    pub dropout_form: DropoutForm,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            temperature: 0.07,
            edge_dropout: 0.1,
            dropout_form: DropoutForm::PreSoftmax,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.edge_dropout) {
            return Err(Error::config(format!("edge dropout must lie in [0, 1), got {}", self.edge_dropout)));
        }
        Ok(())
    }
}

/// Target node for each source node, `None` where no valid target exists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrespondenceLabels {
    pub targets: Vec<Option<usize>>,
}

impl CorrespondenceLabels {
    pub fn identity(n: usize) -> Self {
        CorrespondenceLabels {
            targets: (0..n).map(Some).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.targets.iter().flatten().count()
    }

    pub fn valid(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| (i, t)))
    }
}

/// Sub-cycle losses `L¹..L^{T-1}` and their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub subcycle: Vec<f64>,
    pub total: f64,
    /// Mean diagonal of the longest round trip.
    pub mean_return_probability: f64,
}

pub fn transition_energies<F: Real>(q_t: &Tensor<F>, q_u: &Tensor<F>, temperature: f64) -> Result<EnergyMatrix<F>> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    let (_, d) = q_t.dims2()?;
    let (_, d2) = q_u.dims2()?;
    if d != d2 {
        return Err(Error::Usage(format!("embedding widths differ: {d} vs {d2}")));
    }
    let inv = F::from_f64(1.0 / temperature);
    Ok(EnergyMatrix(q_t.matmul(&q_u.transpose()?)?.map(|v| v * inv)))
}

/// Bernoulli(δ) drop mask, 1 marks a dropped entry.
///
/// For [`DropoutForm::Renormalized`] a row that would lose every entry is
/// left intact, since it has nothing to renormalize over.
pub fn dropout_mask<F: Real, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    delta: f64,
    form: DropoutForm,
) -> Tensor<F> {
    let mut data: Vec<F> = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < delta { F::ONE } else { F::ZERO })
        .collect();
    if form == DropoutForm::Renormalized {
        for row in data.chunks_mut(cols) {
            if row.iter().all(|&v| v != F::ZERO) {
                row.fill(F::ZERO);
            }
        }
    }
    Tensor::from_parts(vec![rows, cols], data)
}

pub fn apply_edge_dropout<F: Real, R: Rng + ?Sized>(e: &EnergyMatrix<F>, delta: f64, rng: &mut R) -> Result<EnergyMatrix<F>> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::config(format!("edge dropout must lie in [0, 1), got {delta}")));
    }
    let (r, c) = e.0.dims2()?;
    let mask = dropout_mask(rng, r, c, delta, DropoutForm::PreSoftmax);
    e.masked(&mask)
}

/// `[E_1, …, E_{T-1}, E_{T-1}ᵀ, …, E_1ᵀ]`.
pub fn palindrome_energies<F: Real>(energies: &[EnergyMatrix<F>]) -> Result<Vec<EnergyMatrix<F>>> {
    if energies.is_empty() {
        return Err(Error::config("a palindrome needs at least 2 frames"));
    }
    let mut out = energies.to_vec();
    for e in energies.iter().rev() {
        out.push(e.transpose()?);
    }
    Ok(out)
}

/// Left-to-right product of transition matrices.
pub fn walk<F: Real>(steps: &[TransitionMatrix<F>]) -> Result<TransitionMatrix<F>> {
    let first = steps
        .first()
        .ok_or_else(|| Error::Usage("walk needs at least one step".into()))?;
    let n = first.0.dims2()?.0;
    let mut acc = first.0.clone();
    for (k, s) in steps.iter().enumerate().skip(1) {
        if s.0.dims2()? != (n, n) || acc.dims2()?.1 != n {
            return Err(Error::Usage(format!(
                "walk step {k} has shape {:?}, expected [{n}, {n}]",
                s.0.shape()
            )));
        }
        acc = acc.matmul(&s.0)?;
    }
    Ok(TransitionMatrix(acc))
}

/// Mean over valid rows of `-log Ā(i, Y(i))`.
pub fn supervised_walk_loss<F: Real>(walk: &TransitionMatrix<F>, labels: &CorrespondenceLabels) -> Result<f64> {
    if labels.len() != walk.n() {
        return Err(Error::Usage(format!("{} labels for {} nodes", labels.len(), walk.n())));
    }
    let valid: Vec<(usize, usize)> = labels.valid().collect();
    if valid.is_empty() {
        return Err(Error::Data("supervised walk loss: no valid correspondence rows".into()));
    }
    let total: f64 = valid.iter().map(|&(i, t)| -walk.get(i, t).to_f64().ln()).sum();
    Ok(total / valid.len() as f64)
}

/// Graph form of [`supervised_walk_loss`].
pub fn supervised_walk_loss_node<F: Real>(g: &mut Graph<F>, walk: NodeId, labels: &CorrespondenceLabels) -> Result<NodeId> {
    let entries: Vec<(usize, usize)> = labels.valid().collect();
    if entries.is_empty() {
        return Err(Error::Data("supervised walk loss: no valid correspondence rows".into()));
    }
    let picked = g.gather(walk, entries);
    let logs = g.log(picked);
    let mean = g.mean(logs);
    Ok(g.scale(mean, -1.0))
}

/// Nodes produced by [`build_subcycle_losses`].
#[derive(Debug, Clone)]
pub struct CycleNodes {
    pub subcycles: Vec<NodeId>,
    pub total: NodeId,
    /// Round-trip matrix of each sub-cycle.
    pub round_trips: Vec<NodeId>,
}

/// Sub-cycle losses from transition nodes. `backward[i]` is the step from
/// frame `i+1` back to frame `i` (0-based hop index).
pub fn build_subcycle_losses<F: Real>(
    g: &mut Graph<F>,
    forward: &[NodeId],
    backward: &[NodeId],
    nodes_per_frame: usize,
) -> Result<CycleNodes> {
    if forward.is_empty() || forward.len() != backward.len() {
        return Err(Error::Usage(format!(
            "need matching non-empty forward/backward steps, got {} and {}",
            forward.len(),
            backward.len()
        )));
    }
    let mut subcycles = Vec::new();
    let mut round_trips = Vec::new();
    let mut fwd = forward[0];
    let mut bwd = backward[0];
    let mut total: Option<NodeId> = None;
    for hop in 0..forward.len() {
        if hop > 0 {
            fwd = g.matmul(fwd, forward[hop]);
            bwd = g.matmul(backward[hop], bwd);
        }
        let trip = g.matmul(fwd, bwd);
        g.label(trip, format!("round_trip[{}]", hop + 1));
        let loss = return_loss(g, trip, nodes_per_frame);
        g.label(loss, format!("subcycle_loss[{}]", hop + 1));
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss),
        });
        subcycles.push(loss);
        round_trips.push(trip);
    }
    let total = total.expect("at least one hop");
    g.label(total, "total_loss");
    Ok(CycleNodes {
        subcycles,
        total,
        round_trips,
    })
}

fn return_loss<F: Real>(g: &mut Graph<F>, trip: NodeId, n: usize) -> NodeId {
    let diag = g.gather(trip, (0..n).map(|i| (i, i)).collect());
    let logs = g.log(diag);
    let mean = g.mean(logs);
    g.scale(mean, -1.0)
}

/// Appends softmax (and dropout) nodes turning palindrome energy nodes into
/// transitions. `masks[k]`, when given, is the drop mask of palindrome step `k`.
pub fn build_palindrome_transitions<F: Real>(
    g: &mut Graph<F>,
    energies: &[NodeId],
    masks: Option<&[NodeId]>,
    form: DropoutForm,
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    if energies.is_empty() {
        return Err(Error::config("a palindrome needs at least 2 frames"));
    }
    let hops = energies.len();
    let mut steps: Vec<NodeId> = energies.to_vec();
    for &e in energies.iter().rev() {
        steps.push(g.transpose(e));
    }
    if let Some(m) = masks {
        if m.len() != steps.len() {
            return Err(Error::Usage(format!("{} dropout masks for {} palindrome steps", m.len(), steps.len())));
        }
    }
    let mut transitions = Vec::with_capacity(steps.len());
    for (k, &e) in steps.iter().enumerate() {
        let a = match (masks, form) {
            (None, _) => g.row_softmax(e),
            (Some(m), DropoutForm::PreSoftmax) => {
                let dropped = g.mask_fill(e, m[k], DROPPED_ENERGY);
                g.row_softmax(dropped)
            }
            (Some(m), DropoutForm::Renormalized) => {
                let a = g.row_softmax(e);
                let zeroed = g.mask_fill(a, m[k], 0.0);
                g.row_normalize(zeroed)
            }
        };
        g.label(a, format!("transition[{k}]"));
        transitions.push(a);
    }
    let forward = transitions[..hops].to_vec();
    // palindrome step 2T-3-i returns from frame i+1 to frame i
    let backward = (0..hops).map(|i| transitions[2 * hops - 1 - i]).collect();
    Ok((forward, backward))
}

/// Full objective on a graph: energies from per-frame embedding slices, palindrome,
/// optional dropout masks (bound as inputs named by [`mask_input_name`]), sub-cycle losses.
pub fn build_cycle_objective<F: Real>(
    g: &mut Graph<F>,
    embeddings: NodeId,
    frames: usize,
    nodes_per_frame: usize,
    cfg: &WalkConfig,
    with_dropout: bool,
) -> Result<CycleNodes> {
    cfg.validate()?;
    if frames < 2 {
        return Err(Error::config(format!("a clip needs at least 2 frames, got {frames}")));
    }
    let q: Vec<NodeId> = (0..frames)
        .map(|t| g.slice_rows(embeddings, t * nodes_per_frame, nodes_per_frame))
        .collect();
    let mut energies = Vec::with_capacity(frames - 1);
    for t in 0..frames - 1 {
        let kt = g.transpose(q[t + 1]);
        let dot = g.matmul(q[t], kt);
        let e = g.scale(dot, 1.0 / cfg.temperature);
        energies.push(g.label(e, format!("energy[{t}]")));
    }
    let masks: Option<Vec<NodeId>> =
        with_dropout.then(|| (0..2 * (frames - 1)).map(|k| g.input(mask_input_name(k))).collect());
    let (fwd, bwd) = build_palindrome_transitions(g, &energies, masks.as_deref(), cfg.dropout_form)?;
    build_subcycle_losses(g, &fwd, &bwd, nodes_per_frame)
}

pub fn mask_input_name(step: usize) -> String {
    format!("drop_mask[{step}]")
}

/// Evaluates a subcycle graph and packages the losses.
pub fn loss_report<F: Real>(g: &Graph<F>, nodes: &CycleNodes) -> Result<LossReport> {
    let subcycle = nodes
        .subcycles
        .iter()
        .map(|&n| Ok(g.value(n)?.data()[0].to_f64()))
        .collect::<Result<Vec<f64>>>()?;
    let total = g.value(nodes.total)?.data()[0].to_f64();
    let last = g.value(*nodes.round_trips.last().expect("non-empty"))?;
    let (n, _) = last.dims2()?;
    let mean_return_probability = (0..n).map(|i| last.get(i, i).to_f64()).sum::<f64>() / n as f64;
    Ok(LossReport {
        subcycle,
        total,
        mean_return_probability,
    })
}

/// Sub-cycle losses for raw hop energies `E_1..E_{T-1}`.
///
/// `masks`, when given, holds one drop mask per palindrome step (`2T-2`).
pub fn cycle_and_subcycle_losses<F: Real>(
    energies: &[EnergyMatrix<F>],
    masks: Option<&[Tensor<F>]>,
    form: DropoutForm,
) -> Result<LossReport> {
    if energies.is_empty() {
        return Err(Error::config("a clip needs at least 2 frames"));
    }
    let n = energies[0].0.dims2()?.0;
    let mut g = Graph::new();
    let mut inputs = Bindings::new();
    let mut e_nodes = Vec::new();
    for (k, e) in energies.iter().enumerate() {
        let name = format!("energy[{k}]");
        e_nodes.push(g.input(name.clone()));
        inputs.insert(name, e.0.clone());
    }
    let mask_nodes: Option<Vec<NodeId>> = match masks {
        Some(ms) => {
            let mut nodes = Vec::new();
            for (k, m) in ms.iter().enumerate() {
                nodes.push(g.input(mask_input_name(k)));
                inputs.insert(mask_input_name(k), m.clone());
            }
            Some(nodes)
        }
        None => None,
    };
    let (fwd, bwd) = build_palindrome_transitions(&mut g, &e_nodes, mask_nodes.as_deref(), form)?;
    let nodes = build_subcycle_losses(&mut g, &fwd, &bwd, n)?;
    g.forward_eval(&inputs, &ParamSet::new())?;
    loss_report(&g, &nodes)
}

/// Sub-cycle losses from explicit forward and backward transition matrices.
pub fn cycle_losses_from_transitions<F: Real>(
    forward: &[TransitionMatrix<F>],
    backward: &[TransitionMatrix<F>],
) -> Result<LossReport> {
    let n = forward
        .first()
        .ok_or_else(|| Error::Usage("need at least one hop".into()))?
        .n();
    let mut g = Graph::new();
    let mut inputs = Bindings::new();
    let mut bind = |g: &mut Graph<F>, name: String, t: &Tensor<F>| {
        inputs.insert(name.clone(), t.clone());
        g.input(name)
    };
    let f: Vec<NodeId> = forward.iter().enumerate().map(|(k, a)| bind(&mut g, format!("fwd[{k}]"), &a.0)).collect();
    let b: Vec<NodeId> = backward.iter().enumerate().map(|(k, a)| bind(&mut g, format!("bwd[{k}]"), &a.0)).collect();
    let nodes = build_subcycle_losses(&mut g, &f, &b, n)?;
    g.forward_eval(&inputs, &ParamSet::new())?;
    loss_report(&g, &nodes)
}
