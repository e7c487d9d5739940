//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use crate::error::{Error, Result};

/// One evaluation of the objective under test.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub value: f64,
    /// Piecewise-linear region fingerprint (see [`super::Graph::relu_signature`]).
    /// Coordinates whose ±h evaluations land in different regions are skipped.
    pub region: Option<u64>,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Probe {
            value,
            region: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Upper bound on checked coordinates; larger sets are sampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// `|a - c| / max(|a|, |c|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss_fn` around `params`.
pub fn finite_diff_check<L>(
    mut loss_fn: L,
    params: &ParamSet<f64>,
    analytic: &ParamSet<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParamSet<f64>) -> Result<Probe>,
{
    if !(opts.step.is_finite() && opts.step > 0.0) {
        return Err(Error::config(format!("finite-difference step {} must be positive", opts.step)));
    }
    params.check_compatible(analytic)?;

    let offsets: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, t))| (0..t.len()).map(move |k| (pi, k)))
        .collect();
    let coords: Vec<(usize, usize)> = if offsets.len() <= opts.max_coords {
        offsets
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked = sample(&mut rng, offsets.len(), opts.max_coords).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| offsets[i]).collect()
    };

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    for (pi, k) in coords {
        let name = &names[pi];
        let orig = params.get(name).expect("same names").data()[k];
        let set = |w: &mut ParamSet<f64>, v: f64| w.get_mut(name).expect("same names").data_mut()[k] = v;

        set(&mut work, orig + opts.step);
        let plus = loss_fn(&work)?;
        set(&mut work, orig - opts.step);
        let minus = loss_fn(&work)?;
        set(&mut work, orig);

        if !plus.value.is_finite() || !minus.value.is_finite() {
            return Err(Error::NonFinite(format!("loss at perturbed {name}[{k}]")));
        }
        if plus.region != minus.region {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * opts.step);
        let a = analytic.get(name).expect("same names").data()[k];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((name.clone(), k));
        }
    }
    Ok(report)
}
