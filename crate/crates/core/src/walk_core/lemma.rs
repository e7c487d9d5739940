//! Gradient of an InfoNCE objective whose negatives contain exact copies of
//! the positive.
//!
//! With `L(q) = uᵀq − log Z`, `Z = (1+n)·exp(uᵀq) + Σ_{v∈V⁺} exp(vᵀq)` and `n`
//! duplicates of `u` among the negatives, the gradient is
//! `λ_u·u − Σ_{v∈V⁺} exp(vᵀq)/Z · v` with `λ_u = 1 − (1+n)·exp(uᵀq)/Z ≥ 0`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Bindings, Graph, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Query, positive, distinct negatives and the number of positive duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct LemmaDraw {
    pub q: Vec<f64>,
    pub u: Vec<f64>,
    pub distinct_negatives: Vec<Vec<f64>>,
    pub duplicates: usize,
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl LemmaDraw {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize, max_distinct: usize, max_duplicates: usize) -> Self {
        let k = rng.random_range(0..=max_distinct);
        LemmaDraw {
            q: unit_vector(rng, dim),
            u: unit_vector(rng, dim),
            distinct_negatives: (0..k).map(|_| unit_vector(rng, dim)).collect(),
            duplicates: rng.random_range(0..=max_duplicates),
        }
    }

    fn dim(&self) -> usize {
        self.q.len()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FalseNegativeAnalysis {
    pub lambda: f64,
    pub partition: f64,
    /// `exp(vᵀq)/Z` for each distinct negative.
    pub negative_weights: Vec<f64>,
    /// Analytic `∇_q L`.
    pub gradient: Vec<f64>,
}

pub fn false_negative_coefficient(draw: &LemmaDraw) -> FalseNegativeAnalysis {
    let pos = dot(&draw.u, &draw.q).exp();
    let neg: Vec<f64> = draw.distinct_negatives.iter().map(|v| dot(v, &draw.q).exp()).collect();
    let dup_mass = (1 + draw.duplicates) as f64 * pos;
    let partition = dup_mass + neg.iter().sum::<f64>();
    let lambda = 1.0 - dup_mass / partition;
    let negative_weights: Vec<f64> = neg.iter().map(|e| e / partition).collect();
    let mut gradient: Vec<f64> = draw.u.iter().map(|x| lambda * x).collect();
    for (v, w) in draw.distinct_negatives.iter().zip(&negative_weights) {
        for (g, x) in gradient.iter_mut().zip(v) {
            *g -= w * x;
        }
    }
    FalseNegativeAnalysis {
        lambda,
        partition,
        negative_weights,
        gradient,
    }
}

/// Coefficient on `u` when the autodiff gradient of `L` is expanded in the
/// basis `{u} ∪ V⁺` (requires those vectors to be linearly independent).
pub fn autodiff_positive_coefficient(draw: &LemmaDraw) -> Result<f64> {
    let d = draw.dim();
    let mut keys: Vec<f64> = Vec::new();
    for _ in 0..=draw.duplicates {
        keys.extend_from_slice(&draw.u);
    }
    for v in &draw.distinct_negatives {
        keys.extend_from_slice(v);
    }
    let m = 1 + draw.duplicates + draw.distinct_negatives.len();

    let mut g = Graph::<f64>::new();
    let q = g.param("q");
    let k = g.input("keys");
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let ce = g.softmax_cross_entropy(logits, vec![0]);
    let mut inputs = Bindings::new();
    inputs.insert("keys".into(), Tensor::new(vec![m, d], keys)?);
    let mut params = ParamSet::new();
    params.insert("q", Tensor::new(vec![1, d], draw.q.clone())?)?;
    g.forward_eval(&inputs, &params)?;
    let grads = g.backward(ce)?;
    // cross-entropy is -L
    let grad_l: Vec<f64> = grads.get("q").expect("bound").data().iter().map(|x| -x).collect();

    let basis: Vec<&[f64]> = std::iter::once(draw.u.as_slice())
        .chain(draw.distinct_negatives.iter().map(Vec::as_slice))
        .collect();
    let b = DMatrix::from_fn(d, basis.len(), |r, c| basis[c][r]);
    let rhs = DVector::from_vec(grad_l);
    let gram = b.transpose() * &b;
    let coef = gram
        .lu()
        .solve(&(b.transpose() * rhs))
        .ok_or_else(|| Error::Data("lemma basis vectors are linearly dependent".into()))?;
    Ok(coef[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_negatives_duplicates_gives_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dups in 0..6 {
            let mut draw = LemmaDraw::random(&mut rng, 8, 0, 0);
            draw.duplicates = dups;
            let a = false_negative_coefficient(&draw);
            assert_eq!(a.lambda, 0.0);
        }
    }

    #[test]
    fn no_duplicates_is_standard_infonce_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut draw = LemmaDraw::random(&mut rng, 8, 5, 0);
        draw.duplicates = 0;
        draw.distinct_negatives.push(vec![0.0; 8]);
        draw.distinct_negatives.last_mut().unwrap()[0] = 1.0;
        let a = false_negative_coefficient(&draw);
        let e = dot(&draw.u, &draw.q).exp();
        let z = e + draw.distinct_negatives.iter().map(|v| dot(v, &draw.q).exp()).sum::<f64>();
        assert!((a.lambda - (1.0 - e / z)).abs() < 1e-15);
    }

    #[test]
    fn autodiff_matches_analytic_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let draw = LemmaDraw::random(&mut rng, 16, 8, 8);
            let a = false_negative_coefficient(&draw);
            assert!(a.lambda >= 0.0 && a.lambda < 1.0);
            let c = autodiff_positive_coefficient(&draw).unwrap();
            assert!((c - a.lambda).abs() < 1e-10, "{c} vs {}", a.lambda);
        }
    }
}
