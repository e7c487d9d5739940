//! Patch encoder: a small MLP whose output rows are l2-normalized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, ParamSet, Real, Tensor};
use crate::error::{Error, Result};
use crate::graph_builder::{extract_patches, PatchGridConfig};
use crate::rng::{stream, Stream};

/// Name of the graph input holding the flattened patch matrix.
pub const PATCH_INPUT: &str = "patches";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub channels: usize,
    pub hidden_widths: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 16,
            channels: 1,
            hidden_widths: vec![64],
            embed_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn input_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::config(format!("embed_dim must be at least 2, got {}", self.embed_dim)));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::config("hidden_widths must be a non-empty list of positive widths"));
        }
        if self.input_dim() == 0 {
            return Err(Error::config("patch_size and channels must be positive"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut fan_in = self.input_dim();
        for &w in self.hidden_widths.iter().chain(std::iter::once(&self.embed_dim)) {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }
}

fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Weights ~ U(-√(3/fan_in), √(3/fan_in)) (standard deviation 1/√fan_in), biases zero.
pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet<f64>> {
    cfg.validate()?;
    let mut rng = stream(seed, Stream::Init);
    let mut params = ParamSet::new();
    for (layer, (fan_in, fan_out)) in cfg.layer_dims().into_iter().enumerate() {
        let bound = (3.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        params.insert(weight_name(layer), Tensor::new(vec![fan_in, fan_out], w)?)?;
        params.insert(bias_name(layer), Tensor::zeros(&[fan_out]))?;
    }
    Ok(params)
}

/// Checks that `params` has exactly the layout `cfg` implies.
pub fn check_params<F: Real>(cfg: &EncoderConfig, params: &ParamSet<F>) -> Result<()> {
    let dims = cfg.layer_dims();
    if params.len() != 2 * dims.len() {
        return Err(Error::config(format!(
            "encoder expects {} parameter tensors, found {}",
            2 * dims.len(),
            params.len()
        )));
    }
    for (layer, (fan_in, fan_out)) in dims.into_iter().enumerate() {
        let expect = [(weight_name(layer), vec![fan_in, fan_out]), (bias_name(layer), vec![fan_out])];
        for (name, shape) in expect {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::config(format!("missing encoder parameter {name}"))),
            }
        }
    }
    Ok(())
}

/// Appends the encoder layers to `g`, returning the normalized embedding node.
pub fn build_encoder<F: Real>(g: &mut Graph<F>, cfg: &EncoderConfig, input: NodeId) -> NodeId {
    let n_layers = cfg.hidden_widths.len() + 1;
    let mut x = input;
    for layer in 0..n_layers {
        let w = g.param(weight_name(layer));
        let b = g.param(bias_name(layer));
        let h = g.matmul(x, w);
        x = g.bias_add(h, b);
        if layer + 1 < n_layers {
            x = g.relu(x);
        }
    }
    let out = g.l2_normalize_rows(x);
    g.label(out, "embeddings")
}

/// Flattens patches into rows, each shifted to zero mean.
pub fn patch_matrix<F: Real>(patches: &[Tensor<f32>], cfg: &EncoderConfig) -> Result<Tensor<F>> {
    let dim = cfg.input_dim();
    let expect = [cfg.patch_size, cfg.patch_size, cfg.channels];
    let mut data = Vec::with_capacity(patches.len() * dim);
    for (i, p) in patches.iter().enumerate() {
        if p.shape() != expect {
            return Err(Error::Shape {
                node: format!("patch {i}"),
                op: "embed",
                expected: format!("{expect:?}"),
                actual: format!("{:?}", p.shape()),
            });
        }
        let mean = p.data().iter().map(|&v| v as f64).sum::<f64>() / dim as f64;
        data.extend(p.data().iter().map(|&v| F::from_f64(v as f64 - mean)));
    }
    Tensor::new(vec![patches.len(), dim], data)
}

/// Unit-norm `N×d` embeddings, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<F>(pub Tensor<F>);

impl<F: Real> EmbeddingMatrix<F> {
    pub fn tensor(&self) -> &Tensor<F> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[F] {
        self.0.row(i)
    }
}

pub fn embed<F: Real>(cfg: &EncoderConfig, params: &ParamSet<F>, patches: &[Tensor<f32>]) -> Result<EmbeddingMatrix<F>> {
    check_params(cfg, params)?;
    if patches.is_empty() {
        return Err(Error::Usage("embed needs at least one patch".into()));
    }
    let mut g = Graph::new();
    let x = g.input(PATCH_INPUT);
    let out = build_encoder(&mut g, cfg, x);
    let mut inputs = Bindings::new();
    inputs.insert(PATCH_INPUT.to_string(), patch_matrix(patches, cfg)?);
    g.forward_eval(&inputs, params)?;
    Ok(EmbeddingMatrix(g.value(out)?.clone()))
}

/// Embeddings of every grid node of one `H×W×C` frame, unjittered.
pub fn embed_frame(cfg: &EncoderConfig, grid: &PatchGridConfig, params: &ParamSet<f64>, frame: &Tensor<f32>) -> Result<Tensor<f64>> {
    let nodes = extract_patches(frame, grid)?;
    Ok(embed(cfg, params, &nodes.patches)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_patches(n: usize, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::new(vec![16, 16, 1], (0..256).map(|_| rng.random::<f32>()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias_and_bounded_weights() {
        let cfg = EncoderConfig::default();
        let a = init_encoder(&cfg, 3).unwrap();
        assert_eq!(a, init_encoder(&cfg, 3).unwrap());
        assert_ne!(a, init_encoder(&cfg, 4).unwrap());
        for (name, t) in a.iter() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                let bound = (3.0 / t.shape()[0] as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound));
            }
        }
        check_params(&cfg, &a).unwrap();
    }

    #[test]
    fn embeddings_are_unit_norm_and_pure() {
        let cfg = EncoderConfig::default();
        let params = init_encoder(&cfg, 1).unwrap();
        let mut patches = random_patches(5, 2);
        patches.push(patches[1].clone());
        let e = embed(&cfg, &params, &patches).unwrap();
        for i in 0..e.len() {
            let n: f64 = e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(e.row(1), e.row(5));
        let self_sim: f64 = e.row(2).iter().map(|v| v * v).sum();
        assert!((self_sim - 1.0).abs() < 1e-9);
    }

    #[test]
    fn permuting_patches_permutes_rows() {
        let cfg = EncoderConfig::default();
        let params = init_encoder(&cfg, 1).unwrap();
        let patches = random_patches(4, 8);
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| patches[i].clone()).collect();
        let a = embed(&cfg, &params, &patches).unwrap();
        let b = embed(&cfg, &params, &permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(b.row(k), a.row(i));
        }
    }

    #[test]
    fn constant_patch_embeds_without_dividing_by_zero() {
        let cfg = EncoderConfig::default();
        let params = init_encoder(&cfg, 1).unwrap();
        let e = embed(&cfg, &params, &[Tensor::full(&[16, 16, 1], 0.5)]).unwrap();
        assert!(e.tensor().is_finite());
    }

    #[test]
    fn wrong_patch_shape_is_rejected() {
        let cfg = EncoderConfig::default();
        let params = init_encoder(&cfg, 1).unwrap();
        assert!(embed(&cfg, &params, &[Tensor::<f32>::zeros(&[8, 8, 1])]).is_err());
        let bad = EncoderConfig {
            hidden_widths: vec![],
            ..EncoderConfig::default()
        };
        assert!(init_encoder(&bad, 0).is_err());
    }
}
