//! Model configuration, parameter container, and seeded initialization.
//!
//! Parameters are generic over the scalar so the same code runs in f32 for
//! training and in f64 for finite-difference gradient checks.

use ndarray::Array2;
use num_traits::{Float, FromPrimitive};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Scalar type the model math is generic over.
pub trait Real:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn to_f64(self) -> f64;
    fn to_f32(self) -> f32;
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Convert an f64 constant into the working scalar.
pub fn scalar<S: Real>(x: f64) -> S {
    S::from_f64(x).expect("f64 fits in Real scalar")
}

/// Architecture of the toy decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub v: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_query_heads: usize,
    pub head_dim: usize,
    /// Multi-query attention: a single shared K/V head.
    pub kv_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    /// Input-embedding dropout probability.
    pub dropout_rate: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            v: 512,
            d_model: 128,
            n_layers: 4,
            n_query_heads: 4,
            head_dim: 32,
            kv_heads: 1,
            ffn_dim: 512,
            max_seq_len: 256,
            dropout_rate: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_query_heads * self.head_dim {
            return Err(Error::Argument(format!(
                "d_model {} != n_query_heads {} * head_dim {}",
                self.d_model, self.n_query_heads, self.head_dim
            )));
        }
        if self.kv_heads != 1 {
            return Err(Error::Argument(
                "multi-query attention requires kv_heads = 1".into(),
            ));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Argument(
                "head_dim must be even for rotary embeddings".into(),
            ));
        }
        if self.v == 0 || self.n_layers == 0 || self.ffn_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::Argument("zero-sized model dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Argument("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-layer weights. Norm gains are stored as 1 x d matrices so every
/// parameter is uniformly an `Array2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub attn_norm: Array2<S>,
    pub wq: Array2<S>,
    pub wk: Array2<S>,
    pub wv: Array2<S>,
    pub wo: Array2<S>,
    pub ffn_norm: Array2<S>,
    pub w_up: Array2<S>,
    pub w_down: Array2<S>,
}

/// All trainable tensors of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    pub embedding: Array2<S>,
    pub layers: Vec<LayerParams<S>>,
    pub final_norm: Array2<S>,
    pub output: Array2<S>,
}

impl<S: Real> Params<S> {
    /// All-zero parameters with the shapes of `config` (test hook; also the
    /// template for gradient and optimizer-state buffers).
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let hd = config.head_dim;
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Array2::zeros((1, d)),
                wq: Array2::zeros((d, d)),
                wk: Array2::zeros((d, hd)),
                wv: Array2::zeros((d, hd)),
                wo: Array2::zeros((d, d)),
                ffn_norm: Array2::zeros((1, d)),
                w_up: Array2::zeros((d, config.ffn_dim)),
                w_down: Array2::zeros((config.ffn_dim, d)),
            })
            .collect();
        Params {
            embedding: Array2::zeros((config.v, d)),
            layers,
            final_norm: Array2::zeros((1, d)),
            output: Array2::zeros((d, config.v)),
        }
    }

    /// Visit tensors in canonical (checkpoint manifest) order.
    pub fn for_each(&self, mut f: impl FnMut(String, &Array2<S>)) {
        f("embedding".into(), &self.embedding);
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("layer{i}.attn_norm"), &l.attn_norm);
            f(format!("layer{i}.wq"), &l.wq);
            f(format!("layer{i}.wk"), &l.wk);
            f(format!("layer{i}.wv"), &l.wv);
            f(format!("layer{i}.wo"), &l.wo);
            f(format!("layer{i}.ffn_norm"), &l.ffn_norm);
            f(format!("layer{i}.w_up"), &l.w_up);
            f(format!("layer{i}.w_down"), &l.w_down);
        }
        f("final_norm".into(), &self.final_norm);
        f("output".into(), &self.output);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(String, &mut Array2<S>)) {
        f("embedding".into(), &mut self.embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("layer{i}.attn_norm"), &mut l.attn_norm);
            f(format!("layer{i}.wq"), &mut l.wq);
            f(format!("layer{i}.wk"), &mut l.wk);
            f(format!("layer{i}.wv"), &mut l.wv);
            f(format!("layer{i}.wo"), &mut l.wo);
            f(format!("layer{i}.ffn_norm"), &mut l.ffn_norm);
            f(format!("layer{i}.w_up"), &mut l.w_up);
            f(format!("layer{i}.w_down"), &mut l.w_down);
        }
        f("final_norm".into(), &mut self.final_norm);
        f("output".into(), &mut self.output);
    }

    /// Tensor references in canonical order (for optimizer-state zipping).
    pub fn tensors(&self) -> Vec<&Array2<S>> {
        let mut out = Vec::with_capacity(2 + 8 * self.layers.len());
        out.push(&self.embedding);
        for l in &self.layers {
            out.extend([
                &l.attn_norm,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_norm,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.output);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<S>> {
        let mut out = Vec::with_capacity(2 + 8 * self.layers.len());
        out.push(&mut self.embedding);
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.output);
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.iter().all(|x| x.is_finite()));
        ok
    }

    /// Convert scalar type (f32 <-> f64).
    pub fn cast<T: Real>(&self) -> Params<T> {
        let conv = |a: &Array2<S>| a.mapv(|x| T::from_f64(x.to_f64()).expect("cast"));
        Params {
            embedding: conv(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: conv(&l.attn_norm),
                    wq: conv(&l.wq),
                    wk: conv(&l.wk),
                    wv: conv(&l.wv),
                    wo: conv(&l.wo),
                    ffn_norm: conv(&l.ffn_norm),
                    w_up: conv(&l.w_up),
                    w_down: conv(&l.w_down),
                })
                .collect(),
            final_norm: conv(&self.final_norm),
            output: conv(&self.output),
        }
    }

    /// self += alpha * other, tensor-wise.
    pub fn axpy(&mut self, alpha: S, other: &Params<S>) {
        let mut others = Vec::new();
        other.for_each(|_, t| others.push(t.clone()));
        let mut i = 0;
        self.for_each_mut(|_, t| {
            t.zip_mut_with(&others[i], |a, &b| *a = *a + alpha * b);
            i += 1;
        });
    }
}

/// Closed-form parameter count for a config.
pub fn param_count(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let hd = config.head_dim;
    let per_layer = d + d * d + d * hd + d * hd + d * d + d + d * config.ffn_dim + config.ffn_dim * d;
    config.v * d + config.n_layers * per_layer + d + config.v * d
}

/// Seeded fan-in Gaussian initialization; norm gains at identity.
pub fn init_params<S: Real>(config: &ModelConfig, seed: u64) -> Result<Params<S>> {
    config.validate()?;
    let mut rng = rng_from(seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut params = Params::<S>::zeros(config);
    params.for_each_mut(|name, t| {
        if name.ends_with("norm") {
            t.fill(scalar(1.0));
        } else {
            // fan-in = number of rows for x @ W layouts; the embedding table
            // is scaled by d_model like everything feeding the residual.
            let fan_in = if name == "embedding" {
                config.d_model
            } else {
                t.nrows()
            };
            let std = 1.0 / (fan_in as f64).sqrt();
            for x in t.iter_mut() {
                *x = scalar(normal.sample(&mut rng) * std);
            }
        }
    });
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            v: 10,
            d_model: 8,
            n_layers: 1,
            n_query_heads: 2,
            head_dim: 4,
            kv_heads: 1,
            ffn_dim: 16,
            max_seq_len: 16,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn param_count_matches_hand_count() {
        // 1 layer, d=8, hd=4, ffn=16, V=10:
        //   embedding 10*8 = 80
        //   attn_norm 8 + wq 64 + wk 32 + wv 32 + wo 64
        //   ffn_norm 8 + w_up 128 + w_down 128
        //   final_norm 8 + output 80
        let cfg = tiny_config();
        assert_eq!(param_count(&cfg), 632);
        let p = init_params::<f32>(&cfg, 1).unwrap();
        assert_eq!(p.num_params(), 632);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config();
        let a = init_params::<f32>(&cfg, 5).unwrap();
        let b = init_params::<f32>(&cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = init_params::<f32>(&cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_config();
        cfg.head_dim = 3;
        cfg.d_model = 6;
        assert!(init_params::<f32>(&cfg, 1).is_err()); // odd head_dim
        let mut cfg = tiny_config();
        cfg.kv_heads = 2;
        assert!(init_params::<f32>(&cfg, 1).is_err());
        let mut cfg = tiny_config();
        cfg.d_model = 9;
        assert!(init_params::<f32>(&cfg, 1).is_err());
    }

    #[test]
    fn visitor_order_is_stable() {
        let cfg = tiny_config();
        let p = Params::<f32>::zeros(&cfg);
        let mut names = Vec::new();
        p.for_each(|n, _| names.push(n));
        assert_eq!(names[0], "embedding");
        assert_eq!(names[1], "layer0.attn_norm");
        assert_eq!(names.last().unwrap(), "output");
        assert_eq!(names.len(), 2 + 8 + 1);
    }
}
