//! Forward pass: rotary positions, causal multi-query attention, SiLU FFN,
//! RMSNorm, with full activation caching for the analytic backward pass.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from;

use super::params::{scalar, ModelConfig, Params, Real};

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const ROPE_BASE: f64 = 10000.0;

/// Per-row RMS normalization state needed by the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<S> {
    /// The tensor that entered the norm.
    pub input: Array2<S>,
    /// 1 / sqrt(mean(x^2) + eps) per row.
    pub inv_rms: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct LayerCache<S> {
    pub norm1: NormCache<S>,
    /// Post-gain normed input of the QKV projections.
    pub xn1: Array2<S>,
    /// Rotated queries, all heads concatenated: T x d.
    pub q_rot: Array2<S>,
    /// Rotated shared key head: T x head_dim.
    pub k_rot: Array2<S>,
    /// Shared value head: T x head_dim.
    pub v: Array2<S>,
    /// Causal attention weights per query head: T x T, rows sum to 1 over u <= t.
    pub probs: Vec<Array2<S>>,
    /// Concatenated per-head context vectors (input of wo): T x d.
    pub ctx: Array2<S>,
    pub norm2: NormCache<S>,
    pub xn2: Array2<S>,
    /// Pre-activation FFN hidden: T x ffn_dim.
    pub h_up: Array2<S>,
    /// SiLU(h_up).
    pub act: Array2<S>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    pub tokens: Vec<u32>,
    /// Embedding rows after input dropout; what layer 0 sees.
    pub x0: Array2<S>,
    /// Inverted-dropout scale factors, if dropout was live.
    pub dropout_mask: Option<Array2<S>>,
    pub layers: Vec<LayerCache<S>>,
    pub final_norm: NormCache<S>,
    /// Final hidden states after the last norm (input of the output head).
    pub hidden: Array2<S>,
    pub logits: Array2<S>,
}

pub(crate) fn rmsnorm<S: Real>(x: &Array2<S>, gain: &Array2<S>) -> (Array2<S>, Vec<S>) {
    let d = x.ncols();
    let mut out = x.clone();
    let mut inv_rms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let ms: S = row.iter().map(|&v| v * v).sum::<S>() / scalar(d as f64);
        let ri = (ms + scalar(NORM_EPS)).sqrt().recip();
        inv_rms.push(ri);
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * ri * gain[[0, j]];
        }
    }
    (out, inv_rms)
}

/// cos/sin tables for positions 0..t_max, shape t_max x head_dim/2.
pub(crate) fn rope_tables<S: Real>(t_max: usize, head_dim: usize) -> (Array2<S>, Array2<S>) {
    let half = head_dim / 2;
    let mut cos = Array2::zeros((t_max, half));
    let mut sin = Array2::zeros((t_max, half));
    for t in 0..t_max {
        for i in 0..half {
            let freq = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
            let theta = t as f64 * freq;
            cos[[t, i]] = scalar(theta.cos());
            sin[[t, i]] = scalar(theta.sin());
        }
    }
    (cos, sin)
}

/// Rotate one head slice in place; half-split pairing (i, i + hd/2).
pub(crate) fn rope_rotate<S: Real>(slice: &mut [S], cos: &[S], sin: &[S]) {
    let half = slice.len() / 2;
    for i in 0..half {
        let a = slice[i];
        let b = slice[i + half];
        slice[i] = a * cos[i] - b * sin[i];
        slice[i + half] = a * sin[i] + b * cos[i];
    }
}

/// Inverse rotation (transpose of the rotation), for the backward pass.
pub(crate) fn rope_rotate_inv<S: Real>(slice: &mut [S], cos: &[S], sin: &[S]) {
    let half = slice.len() / 2;
    for i in 0..half {
        let a = slice[i];
        let b = slice[i + half];
        slice[i] = a * cos[i] + b * sin[i];
        slice[i + half] = -a * sin[i] + b * cos[i];
    }
}

pub(crate) fn silu<S: Real>(x: S) -> S {
    x / (S::one() + (-x).exp())
}

pub(crate) fn silu_grad<S: Real>(x: S) -> S {
    let sig = S::one() / (S::one() + (-x).exp());
    sig * (S::one() + x * (S::one() - sig))
}

fn validate_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Argument("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Argument(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.v) {
        return Err(Error::Argument(format!("token id {bad} >= V={}", config.v)));
    }
    Ok(())
}

/// Full forward pass with activation caching.
///
/// `dropout` carries (rate, seed) when input-embedding dropout is live; eval
/// mode passes `None` and is deterministic.
pub fn forward_cached<S: Real>(
    config: &ModelConfig,
    params: &Params<S>,
    tokens: &[u32],
    dropout: Option<(f32, u64)>,
) -> Result<ForwardCache<S>> {
    validate_tokens(config, tokens)?;
    let t_len = tokens.len();
    let d = config.d_model;
    let hd = config.head_dim;
    let n_heads = config.n_query_heads;
    let scale: S = scalar(1.0 / (hd as f64).sqrt());

    let mut x = Array2::<S>::zeros((t_len, d));
    for (t, &tok) in tokens.iter().enumerate() {
        x.row_mut(t).assign(&params.embedding.row(tok as usize));
    }

    let dropout_mask = match dropout {
        Some((rate, seed)) if rate > 0.0 => {
            let mut rng = rng_from(seed);
            let keep = 1.0 / (1.0 - rate as f64);
            let mask = Array2::from_shape_fn((t_len, d), |_| {
                if rng.gen::<f32>() < rate {
                    S::zero()
                } else {
                    scalar(keep)
                }
            });
            x.zip_mut_with(&mask, |v, &m| *v = *v * m);
            Some(mask)
        }
        _ => None,
    };
    let x0 = x.clone();

    let (cos_tab, sin_tab) = rope_tables::<S>(t_len, hd);
    let mut layers = Vec::with_capacity(config.n_layers);

    for layer in &params.layers {
        let (xn1, inv1) = rmsnorm(&x, &layer.attn_norm);
        let norm1 = NormCache {
            input: x.clone(),
            inv_rms: inv1,
        };

        let mut q_rot = xn1.dot(&layer.wq);
        let mut k_rot = xn1.dot(&layer.wk);
        let v = xn1.dot(&layer.wv);
        for t in 0..t_len {
            let cos = cos_tab.row(t);
            let cos = cos.as_slice().expect("contiguous");
            let sin = sin_tab.row(t);
            let sin = sin.as_slice().expect("contiguous");
            let q_row = q_rot.row_mut(t).into_slice().expect("contiguous");
            for h in 0..n_heads {
                rope_rotate(&mut q_row[h * hd..(h + 1) * hd], cos, sin);
            }
            let k_row = k_rot.row_mut(t).into_slice().expect("contiguous");
            rope_rotate(k_row, cos, sin);
        }

        // causal attention; all query heads share the single k/v head
        let mut probs = Vec::with_capacity(n_heads);
        let mut ctx = Array2::<S>::zeros((t_len, d));
        for h in 0..n_heads {
            let off = h * hd;
            let mut p = Array2::<S>::zeros((t_len, t_len));
            for t in 0..t_len {
                let q_row = q_rot.row(t);
                let qs = &q_row.as_slice().expect("contiguous")[off..off + hd];
                let mut max_score = S::neg_infinity();
                let mut scores = vec![S::zero(); t + 1];
                for (u, s) in scores.iter_mut().enumerate() {
                    let k_row = k_rot.row(u);
                    let ks = k_row.as_slice().expect("contiguous");
                    let dot: S = qs.iter().zip(ks).map(|(&a, &b)| a * b).sum();
                    *s = dot * scale;
                    if *s > max_score {
                        max_score = *s;
                    }
                }
                let mut denom = S::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max_score).exp();
                    denom += *s;
                }
                for (u, &e) in scores.iter().enumerate() {
                    p[[t, u]] = e / denom;
                }
                // weighted value sum
                let mut acc = vec![S::zero(); hd];
                for u in 0..=t {
                    let w = p[[t, u]];
                    let v_row = v.row(u);
                    let vs = v_row.as_slice().expect("contiguous");
                    for (a, &vv) in acc.iter_mut().zip(vs) {
                        *a += w * vv;
                    }
                }
                let ctx_row = ctx.row_mut(t).into_slice().expect("contiguous");
                ctx_row[off..off + hd].copy_from_slice(&acc);
            }
            probs.push(p);
        }

        let attn_out = ctx.dot(&layer.wo);
        x += &attn_out;

        let (xn2, inv2) = rmsnorm(&x, &layer.ffn_norm);
        let norm2 = NormCache {
            input: x.clone(),
            inv_rms: inv2,
        };
        let h_up = xn2.dot(&layer.w_up);
        let act = h_up.mapv(silu);
        let ffn_out = act.dot(&layer.w_down);
        x += &ffn_out;

        layers.push(LayerCache {
            norm1,
            xn1,
            q_rot,
            k_rot,
            v,
            probs,
            ctx,
            norm2,
            xn2,
            h_up,
            act,
        });
    }

    let (hidden, inv_f) = rmsnorm(&x, &params.final_norm);
    let final_norm = NormCache {
        input: x,
        inv_rms: inv_f,
    };
    let logits = hidden.dot(&params.output);

    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        x0,
        dropout_mask,
        layers,
        final_norm,
        hidden,
        logits,
    })
}

/// Eval-mode logits (positions x V); deterministic, dropout off.
pub fn forward<S: Real>(
    config: &ModelConfig,
    params: &Params<S>,
    tokens: &[u32],
) -> Result<Array2<S>> {
    Ok(forward_cached(config, params, tokens, None)?.logits)
}

/// Numerically stable log-softmax of one logits row in f64, with an optional
/// id range forced to -inf before normalization.
pub fn masked_log_softmax<S: Real>(row: &[S], forbid: Option<(u32, u32)>) -> Vec<f64> {
    let forbidden = |i: usize| {
        forbid
            .map(|(lo, hi)| (i as u32) >= lo && (i as u32) < hi)
            .unwrap_or(false)
    };
    let mut max = f64::NEG_INFINITY;
    for (i, &l) in row.iter().enumerate() {
        if !forbidden(i) {
            max = max.max(l.to_f64());
        }
    }
    let mut denom = 0.0f64;
    for (i, &l) in row.iter().enumerate() {
        if !forbidden(i) {
            denom += (l.to_f64() - max).exp();
        }
    }
    let log_denom = denom.ln() + max;
    row.iter()
        .enumerate()
        .map(|(i, &l)| {
            if forbidden(i) {
                f64::NEG_INFINITY
            } else {
                l.to_f64() - log_denom
            }
        })
        .collect()
}
