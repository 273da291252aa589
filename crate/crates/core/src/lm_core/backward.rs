//! Analytic gradients: full backprop through the output head, RMSNorms, the
//! SiLU FFN, causal multi-query attention, rotary positions and the embedding.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rng::mix_index;
use crate::token_bridge::EncodedExample;

use super::forward::{forward_cached, masked_log_softmax, rope_rotate_inv, rope_tables, silu_grad, ForwardCache, NormCache};
use super::params::{scalar, ModelConfig, Params, Real};

/// d(loss)/d(input) of an RMSNorm with gain, given d(loss)/d(output).
/// Also accumulates the gain gradient.
fn rmsnorm_backward<S: Real>(
    d_out: &Array2<S>,
    cache: &NormCache<S>,
    gain: &Array2<S>,
    d_gain: &mut Array2<S>,
) -> Array2<S> {
    let d = cache.input.ncols();
    let inv_d: S = scalar(1.0 / d as f64);
    let mut d_in = Array2::<S>::zeros(cache.input.raw_dim());
    for t in 0..cache.input.nrows() {
        let ri = cache.inv_rms[t];
        let x = cache.input.row(t);
        let dy = d_out.row(t);
        // gain gradient via the pre-gain normed row
        for j in 0..d {
            d_gain[[0, j]] += dy[j] * x[j] * ri;
        }
        // dn = dy * gain; dx = ri*dn - ri^3/d * (dn . x) * x
        let mut dot = S::zero();
        for j in 0..d {
            dot += dy[j] * gain[[0, j]] * x[j];
        }
        let coeff = ri * ri * ri * inv_d * dot;
        let mut out = d_in.row_mut(t);
        for j in 0..d {
            out[j] = ri * dy[j] * gain[[0, j]] - coeff * x[j];
        }
    }
    d_in
}

/// Backpropagate an arbitrary d(loss)/d(logits) through the cached forward
/// pass, accumulating parameter gradients into `grads`.
pub fn backprop<S: Real>(
    config: &ModelConfig,
    params: &Params<S>,
    cache: &ForwardCache<S>,
    d_logits: &Array2<S>,
    grads: &mut Params<S>,
) -> Result<()> {
    let t_len = cache.tokens.len();
    let d = config.d_model;
    let hd = config.head_dim;
    let n_heads = config.n_query_heads;
    let scale: S = scalar(1.0 / (hd as f64).sqrt());
    let (cos_tab, sin_tab) = rope_tables::<S>(t_len, hd);

    // output head
    grads.output = &grads.output + &cache.hidden.t().dot(d_logits);
    let d_hidden = d_logits.dot(&params.output.t());

    // final norm
    let mut dx = rmsnorm_backward(
        &d_hidden,
        &cache.final_norm,
        &params.final_norm,
        &mut grads.final_norm,
    );

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];

        // ---- FFN block ----
        lg.w_down = &lg.w_down + &lc.act.t().dot(&dx);
        let d_act = dx.dot(&layer.w_down.t());
        let mut d_hup = d_act;
        d_hup.zip_mut_with(&lc.h_up, |g, &h| *g = *g * silu_grad(h));
        lg.w_up = &lg.w_up + &lc.xn2.t().dot(&d_hup);
        let d_xn2 = d_hup.dot(&layer.w_up.t());
        let d_norm2_in = rmsnorm_backward(&d_xn2, &lc.norm2, &layer.ffn_norm, &mut lg.ffn_norm);
        dx += &d_norm2_in;

        // ---- attention block ----
        lg.wo = &lg.wo + &lc.ctx.t().dot(&dx);
        let d_ctx = dx.dot(&layer.wo.t());

        let mut d_qrot = Array2::<S>::zeros((t_len, d));
        let mut d_krot = Array2::<S>::zeros((t_len, hd));
        let mut d_v = Array2::<S>::zeros((t_len, hd));

        for h in 0..n_heads {
            let off = h * hd;
            let p = &lc.probs[h];
            for t in 0..t_len {
                let d_ctx_row = d_ctx.row(t);
                let dc = &d_ctx_row.as_slice().expect("contiguous")[off..off + hd];

                // value gradient and d(probs)
                let mut dp = vec![S::zero(); t + 1];
                for (u, dp_u) in dp.iter_mut().enumerate() {
                    let w = p[[t, u]];
                    let v_row = lc.v.row(u);
                    let vs = v_row.as_slice().expect("contiguous");
                    let mut dot = S::zero();
                    let mut dv_row = d_v.row_mut(u);
                    for (j, (&dcj, &vj)) in dc.iter().zip(vs).enumerate() {
                        dv_row[j] += w * dcj;
                        dot += dcj * vj;
                    }
                    *dp_u = dot;
                }

                // softmax backward over the causal row
                let mut inner = S::zero();
                for (u, &dp_u) in dp.iter().enumerate() {
                    inner += p[[t, u]] * dp_u;
                }
                for (u, &dp_u) in dp.iter().enumerate() {
                    let ds = p[[t, u]] * (dp_u - inner) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    // score s_{t,u} = scale * q_rot[t,off..] . k_rot[u,:]
                    let q_row = lc.q_rot.row(t);
                    let qs = &q_row.as_slice().expect("contiguous")[off..off + hd];
                    let k_row = lc.k_rot.row(u);
                    let ks = k_row.as_slice().expect("contiguous");
                    let mut dq_row = d_qrot.row_mut(t);
                    let mut dk_row = d_krot.row_mut(u);
                    for j in 0..hd {
                        dq_row[off + j] += ds * ks[j];
                        dk_row[j] += ds * qs[j];
                    }
                }
            }
        }

        // undo the rotary rotation (orthogonal, so inverse = transpose)
        for t in 0..t_len {
            let cos = cos_tab.row(t);
            let cos = cos.as_slice().expect("contiguous");
            let sin = sin_tab.row(t);
            let sin = sin.as_slice().expect("contiguous");
            let dq_row = d_qrot.row_mut(t).into_slice().expect("contiguous");
            for h in 0..n_heads {
                rope_rotate_inv(&mut dq_row[h * hd..(h + 1) * hd], cos, sin);
            }
            let dk_row = d_krot.row_mut(t).into_slice().expect("contiguous");
            rope_rotate_inv(dk_row, cos, sin);
        }

        lg.wq = &lg.wq + &lc.xn1.t().dot(&d_qrot);
        lg.wk = &lg.wk + &lc.xn1.t().dot(&d_krot);
        lg.wv = &lg.wv + &lc.xn1.t().dot(&d_v);
        let d_xn1 = d_qrot.dot(&layer.wq.t()) + d_krot.dot(&layer.wk.t()) + d_v.dot(&layer.wv.t());
        let d_norm1_in = rmsnorm_backward(&d_xn1, &lc.norm1, &layer.attn_norm, &mut lg.attn_norm);
        dx += &d_norm1_in;
    }

    // input dropout, then the embedding table
    if let Some(mask) = &cache.dropout_mask {
        dx.zip_mut_with(mask, |g, &m| *g = *g * m);
    }
    for (t, &tok) in cache.tokens.iter().enumerate() {
        let mut row = grads.embedding.row_mut(tok as usize);
        let dr = dx.row(t);
        for j in 0..d {
            row[j] += dr[j];
        }
    }
    Ok(())
}

fn total_masked(batch: &[EncodedExample]) -> usize {
    batch
        .iter()
        .map(|ex| ex.loss_mask.iter().filter(|&&m| m).count())
        .sum()
}

/// Mean masked cross-entropy and gradients for every parameter.
///
/// Input-embedding dropout is applied only when `dropout_on`; per-example
/// masks derive from `seed` and the example's index in the batch.
pub fn loss_and_grads<S: Real>(
    config: &ModelConfig,
    params: &Params<S>,
    batch: &[EncodedExample],
    dropout_on: bool,
    seed: u64,
) -> Result<(f64, Params<S>)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let m_total = total_masked(batch);
    if m_total == 0 {
        return Err(Error::Argument("batch has no masked positions".into()));
    }
    let inv_m: S = scalar(1.0 / m_total as f64);

    let mut grads = Params::<S>::zeros(config);
    let mut loss_sum = 0.0f64;

    for (idx, ex) in batch.iter().enumerate() {
        let dropout = if dropout_on && config.dropout_rate > 0.0 {
            Some((config.dropout_rate, mix_index(seed, idx as u64)))
        } else {
            None
        };
        let cache = forward_cached(config, params, &ex.tokens, dropout)?;

        let t_len = ex.tokens.len();
        let mut d_logits = Array2::<S>::zeros((t_len, config.v));
        for i in 0..t_len {
            if !ex.loss_mask[i] {
                continue;
            }
            debug_assert!(i > 0, "loss mask cannot cover position 0");
            let target = ex.tokens[i] as usize;
            let row = cache.logits.row(i - 1);
            let row = row.as_slice().expect("contiguous");
            loss_sum -= masked_log_softmax(row, None)[target];

            // softmax in working precision for the gradient
            let mut max = S::neg_infinity();
            for &l in row {
                if l > max {
                    max = l;
                }
            }
            let mut denom = S::zero();
            for &l in row {
                denom += (l - max).exp();
            }
            let mut d_row = d_logits.row_mut(i - 1);
            for (j, &l) in row.iter().enumerate() {
                let p = (l - max).exp() / denom;
                d_row[j] += p * inv_m;
            }
            d_row[target] -= inv_m;
        }

        backprop(config, params, &cache, &d_logits, &mut grads)?;
    }

    Ok((loss_sum / m_total as f64, grads))
}

/// Mean masked cross-entropy only (eval mode, no gradients).
pub fn batch_loss<S: Real>(
    config: &ModelConfig,
    params: &Params<S>,
    batch: &[EncodedExample],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let m_total = total_masked(batch);
    if m_total == 0 {
        return Err(Error::Argument("batch has no masked positions".into()));
    }
    let mut loss_sum = 0.0f64;
    for ex in batch {
        let cache = forward_cached(config, params, &ex.tokens, None)?;
        for i in 0..ex.tokens.len() {
            if !ex.loss_mask[i] {
                continue;
            }
            let row = cache.logits.row(i - 1);
            loss_sum -=
                masked_log_softmax(row.as_slice().expect("contiguous"), None)[ex.tokens[i] as usize];
        }
    }
    Ok(loss_sum / m_total as f64)
}
