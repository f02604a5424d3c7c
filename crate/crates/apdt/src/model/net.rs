//! Transformer forward pass, caches, loss, and the hand-written backward
//! pass over every parameter.

use crate::dataset::{TokenKind, TokenPayload, TokenSequence};
use crate::env::normalize_action;

use super::encoder::{encoder_backward, encoder_forward, EncCache};
use super::linalg::{add_acc, dot, matvec, matvec_t_acc, outer_acc, softmax_in_place};
use super::{ModelError, ModelParams, LN_EPS};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_CUBIC: f64 = 0.044715;

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_CUBIC * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let u = GELU_C * (z + GELU_CUBIC * z * z * z);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_CUBIC * z * z)
}

/// LayerNorm intermediates for one application over all positions.
#[derive(Debug, Clone)]
struct LnCache {
    /// Normalized inputs before gain/bias, length L*d.
    xhat: Vec<f64>,
    /// 1 / sqrt(var + eps) per position.
    inv_std: Vec<f64>,
    /// Post-gain output, length L*d.
    out: Vec<f64>,
}

fn layer_norm(x: &[f64], n_pos: usize, d: usize, gain: &[f64], bias: &[f64]) -> LnCache {
    let mut xhat = vec![0.0; n_pos * d];
    let mut inv_std = vec![0.0; n_pos];
    let mut out = vec![0.0; n_pos * d];
    for p in 0..n_pos {
        let row = &x[p * d..(p + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[p] = is;
        for i in 0..d {
            let h = (row[i] - mean) * is;
            xhat[p * d + i] = h;
            out[p * d + i] = gain[i] * h + bias[i];
        }
    }
    LnCache { xhat, inv_std, out }
}

/// dx += LN backward for one position; accumulates dgain/dbias.
fn layer_norm_backward_pos(
    dout: &[f64],
    xhat: &[f64],
    inv_std: f64,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
) {
    let d = dout.len();
    let mut dxhat = vec![0.0; d];
    for i in 0..d {
        dgain[i] += dout[i] * xhat[i];
        dbias[i] += dout[i];
        dxhat[i] = dout[i] * gain[i];
    }
    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
    let mean_dxhat_xhat = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
    for i in 0..d {
        dx[i] += inv_std * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    /// Packed q|k|v rows, L*3d.
    qkv: Vec<f64>,
    /// Causal attention weights, attw[head][query] has query+1 entries.
    attw: Vec<Vec<Vec<f64>>>,
    /// Concatenated head contexts, L*d.
    att: Vec<f64>,
    ln2: LnCache,
    /// Feed-forward pre-activations, L*d_ff.
    z: Vec<f64>,
    /// GELU outputs, L*d_ff.
    a: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    /// State-encoder caches, Some at state positions.
    enc: Vec<Option<EncCache>>,
    /// Normalized scalar inputs at return/cost positions.
    scalars: Vec<f64>,
    /// Normalized action triples at action positions.
    actions: Vec<Option<[f64; 3]>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
}

/// Output of a forward pass: one prediction per state token, in token order,
/// plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct Forward {
    /// tanh action predictions, each component in (-1, 1).
    pub preds: Vec<[f64; 3]>,
    /// Token index of each prediction's state token.
    pub state_positions: Vec<usize>,
    pub(crate) cache: ForwardCache,
}

fn validate(params: &ModelParams, seq: &TokenSequence) -> Result<(), ModelError> {
    let cfg = &params.config;
    if seq.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if seq.len() > cfg.max_tokens() {
        return Err(ModelError::SequenceTooLong {
            got: seq.len(),
            max: cfg.max_tokens(),
        });
    }
    if seq.prompt_steps > cfg.prompt_len {
        return Err(ModelError::PromptTooLong {
            got: seq.prompt_steps,
            max: cfg.prompt_len,
        });
    }
    for (i, tok) in seq.tokens.iter().enumerate() {
        // Timestep i/4 also keeps every time-embedding lookup in range, since
        // the length cap bounds i/4 below prompt_len + context_window.
        if tok.payload.kind() != TokenKind::from_cycle_index(i) || tok.timestep != i / 4 {
            return Err(ModelError::MalformedOrder { index: i });
        }
    }
    Ok(())
}

/// Runs the model over a token sequence.
///
/// Attention is strictly causal with an independent softmax per query prefix,
/// so a prediction depends only on tokens at or before its position: the same
/// prefix produces bitwise-identical predictions regardless of what follows.
pub fn forward(params: &ModelParams, seq: &TokenSequence) -> Result<Forward, ModelError> {
    validate(params, seq)?;
    let cfg = &params.config;
    let d = cfg.d_model;
    let n = seq.len();

    // Token embeddings.
    let mut x0 = vec![0.0; n * d];
    let mut enc: Vec<Option<EncCache>> = vec![None; n];
    let mut scalars = vec![0.0; n];
    let mut actions: Vec<Option<[f64; 3]>> = vec![None; n];
    for (i, tok) in seq.tokens.iter().enumerate() {
        let out = &mut x0[i * d..(i + 1) * d];
        match &tok.payload {
            TokenPayload::ReturnToGo(v) => {
                let u = v / params.norm.rtg;
                scalars[i] = u;
                for ((o, &w), &b) in out
                    .iter_mut()
                    .zip(params.seg(&params.index.rtg_w))
                    .zip(params.seg(&params.index.rtg_b))
                {
                    *o = w * u + b;
                }
            }
            TokenPayload::CostToGo(v) => {
                let u = v / params.norm.ctg;
                scalars[i] = u;
                for ((o, &w), &b) in out
                    .iter_mut()
                    .zip(params.seg(&params.index.ctg_w))
                    .zip(params.seg(&params.index.ctg_b))
                {
                    *o = w * u + b;
                }
            }
            TokenPayload::State(st) => {
                enc[i] = Some(encoder_forward(params, st, out)?);
            }
            TokenPayload::Action(raw) => {
                let an = normalize_action(
                    &crate::env::ActionCommand::from_array(*raw),
                    params.norm.dist,
                );
                actions[i] = Some(an);
                matvec(params.seg(&params.index.act_w), d, 3, &an, out);
                for (o, &b) in out.iter_mut().zip(params.seg(&params.index.act_b)) {
                    *o += b;
                }
            }
        }
        let trow = params.index.type_row(tok.payload.kind(), d);
        add_acc(out, params.seg(&trow));
        let krow = params.index.time_row(tok.timestep, d);
        add_acc(out, params.seg(&krow));
    }

    // Transformer stack.
    let nh = cfg.n_heads;
    let dh = cfg.d_head();
    let d_ff = cfg.d_ff();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = x0;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for li in &params.index.layers {
        let x_in = x;
        let ln1 = layer_norm(&x_in, n, d, params.seg(&li.ln1_g), params.seg(&li.ln1_b));
        let mut qkv = vec![0.0; n * 3 * d];
        for p in 0..n {
            let row = &mut qkv[p * 3 * d..(p + 1) * 3 * d];
            matvec(
                params.seg(&li.qkv_w),
                3 * d,
                d,
                &ln1.out[p * d..(p + 1) * d],
                row,
            );
            for (o, &b) in row.iter_mut().zip(params.seg(&li.qkv_b)) {
                *o += b;
            }
        }
        let mut attw: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); nh];
        let mut att = vec![0.0; n * d];
        for (h, head_w) in attw.iter_mut().enumerate() {
            let hoff = h * dh;
            for q in 0..n {
                let qrow = &qkv[q * 3 * d + hoff..q * 3 * d + hoff + dh];
                let mut weights: Vec<f64> = (0..=q)
                    .map(|j| {
                        let krow = &qkv[j * 3 * d + d + hoff..j * 3 * d + d + hoff + dh];
                        dot(qrow, krow) * scale
                    })
                    .collect();
                softmax_in_place(&mut weights);
                let ctx = &mut att[q * d + hoff..q * d + hoff + dh];
                for (j, &w) in weights.iter().enumerate() {
                    let vrow = &qkv[j * 3 * d + 2 * d + hoff..j * 3 * d + 2 * d + hoff + dh];
                    for (c, &v) in ctx.iter_mut().zip(vrow) {
                        *c += w * v;
                    }
                }
                head_w.push(weights);
            }
        }
        let mut h1 = vec![0.0; n * d];
        for p in 0..n {
            let mut proj = vec![0.0; d];
            matvec(
                params.seg(&li.out_w),
                d,
                d,
                &att[p * d..(p + 1) * d],
                &mut proj,
            );
            let ob = params.seg(&li.out_b);
            for i in 0..d {
                h1[p * d + i] = x_in[p * d + i] + proj[i] + ob[i];
            }
        }
        let ln2 = layer_norm(&h1, n, d, params.seg(&li.ln2_g), params.seg(&li.ln2_b));
        let mut z = vec![0.0; n * d_ff];
        let mut a = vec![0.0; n * d_ff];
        let mut out = vec![0.0; n * d];
        for p in 0..n {
            let zrow = &mut z[p * d_ff..(p + 1) * d_ff];
            matvec(
                params.seg(&li.ff1_w),
                d_ff,
                d,
                &ln2.out[p * d..(p + 1) * d],
                zrow,
            );
            for (zi, &b) in zrow.iter_mut().zip(params.seg(&li.ff1_b)) {
                *zi += b;
            }
            for i in 0..d_ff {
                a[p * d_ff + i] = gelu(z[p * d_ff + i]);
            }
            let mut f = vec![0.0; d];
            matvec(
                params.seg(&li.ff2_w),
                d,
                d_ff,
                &a[p * d_ff..(p + 1) * d_ff],
                &mut f,
            );
            let fb = params.seg(&li.ff2_b);
            for i in 0..d {
                out[p * d + i] = h1[p * d + i] + f[i] + fb[i];
            }
        }
        layers.push(LayerCache {
            ln1,
            qkv,
            attw,
            att,
            ln2,
            z,
            a,
        });
        x = out;
    }
    let lnf = layer_norm(
        &x,
        n,
        d,
        params.seg(&params.index.lnf_g),
        params.seg(&params.index.lnf_b),
    );

    // Action head at state positions.
    let mut preds = Vec::new();
    let mut state_positions = Vec::new();
    for (i, tok) in seq.tokens.iter().enumerate() {
        if tok.payload.kind() == TokenKind::State {
            let y = &lnf.out[i * d..(i + 1) * d];
            let mut pre = [0.0f64; 3];
            matvec(params.seg(&params.index.head_w), 3, d, y, &mut pre);
            for (p, &b) in pre.iter_mut().zip(params.seg(&params.index.head_b)) {
                *p += b;
            }
            preds.push([pre[0].tanh(), pre[1].tanh(), pre[2].tanh()]);
            state_positions.push(i);
        }
    }

    Ok(Forward {
        preds,
        state_positions,
        cache: ForwardCache {
            enc,
            scalars,
            actions,
            layers,
            lnf,
        },
    })
}

/// Mean squared error over prediction/target triples.
pub fn mse_loss(preds: &[[f64; 3]], targets: &[[f64; 3]]) -> Result<f64, ModelError> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(ModelError::TargetMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    Ok(squared_error_sum(preds, targets) / (3.0 * preds.len() as f64))
}

/// Plain sum of squared errors (batch aggregation divides once, globally).
pub fn squared_error_sum(preds: &[[f64; 3]], targets: &[[f64; 3]]) -> f64 {
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (0..3).map(|c| (p[c] - t[c]) * (p[c] - t[c])).sum::<f64>())
        .sum()
}

/// d(mse)/d(pred) when the loss divides by `3 * denom_positions`.
pub fn mse_grads(preds: &[[f64; 3]], targets: &[[f64; 3]], denom_positions: usize) -> Vec<[f64; 3]> {
    let s = 2.0 / (3.0 * denom_positions as f64);
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| [s * (p[0] - t[0]), s * (p[1] - t[1]), s * (p[2] - t[2])])
        .collect()
}

/// Normalized action triples of every complete step, in step order: the
/// regression targets aligned with predictions at state tokens.
pub fn action_targets(seq: &TokenSequence, params: &ModelParams) -> Vec<[f64; 3]> {
    seq.tokens
        .iter()
        .filter_map(|t| match &t.payload {
            TokenPayload::Action(raw) => Some(normalize_action(
                &crate::env::ActionCommand::from_array(*raw),
                params.norm.dist,
            )),
            _ => None,
        })
        .collect()
}

/// Accumulates dL/dtheta for one sequence given dL/dprediction, returning a
/// gradient buffer aligned with `params.data`.
pub fn backward(
    params: &ModelParams,
    seq: &TokenSequence,
    fwd: &Forward,
    dpreds: &[[f64; 3]],
) -> Vec<f64> {
    assert_eq!(dpreds.len(), fwd.preds.len());
    let cfg = &params.config;
    let d = cfg.d_model;
    let d_ff = cfg.d_ff();
    let nh = cfg.n_heads;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let n = seq.len();
    let cache = &fwd.cache;
    let mut grads = params.zero_grad_buffer();

    // Head and tanh.
    let mut dy = vec![0.0; n * d];
    for (k, (&pos, dp)) in fwd.state_positions.iter().zip(dpreds).enumerate() {
        let pred = fwd.preds[k];
        let dpre: Vec<f64> = (0..3).map(|c| dp[c] * (1.0 - pred[c] * pred[c])).collect();
        let y = &cache.lnf.out[pos * d..(pos + 1) * d];
        outer_acc(&mut grads[params.index.head_w.clone()], 3, d, &dpre, y);
        for (g, &v) in grads[params.index.head_b.clone()].iter_mut().zip(&dpre) {
            *g += v;
        }
        matvec_t_acc(
            params.seg(&params.index.head_w),
            3,
            d,
            &dpre,
            &mut dy[pos * d..(pos + 1) * d],
        );
    }

    // Final LayerNorm. Gain and bias ranges are adjacent, so split the
    // gradient buffer at the bias start to borrow both at once.
    let mut dx = vec![0.0; n * d];
    for p in 0..n {
        let bseg = params.index.lnf_b.clone();
        let (left, right) = grads.split_at_mut(bseg.start);
        layer_norm_backward_pos(
            &dy[p * d..(p + 1) * d],
            &cache.lnf.xhat[p * d..(p + 1) * d],
            cache.lnf.inv_std[p],
            params.seg(&params.index.lnf_g),
            &mut left[params.index.lnf_g.clone()],
            &mut right[..bseg.len()],
            &mut dx[p * d..(p + 1) * d],
        );
    }

    // Layers in reverse.
    for (li, lc) in params.index.layers.iter().zip(&cache.layers).rev() {
        let dout = dx;
        // Feed-forward branch; the residual carries dout into dh1 too.
        let mut dh1 = dout.clone();
        let mut dn2 = vec![0.0; n * d];
        for p in 0..n {
            let df = &dout[p * d..(p + 1) * d];
            let a = &lc.a[p * d_ff..(p + 1) * d_ff];
            outer_acc(&mut grads[li.ff2_w.clone()], d, d_ff, df, a);
            for (g, &v) in grads[li.ff2_b.clone()].iter_mut().zip(df) {
                *g += v;
            }
            let mut da = vec![0.0; d_ff];
            matvec_t_acc(params.seg(&li.ff2_w), d, d_ff, df, &mut da);
            let z = &lc.z[p * d_ff..(p + 1) * d_ff];
            let dz: Vec<f64> = da.iter().zip(z).map(|(&g, &zv)| g * gelu_grad(zv)).collect();
            let n2 = &lc.ln2.out[p * d..(p + 1) * d];
            outer_acc(&mut grads[li.ff1_w.clone()], d_ff, d, &dz, n2);
            for (g, &v) in grads[li.ff1_b.clone()].iter_mut().zip(&dz) {
                *g += v;
            }
            matvec_t_acc(
                params.seg(&li.ff1_w),
                d_ff,
                d,
                &dz,
                &mut dn2[p * d..(p + 1) * d],
            );
        }
        for p in 0..n {
            let (left, right) = grads.split_at_mut(li.ln2_b.start);
            layer_norm_backward_pos(
                &dn2[p * d..(p + 1) * d],
                &lc.ln2.xhat[p * d..(p + 1) * d],
                lc.ln2.inv_std[p],
                params.seg(&li.ln2_g),
                &mut left[li.ln2_g.clone()],
                &mut right[..li.ln2_b.len()],
                &mut dh1[p * d..(p + 1) * d],
            );
        }

        // Attention branch; the residual carries dh1 into dx_in too.
        let mut dx_in = dh1.clone();
        let mut datt = vec![0.0; n * d];
        for p in 0..n {
            let dproj = &dh1[p * d..(p + 1) * d];
            let att = &lc.att[p * d..(p + 1) * d];
            outer_acc(&mut grads[li.out_w.clone()], d, d, dproj, att);
            for (g, &v) in grads[li.out_b.clone()].iter_mut().zip(dproj) {
                *g += v;
            }
            matvec_t_acc(
                params.seg(&li.out_w),
                d,
                d,
                dproj,
                &mut datt[p * d..(p + 1) * d],
            );
        }
        let mut dqkv = vec![0.0; n * 3 * d];
        for h in 0..nh {
            let hoff = h * dh;
            for q in 0..n {
                let weights = &lc.attw[h][q];
                let dctx = datt[q * d + hoff..q * d + hoff + dh].to_vec();
                let mut dalpha = vec![0.0; q + 1];
                for (j, &w) in weights.iter().enumerate() {
                    let vrow = &lc.qkv[j * 3 * d + 2 * d + hoff..j * 3 * d + 2 * d + hoff + dh];
                    dalpha[j] = dot(&dctx, vrow);
                    let dv = &mut dqkv[j * 3 * d + 2 * d + hoff..j * 3 * d + 2 * d + hoff + dh];
                    for (dvi, &ci) in dv.iter_mut().zip(&dctx) {
                        *dvi += w * ci;
                    }
                }
                let inner: f64 = weights.iter().zip(&dalpha).map(|(w, g)| w * g).sum();
                let qrow = lc.qkv[q * 3 * d + hoff..q * 3 * d + hoff + dh].to_vec();
                for (j, &w) in weights.iter().enumerate() {
                    let de = w * (dalpha[j] - inner);
                    let krow = lc.qkv[j * 3 * d + d + hoff..j * 3 * d + d + hoff + dh].to_vec();
                    let dq = &mut dqkv[q * 3 * d + hoff..q * 3 * d + hoff + dh];
                    for (dqi, &ki) in dq.iter_mut().zip(&krow) {
                        *dqi += de * ki * scale;
                    }
                    let dk = &mut dqkv[j * 3 * d + d + hoff..j * 3 * d + d + hoff + dh];
                    for (dki, &qi) in dk.iter_mut().zip(&qrow) {
                        *dki += de * qi * scale;
                    }
                }
            }
        }
        let mut dn1 = vec![0.0; n * d];
        for p in 0..n {
            let drow = &dqkv[p * 3 * d..(p + 1) * 3 * d];
            let n1 = &lc.ln1.out[p * d..(p + 1) * d];
            outer_acc(&mut grads[li.qkv_w.clone()], 3 * d, d, drow, n1);
            for (g, &v) in grads[li.qkv_b.clone()].iter_mut().zip(drow) {
                *g += v;
            }
            matvec_t_acc(
                params.seg(&li.qkv_w),
                3 * d,
                d,
                drow,
                &mut dn1[p * d..(p + 1) * d],
            );
        }
        for p in 0..n {
            let (left, right) = grads.split_at_mut(li.ln1_b.start);
            layer_norm_backward_pos(
                &dn1[p * d..(p + 1) * d],
                &lc.ln1.xhat[p * d..(p + 1) * d],
                lc.ln1.inv_std[p],
                params.seg(&li.ln1_g),
                &mut left[li.ln1_g.clone()],
                &mut right[..li.ln1_b.len()],
                &mut dx_in[p * d..(p + 1) * d],
            );
        }
        dx = dx_in;
    }

    // Token embeddings.
    for (i, tok) in seq.tokens.iter().enumerate() {
        let dtok = dx[i * d..(i + 1) * d].to_vec();
        match &tok.payload {
            TokenPayload::ReturnToGo(_) => {
                let u = cache.scalars[i];
                for (g, &v) in grads[params.index.rtg_w.clone()].iter_mut().zip(&dtok) {
                    *g += v * u;
                }
                for (g, &v) in grads[params.index.rtg_b.clone()].iter_mut().zip(&dtok) {
                    *g += v;
                }
            }
            TokenPayload::CostToGo(_) => {
                let u = cache.scalars[i];
                for (g, &v) in grads[params.index.ctg_w.clone()].iter_mut().zip(&dtok) {
                    *g += v * u;
                }
                for (g, &v) in grads[params.index.ctg_b.clone()].iter_mut().zip(&dtok) {
                    *g += v;
                }
            }
            TokenPayload::State(_) => {
                let ec = cache.enc[i].as_ref().expect("state token has a cache");
                encoder_backward(params, ec, &dtok, &mut grads);
            }
            TokenPayload::Action(_) => {
                let an = cache.actions[i].expect("action token has a cache");
                outer_acc(&mut grads[params.index.act_w.clone()], d, 3, &dtok, &an);
                for (g, &v) in grads[params.index.act_b.clone()].iter_mut().zip(&dtok) {
                    *g += v;
                }
            }
        }
        let trow = params.index.type_row(tok.payload.kind(), d);
        for (g, &v) in grads[trow].iter_mut().zip(&dtok) {
            *g += v;
        }
        let krow = params.index.time_row(tok.timestep, d);
        for (g, &v) in grads[krow].iter_mut().zip(&dtok) {
            *g += v;
        }
    }

    grads
}

#[cfg(test)]
pub(crate) mod test_support {
    use crate::dataset::{StepRecord, Trajectory, UserSnapshot};

    /// A deterministic synthetic step with `n_users` users.
    pub fn demo_step(t: usize, n_users: usize, salt: f64) -> StepRecord {
        let users = (0..n_users)
            .map(|i| UserSnapshot {
                id: i as u64,
                pos: [
                    40.0 * (i as f64 + salt).sin() * 5.0,
                    60.0 * (i as f64 - salt).cos(),
                ],
                aoi: 1 + ((i + t) % 7) as u32,
            })
            .collect();
        StepRecord {
            t,
            uav: [30.0 * salt.sin(), -20.0 * salt.cos()],
            users,
            action: [
                45.0 + 40.0 * salt.sin(),
                (1.0 + salt).rem_euclid(std::f64::consts::TAU),
                (salt * 3.0).sin(),
            ],
            reward: -2.0 - salt.fract().abs(),
            cost: 420.0 + 10.0 * salt.cos(),
            rtg: -20.0 + salt,
            ctg: 8_000.0 - 100.0 * salt,
        }
    }

    pub fn demo_trajectory(steps: usize, users_per_step: usize) -> Trajectory {
        Trajectory {
            env_tag: 1,
            seed: 0,
            steps: (1..=steps)
                .map(|t| demo_step(t, users_per_step, t as f64 * 0.7))
                .collect(),
        }
    }
}
