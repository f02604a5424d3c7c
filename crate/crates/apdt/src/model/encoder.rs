//! State-token encoders: the set-attention aggregation over users, and the
//! zero-padded flat encoder kept as an ablation.

use crate::dataset::StateTokens;

use super::linalg::{dot, matvec, matvec_t_acc, outer_acc, softmax_in_place};
use super::{EncoderIndex, ModelError, ModelParams};

/// Intermediates kept for the backward pass of one state token.
#[derive(Debug, Clone)]
pub enum EncCache {
    Attention {
        q_norm: [f64; 2],
        /// Query in the d_k attention space (absent when no users).
        q_tilde: Vec<f64>,
        q_emb: Vec<f64>,
        /// Per-user normalized (x, y, aoi) features.
        feats: Vec<[f64; 3]>,
        keys: Vec<Vec<f64>>,
        vals: Vec<Vec<f64>>,
        alphas: Vec<f64>,
        g: Vec<f64>,
        concat: Vec<f64>,
    },
    Padded {
        feat: Vec<f64>,
    },
}

/// Maps a coordinate in [-half, half] to [0, 1]. The attention score is a
/// pure bilinear form with no bias, so signed inputs would force the learned
/// AoI weighting to flip sign across the area; unit-square coordinates keep
/// the query single-signed and leave position differences unchanged up to
/// scale.
fn unit_pos(v: f64, half: f64) -> f64 {
    (v / half + 1.0) / 2.0
}

fn user_feature(params: &ModelParams, x: f64, y: f64, aoi: f64) -> [f64; 3] {
    [
        unit_pos(x, params.norm.pos_x),
        unit_pos(y, params.norm.pos_y),
        aoi / params.norm.aoi,
    ]
}

/// Encodes one state token into `out` (length d_model).
pub fn encoder_forward(
    params: &ModelParams,
    st: &StateTokens,
    out: &mut [f64],
) -> Result<EncCache, ModelError> {
    let d = params.config.d_model;
    let dk = params.config.d_k;
    debug_assert_eq!(out.len(), d);
    let q_norm = [
        unit_pos(st.uav[0], params.norm.pos_x),
        unit_pos(st.uav[1], params.norm.pos_y),
    ];

    match &params.index.encoder {
        EncoderIndex::Attention {
            wq,
            wk,
            wv,
            no_user,
            uav_w,
            uav_b,
            out_w,
            out_b,
        } => {
            let mut q_emb = vec![0.0; dk];
            matvec(params.seg(uav_w), dk, 2, &q_norm, &mut q_emb);
            for (e, b) in q_emb.iter_mut().zip(params.seg(uav_b)) {
                *e += b;
            }

            let (q_tilde, feats, keys, vals, alphas, g);
            if st.users.is_empty() {
                q_tilde = Vec::new();
                feats = Vec::new();
                keys = Vec::new();
                vals = Vec::new();
                alphas = Vec::new();
                g = params.seg(no_user).to_vec();
            } else {
                let mut qt = vec![0.0; dk];
                matvec(params.seg(wq), dk, 2, &q_norm, &mut qt);
                let fs: Vec<[f64; 3]> = st
                    .users
                    .iter()
                    .map(|u| user_feature(params, u.pos[0], u.pos[1], u.aoi))
                    .collect();
                let ks: Vec<Vec<f64>> = fs
                    .iter()
                    .map(|f| {
                        let mut k = vec![0.0; dk];
                        matvec(params.seg(wk), dk, 3, f, &mut k);
                        k
                    })
                    .collect();
                let vs: Vec<Vec<f64>> = fs
                    .iter()
                    .map(|f| {
                        let mut v = vec![0.0; dk];
                        matvec(params.seg(wv), dk, 3, f, &mut v);
                        v
                    })
                    .collect();
                let scale = 1.0 / (dk as f64).sqrt();
                let mut al: Vec<f64> = ks.iter().map(|k| dot(&qt, k) * scale).collect();
                softmax_in_place(&mut al);
                let mut gv = vec![0.0; dk];
                for (a, v) in al.iter().zip(&vs) {
                    for (gi, vi) in gv.iter_mut().zip(v) {
                        *gi += a * vi;
                    }
                }
                q_tilde = qt;
                feats = fs;
                keys = ks;
                vals = vs;
                alphas = al;
                g = gv;
            }

            let mut concat = Vec::with_capacity(2 * dk);
            concat.extend_from_slice(&g);
            concat.extend_from_slice(&q_emb);
            matvec(params.seg(out_w), d, 2 * dk, &concat, out);
            for (o, b) in out.iter_mut().zip(params.seg(out_b)) {
                *o += b;
            }
            Ok(EncCache::Attention {
                q_norm,
                q_tilde,
                q_emb,
                feats,
                keys,
                vals,
                alphas,
                g,
                concat,
            })
        }
        EncoderIndex::Padded { w, b } => {
            let u_max = match params.config.state_encoder {
                super::StateEncoderKind::Padded { u_max } => u_max,
                _ => unreachable!("index kind follows config"),
            };
            if st.users.len() > u_max {
                return Err(ModelError::TooManyUsers {
                    got: st.users.len(),
                    max: u_max,
                });
            }
            // Fixed slots by ascending user id; absent slots stay zero.
            let mut order: Vec<usize> = (0..st.users.len()).collect();
            order.sort_by_key(|&i| st.users[i].id);
            let mut feat = vec![0.0; 2 + 3 * u_max];
            feat[0] = q_norm[0];
            feat[1] = q_norm[1];
            for (slot, &i) in order.iter().enumerate() {
                let u = &st.users[i];
                let f = user_feature(params, u.pos[0], u.pos[1], u.aoi);
                feat[2 + 3 * slot..2 + 3 * slot + 3].copy_from_slice(&f);
            }
            matvec(params.seg(w), d, feat.len(), &feat, out);
            for (o, bb) in out.iter_mut().zip(params.seg(b)) {
                *o += bb;
            }
            Ok(EncCache::Padded { feat })
        }
    }
}

/// Accumulates parameter gradients for one state token given the gradient at
/// its embedding.
pub fn encoder_backward(params: &ModelParams, cache: &EncCache, dout: &[f64], grads: &mut [f64]) {
    let d = params.config.d_model;
    let dk = params.config.d_k;
    match (&params.index.encoder, cache) {
        (
            EncoderIndex::Attention {
                wq,
                wk,
                wv,
                no_user,
                uav_w,
                uav_b,
                out_w,
                out_b,
                ..
            },
            EncCache::Attention {
                q_norm,
                q_tilde,
                q_emb: _,
                feats,
                keys,
                vals,
                alphas,
                g: _,
                concat,
            },
        ) => {
            outer_acc(&mut grads[out_w.clone()], d, 2 * dk, dout, concat);
            for (gb, &go) in grads[out_b.clone()].iter_mut().zip(dout) {
                *gb += go;
            }
            let mut dconcat = vec![0.0; 2 * dk];
            matvec_t_acc(params.seg(out_w), d, 2 * dk, dout, &mut dconcat);
            let (dg, dq_emb) = dconcat.split_at(dk);

            outer_acc(&mut grads[uav_w.clone()], dk, 2, dq_emb, q_norm);
            for (gb, &go) in grads[uav_b.clone()].iter_mut().zip(dq_emb) {
                *gb += go;
            }

            if feats.is_empty() {
                for (gn, &go) in grads[no_user.clone()].iter_mut().zip(dg) {
                    *gn += go;
                }
                return;
            }

            // Values: g = sum_u alpha_u v_u.
            let mut dalpha = vec![0.0; feats.len()];
            for (u, f) in feats.iter().enumerate() {
                let dv: Vec<f64> = dg.iter().map(|&x| alphas[u] * x).collect();
                outer_acc(&mut grads[wv.clone()], dk, 3, &dv, f);
                dalpha[u] = dot(dg, &vals[u]);
            }
            // Softmax over users.
            let inner: f64 = alphas.iter().zip(&dalpha).map(|(a, da)| a * da).sum();
            let de: Vec<f64> = alphas
                .iter()
                .zip(&dalpha)
                .map(|(a, da)| a * (da - inner))
                .collect();
            // Scores e_u = q~ . k_u / sqrt(dk).
            let scale = 1.0 / (dk as f64).sqrt();
            let mut dq_tilde = vec![0.0; dk];
            for (u, f) in feats.iter().enumerate() {
                for (dq, &kv) in dq_tilde.iter_mut().zip(&keys[u]) {
                    *dq += de[u] * kv * scale;
                }
                let dktok: Vec<f64> = q_tilde.iter().map(|&q| de[u] * q * scale).collect();
                outer_acc(&mut grads[wk.clone()], dk, 3, &dktok, f);
            }
            outer_acc(&mut grads[wq.clone()], dk, 2, &dq_tilde, q_norm);
        }
        (EncoderIndex::Padded { w, b }, EncCache::Padded { feat }) => {
            outer_acc(&mut grads[w.clone()], d, feat.len(), dout, feat);
            for (gb, &go) in grads[b.clone()].iter_mut().zip(dout) {
                *gb += go;
            }
        }
        _ => unreachable!("cache kind follows encoder kind"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::UserFeature;
    use crate::env::EnvConfig;
    use crate::model::{ModelConfig, Normalizers, StateEncoderKind};

    fn model(kind: StateEncoderKind) -> ModelParams {
        let cfg = ModelConfig {
            d_model: 8,
            d_k: 4,
            n_layers: 1,
            n_heads: 2,
            context_window: 4,
            prompt_len: 2,
            state_encoder: kind,
        };
        ModelParams::new(cfg, Normalizers::from_env(&EnvConfig::default()), 3).unwrap()
    }

    fn users(n: usize) -> Vec<UserFeature> {
        (0..n)
            .map(|i| UserFeature {
                id: i as u64,
                pos: [10.0 * i as f64 - 40.0, 25.0 * i as f64],
                aoi: 1.0 + i as f64,
            })
            .collect()
    }

    #[test]
    fn attention_is_order_free_and_padded_is_not() {
        let m = model(StateEncoderKind::Attention);
        let st = StateTokens {
            uav: [50.0, -20.0],
            users: users(5),
        };
        let mut rev = st.clone();
        rev.users.reverse();
        let mut a = vec![0.0; 8];
        let mut b = vec![0.0; 8];
        encoder_forward(&m, &st, &mut a).unwrap();
        encoder_forward(&m, &rev, &mut b).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }

        // The padded encoder keys slots by id, so reversing the list is also
        // invariant; swapping two users' ids moves their features between
        // slots and must change the output.
        let mp = model(StateEncoderKind::Padded { u_max: 6 });
        let mut swapped = st.clone();
        swapped.users[0].id = 1;
        swapped.users[1].id = 0;
        let mut pa = vec![0.0; 8];
        let mut pb = vec![0.0; 8];
        encoder_forward(&mp, &st, &mut pa).unwrap();
        encoder_forward(&mp, &swapped, &mut pb).unwrap();
        let diff: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "slot assignment must be id-sensitive");
    }

    #[test]
    fn attention_handles_any_population_size() {
        let m = model(StateEncoderKind::Attention);
        for n in [0usize, 1, 2, 17, 60] {
            let st = StateTokens {
                uav: [0.0, 0.0],
                users: users(n),
            };
            let mut out = vec![0.0; 8];
            encoder_forward(&m, &st, &mut out).unwrap();
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn padded_rejects_overflow_and_pads_with_zeros() {
        let m = model(StateEncoderKind::Padded { u_max: 4 });
        let st = StateTokens {
            uav: [0.0, 0.0],
            users: users(5),
        };
        let mut out = vec![0.0; 8];
        assert!(matches!(
            encoder_forward(&m, &st, &mut out),
            Err(ModelError::TooManyUsers { got: 5, max: 4 })
        ));

        let st = StateTokens {
            uav: [100.0, 50.0],
            users: users(2),
        };
        let cache = encoder_forward(&m, &st, &mut out).unwrap();
        if let EncCache::Padded { feat } = cache {
            assert_eq!(feat.len(), 2 + 3 * 4);
            assert!(feat[8..].iter().all(|&v| v == 0.0));
            assert!((feat[0] - 0.7).abs() < 1e-12);
        } else {
            panic!("expected padded cache");
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let m = model(StateEncoderKind::Attention);
        let st = StateTokens {
            uav: [10.0, 10.0],
            users: users(7),
        };
        let mut out = vec![0.0; 8];
        let cache = encoder_forward(&m, &st, &mut out).unwrap();
        if let EncCache::Attention { alphas, .. } = cache {
            assert_eq!(alphas.len(), 7);
            assert!((alphas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(alphas.iter().all(|&a| a > 0.0));
        } else {
            panic!("expected attention cache");
        }
    }

    #[test]
    fn empty_set_uses_learned_vector() {
        let mut m = model(StateEncoderKind::Attention);
        if let EncoderIndex::Attention { no_user, .. } = &m.index.encoder {
            let r = no_user.clone();
            for (i, v) in m.data[r].iter_mut().enumerate() {
                *v = i as f64 + 1.0;
            }
        }
        let st = StateTokens {
            uav: [0.0, 0.0],
            users: vec![],
        };
        let mut with_vec = vec![0.0; 8];
        encoder_forward(&m, &st, &mut with_vec).unwrap();

        if let EncoderIndex::Attention { no_user, .. } = &m.index.encoder {
            let r = no_user.clone();
            for v in m.data[r].iter_mut() {
                *v = 0.0;
            }
        }
        let mut without = vec![0.0; 8];
        encoder_forward(&m, &st, &mut without).unwrap();
        let diff: f64 = with_vec
            .iter()
            .zip(&without)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.0, "the no-user vector must reach the output");
    }
}
