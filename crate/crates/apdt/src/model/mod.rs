//! The sequence model: a causal transformer over (return, cost, state,
//! action) token groups whose state tokens pass through a set-attention
//! encoder, predicting the next action at every state position.

mod encoder;
mod gradcheck;
mod linalg;
mod net;

#[cfg(test)]
pub(crate) use net::test_support;

pub use encoder::{encoder_backward, encoder_forward, EncCache};
pub use gradcheck::{conditioned_fixture, finite_diff_check, GradCheckReport};
pub use net::{
    action_targets, backward, forward, mse_grads, mse_loss, squared_error_sum, Forward,
};

use std::ops::Range;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TokenKind;
use crate::env::EnvConfig;
use crate::rng::EpisodeRng;

/// Weight std for Gaussian-initialized matrices.
pub const INIT_STD: f64 = 0.02;

/// Magnitude seeded into the attention encoder's first query/key rows.
///
/// The user-score path is a pure bilinear form with no bias, so at INIT_STD
/// scale every score is ~1e-3, the softmax starts uniform, and the gradients
/// that could sharpen it are products of those same near-zero weights. One
/// query/key row is therefore started as a positive AoI selector; positions
/// are normalized to the unit square, which keeps the query term
/// single-signed across the whole area.
pub const SELECTOR_WARM_START: f64 = 10.0;
/// LayerNorm variance floor.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of {got} tokens exceeds the {max}-token context")]
    SequenceTooLong { got: usize, max: usize },
    #[error("token {index} breaks the return/cost/state/action cycle")]
    MalformedOrder { index: usize },
    #[error("prompt of {got} steps exceeds the configured {max}")]
    PromptTooLong { got: usize, max: usize },
    #[error("state token holds {got} users, over the padded capacity {max}")]
    TooManyUsers { got: usize, max: usize },
    #[error("{preds} predictions but {targets} targets")]
    TargetMismatch { preds: usize, targets: usize },
}

/// How state tokens are turned into vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateEncoderKind {
    /// Query-key-value aggregation over the user set; order-free and
    /// population-size-free.
    Attention,
    /// Flat zero-padded user list (ablation); fails beyond `u_max` users.
    Padded { u_max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Width of the state-encoder attention space.
    pub d_k: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Maximum main-trajectory steps visible at once.
    pub context_window: usize,
    /// Prompt length K in steps.
    pub prompt_len: usize,
    pub state_encoder: StateEncoderKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_k: 32,
            n_layers: 2,
            n_heads: 2,
            context_window: 20,
            prompt_len: 5,
            state_encoder: StateEncoderKind::Attention,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.d_k == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(ModelError::InvalidConfig(
                "d_model, d_k, n_layers and n_heads must all be >= 1".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model = {} not divisible by n_heads = {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_window == 0 {
            return Err(ModelError::InvalidConfig("context_window must be >= 1".into()));
        }
        if let StateEncoderKind::Padded { u_max } = self.state_encoder {
            if u_max == 0 {
                return Err(ModelError::InvalidConfig("u_max must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Token capacity: four tokens per step over prompt plus window.
    pub fn max_tokens(&self) -> usize {
        4 * (self.prompt_len + self.context_window)
    }

    /// Rows in the timestep embedding table.
    pub fn time_rows(&self) -> usize {
        self.prompt_len + self.context_window
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Input/output scales; fixed at model creation and stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizers {
    pub pos_x: f64,
    pub pos_y: f64,
    pub aoi: f64,
    pub rtg: f64,
    pub ctg: f64,
    /// Flight-distance scale for action normalization.
    pub dist: f64,
}

impl Normalizers {
    /// Scales implied by an environment: positions by the half-widths, AoI by
    /// a quarter horizon, return by the horizon, cost by the energy budget,
    /// distance by the per-slot cap.
    pub fn from_env(cfg: &EnvConfig) -> Self {
        Self {
            pos_x: cfg.x_max,
            pos_y: cfg.y_max,
            aoi: (cfg.horizon as f64 / 4.0).max(1.0),
            rtg: cfg.horizon as f64,
            ctg: cfg.energy_budget,
            dist: cfg.max_flight_dist,
        }
    }
}

/// Named sub-ranges of the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamIndex {
    pub encoder: EncoderIndex,
    pub rtg_w: Range<usize>,
    pub rtg_b: Range<usize>,
    pub ctg_w: Range<usize>,
    pub ctg_b: Range<usize>,
    pub act_w: Range<usize>,
    pub act_b: Range<usize>,
    pub type_emb: Range<usize>,
    pub time_emb: Range<usize>,
    pub layers: Vec<LayerIndex>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub enum EncoderIndex {
    Attention {
        wq: Range<usize>,
        wk: Range<usize>,
        wv: Range<usize>,
        no_user: Range<usize>,
        uav_w: Range<usize>,
        uav_b: Range<usize>,
        out_w: Range<usize>,
        out_b: Range<usize>,
    },
    Padded {
        w: Range<usize>,
        b: Range<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct LayerIndex {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub qkv_w: Range<usize>,
    pub qkv_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub ff1_w: Range<usize>,
    pub ff1_b: Range<usize>,
    pub ff2_w: Range<usize>,
    pub ff2_b: Range<usize>,
}

/// What a parameter range holds, for initialization.
#[derive(Clone, Copy, PartialEq)]
enum SegKind {
    Weight,
    Zero,
    One,
}

struct Cursor {
    at: usize,
    segs: Vec<(Range<usize>, SegKind)>,
}

impl Cursor {
    fn new() -> Self {
        Self {
            at: 0,
            segs: Vec::new(),
        }
    }

    fn take(&mut self, n: usize, kind: SegKind) -> Range<usize> {
        let r = self.at..self.at + n;
        self.at += n;
        self.segs.push((r.clone(), kind));
        r
    }
}

impl ParamIndex {
    fn build(cfg: &ModelConfig) -> (Self, Vec<(Range<usize>, SegKind)>) {
        let d = cfg.d_model;
        let dk = cfg.d_k;
        let mut c = Cursor::new();
        let encoder = match cfg.state_encoder {
            StateEncoderKind::Attention => EncoderIndex::Attention {
                wq: c.take(dk * 2, SegKind::Weight),
                wk: c.take(dk * 3, SegKind::Weight),
                wv: c.take(dk * 3, SegKind::Weight),
                no_user: c.take(dk, SegKind::Zero),
                uav_w: c.take(dk * 2, SegKind::Weight),
                uav_b: c.take(dk, SegKind::Zero),
                out_w: c.take(d * 2 * dk, SegKind::Weight),
                out_b: c.take(d, SegKind::Zero),
            },
            StateEncoderKind::Padded { u_max } => EncoderIndex::Padded {
                w: c.take(d * (2 + 3 * u_max), SegKind::Weight),
                b: c.take(d, SegKind::Zero),
            },
        };
        let rtg_w = c.take(d, SegKind::Weight);
        let rtg_b = c.take(d, SegKind::Zero);
        let ctg_w = c.take(d, SegKind::Weight);
        let ctg_b = c.take(d, SegKind::Zero);
        let act_w = c.take(d * 3, SegKind::Weight);
        let act_b = c.take(d, SegKind::Zero);
        let type_emb = c.take(4 * d, SegKind::Zero);
        let time_emb = c.take(cfg.time_rows() * d, SegKind::Zero);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerIndex {
                ln1_g: c.take(d, SegKind::One),
                ln1_b: c.take(d, SegKind::Zero),
                qkv_w: c.take(3 * d * d, SegKind::Weight),
                qkv_b: c.take(3 * d, SegKind::Zero),
                out_w: c.take(d * d, SegKind::Weight),
                out_b: c.take(d, SegKind::Zero),
                ln2_g: c.take(d, SegKind::One),
                ln2_b: c.take(d, SegKind::Zero),
                ff1_w: c.take(cfg.d_ff() * d, SegKind::Weight),
                ff1_b: c.take(cfg.d_ff(), SegKind::Zero),
                ff2_w: c.take(d * cfg.d_ff(), SegKind::Weight),
                ff2_b: c.take(d, SegKind::Zero),
            })
            .collect();
        let lnf_g = c.take(d, SegKind::One);
        let lnf_b = c.take(d, SegKind::Zero);
        let head_w = c.take(3 * d, SegKind::Weight);
        let head_b = c.take(3, SegKind::Zero);
        let total = c.at;
        (
            Self {
                encoder,
                rtg_w,
                rtg_b,
                ctg_w,
                ctg_b,
                act_w,
                act_b,
                type_emb,
                time_emb,
                layers,
                lnf_g,
                lnf_b,
                head_w,
                head_b,
                total,
            },
            c.segs,
        )
    }

    /// Offset of a token kind's row in the type-embedding table.
    pub fn type_row(&self, kind: TokenKind, d: usize) -> Range<usize> {
        let start = self.type_emb.start + kind.cycle_index() * d;
        start..start + d
    }

    pub fn time_row(&self, timestep: usize, d: usize) -> Range<usize> {
        let start = self.time_emb.start + timestep * d;
        start..start + d
    }
}

/// A model: config, input scales and the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub norm: Normalizers,
    pub data: Vec<f64>,
    pub index: ParamIndex,
}

impl ModelParams {
    /// Initializes weights from N(0, 0.02), biases and embeddings at zero,
    /// LayerNorm gains at one. The draw order is the layout order, so a seed
    /// pins every parameter.
    pub fn new(config: ModelConfig, norm: Normalizers, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (index, segs) = ParamIndex::build(&config);
        let mut data = vec![0.0f64; index.total];
        let normal = Normal::new(0.0, INIT_STD).expect("const std");
        let mut rng = EpisodeRng::seed_from_u64(seed);
        for (range, kind) in segs {
            match kind {
                SegKind::Weight => {
                    for v in &mut data[range] {
                        *v = normal.sample(&mut rng);
                    }
                }
                SegKind::One => {
                    for v in &mut data[range] {
                        *v = 1.0;
                    }
                }
                SegKind::Zero => {}
            }
        }
        if let EncoderIndex::Attention { wq, wk, .. } = &index.encoder {
            data[wq.start] = SELECTOR_WARM_START;
            data[wq.start + 1] = SELECTOR_WARM_START;
            data[wk.start] = 0.0;
            data[wk.start + 1] = 0.0;
            data[wk.start + 2] = SELECTOR_WARM_START;
        }
        Ok(Self {
            config,
            norm,
            data,
            index,
        })
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn seg(&self, r: &Range<usize>) -> &[f64] {
        &self.data[r.clone()]
    }

    pub fn zero_grad_buffer(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous_and_disjoint() {
        let cfg = ModelConfig::default();
        let (idx, segs) = ParamIndex::build(&cfg);
        let mut at = 0usize;
        for (r, _) in &segs {
            assert_eq!(r.start, at, "segments must tile the buffer in order");
            at = r.end;
        }
        assert_eq!(at, idx.total);
    }

    #[test]
    fn init_kinds_and_determinism() {
        let cfg = ModelConfig {
            d_model: 16,
            d_k: 8,
            n_layers: 2,
            n_heads: 2,
            context_window: 4,
            prompt_len: 2,
            state_encoder: StateEncoderKind::Attention,
        };
        let m1 = ModelParams::new(cfg.clone(), Normalizers::from_env(&EnvConfig::default()), 7)
            .unwrap();
        let m2 = ModelParams::new(cfg.clone(), Normalizers::from_env(&EnvConfig::default()), 7)
            .unwrap();
        assert_eq!(m1.data, m2.data);
        let m3 =
            ModelParams::new(cfg, Normalizers::from_env(&EnvConfig::default()), 8).unwrap();
        assert_ne!(m1.data, m3.data);

        // Biases zero, gains one, weights spread around zero.
        assert!(m1.seg(&m1.index.head_b).iter().all(|&v| v == 0.0));
        assert!(m1.seg(&m1.index.lnf_g).iter().all(|&v| v == 1.0));
        assert!(m1.seg(&m1.index.type_emb).iter().all(|&v| v == 0.0));
        let w = m1.seg(&m1.index.head_w);
        assert!(w.iter().any(|&v| v != 0.0));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.05);
        assert!(w.iter().all(|&v| v.abs() < 0.2));
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let bad = ModelConfig {
            d_model: 10,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            context_window: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            state_encoder: StateEncoderKind::Padded { u_max: 0 },
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn normalizer_scales_follow_env() {
        let cfg = EnvConfig::default();
        let n = Normalizers::from_env(&cfg);
        assert_eq!(n.pos_x, 250.0);
        assert_eq!(n.aoi, 25.0);
        assert_eq!(n.rtg, 100.0);
        assert_eq!(n.ctg, 90_000.0);
        assert_eq!(n.dist, 90.0);
        let tiny = EnvConfig {
            horizon: 2,
            ..cfg
        };
        assert_eq!(Normalizers::from_env(&tiny).aoi, 1.0);
    }
}
