//! Fuse-then-separate encoder: support text tokens and query image tokens
//! are concatenated into one sequence, refined by pre-LN self-attention
//! blocks, and split back. Padded support tokens are masked as attention
//! keys and re-zeroed after every block, so padding cannot leak.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::ProjectedFeatures;
use crate::error::{Error, Result};
use crate::nn::{self, Binding, ParamId, ParamStore};
use crate::scalar::{lit, mat_from_f64, mat_to_f64, Scalar};
use crate::tape::{Tape, Var};

/// Additive attention-mask value for excluded keys. Large enough that
/// softmax underflows to exactly zero, finite so no NaN can appear.
pub const KEY_MASK_NEG: f64 = -1e30;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "default_blocks")]
    pub num_blocks: usize,
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    /// Defaults to 4·model_dim when absent.
    #[serde(default)]
    pub ffn_dim: Option<usize>,
    #[serde(default)]
    pub dropout: f64,
}

fn default_blocks() -> usize {
    3
}
fn default_model_dim() -> usize {
    256
}
fn default_heads() -> usize {
    8
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_blocks: default_blocks(),
            model_dim: default_model_dim(),
            num_heads: default_heads(),
            ffn_dim: None,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn ffn_dim(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.model_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::data(format!(
                "model_dim {} must be divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.dropout != 0.0 {
            return Err(Error::data("dropout is not implemented; set it to 0"));
        }
        Ok(())
    }
}

pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

impl BlockParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        c: usize,
        ffn_dim: usize,
        prefix: &str,
    ) -> BlockParams {
        BlockParams {
            ln1_gain: store.register(&format!("{prefix}.ln1.gain"), nn::ones(1, c)),
            ln1_bias: store.register(&format!("{prefix}.ln1.bias"), nn::zeros(1, c)),
            wq: store.register(&format!("{prefix}.attn.wq"), nn::xavier_uniform(rng, c, c)),
            wk: store.register(&format!("{prefix}.attn.wk"), nn::xavier_uniform(rng, c, c)),
            wv: store.register(&format!("{prefix}.attn.wv"), nn::xavier_uniform(rng, c, c)),
            wo: store.register(&format!("{prefix}.attn.wo"), nn::xavier_uniform(rng, c, c)),
            ln2_gain: store.register(&format!("{prefix}.ln2.gain"), nn::ones(1, c)),
            ln2_bias: store.register(&format!("{prefix}.ln2.bias"), nn::zeros(1, c)),
            ffn_w1: store.register(&format!("{prefix}.ffn.w1"), nn::xavier_uniform(rng, c, ffn_dim)),
            ffn_b1: store.register(&format!("{prefix}.ffn.b1"), nn::zeros(1, ffn_dim)),
            ffn_w2: store.register(&format!("{prefix}.ffn.w2"), nn::xavier_uniform(rng, ffn_dim, c)),
            ffn_b2: store.register(&format!("{prefix}.ffn.b2"), nn::zeros(1, c)),
        }
    }
}

pub struct EncoderParams {
    pub blocks: Vec<BlockParams>,
    /// Learned type embedding added to support tokens; they carry no spatial
    /// position because there is no support image.
    pub type_support: ParamId,
}

impl EncoderParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: &EncoderConfig,
        prefix: &str,
    ) -> EncoderParams {
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                BlockParams::register(
                    store,
                    rng,
                    cfg.model_dim,
                    cfg.ffn_dim(),
                    &format!("{prefix}.block{i}"),
                )
            })
            .collect();
        let type_support =
            store.register(&format!("{prefix}.type_support"), nn::zeros(1, cfg.model_dim));
        EncoderParams { blocks, type_support }
    }
}

/// Fixed 2D sinusoidal positional encoding: first C/2 channels encode the
/// row coordinate, last C/2 the column, each as interleaved sin/cos pairs.
pub fn positional_encoding(grid_h: usize, grid_w: usize, c: usize) -> Result<Array2<f64>> {
    if c % 4 != 0 {
        return Err(Error::data(format!(
            "positional encoding needs model_dim divisible by 4, got {c}"
        )));
    }
    let half = c / 2;
    let pairs = half / 2;
    let mut pe = Array2::<f64>::zeros((grid_h * grid_w, c));
    for r in 0..grid_h {
        for col in 0..grid_w {
            let t = r * grid_w + col;
            for k in 0..pairs {
                let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / half as f64);
                pe[[t, 2 * k]] = (r as f64 * freq).sin();
                pe[[t, 2 * k + 1]] = (r as f64 * freq).cos();
                pe[[t, half + 2 * k]] = (col as f64 * freq).sin();
                pe[[t, half + 2 * k + 1]] = (col as f64 * freq).cos();
            }
        }
    }
    Ok(pe)
}

/// Additive 1×(K+n_query) key mask excluding padded support positions, or
/// `None` when every keypoint slot is real.
pub fn fused_key_mask<S: Scalar>(keypoint_mask: &[bool], n_query: usize) -> Option<Array2<S>> {
    if keypoint_mask.iter().all(|&m| m) {
        return None;
    }
    let n = keypoint_mask.len() + n_query;
    let mut m = Array2::<S>::zeros((1, n));
    for (i, &keep) in keypoint_mask.iter().enumerate() {
        if !keep {
            m[[0, i]] = lit::<S>(KEY_MASK_NEG);
        }
    }
    Some(m)
}

/// 0/1 column vector over the fused sequence, zero at padded support rows.
fn fused_row_mask<S: Scalar>(keypoint_mask: &[bool], n_query: usize) -> Array2<S> {
    let n = keypoint_mask.len() + n_query;
    let mut m = Array2::<S>::from_elem((n, 1), S::one());
    for (i, &keep) in keypoint_mask.iter().enumerate() {
        if !keep {
            m[[i, 0]] = S::zero();
        }
    }
    m
}

/// The encoder stack on a tape. `support` is K×C (padded rows zero, type
/// embedding already added), `query` is (h·w)×C with positional encodings
/// already added. Returns refined (support, query).
pub fn refine_on_tape<S: Scalar>(
    tape: &Tape<S>,
    bound: &Binding,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    support: Var,
    query: Var,
    keypoint_mask: &[bool],
) -> (Var, Var) {
    let k = keypoint_mask.len();
    let n_query = tape.shape(query).0;
    let key_mask = fused_key_mask::<S>(keypoint_mask, n_query);
    let row_mask = key_mask.as_ref().map(|_| fused_row_mask::<S>(keypoint_mask, n_query));

    let mut x = tape.concat_rows(support, query);
    for b in &params.blocks {
        let normed = nn::layer_norm(tape, x, bound.var(b.ln1_gain), bound.var(b.ln1_bias));
        let attn = nn::multi_head_attention(
            tape,
            normed,
            normed,
            cfg.num_heads,
            bound.var(b.wq),
            bound.var(b.wk),
            bound.var(b.wv),
            bound.var(b.wo),
            key_mask.as_ref(),
        );
        x = tape.add(x, attn.out);
        let normed2 = nn::layer_norm(tape, x, bound.var(b.ln2_gain), bound.var(b.ln2_bias));
        let f = nn::ffn(
            tape,
            normed2,
            bound.var(b.ffn_w1),
            bound.var(b.ffn_b1),
            bound.var(b.ffn_w2),
            bound.var(b.ffn_b2),
        );
        x = tape.add(x, f);
        if let Some(rm) = &row_mask {
            x = tape.mask_rows(x, rm);
        }
    }
    (tape.slice_rows(x, 0, k), tape.slice_rows(x, k, k + n_query))
}

/// Refined tokens with shapes identical to the projected input.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedFeatures {
    pub support: Array2<f64>,
    pub query: Array2<f64>,
    pub keypoint_mask: Vec<bool>,
}

/// Plain (value-level) encoder forward over stored parameters.
pub fn refine<S: Scalar>(
    features: &ProjectedFeatures,
    cfg: &EncoderConfig,
    store: &ParamStore<S>,
    params: &EncoderParams,
) -> RefinedFeatures {
    let tape = Tape::<S>::new();
    let bound = store.bind(&tape);
    let support = tape.constant(mat_from_f64(&features.support));
    let query = tape.constant(mat_from_f64(&features.query));
    let (s, q) = refine_on_tape(
        &tape,
        &bound,
        params,
        cfg,
        support,
        query,
        &features.keypoint_mask,
    );
    RefinedFeatures {
        support: mat_to_f64(&tape.value(s)),
        query: mat_to_f64(&tape.value(q)),
        keypoint_mask: features.keypoint_mask.clone(),
    }
}
