//! Iterative keypoint decoder: each layer runs masked self-attention over
//! keypoint tokens, graph convolution along the skeleton (graph kind only),
//! cross-attention into the refined image tokens, and a feed-forward block,
//! then updates coordinates through a zero-initialized offset head in
//! inverse-sigmoid space so every layer emits valid normalized coordinates.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{positional_encoding, RefinedFeatures, KEY_MASK_NEG};
use crate::error::{Error, Result};
use crate::nn::{self, Binding, ParamId, ParamStore};
use crate::posegraph::NormalizedAdjacency;
use crate::proposer::Proposals;
use crate::scalar::{lit, mat_from_f64, mat_to_f64, Scalar};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Graph,
    Mlp,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    /// Defaults to 4·model_dim when absent.
    #[serde(default)]
    pub ffn_dim: Option<usize>,
    #[serde(default = "default_kind")]
    pub decoder_kind: DecoderKind,
}

fn default_layers() -> usize {
    3
}
fn default_model_dim() -> usize {
    256
}
fn default_heads() -> usize {
    8
}
fn default_kind() -> DecoderKind {
    DecoderKind::Graph
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_layers: default_layers(),
            model_dim: default_model_dim(),
            num_heads: default_heads(),
            ffn_dim: None,
            decoder_kind: default_kind(),
        }
    }
}

impl DecoderConfig {
    pub fn ffn_dim(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.model_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::data("decoder needs at least one layer"));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::data(format!(
                "model_dim {} must be divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

pub struct DecoderLayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub self_wq: ParamId,
    pub self_wk: ParamId,
    pub self_wv: ParamId,
    pub self_wo: ParamId,
    /// Present only for the graph kind.
    pub gcn_w: Option<ParamId>,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub cross_wq: ParamId,
    pub cross_wk: ParamId,
    pub cross_wv: ParamId,
    pub cross_wo: ParamId,
    pub ln3_gain: ParamId,
    pub ln3_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub offset_w: ParamId,
    pub offset_b: ParamId,
}

pub struct DecoderParams {
    pub layers: Vec<DecoderLayerParams>,
}

impl DecoderParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: &DecoderConfig,
        prefix: &str,
    ) -> DecoderParams {
        let c = cfg.model_dim;
        let layers = (0..cfg.num_layers)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                DecoderLayerParams {
                    ln1_gain: store.register(&format!("{p}.ln1.gain"), nn::ones(1, c)),
                    ln1_bias: store.register(&format!("{p}.ln1.bias"), nn::zeros(1, c)),
                    self_wq: store.register(&format!("{p}.self.wq"), nn::xavier_uniform(rng, c, c)),
                    self_wk: store.register(&format!("{p}.self.wk"), nn::xavier_uniform(rng, c, c)),
                    self_wv: store.register(&format!("{p}.self.wv"), nn::xavier_uniform(rng, c, c)),
                    self_wo: store.register(&format!("{p}.self.wo"), nn::xavier_uniform(rng, c, c)),
                    gcn_w: match cfg.decoder_kind {
                        DecoderKind::Graph => Some(
                            store.register(&format!("{p}.gcn.w"), nn::xavier_uniform(rng, c, c)),
                        ),
                        DecoderKind::Mlp => None,
                    },
                    ln2_gain: store.register(&format!("{p}.ln2.gain"), nn::ones(1, c)),
                    ln2_bias: store.register(&format!("{p}.ln2.bias"), nn::zeros(1, c)),
                    cross_wq: store.register(&format!("{p}.cross.wq"), nn::xavier_uniform(rng, c, c)),
                    cross_wk: store.register(&format!("{p}.cross.wk"), nn::xavier_uniform(rng, c, c)),
                    cross_wv: store.register(&format!("{p}.cross.wv"), nn::xavier_uniform(rng, c, c)),
                    cross_wo: store.register(&format!("{p}.cross.wo"), nn::xavier_uniform(rng, c, c)),
                    ln3_gain: store.register(&format!("{p}.ln3.gain"), nn::ones(1, c)),
                    ln3_bias: store.register(&format!("{p}.ln3.bias"), nn::zeros(1, c)),
                    ffn_w1: store
                        .register(&format!("{p}.ffn.w1"), nn::xavier_uniform(rng, c, cfg.ffn_dim())),
                    ffn_b1: store.register(&format!("{p}.ffn.b1"), nn::zeros(1, cfg.ffn_dim())),
                    ffn_w2: store
                        .register(&format!("{p}.ffn.w2"), nn::xavier_uniform(rng, cfg.ffn_dim(), c)),
                    ffn_b2: store.register(&format!("{p}.ffn.b2"), nn::zeros(1, c)),
                    // Zero-initialized so an untrained decoder is an exact
                    // identity refinement over the proposals.
                    offset_w: store.register(&format!("{p}.offset.w"), nn::zeros(c, 2)),
                    offset_b: store.register(&format!("{p}.offset.b"), nn::zeros(1, 2)),
                }
            })
            .collect();
        DecoderParams { layers }
    }
}

/// Per-layer coordinates in [0,1]²; the final prediction is the last entry.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutputs {
    pub coords_per_layer: Vec<Array2<f64>>,
}

impl LayerOutputs {
    pub fn final_coords(&self) -> &Array2<f64> {
        self.coords_per_layer.last().expect("decoder emits at least one layer")
    }
}

pub enum GcnActivation {
    Identity,
    Gelu,
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
}

/// One graph-convolution step: activation(A_norm·X·W) residual-added to X.
pub fn gcn_layer(
    x: &Array2<f64>,
    adj: &NormalizedAdjacency,
    w: &Array2<f64>,
    activation: GcnActivation,
) -> Array2<f64> {
    let mixed = adj.matrix.dot(x).dot(w);
    let activated = match activation {
        GcnActivation::Identity => mixed,
        GcnActivation::Gelu => mixed.mapv(gelu_scalar),
    };
    activated + x
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

pub struct DecodeOutputs {
    /// One K×2 coordinate node per layer.
    pub coords: Vec<Var>,
    /// Head-averaged cross-attention maps (K×h·w per layer) when traced.
    pub cross_attn: Option<Vec<Array2<f64>>>,
}

/// Decoder forward on a tape. `proposals` are treated as constants (the
/// peak selection is non-differentiable; heatmap supervision trains the
/// proposal path). `pe` is added to the refined image tokens as keys/values.
#[allow(clippy::too_many_arguments)]
pub fn decode_on_tape<S: Scalar>(
    tape: &Tape<S>,
    bound: &Binding,
    params: &DecoderParams,
    cfg: &DecoderConfig,
    proposals: &Array2<f64>,
    support_refined: Var,
    query_refined: Var,
    pe: &Array2<f64>,
    adjacency: &NormalizedAdjacency,
    keypoint_mask: &[bool],
    trace: bool,
) -> DecodeOutputs {
    let k = keypoint_mask.len();
    assert_eq!(proposals.nrows(), k);
    assert_eq!(adjacency.matrix.nrows(), k, "adjacency built for a different K");

    let all_real = keypoint_mask.iter().all(|&m| m);
    let col_mask: Option<Array2<S>> = (!all_real).then(|| {
        Array2::from_shape_fn((k, 1), |(i, _)| {
            if keypoint_mask[i] { S::one() } else { S::zero() }
        })
    });
    let self_key_mask: Option<Array2<S>> = (!all_real).then(|| {
        Array2::from_shape_fn((1, k), |(_, j)| {
            if keypoint_mask[j] { S::zero() } else { lit::<S>(KEY_MASK_NEG) }
        })
    });
    // Masked keypoints report the image center at every layer.
    let center_fill: Option<Array2<S>> = (!all_real).then(|| {
        Array2::from_shape_fn((k, 2), |(i, _)| {
            if keypoint_mask[i] { S::zero() } else { lit::<S>(0.5) }
        })
    });

    let mask_after_ln = |v: Var| -> Var {
        match &col_mask {
            Some(m) => tape.mask_rows(v, m),
            None => v,
        }
    };

    let pe_c = tape.constant(mat_from_f64::<S>(pe));
    let kv = tape.add(query_refined, pe_c);
    let adj_c = tape.constant(mat_from_f64::<S>(&adjacency.matrix));

    let mut u = tape.constant(mat_from_f64::<S>(&proposals.mapv(logit)));
    let mut x = support_refined;
    let mut coords = Vec::with_capacity(cfg.num_layers);
    let mut traces: Vec<Array2<f64>> = Vec::new();

    for layer in &params.layers {
        let n1 = mask_after_ln(nn::layer_norm(tape, x, bound.var(layer.ln1_gain), bound.var(layer.ln1_bias)));
        let self_attn = nn::multi_head_attention(
            tape,
            n1,
            n1,
            cfg.num_heads,
            bound.var(layer.self_wq),
            bound.var(layer.self_wk),
            bound.var(layer.self_wv),
            bound.var(layer.self_wo),
            self_key_mask.as_ref(),
        );
        x = tape.add(x, self_attn.out);

        if let Some(gcn_w) = layer.gcn_w {
            let mixed = tape.matmul(tape.matmul(adj_c, x), bound.var(gcn_w));
            let activated = tape.gelu(mixed);
            x = tape.add(x, activated);
        }

        let n2 = mask_after_ln(nn::layer_norm(tape, x, bound.var(layer.ln2_gain), bound.var(layer.ln2_bias)));
        let cross = nn::multi_head_attention(
            tape,
            n2,
            kv,
            cfg.num_heads,
            bound.var(layer.cross_wq),
            bound.var(layer.cross_wk),
            bound.var(layer.cross_wv),
            bound.var(layer.cross_wo),
            None,
        );
        if trace {
            let n_kv = tape.shape(kv).0;
            let mut mean = Array2::<f64>::zeros((k, n_kv));
            for p in &cross.probs {
                mean += &mat_to_f64(&tape.value(*p));
            }
            mean.mapv_inplace(|v| v / cfg.num_heads as f64);
            traces.push(mean);
        }
        x = tape.add(x, cross.out);

        let n3 = mask_after_ln(nn::layer_norm(tape, x, bound.var(layer.ln3_gain), bound.var(layer.ln3_bias)));
        let f = nn::ffn(
            tape,
            n3,
            bound.var(layer.ffn_w1),
            bound.var(layer.ffn_b1),
            bound.var(layer.ffn_w2),
            bound.var(layer.ffn_b2),
        );
        x = tape.add(x, f);
        if let Some(m) = &col_mask {
            x = tape.mask_rows(x, m);
        }

        let delta = nn::linear(tape, x, bound.var(layer.offset_w), Some(bound.var(layer.offset_b)));
        u = tape.add(u, delta);
        let c = tape.sigmoid(u);
        let c = match (&col_mask, &center_fill) {
            (Some(m), Some(fill)) => {
                let kept = tape.mask_rows(c, m);
                let fill_c = tape.constant(fill.clone());
                tape.add(kept, fill_c)
            }
            _ => c,
        };
        coords.push(c);
    }

    DecodeOutputs { coords, cross_attn: trace.then_some(traces) }
}

/// Plain (value-level) decode over stored parameters.
#[allow(clippy::too_many_arguments)]
pub fn decode<S: Scalar>(
    proposals: &Proposals,
    refined: &RefinedFeatures,
    grid_h: usize,
    grid_w: usize,
    adjacency: &NormalizedAdjacency,
    cfg: &DecoderConfig,
    store: &ParamStore<S>,
    params: &DecoderParams,
    trace: bool,
) -> Result<(LayerOutputs, Option<Vec<Array2<f64>>>)> {
    let pe = positional_encoding(grid_h, grid_w, cfg.model_dim)?;
    let tape = Tape::<S>::new();
    let bound = store.bind(&tape);
    let support = tape.constant(mat_from_f64(&refined.support));
    let query = tape.constant(mat_from_f64(&refined.query));
    let out = decode_on_tape(
        &tape,
        &bound,
        params,
        cfg,
        &proposals.coords,
        support,
        query,
        &pe,
        adjacency,
        &refined.keypoint_mask,
        trace,
    );
    let coords = out
        .coords
        .iter()
        .map(|v| mat_to_f64(&tape.value(*v)))
        .collect();
    Ok((LayerOutputs { coords_per_layer: coords }, out.cross_attn))
}

/// Per-layer head-averaged cross-attention maps from a traced decode.
pub fn attention_maps(trace: Option<Vec<Array2<f64>>>) -> Result<Vec<Array2<f64>>> {
    trace.ok_or_else(|| Error::data("attention maps requested but tracing was disabled"))
}
