//! Proposal generation: a trainable inner product scores every (keypoint,
//! image token) pair into per-keypoint similarity heatmaps, and hard argmax
//! peaks become initial coordinate proposals.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::encoder::RefinedFeatures;
use crate::nn::{self, Binding, ParamId, ParamStore};
use crate::scalar::{lit, mat_from_f64, mat_to_f64, Scalar};
use crate::tape::{Tape, Var};

/// Pre-sigmoid similarity logits, K×(grid_h·grid_w), token p = row·w + col.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityHeatmaps {
    pub scores: Array2<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Per-keypoint proposal coordinates in [0,1]²: columns are (x, y).
#[derive(Clone, Debug, PartialEq)]
pub struct Proposals {
    pub coords: Array2<f64>,
}

pub struct ProposerParams {
    pub support_w: ParamId,
    pub support_b: ParamId,
    pub query_w: ParamId,
    pub query_b: ParamId,
}

impl ProposerParams {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        c: usize,
        prefix: &str,
    ) -> ProposerParams {
        ProposerParams {
            support_w: store.register(&format!("{prefix}.support.w"), nn::xavier_uniform(rng, c, c)),
            support_b: store.register(&format!("{prefix}.support.b"), nn::zeros(1, c)),
            query_w: store.register(&format!("{prefix}.query.w"), nn::xavier_uniform(rng, c, c)),
            query_b: store.register(&format!("{prefix}.query.b"), nn::zeros(1, c)),
        }
    }
}

/// score(i, p) = (W_s·s_i + b_s)ᵀ(W_q·q_p + b_q) / √C, as a K×(h·w) matrix.
pub fn similarity_on_tape<S: Scalar>(
    tape: &Tape<S>,
    bound: &Binding,
    params: &ProposerParams,
    support: Var,
    query: Var,
) -> Var {
    let c = tape.shape(support).1;
    let s_proj = nn::linear(tape, support, bound.var(params.support_w), Some(bound.var(params.support_b)));
    let q_proj = nn::linear(tape, query, bound.var(params.query_w), Some(bound.var(params.query_b)));
    let qt = tape.transpose(q_proj);
    let raw = tape.matmul(s_proj, qt);
    tape.scale(raw, lit::<S>(1.0 / (c as f64).sqrt()))
}

/// Plain (value-level) similarity over stored parameters.
pub fn similarity<S: Scalar>(
    refined: &RefinedFeatures,
    grid_h: usize,
    grid_w: usize,
    store: &ParamStore<S>,
    params: &ProposerParams,
) -> SimilarityHeatmaps {
    assert_eq!(refined.query.nrows(), grid_h * grid_w, "token count vs grid shape");
    let tape = Tape::<S>::new();
    let bound = store.bind(&tape);
    let support = tape.constant(mat_from_f64(&refined.support));
    let query = tape.constant(mat_from_f64(&refined.query));
    let scores = similarity_on_tape(&tape, &bound, params, support, query);
    SimilarityHeatmaps { scores: mat_to_f64(&tape.value(scores)), grid_h, grid_w }
}

/// Argmax cell per unmasked keypoint, ties broken by lowest row-major index;
/// coordinates are cell centers: x = (col+0.5)/w, y = (row+0.5)/h. Masked
/// keypoints get (0.5, 0.5).
pub fn select_peaks(heatmaps: &SimilarityHeatmaps, mask: &[bool]) -> Proposals {
    let k = heatmaps.scores.nrows();
    assert_eq!(mask.len(), k, "mask length vs heatmap count");
    let (h, w) = (heatmaps.grid_h, heatmaps.grid_w);
    let mut coords = Array2::<f64>::from_elem((k, 2), 0.5);
    for i in 0..k {
        if !mask[i] {
            continue;
        }
        let row = heatmaps.scores.row(i);
        let mut best = 0usize;
        for (p, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = p;
            }
        }
        let (r, c) = (best / w, best % w);
        coords[[i, 0]] = (c as f64 + 0.5) / w as f64;
        coords[[i, 1]] = (r as f64 + 0.5) / h as f64;
    }
    Proposals { coords }
}
