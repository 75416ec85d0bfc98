//! End-to-end model assembly: text and image inputs through projection,
//! fused refinement, similarity proposals, and the iterative decoder, with
//! the training loss built on the same tape so every trainable parameter
//! receives gradients from a single backward pass.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode_on_tape, DecoderConfig, DecoderParams, LayerOutputs};
use crate::embed::DEFAULT_TEXT_SEED;
use crate::encoder::{positional_encoding, refine_on_tape, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::{self, Binding, ParamId, ParamStore};
use crate::objectives::{
    gt_heatmap, heatmap_loss_on_tape, offset_loss_on_tape, total_loss_on_tape, HeatmapNorm,
};
use crate::posegraph::NormalizedAdjacency;
use crate::proposer::{select_peaks, similarity_on_tape, Proposals, ProposerParams, SimilarityHeatmaps};
use crate::scalar::{mat_from_f64, mat_to_f64, Scalar};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// K: fixed keypoint slot count; categories with fewer slots are padded.
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// C: shared token width after projection.
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    /// C_t: text embedding width.
    #[serde(default = "default_text_dim")]
    pub text_dim: usize,
    /// C_i: image token width.
    #[serde(default = "default_image_dim")]
    pub image_dim: usize,
    /// Patch side in pixels for the built-in image backbone.
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_text_seed")]
    pub text_seed: u64,
    /// Freeze the text head, emulating a frozen pretrained text encoder.
    #[serde(default = "default_freeze_text")]
    pub freeze_text: bool,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    /// Ground-truth Gaussian width in grid cells.
    #[serde(default = "default_sigma_g")]
    pub sigma_g: f64,
    #[serde(default = "default_lambda")]
    pub lambda_heatmap: f64,
    #[serde(default)]
    pub heatmap_norm: HeatmapNorm,
}

fn default_capacity() -> usize {
    100
}
fn default_model_dim() -> usize {
    256
}
fn default_text_dim() -> usize {
    768
}
fn default_image_dim() -> usize {
    768
}
fn default_patch() -> usize {
    16
}
fn default_text_seed() -> u64 {
    DEFAULT_TEXT_SEED
}
fn default_freeze_text() -> bool {
    true
}
fn default_sigma_g() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            capacity: default_capacity(),
            model_dim: default_model_dim(),
            text_dim: default_text_dim(),
            image_dim: default_image_dim(),
            patch: default_patch(),
            text_seed: default_text_seed(),
            freeze_text: default_freeze_text(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            sigma_g: default_sigma_g(),
            lambda_heatmap: default_lambda(),
            heatmap_norm: HeatmapNorm::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::data("keypoint capacity must be positive"));
        }
        if self.encoder.model_dim != self.model_dim || self.decoder.model_dim != self.model_dim {
            return Err(Error::data(format!(
                "encoder ({}) and decoder ({}) widths must equal model_dim ({})",
                self.encoder.model_dim, self.decoder.model_dim, self.model_dim
            )));
        }
        if self.model_dim % 4 != 0 {
            return Err(Error::data(
                "model_dim must be divisible by 4 for the positional encoding",
            ));
        }
        if self.patch == 0 {
            return Err(Error::data("patch size must be positive"));
        }
        if self.sigma_g <= 0.0 {
            return Err(Error::data("sigma_g must be positive"));
        }
        if self.lambda_heatmap < 0.0 {
            return Err(Error::data("lambda_heatmap must be nonnegative"));
        }
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

/// Text rows entering the model, before or after the text head.
pub enum TextInput {
    /// Raw hash-embedder rows; the trainable head and row normalization run
    /// on the tape so the head can learn (unless frozen).
    Raw(Array2<f64>),
    /// Finished rows from a precomputed backend; used verbatim.
    Fixed(Array2<f64>),
}

impl TextInput {
    pub fn rows(&self) -> &Array2<f64> {
        match self {
            TextInput::Raw(r) | TextInput::Fixed(r) => r,
        }
    }
}

/// Image tokens entering the model, before or after the image backbone.
pub enum ImageInput {
    /// Flattened p² patch rows; the trainable linear backbone runs on the
    /// tape.
    Patches(Array2<f64>),
    /// Finished C_i tokens from a precomputed backend.
    Tokens(Array2<f64>),
}

pub struct ModelParams {
    pub text_head: ParamId,
    pub image_w: ParamId,
    pub image_b: ParamId,
    pub proj_text_w: ParamId,
    pub proj_text_b: ParamId,
    pub proj_image_w: ParamId,
    pub proj_image_b: ParamId,
    pub encoder: EncoderParams,
    pub proposer: ProposerParams,
    pub decoder: DecoderParams,
}

pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub params: ModelParams,
}

/// Tape handles plus the plain values the harness needs per sample.
pub struct ForwardOutputs {
    /// K×(grid_h·grid_w) similarity scores.
    pub scores: Var,
    /// Per-layer K×2 coordinates.
    pub coords: Vec<Var>,
    pub proposals: Proposals,
    pub keypoint_mask: Vec<bool>,
    pub cross_attn: Option<Vec<Array2<f64>>>,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Loss nodes from one sample's forward pass.
pub struct LossNodes {
    pub heatmap: Var,
    pub offset: Var,
    pub total: Var,
}

/// Value-level prediction for evaluation.
pub struct Prediction {
    pub per_layer: LayerOutputs,
    pub proposals: Proposals,
    pub scores: SimilarityHeatmaps,
    pub keypoint_mask: Vec<bool>,
    pub attention: Option<Vec<Array2<f64>>>,
}

impl Prediction {
    /// Final normalized coordinates, one row per keypoint slot.
    pub fn coords(&self) -> &Array2<f64> {
        self.per_layer.final_coords()
    }
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model<S>> {
        cfg.validate()?;
        let mut store = ParamStore::<S>::new();
        let mut rng = nn::seeded_rng(seed);
        let c = cfg.model_dim;
        let p2 = cfg.patch * cfg.patch;
        // The identity head keeps untrained toy text rows equal to the raw
        // hash embedding, a stand-in for a pretrained encoder's output.
        let text_head = store.register("text.head", nn::identity(cfg.text_dim));
        let image_w = store.register("image.w", nn::xavier_uniform(&mut rng, p2, cfg.image_dim));
        let image_b = store.register("image.b", nn::zeros(1, cfg.image_dim));
        let proj_text_w =
            store.register("proj.text.w", nn::xavier_uniform(&mut rng, cfg.text_dim, c));
        let proj_text_b = store.register("proj.text.b", nn::zeros(1, c));
        let proj_image_w =
            store.register("proj.image.w", nn::xavier_uniform(&mut rng, cfg.image_dim, c));
        let proj_image_b = store.register("proj.image.b", nn::zeros(1, c));
        let encoder = EncoderParams::register(&mut store, &mut rng, &cfg.encoder, "encoder");
        let proposer = ProposerParams::register(&mut store, &mut rng, c, "proposer");
        let decoder = DecoderParams::register(&mut store, &mut rng, &cfg.decoder, "decoder");
        if cfg.freeze_text {
            store.set_frozen_prefix("text.", true);
        }
        Ok(Model {
            cfg,
            store,
            params: ModelParams {
                text_head,
                image_w,
                image_b,
                proj_text_w,
                proj_text_b,
                proj_image_w,
                proj_image_b,
                encoder,
                proposer,
                decoder,
            },
        })
    }

    /// Full forward pass on `tape`. The adjacency must be built for the
    /// model capacity K.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape(
        &self,
        tape: &Tape<S>,
        bound: &Binding,
        text: &TextInput,
        image: &ImageInput,
        grid_h: usize,
        grid_w: usize,
        adjacency: &NormalizedAdjacency,
        trace: bool,
    ) -> Result<ForwardOutputs> {
        let cfg = &self.cfg;
        let k = cfg.capacity;
        let k_s = text.rows().nrows();
        if k_s == 0 {
            return Err(Error::data("category has no keypoints"));
        }
        if k_s > k {
            return Err(Error::data(format!(
                "category has {k_s} keypoints but the configured capacity is K={k}"
            )));
        }
        if text.rows().ncols() != cfg.text_dim {
            return Err(Error::data(format!(
                "text rows have width {} but C_t={}",
                text.rows().ncols(),
                cfg.text_dim
            )));
        }
        if adjacency.matrix.nrows() != k {
            return Err(Error::data(format!(
                "adjacency is {}x{} but capacity is K={k}",
                adjacency.matrix.nrows(),
                adjacency.matrix.ncols()
            )));
        }

        let text_rows = match text {
            TextInput::Raw(raw) => {
                let raw_c = tape.constant(mat_from_f64::<S>(raw));
                let through_head = tape.matmul(raw_c, bound.var(self.params.text_head));
                tape.row_normalize(through_head)
            }
            TextInput::Fixed(rows) => tape.constant(mat_from_f64::<S>(rows)),
        };
        let support_rows = nn::linear(
            tape,
            text_rows,
            bound.var(self.params.proj_text_w),
            Some(bound.var(self.params.proj_text_b)),
        );
        let support = if k_s < k {
            let pad = tape.constant(Array2::<S>::zeros((k - k_s, cfg.model_dim)));
            tape.concat_rows(support_rows, pad)
        } else {
            support_rows
        };
        let mut keypoint_mask = vec![false; k];
        keypoint_mask[..k_s].fill(true);

        let tokens = match image {
            ImageInput::Patches(patches) => {
                if patches.ncols() != cfg.patch * cfg.patch {
                    return Err(Error::data(format!(
                        "patch rows have width {} but patch²={}",
                        patches.ncols(),
                        cfg.patch * cfg.patch
                    )));
                }
                let p_c = tape.constant(mat_from_f64::<S>(patches));
                nn::linear(
                    tape,
                    p_c,
                    bound.var(self.params.image_w),
                    Some(bound.var(self.params.image_b)),
                )
            }
            ImageInput::Tokens(t) => {
                if t.ncols() != cfg.image_dim {
                    return Err(Error::data(format!(
                        "image tokens have width {} but C_i={}",
                        t.ncols(),
                        cfg.image_dim
                    )));
                }
                tape.constant(mat_from_f64::<S>(t))
            }
        };
        let n_tokens = tape.shape(tokens).0;
        if n_tokens != grid_h * grid_w {
            return Err(Error::data(format!(
                "{n_tokens} image tokens do not fill a {grid_h}x{grid_w} grid"
            )));
        }
        let query_rows = nn::linear(
            tape,
            tokens,
            bound.var(self.params.proj_image_w),
            Some(bound.var(self.params.proj_image_b)),
        );

        let pe = positional_encoding(grid_h, grid_w, cfg.model_dim)?;
        let pe_c = tape.constant(mat_from_f64::<S>(&pe));
        let query = tape.add(query_rows, pe_c);
        let mut support = tape.add_row(support, bound.var(self.params.encoder.type_support));
        if k_s < k {
            let col = Array2::from_shape_fn((k, 1), |(i, _)| {
                if keypoint_mask[i] { S::one() } else { S::zero() }
            });
            support = tape.mask_rows(support, &col);
        }

        let (s_ref, q_ref) = refine_on_tape(
            tape,
            bound,
            &self.params.encoder,
            &cfg.encoder,
            support,
            query,
            &keypoint_mask,
        );
        let scores = similarity_on_tape(tape, bound, &self.params.proposer, s_ref, q_ref);
        let heatmaps = SimilarityHeatmaps {
            scores: mat_to_f64(&tape.value(scores)),
            grid_h,
            grid_w,
        };
        let proposals = select_peaks(&heatmaps, &keypoint_mask);
        let decoded = decode_on_tape(
            tape,
            bound,
            &self.params.decoder,
            &cfg.decoder,
            &proposals.coords,
            s_ref,
            q_ref,
            &pe,
            adjacency,
            &keypoint_mask,
            trace,
        );
        Ok(ForwardOutputs {
            scores,
            coords: decoded.coords,
            proposals,
            keypoint_mask,
            cross_attn: decoded.cross_attn,
            grid_h,
            grid_w,
        })
    }

    /// Builds the loss nodes for one sample. `gt_coords` holds K_s rows of
    /// normalized coordinates; padding to capacity happens here.
    pub fn loss_on_tape(
        &self,
        tape: &Tape<S>,
        fwd: &ForwardOutputs,
        gt_coords: &Array2<f64>,
        visibility: &[bool],
    ) -> Result<LossNodes> {
        let k = self.cfg.capacity;
        let k_s = gt_coords.nrows();
        assert_eq!(visibility.len(), k_s, "visibility must match keypoint rows");
        if k_s > k {
            return Err(Error::data(format!(
                "sample has {k_s} keypoints but the configured capacity is K={k}"
            )));
        }
        let mut padded = Array2::<f64>::from_elem((k, 2), 0.5);
        padded.slice_mut(ndarray::s![..k_s, ..]).assign(gt_coords);
        let mut mask = vec![false; k];
        for i in 0..k_s {
            mask[i] = visibility[i] && fwd.keypoint_mask[i];
        }
        let gt = gt_heatmap(&padded, &mask, fwd.grid_h, fwd.grid_w, self.cfg.sigma_g)?;
        let heatmap = heatmap_loss_on_tape(tape, fwd.scores, &gt, &mask, self.cfg.heatmap_norm)?;
        let offset = offset_loss_on_tape(tape, &fwd.coords, &padded, &mask);
        let total = total_loss_on_tape(tape, heatmap, offset, self.cfg.lambda_heatmap);
        Ok(LossNodes { heatmap, offset, total })
    }

    /// Value-level prediction for evaluation; no gradients are kept.
    pub fn predict(
        &self,
        text: &TextInput,
        image: &ImageInput,
        grid_h: usize,
        grid_w: usize,
        adjacency: &NormalizedAdjacency,
        trace: bool,
    ) -> Result<Prediction> {
        let tape = Tape::<S>::new();
        let bound = self.store.bind(&tape);
        let fwd =
            self.forward_on_tape(&tape, &bound, text, image, grid_h, grid_w, adjacency, trace)?;
        let per_layer = LayerOutputs {
            coords_per_layer: fwd
                .coords
                .iter()
                .map(|v| mat_to_f64(&tape.value(*v)))
                .collect(),
        };
        Ok(Prediction {
            per_layer,
            proposals: fwd.proposals,
            scores: SimilarityHeatmaps {
                scores: mat_to_f64(&tape.value(fwd.scores)),
                grid_h,
                grid_w,
            },
            keypoint_mask: fwd.keypoint_mask,
            attention: fwd.cross_attn,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{
        patch_matrix, project_features, toy_text_matrix, ImageBackend, ImageFeatureMap,
        ProjectionWeights, TextBackend,
    };
    use crate::encoder::refine;
    use crate::nn::seeded_rng;
    use crate::posegraph::{build_adjacency, PoseGraph};
    use crate::proposer::similarity;
    use rand::Rng as _;

    fn tiny_cfg(k: usize) -> ModelConfig {
        ModelConfig {
            capacity: k,
            model_dim: 16,
            text_dim: 8,
            image_dim: 8,
            patch: 4,
            text_seed: DEFAULT_TEXT_SEED,
            freeze_text: false,
            encoder: EncoderConfig {
                num_blocks: 1,
                model_dim: 16,
                num_heads: 2,
                ffn_dim: Some(32),
                dropout: 0.0,
            },
            decoder: DecoderConfig {
                num_layers: 1,
                model_dim: 16,
                num_heads: 2,
                ffn_dim: Some(32),
                decoder_kind: crate::decoder::DecoderKind::Graph,
            },
            sigma_g: 1.0,
            lambda_heatmap: 1.0,
            heatmap_norm: HeatmapNorm::L1,
        }
    }

    fn sample_graph() -> PoseGraph {
        PoseGraph::new(
            "probe",
            vec!["left eye".into(), "right eye".into(), "nose".into()],
            vec![(0, 2), (1, 2)],
        )
        .unwrap()
    }

    fn sample_image(seed: u64) -> Array2<f64> {
        let mut rng = seeded_rng(seed);
        Array2::from_shape_fn((8, 8), |_| rng.gen::<f64>())
    }

    fn descriptions(graph: &PoseGraph) -> Vec<String> {
        graph.texts().map(String::from).collect()
    }

    fn raw_text(graph: &PoseGraph, cfg: &ModelConfig) -> TextInput {
        TextInput::Raw(
            toy_text_matrix(&descriptions(graph), cfg.text_dim, cfg.text_seed).unwrap(),
        )
    }

    #[test]
    fn tape_forward_matches_the_modular_plain_path() {
        let cfg = tiny_cfg(5);
        let model = Model::<f64>::new(cfg.clone(), 41).unwrap();
        let graph = sample_graph();
        let adj = build_adjacency(&graph, 5).unwrap();
        let pixels = sample_image(42);

        let text_in = raw_text(&graph, &cfg);
        let (patches, gh, gw) = patch_matrix(&pixels, cfg.patch).unwrap();
        let image_in = ImageInput::Patches(patches.clone());
        let got = model
            .predict(&text_in, &image_in, gh, gw, &adj, false)
            .unwrap();

        // Same computation through the standalone module APIs.
        let text_backend = TextBackend::Toy {
            c_t: cfg.text_dim,
            seed: cfg.text_seed,
            head: model.store.value(model.params.text_head).clone(),
        };
        let texts = text_backend.embed_texts("probe", &descriptions(&graph)).unwrap();
        let image_backend = ImageBackend::Toy {
            patch: cfg.patch,
            w: model.store.value(model.params.image_w).clone(),
            b: model.store.value(model.params.image_b).clone(),
        };
        let tokens: ImageFeatureMap = image_backend.embed_image("probe", &pixels).unwrap();
        let weights = ProjectionWeights {
            text_w: model.store.value(model.params.proj_text_w).clone(),
            text_b: model.store.value(model.params.proj_text_b).clone(),
            image_w: model.store.value(model.params.proj_image_w).clone(),
            image_b: model.store.value(model.params.proj_image_b).clone(),
        };
        let mut projected = project_features(&texts, &tokens, 5, &weights).unwrap();
        let pe = positional_encoding(gh, gw, cfg.model_dim).unwrap();
        projected.query += &pe;
        let type_row = model.store.value(model.params.encoder.type_support).clone();
        for i in 0..3 {
            let mut row = projected.support.row_mut(i);
            row += &type_row.row(0);
        }
        let refined = refine(&projected, &cfg.encoder, &model.store, &model.params.encoder);
        let scores = similarity(&refined, gh, gw, &model.store, &model.params.proposer);
        let proposals = select_peaks(&scores, &refined.keypoint_mask);
        let (layers, _) = crate::decoder::decode(
            &proposals,
            &refined,
            gh,
            gw,
            &adj,
            &cfg.decoder,
            &model.store,
            &model.params.decoder,
            false,
        )
        .unwrap();

        for (a, b) in got.scores.scores.iter().zip(scores.scores.iter()) {
            assert!((a - b).abs() < 1e-12, "score {a} vs {b}");
        }
        assert_eq!(got.proposals, proposals);
        for (a, b) in got
            .coords()
            .iter()
            .zip(layers.final_coords().iter())
        {
            assert!((a - b).abs() < 1e-12, "coord {a} vs {b}");
        }
    }

    #[test]
    fn predict_is_bitwise_deterministic() {
        let cfg = tiny_cfg(4);
        let model = Model::<f32>::new(cfg.clone(), 43).unwrap();
        let graph = sample_graph();
        let adj = build_adjacency(&graph, 4).unwrap();
        let pixels = sample_image(44);
        let (patches, gh, gw) = patch_matrix(&pixels, cfg.patch).unwrap();
        let run = || {
            let p = model
                .predict(
                    &raw_text(&graph, &cfg),
                    &ImageInput::Patches(patches.clone()),
                    gh,
                    gw,
                    &adj,
                    false,
                )
                .unwrap();
            (p.per_layer.clone(), p.scores.scores.clone())
        };
        let (a_layers, a_scores) = run();
        let (b_layers, b_scores) = run();
        assert_eq!(a_layers, b_layers);
        assert_eq!(a_scores, b_scores);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = tiny_cfg(4);
        let a = Model::<f32>::new(cfg.clone(), 7).unwrap();
        let b = Model::<f32>::new(cfg, 7).unwrap();
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        a.store.write_to(&mut bytes_a).unwrap();
        b.store.write_to(&mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn capacity_overflow_is_a_data_error() {
        let cfg = tiny_cfg(2);
        let model = Model::<f64>::new(cfg.clone(), 45).unwrap();
        let graph = sample_graph();
        let adj = build_adjacency(&PoseGraph::new("p", vec!["a".into()], vec![]).unwrap(), 2)
            .unwrap();
        let pixels = sample_image(46);
        let (patches, gh, gw) = patch_matrix(&pixels, cfg.patch).unwrap();
        let err = model
            .predict(
                &raw_text(&graph, &cfg),
                &ImageInput::Patches(patches),
                gh,
                gw,
                &adj,
                false,
            )
            .err()
            .expect("three keypoints cannot fit in two slots");
        assert!(err.to_string().contains("capacity"), "{err}");
    }

    #[test]
    fn frozen_text_head_receives_no_updates() {
        let mut cfg = tiny_cfg(4);
        cfg.freeze_text = true;
        let model = Model::<f64>::new(cfg.clone(), 47).unwrap();
        assert!(model.store.is_frozen(model.params.text_head));
        assert!(!model.store.is_frozen(model.params.proj_text_w));

        let graph = sample_graph();
        let adj = build_adjacency(&graph, 4).unwrap();
        let pixels = sample_image(48);
        let (patches, gh, gw) = patch_matrix(&pixels, cfg.patch).unwrap();
        let tape = Tape::<f64>::new();
        let bound = model.store.bind(&tape);
        let fwd = model
            .forward_on_tape(
                &tape,
                &bound,
                &raw_text(&graph, &cfg),
                &ImageInput::Patches(patches),
                gh,
                gw,
                &adj,
                false,
            )
            .unwrap();
        let gt = ndarray::array![[0.25, 0.25], [0.75, 0.25], [0.5, 0.75]];
        let loss = model.loss_on_tape(&tape, &fwd, &gt, &[true, true, true]).unwrap();
        let mut grads = tape.backward(loss.total);
        let mut buffer = nn::zeroed_grad_buffer(&model.store);
        nn::collect_param_grads(&model.store, &bound, &mut grads, &mut buffer);
        assert!(buffer[0].is_none(), "frozen head must not accumulate gradients");
        let live = buffer.iter().filter(|g| g.is_some()).count();
        assert!(live > 10, "most parameters should be reached, got {live}");
    }

    #[test]
    fn padding_capacity_does_not_move_real_keypoints() {
        let graph = sample_graph();
        let pixels = sample_image(49);
        let mut coords = Vec::new();
        for k in [3usize, 6] {
            let mut cfg = tiny_cfg(k);
            cfg.freeze_text = false;
            let model = Model::<f64>::new(cfg.clone(), 50).unwrap();
            let adj = build_adjacency(&graph, k).unwrap();
            let (patches, gh, gw) = patch_matrix(&pixels, cfg.patch).unwrap();
            let p = model
                .predict(
                    &raw_text(&graph, &cfg),
                    &ImageInput::Patches(patches),
                    gh,
                    gw,
                    &adj,
                    false,
                )
                .unwrap();
            coords.push(p.coords().clone());
        }
        for i in 0..3 {
            for d in 0..2 {
                let diff = (coords[0][[i, d]] - coords[1][[i, d]]).abs();
                assert!(diff < 1e-9, "kp {i} dim {d} moved by {diff}");
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_fd() {
        let cfg = tiny_cfg(4);
        let mut model = Model::<f64>::new(cfg.clone(), 51).unwrap();
        let mut rng = seeded_rng(52);
        for layer in &model.params.decoder.layers {
            let w = nn::xavier_uniform::<f64>(&mut rng, 16, 2).mapv(|v| v * 0.3);
            *model.store.value_mut(layer.offset_w) = w;
        }
        let graph = sample_graph();
        let adj = build_adjacency(&graph, 4).unwrap();
        let pixels = sample_image(53);
        let (patches, gh, gw) = patch_matrix(&pixels, cfg.patch).unwrap();
        let gt = ndarray::array![[0.25, 0.25], [0.75, 0.25], [0.5, 0.75]];
        let vis = [true, true, true];

        let eval = |model: &Model<f64>| -> f64 {
            let tape = Tape::new();
            let bound = model.store.bind(&tape);
            let fwd = model
                .forward_on_tape(
                    &tape,
                    &bound,
                    &raw_text(&graph, &cfg),
                    &ImageInput::Patches(patches.clone()),
                    gh,
                    gw,
                    &adj,
                    false,
                )
                .unwrap();
            let loss = model.loss_on_tape(&tape, &fwd, &gt, &vis).unwrap();
            tape.value(loss.total)[[0, 0]]
        };

        let (grads, bound) = {
            let tape = Tape::new();
            let bound = model.store.bind(&tape);
            let fwd = model
                .forward_on_tape(
                    &tape,
                    &bound,
                    &raw_text(&graph, &cfg),
                    &ImageInput::Patches(patches.clone()),
                    gh,
                    gw,
                    &adj,
                    false,
                )
                .unwrap();
            let loss = model.loss_on_tape(&tape, &fwd, &gt, &vis).unwrap();
            (tape.backward(loss.total), bound)
        };

        for (label, id) in [
            ("text.head", model.params.text_head),
            ("image.w", model.params.image_w),
            ("proj.text.w", model.params.proj_text_w),
            ("proj.image.b", model.params.proj_image_b),
        ] {
            let analytic = grads.get(bound.var(id)).expect(label).clone();
            let (rows, cols) = analytic.dim();
            let mut checked = 0;
            for r in 0..rows {
                for c in 0..cols {
                    if (r * cols + c) % 13 != 0 {
                        continue;
                    }
                    let h = 1e-6;
                    let base = model.store.value(id)[[r, c]];
                    model.store.value_mut(id)[[r, c]] = base + h;
                    let fp = eval(&model);
                    model.store.value_mut(id)[[r, c]] = base - h;
                    let fm = eval(&model);
                    model.store.value_mut(id)[[r, c]] = base;
                    let fd = (fp - fm) / (2.0 * h);
                    let a = analytic[[r, c]];
                    let denom = a.abs().max(fd.abs()).max(1e-7);
                    assert!(
                        (a - fd).abs() / denom < 1e-4,
                        "{label}[{r},{c}]: analytic {a} vs fd {fd}"
                    );
                    checked += 1;
                }
            }
            assert!(checked > 0, "{label}: no entries probed");
        }
    }
}
