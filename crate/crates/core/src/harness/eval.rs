//! Evaluation: per-category PCK@0.2 with a constant-center baseline,
//! emitted as a structured JSON report. The same core drives the masking
//! sweep and the robustness harness so their fraction-0 / identity rows
//! match plain evaluation bitwise.

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSample, SplitPart};
use crate::embed::{patch_matrix, toy_text_matrix, TextBackend};
use crate::error::{Error, Result};
use crate::harness::config::{TextBackendKind, TextConfig};
use crate::model::{ImageInput, Model, ModelConfig, TextInput};
use crate::objectives::pck;
use crate::posegraph::{build_adjacency, NormalizedAdjacency};
use crate::scalar::Scalar;

/// The PCK distance threshold, as a fraction of the longer bbox side.
pub const PCK_THRESHOLD: f64 = 0.2;

/// Everything needed to run one category's queries: embedded text rows,
/// the normalized adjacency at model capacity, and the description list.
pub struct PreparedCategory {
    pub name: String,
    pub text: TextInput,
    pub adjacency: NormalizedAdjacency,
    pub k_s: usize,
    pub descriptions: Vec<String>,
}

/// Embeds `texts` for one category. The description list may differ from
/// the pose-graph's (the robustness harness substitutes words); its length
/// may not.
pub fn prepare_category_with_texts(
    model_cfg: &ModelConfig,
    text_cfg: &TextConfig,
    ds: &Dataset,
    name: &str,
    texts: Vec<String>,
) -> Result<PreparedCategory> {
    let graph = ds.posegraph(name)?;
    if texts.len() != graph.len() {
        return Err(Error::data(format!(
            "category `{name}` has {} keypoints but {} descriptions were supplied",
            graph.len(),
            texts.len()
        )));
    }
    let text = match text_cfg.backend {
        TextBackendKind::Toy => {
            TextInput::Raw(toy_text_matrix(&texts, model_cfg.text_dim, model_cfg.text_seed)?)
        }
        TextBackendKind::External => {
            let dir = text_cfg
                .dir
                .as_ref()
                .ok_or_else(|| Error::data("text.backend = external requires text.dir"))?;
            let backend =
                TextBackend::External { dir: dir.clone(), c_t: model_cfg.text_dim };
            TextInput::Fixed(backend.embed_texts(name, &texts)?.rows)
        }
    };
    let adjacency = build_adjacency(graph, model_cfg.capacity)?;
    Ok(PreparedCategory { name: name.to_string(), text, adjacency, k_s: graph.len(), descriptions: texts })
}

pub fn prepare_category(
    model_cfg: &ModelConfig,
    text_cfg: &TextConfig,
    ds: &Dataset,
    name: &str,
) -> Result<PreparedCategory> {
    let texts = ds.posegraph(name)?.descriptions();
    prepare_category_with_texts(model_cfg, text_cfg, ds, name, texts)
}

pub fn prepare_part(
    model_cfg: &ModelConfig,
    text_cfg: &TextConfig,
    ds: &Dataset,
    part: SplitPart,
) -> Result<Vec<PreparedCategory>> {
    ds.split
        .part(part)
        .iter()
        .map(|name| prepare_category(model_cfg, text_cfg, ds, name))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CategoryEval {
    pub pck: f64,
    pub center_baseline: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub per_category: BTreeMap<String, CategoryEval>,
    pub mean_pck: f64,
    pub mean_center_baseline: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Predicts one sample and returns the K_s×2 coordinates in pixel units.
pub fn predict_pixels<S: Scalar>(
    model: &Model<S>,
    prep: &PreparedCategory,
    pixels: &Array2<f64>,
) -> Result<Array2<f64>> {
    let (h_img, w_img) = pixels.dim();
    let (patches, grid_h, grid_w) = patch_matrix(pixels, model.cfg.patch)?;
    let pred = model.predict(
        &prep.text,
        &ImageInput::Patches(patches),
        grid_h,
        grid_w,
        &prep.adjacency,
        false,
    )?;
    let norm = pred.coords();
    let mut px = norm.slice(s![..prep.k_s, ..]).to_owned();
    for mut row in px.rows_mut() {
        row[0] *= w_img as f64;
        row[1] *= h_img as f64;
    }
    Ok(px)
}

fn sample_pck(pred_px: &Array2<f64>, sample: &DatasetSample) -> Result<f64> {
    pck(
        pred_px,
        &sample.keypoints,
        (sample.bbox.2, sample.bbox.3),
        PCK_THRESHOLD,
        &sample.visibility,
    )
}

/// Mean PCK of a constant prediction at the image center.
fn center_pck(sample: &DatasetSample, image_size: (usize, usize)) -> Result<f64> {
    let (w, h) = image_size;
    let k_s = sample.keypoints.nrows();
    let center = Array2::from_shape_fn((k_s, 2), |(_, j)| {
        if j == 0 { w as f64 / 2.0 } else { h as f64 / 2.0 }
    });
    sample_pck(&center, sample)
}

/// Evaluates prepared categories, transforming each image first. The
/// transform receives (pixels, category, sample index); plain evaluation
/// passes images through untouched.
pub fn evaluate_prepared<S: Scalar>(
    model: &Model<S>,
    ds: &Dataset,
    split_name: &str,
    cats: &[PreparedCategory],
    transform: &dyn Fn(&Array2<f64>, &str, usize) -> Array2<f64>,
) -> Result<EvalReport> {
    let mut per_category = BTreeMap::new();
    for prep in cats {
        let samples = ds.samples(&prep.name)?;
        let mut pck_sum = 0.0;
        let mut base_sum = 0.0;
        for (idx, sample) in samples.iter().enumerate() {
            let pixels = ds.image_pixels(sample)?;
            let pixels = transform(&pixels, &prep.name, idx);
            let pred_px = predict_pixels(model, prep, &pixels)?;
            pck_sum += sample_pck(&pred_px, sample)?;
            base_sum += center_pck(sample, ds.image_size)?;
        }
        let n = samples.len();
        if n == 0 {
            return Err(Error::data(format!("category `{}` has no samples", prep.name)));
        }
        per_category.insert(
            prep.name.clone(),
            CategoryEval {
                pck: pck_sum / n as f64,
                center_baseline: base_sum / n as f64,
                samples: n,
            },
        );
    }
    if per_category.is_empty() {
        return Err(Error::data(format!("split `{split_name}` has no categories")));
    }
    let n = per_category.len() as f64;
    let mean_pck = per_category.values().map(|c| c.pck).sum::<f64>() / n;
    let mean_center_baseline =
        per_category.values().map(|c| c.center_baseline).sum::<f64>() / n;
    Ok(EvalReport {
        split: split_name.to_string(),
        per_category,
        mean_pck,
        mean_center_baseline,
    })
}

pub fn split_part_name(part: SplitPart) -> &'static str {
    match part {
        SplitPart::Train => "train",
        SplitPart::Val => "val",
        SplitPart::Test => "test",
    }
}

pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    text_cfg: &TextConfig,
    ds: &Dataset,
    part: SplitPart,
) -> Result<EvalReport> {
    let cats = prepare_part(&model.cfg, text_cfg, ds, part)?;
    evaluate_prepared(model, ds, split_part_name(part), &cats, &|img, _, _| img.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, load_dataset, CategorySplit, SyntheticSpec};
    use crate::harness::config::RunConfig;

    fn tiny_setup() -> (tempfile::TempDir, Dataset, Model<f32>, TextConfig) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            seed: 5,
            n_categories: 4,
            samples_per_category: 3,
            image_size: 32,
        };
        generate_synthetic(dir.path(), &spec).unwrap();
        let split = CategorySplit {
            train: vec!["beetle".into(), "quadruped".into()],
            val: vec!["bird".into()],
            test: vec!["fish".into()],
        };
        let ds = load_dataset(dir.path(), split).unwrap();
        let mut cfg = RunConfig::desk_preset();
        cfg.model.capacity = 12;
        cfg.model.model_dim = 16;
        cfg.model.text_dim = 16;
        cfg.model.image_dim = 16;
        cfg.model.patch = 8;
        cfg.model.encoder.model_dim = 16;
        cfg.model.encoder.num_blocks = 1;
        cfg.model.encoder.num_heads = 2;
        cfg.model.decoder.model_dim = 16;
        cfg.model.decoder.num_layers = 1;
        cfg.model.decoder.num_heads = 2;
        let model = Model::<f32>::new(cfg.model.clone(), 1).unwrap();
        (dir, ds, model, cfg.text)
    }

    #[test]
    fn report_lists_exactly_the_splits_categories() {
        let (_dir, ds, model, text_cfg) = tiny_setup();
        let report = evaluate(&model, &text_cfg, &ds, SplitPart::Train).unwrap();
        let keys: Vec<&str> = report.per_category.keys().map(|s| s.as_str()).collect();
        assert_eq!(keys, vec!["beetle", "quadruped"]);
        assert_eq!(report.split, "train");
        for cat in report.per_category.values() {
            assert_eq!(cat.samples, 3);
            assert!(cat.pck >= 0.0 && cat.pck <= 1.0);
        }
    }

    #[test]
    fn oracle_predictions_score_perfect_pck() {
        let (_dir, ds, _model, _text) = tiny_setup();
        let samples = ds.samples("bird").unwrap();
        for sample in samples {
            let oracle = sample.keypoints.clone();
            assert_eq!(sample_pck(&oracle, sample).unwrap(), 1.0);
        }
    }

    #[test]
    fn center_baseline_beats_nothing_but_stays_in_range() {
        let (_dir, ds, model, text_cfg) = tiny_setup();
        let report = evaluate(&model, &text_cfg, &ds, SplitPart::Val).unwrap();
        assert!(report.mean_center_baseline >= 0.0);
        assert!(report.mean_center_baseline <= 1.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (_dir, ds, model, text_cfg) = tiny_setup();
        let a = evaluate(&model, &text_cfg, &ds, SplitPart::Test).unwrap();
        let b = evaluate(&model, &text_cfg, &ds, SplitPart::Test).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn substituted_description_count_must_match_the_graph() {
        let (_dir, ds, model, text_cfg) = tiny_setup();
        let err = prepare_category_with_texts(
            &model.cfg,
            &text_cfg,
            &ds,
            "bird",
            vec!["head top".into()],
        )
        .err()
        .expect("one description cannot cover the whole graph");
        assert_eq!(err.exit_code(), 2);
    }
}
