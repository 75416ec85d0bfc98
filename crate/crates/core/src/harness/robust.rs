//! Robustness harness: re-runs evaluation with perturbed keypoint
//! descriptions (synonym substitutions from the shipped table, single-word
//! typos, or an identity control) and reports, per keypoint, the mean
//! displacement between perturbed and unperturbed predictions.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PerturbMode, SplitPart, SynonymTable};
use crate::embed::fnv1a;
use crate::error::{Error, Result};
use crate::harness::config::TextConfig;
use crate::harness::eval::{
    predict_pixels, prepare_category, prepare_category_with_texts, split_part_name,
};
use crate::model::Model;
use crate::objectives::pck;
use crate::scalar::Scalar;

/// One CSV row: how far one keypoint's predictions moved under a mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DisplacementRow {
    pub mode: String,
    pub category: String,
    pub keypoint: usize,
    pub description: String,
    pub mean_displacement_px: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: String,
    pub mean_pck: f64,
    pub per_category: BTreeMap<String, f64>,
    pub displacement: Vec<DisplacementRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub split: String,
    pub unperturbed_mean_pck: f64,
    pub modes: Vec<ModeReport>,
}

impl RobustnessReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn mode_name(mode: PerturbMode) -> &'static str {
    match mode {
        PerturbMode::Identity => "identity",
        PerturbMode::Synonym => "synonym",
        PerturbMode::Typo => "typo",
    }
}

fn mean_displacements(
    plain: &[Array2<f64>],
    perturbed: &[Array2<f64>],
    k_s: usize,
) -> Vec<f64> {
    let mut sums = vec![0.0; k_s];
    for (a, b) in plain.iter().zip(perturbed) {
        for i in 0..k_s {
            let dx = a[[i, 0]] - b[[i, 0]];
            let dy = a[[i, 1]] - b[[i, 1]];
            sums[i] += (dx * dx + dy * dy).sqrt();
        }
    }
    sums.iter().map(|s| s / plain.len() as f64).collect()
}

/// Evaluates every requested mode against the unperturbed predictions on
/// the same split. `table` is required by synonym mode only.
pub fn robustness<S: Scalar>(
    model: &Model<S>,
    text_cfg: &TextConfig,
    ds: &Dataset,
    part: SplitPart,
    modes: &[PerturbMode],
    seed: u64,
    table: Option<&SynonymTable>,
) -> Result<RobustnessReport> {
    if modes.is_empty() {
        return Err(Error::data("robustness needs at least one perturbation mode"));
    }
    if modes.contains(&PerturbMode::Synonym) && table.is_none() {
        return Err(Error::data("synonym mode requires a synonym table"));
    }
    let names = ds.split.part(part).to_vec();
    if names.is_empty() {
        return Err(Error::data(format!(
            "split `{}` has no categories",
            split_part_name(part)
        )));
    }

    // Unperturbed predictions once per category; every mode compares
    // against these.
    struct PlainCategory {
        name: String,
        k_s: usize,
        descriptions: Vec<String>,
        preds: Vec<Array2<f64>>,
        pck_mean: f64,
    }
    let mut plain = Vec::new();
    for name in &names {
        let prep = prepare_category(&model.cfg, text_cfg, ds, name)?;
        let samples = ds.samples(name)?;
        let mut preds = Vec::with_capacity(samples.len());
        let mut pck_sum = 0.0;
        for sample in samples {
            let pred = predict_pixels(model, &prep, &ds.image_pixels(sample)?)?;
            pck_sum += pck(
                &pred,
                &sample.keypoints,
                (sample.bbox.2, sample.bbox.3),
                crate::harness::eval::PCK_THRESHOLD,
                &sample.visibility,
            )?;
            preds.push(pred);
        }
        plain.push(PlainCategory {
            name: name.clone(),
            k_s: prep.k_s,
            descriptions: prep.descriptions,
            preds,
            pck_mean: pck_sum / samples.len() as f64,
        });
    }
    let unperturbed_mean_pck =
        plain.iter().map(|c| c.pck_mean).sum::<f64>() / plain.len() as f64;

    let mut mode_reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut per_category = BTreeMap::new();
        let mut displacement = Vec::new();
        for cat in &plain {
            // The perturbation seed mixes the category so typo edits differ
            // across categories but reproduce across runs.
            let cat_seed = fnv1a(seed, &cat.name);
            let texts =
                crate::data::text_perturb(&cat.descriptions, mode, cat_seed, table)?;
            let prep = prepare_category_with_texts(&model.cfg, text_cfg, ds, &cat.name, texts)?;
            let samples = ds.samples(&cat.name)?;
            let mut preds = Vec::with_capacity(samples.len());
            let mut pck_sum = 0.0;
            for sample in samples {
                let pred = predict_pixels(model, &prep, &ds.image_pixels(sample)?)?;
                pck_sum += pck(
                    &pred,
                    &sample.keypoints,
                    (sample.bbox.2, sample.bbox.3),
                    crate::harness::eval::PCK_THRESHOLD,
                    &sample.visibility,
                )?;
                preds.push(pred);
            }
            per_category.insert(cat.name.clone(), pck_sum / samples.len() as f64);
            for (i, d) in mean_displacements(&cat.preds, &preds, cat.k_s).into_iter().enumerate()
            {
                displacement.push(DisplacementRow {
                    mode: mode_name(mode).to_string(),
                    category: cat.name.clone(),
                    keypoint: i,
                    description: prep.descriptions[i].clone(),
                    mean_displacement_px: d,
                });
            }
        }
        let mean_pck = per_category.values().sum::<f64>() / per_category.len() as f64;
        mode_reports.push(ModeReport {
            mode: mode_name(mode).to_string(),
            mean_pck,
            per_category,
            displacement,
        });
    }
    Ok(RobustnessReport {
        split: split_part_name(part).to_string(),
        unperturbed_mean_pck,
        modes: mode_reports,
    })
}

pub fn displacement_csv(report: &RobustnessReport) -> String {
    let mut out = String::from("mode,category,keypoint,description,mean_displacement_px\n");
    for mode in &report.modes {
        for row in &mode.displacement {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.mode, row.category, row.keypoint, row.description, row.mean_displacement_px
            ));
        }
    }
    out
}
