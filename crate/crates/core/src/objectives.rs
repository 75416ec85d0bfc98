//! Training objectives and evaluation: ground-truth heatmap construction,
//! the sigmoid-heatmap loss, the per-layer coordinate offset loss, their
//! weighted total, and PCK scoring.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::decoder::LayerOutputs;
use crate::error::{Error, Result};
use crate::proposer::SimilarityHeatmaps;
use crate::scalar::{lit, mat_from_f64, Scalar};
use crate::tape::{Tape, Var};

/// How the per-pixel heatmap discrepancy is accumulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapNorm {
    L1,
    SquaredL2,
}

impl Default for HeatmapNorm {
    fn default() -> Self {
        HeatmapNorm::L1
    }
}

/// Target heatmaps, one row per keypoint, flattened row-major over the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthHeatmaps {
    pub maps: Array2<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Gaussian targets in cell units. A keypoint at normalized (x, y) sits at
/// continuous cell position (x·grid_w − 0.5, y·grid_h − 0.5), so a keypoint
/// exactly on a cell center scores 1.0 there. Invisible keypoints get a
/// zero map.
pub fn gt_heatmap(
    coords: &Array2<f64>,
    visibility: &[bool],
    grid_h: usize,
    grid_w: usize,
    sigma_g: f64,
) -> Result<GroundTruthHeatmaps> {
    if sigma_g <= 0.0 {
        return Err(Error::data(format!(
            "gaussian width must be positive, got {sigma_g}"
        )));
    }
    let k = visibility.len();
    assert_eq!(coords.dim(), (k, 2), "coordinate rows must match the mask length");
    let mut maps = Array2::<f64>::zeros((k, grid_h * grid_w));
    let inv = 1.0 / (2.0 * sigma_g * sigma_g);
    for i in 0..k {
        if !visibility[i] {
            continue;
        }
        let (x, y) = (coords[[i, 0]], coords[[i, 1]]);
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::data(format!(
                "visible keypoint {i} at ({x}, {y}) is outside the unit square"
            )));
        }
        let cx = x * grid_w as f64 - 0.5;
        let cy = y * grid_h as f64 - 0.5;
        for r in 0..grid_h {
            for c in 0..grid_w {
                let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                maps[[i, r * grid_w + c]] = (-d2 * inv).exp();
            }
        }
    }
    Ok(GroundTruthHeatmaps { maps, grid_h, grid_w })
}

fn visible_count(mask: &[bool]) -> Result<usize> {
    let k_vis = mask.iter().filter(|&&m| m).count();
    if k_vis == 0 {
        return Err(Error::data("every keypoint is masked; nothing to supervise"));
    }
    Ok(k_vis)
}

/// Mean per-pixel discrepancy between sigmoid(scores) and the targets,
/// averaged over unmasked keypoints and grid cells.
pub fn heatmap_loss(
    scores: &SimilarityHeatmaps,
    gt: &GroundTruthHeatmaps,
    mask: &[bool],
    norm: HeatmapNorm,
) -> Result<f64> {
    assert_eq!(scores.scores.dim(), gt.maps.dim(), "score and target shapes differ");
    assert_eq!(scores.scores.nrows(), mask.len());
    let k_vis = visible_count(mask)?;
    let mut total = 0.0;
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        for (s, h) in scores.scores.row(i).iter().zip(gt.maps.row(i)) {
            let d = 1.0 / (1.0 + (-s).exp()) - h;
            total += match norm {
                HeatmapNorm::L1 => d.abs(),
                HeatmapNorm::SquaredL2 => d * d,
            };
        }
    }
    Ok(total / (k_vis * gt.grid_h * gt.grid_w) as f64)
}

/// Tape version of [`heatmap_loss`]; `scores` is a K×(grid_h·grid_w) node.
pub fn heatmap_loss_on_tape<S: Scalar>(
    tape: &Tape<S>,
    scores: Var,
    gt: &GroundTruthHeatmaps,
    mask: &[bool],
    norm: HeatmapNorm,
) -> Result<Var> {
    assert_eq!(tape.shape(scores), gt.maps.dim());
    let k_vis = visible_count(mask)?;
    let predicted = tape.sigmoid(scores);
    let target = tape.constant(mat_from_f64::<S>(&gt.maps));
    let diff = tape.sub(predicted, target);
    let per_pixel = match norm {
        HeatmapNorm::L1 => tape.abs(diff),
        HeatmapNorm::SquaredL2 => tape.mul(diff, diff),
    };
    let kept = if mask.iter().all(|&m| m) {
        per_pixel
    } else {
        let col = Array2::from_shape_fn((mask.len(), 1), |(i, _)| {
            if mask[i] { S::one() } else { S::zero() }
        });
        tape.mask_rows(per_pixel, &col)
    };
    let total = tape.sum_all(kept);
    Ok(tape.scale(total, lit::<S>(1.0 / (k_vis * gt.grid_h * gt.grid_w) as f64)))
}

/// Per-layer L1 coordinate error summed over unmasked keypoints, averaged
/// over layers. Masked keypoints contribute nothing.
pub fn offset_loss(outputs: &LayerOutputs, gt_coords: &Array2<f64>, mask: &[bool]) -> f64 {
    let layers = outputs.coords_per_layer.len();
    assert!(layers > 0, "offset loss needs at least one layer");
    let mut total = 0.0;
    for layer in &outputs.coords_per_layer {
        assert_eq!(layer.dim(), gt_coords.dim());
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                continue;
            }
            total += (layer[[i, 0]] - gt_coords[[i, 0]]).abs()
                + (layer[[i, 1]] - gt_coords[[i, 1]]).abs();
        }
    }
    total / layers as f64
}

/// Tape version of [`offset_loss`] over per-layer coordinate nodes.
pub fn offset_loss_on_tape<S: Scalar>(
    tape: &Tape<S>,
    coords_per_layer: &[Var],
    gt_coords: &Array2<f64>,
    mask: &[bool],
) -> Var {
    assert!(!coords_per_layer.is_empty(), "offset loss needs at least one layer");
    let target = tape.constant(mat_from_f64::<S>(gt_coords));
    let all_real = mask.iter().all(|&m| m);
    let col = (!all_real).then(|| {
        Array2::from_shape_fn((mask.len(), 1), |(i, _)| {
            if mask[i] { S::one() } else { S::zero() }
        })
    });
    let mut total: Option<Var> = None;
    for &layer in coords_per_layer {
        let err = tape.abs(tape.sub(layer, target));
        let kept = match &col {
            Some(c) => tape.mask_rows(err, c),
            None => err,
        };
        let s = tape.sum_all(kept);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    tape.scale(total.unwrap(), lit::<S>(1.0 / coords_per_layer.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub heatmap: f64,
    pub offset: f64,
    pub total: f64,
    pub lambda_heatmap: f64,
}

pub fn total_loss(heatmap: f64, offset: f64, lambda_heatmap: f64) -> LossBreakdown {
    LossBreakdown {
        heatmap,
        offset,
        total: lambda_heatmap * heatmap + offset,
        lambda_heatmap,
    }
}

pub fn total_loss_on_tape<S: Scalar>(
    tape: &Tape<S>,
    heatmap: Var,
    offset: Var,
    lambda_heatmap: f64,
) -> Var {
    tape.add(tape.scale(heatmap, lit::<S>(lambda_heatmap)), offset)
}

/// Fraction of unmasked keypoints whose prediction lies within
/// threshold · max(bbox_w, bbox_h) pixels of the ground truth.
pub fn pck(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    bbox: (f64, f64),
    threshold: f64,
    mask: &[bool],
) -> Result<f64> {
    assert_eq!(pred.dim(), gt.dim());
    assert_eq!(pred.nrows(), mask.len());
    assert!(threshold > 0.0, "threshold must be positive");
    let norm = bbox.0.max(bbox.1);
    if norm <= 0.0 {
        return Err(Error::data(format!(
            "degenerate bounding box {}x{}",
            bbox.0, bbox.1
        )));
    }
    let k_vis = visible_count(mask)?;
    let limit = threshold * norm;
    let mut correct = 0usize;
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        let dx = pred[[i, 0]] - gt[[i, 0]];
        let dy = pred[[i, 1]] - gt[[i, 1]];
        if (dx * dx + dy * dy).sqrt() <= limit {
            correct += 1;
        }
    }
    Ok(correct as f64 / k_vis as f64)
}
