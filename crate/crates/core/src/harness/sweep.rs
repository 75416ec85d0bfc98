//! Masking sweep: evaluates a model on masked copies of every image at
//! each requested fraction and emits plot-ready CSV. The fraction-0 row
//! goes through the identical code path as plain evaluation, so the two
//! agree exactly.

use serde::{Deserialize, Serialize};

use crate::data::{apply_mask, Dataset, SplitPart};
use crate::embed::fnv1a;
use crate::error::{Error, Result};
use crate::harness::config::TextConfig;
use crate::harness::eval::{evaluate_prepared, prepare_part, split_part_name};
use crate::model::Model;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub mean_pck: f64,
}

/// Per-sample mask seed: stable across runs, distinct across fractions so
/// one sweep never reuses rectangles between rows.
fn mask_seed(base: u64, fraction: f64, category: &str, index: usize) -> u64 {
    let key = format!("{category}/{index}/{}", fraction.to_bits());
    fnv1a(base, &key)
}

pub fn mask_sweep<S: Scalar>(
    model: &Model<S>,
    text_cfg: &TextConfig,
    ds: &Dataset,
    part: SplitPart,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if fractions.is_empty() {
        return Err(Error::data("mask sweep needs at least one fraction"));
    }
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) || !f.is_finite() {
            return Err(Error::data(format!("mask fraction {f} is outside [0, 1]")));
        }
    }
    let cats = prepare_part(&model.cfg, text_cfg, ds, part)?;
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let report = evaluate_prepared(
            model,
            ds,
            split_part_name(part),
            &cats,
            &|img, cat, idx| apply_mask(img, fraction, mask_seed(seed, fraction, cat, idx)),
        )?;
        rows.push(SweepRow { fraction, mean_pck: report.mean_pck });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("fraction,mean_pck\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.fraction, r.mean_pck));
    }
    out
}
