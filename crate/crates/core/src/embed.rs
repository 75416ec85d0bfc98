//! Text and image embedding backends plus the projection into the shared
//! model width.
//!
//! The toy backends are deterministic and fully offline: a seeded hash
//! embedder stands in for a pretrained text encoder, and a learned per-patch
//! linear map stands in for a pretrained vision backbone. External backends
//! load precomputed features from the binary container in [`crate::featfile`].

use ndarray::{s, Array2};
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::featfile::{read_feature_file, FeatShape};

/// Default seed for the toy text embedder. Deliberately independent of the
/// training seed: the "pretrained" text space must not change across runs.
/// The value is chosen so that every word used by the built-in synthetic
/// templates and the shipped synonym table lands in its own signed bucket at
/// width 64 (and therefore at any multiple of 64), and so that no two words
/// of any single description share a bucket and could cancel in the sum.
pub const DEFAULT_TEXT_SEED: u64 = 0x74657874_00000029;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// Seeded FNV-1a-64; the deterministic workhorse behind the toy text
/// embedder and other name-keyed derivations.
pub fn fnv1a(seed: u64, word: &str) -> u64 {
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(0x9E3779B97F4A7C15);
    for b in word.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hash embedding for one description: lowercased whitespace tokens each map
/// to a signed unit bucket in `c_t` dimensions; the word vectors are summed
/// and L2-normalized, so descriptions sharing words share embedding mass.
pub fn toy_text_embed(description: &str, c_t: usize, seed: u64) -> Result<Array2<f64>> {
    if c_t < 8 {
        return Err(Error::data(format!("text embedding dim {c_t} is below the minimum of 8")));
    }
    let lowered = description.to_lowercase();
    let words: Vec<&str> = lowered.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::data(format!(
            "description `{description}` has no tokens after trimming"
        )));
    }
    let mut v = Array2::<f64>::zeros((1, c_t));
    for w in &words {
        let h = fnv1a(seed, w);
        let bucket = ((h >> 1) % c_t as u64) as usize;
        let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
        v[[0, bucket]] += sign;
    }
    let norm_sq: f64 = v.iter().map(|x| x * x).sum();
    if norm_sq < 1e-24 {
        // Exact cancellation between words; fall back to a unit vector keyed
        // to the whole description so the embedding stays deterministic.
        let h = fnv1a(seed, words.join(" ").as_str());
        let bucket = ((h >> 1) % c_t as u64) as usize;
        v.fill(0.0);
        v[[0, bucket]] = 1.0;
        return Ok(v);
    }
    let inv = 1.0 / norm_sq.sqrt();
    v.mapv_inplace(|x| x * inv);
    Ok(v)
}

/// Stacked [`toy_text_embed`] rows, one per description.
pub fn toy_text_matrix(descriptions: &[String], c_t: usize, seed: u64) -> Result<Array2<f64>> {
    if descriptions.is_empty() {
        return Err(Error::data("cannot embed an empty description list"));
    }
    let mut m = Array2::<f64>::zeros((descriptions.len(), c_t));
    for (i, d) in descriptions.iter().enumerate() {
        let row = toy_text_embed(d, c_t, seed)?;
        m.row_mut(i).assign(&row.row(0));
    }
    Ok(m)
}

pub fn l2_normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let norm_sq: f64 = row.iter().map(|x| x * x).sum();
        let inv = 1.0 / (norm_sq + 1e-12).sqrt();
        row.mapv_inplace(|x| x * inv);
    }
}

/// K_s×C_t text embeddings with unit-norm rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingMatrix {
    pub rows: Array2<f64>,
}

pub enum TextBackend {
    /// Hash embedder followed by a trainable (freezable) C_t×C_t head.
    Toy { c_t: usize, seed: u64, head: Array2<f64> },
    /// Per-category precomputed rows at `<dir>/text_<category>.feat`.
    External { dir: PathBuf, c_t: usize },
}

impl TextBackend {
    /// One L2-normalized row per description; deterministic given the
    /// backend state and inputs.
    pub fn embed_texts(
        &self,
        category: &str,
        descriptions: &[String],
    ) -> Result<TextEmbeddingMatrix> {
        if descriptions.is_empty() {
            return Err(Error::data("cannot embed an empty description list"));
        }
        let mut rows = match self {
            TextBackend::Toy { c_t, seed, head } => {
                let raw = toy_text_matrix(descriptions, *c_t, *seed)?;
                raw.dot(head)
            }
            TextBackend::External { dir, c_t } => {
                let path = dir.join(format!("text_{category}.feat"));
                let file = read_feature_file(&path).map_err(|e| {
                    Error::data(format!(
                        "text backend for `{}` (first description `{}`): {e}",
                        category, descriptions[0]
                    ))
                })?;
                if file.data.ncols() != *c_t {
                    return Err(Error::data(format!(
                        "{}: embedding dim {} does not match configured C_t={c_t}",
                        path.display(),
                        file.data.ncols()
                    )));
                }
                if file.data.nrows() != descriptions.len() {
                    let offender = descriptions
                        .get(file.data.nrows())
                        .map(String::as_str)
                        .unwrap_or(descriptions.last().unwrap());
                    return Err(Error::data(format!(
                        "{}: has {} rows for {} descriptions (first unmatched: `{offender}`)",
                        path.display(),
                        file.data.nrows(),
                        descriptions.len()
                    )));
                }
                file.data
            }
        };
        l2_normalize_rows(&mut rows);
        Ok(TextEmbeddingMatrix { rows })
    }
}

/// (h·w)×C_i image tokens in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureMap {
    pub tokens: Array2<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Flattens a grayscale image (values in [0,1]) into non-overlapping p×p
/// patch rows: token (r, c) is row r·grid_w + c, pixels row-major inside
/// the patch.
pub fn patch_matrix(pixels: &Array2<f64>, patch: usize) -> Result<(Array2<f64>, usize, usize)> {
    let (h_img, w_img) = pixels.dim();
    if patch == 0 || h_img % patch != 0 || w_img % patch != 0 {
        return Err(Error::data(format!(
            "image {h_img}x{w_img} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (grid_h, grid_w) = (h_img / patch, w_img / patch);
    let mut m = Array2::<f64>::zeros((grid_h * grid_w, patch * patch));
    for r in 0..grid_h {
        for c in 0..grid_w {
            let block = pixels.slice(s![r * patch..(r + 1) * patch, c * patch..(c + 1) * patch]);
            for (k, v) in block.iter().enumerate() {
                m[[r * grid_w + c, k]] = *v;
            }
        }
    }
    Ok((m, grid_h, grid_w))
}

pub enum ImageBackend {
    /// Trainable linear map from p² patch pixels to C_i.
    Toy { patch: usize, w: Array2<f64>, b: Array2<f64> },
    /// Precomputed grid at `<dir>/<image_key>.feat`.
    External { dir: PathBuf, c_i: usize },
}

impl ImageBackend {
    pub fn embed_image(&self, image_key: &str, pixels: &Array2<f64>) -> Result<ImageFeatureMap> {
        match self {
            ImageBackend::Toy { patch, w, b } => {
                let (patches, grid_h, grid_w) = patch_matrix(pixels, *patch)?;
                let tokens = patches.dot(w) + b;
                Ok(ImageFeatureMap { tokens, grid_h, grid_w })
            }
            ImageBackend::External { dir, c_i } => {
                let path = dir.join(format!("{image_key}.feat"));
                let file = read_feature_file(&path)?;
                let FeatShape::Grid { grid_h, grid_w } = file.shape else {
                    return Err(Error::data(format!(
                        "{}: expected a grid-shaped feature file for an image",
                        path.display()
                    )));
                };
                if file.data.ncols() != *c_i {
                    return Err(Error::data(format!(
                        "{}: feature dim {} does not match configured C_i={c_i}",
                        path.display(),
                        file.data.ncols()
                    )));
                }
                Ok(ImageFeatureMap { tokens: file.data, grid_h, grid_w })
            }
        }
    }
}

/// Both token streams mapped into the shared width C, support zero-padded
/// to K rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedFeatures {
    pub support: Array2<f64>,
    pub query: Array2<f64>,
    pub keypoint_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    pub text_w: Array2<f64>,
    pub text_b: Array2<f64>,
    pub image_w: Array2<f64>,
    pub image_b: Array2<f64>,
}

/// Affine C_t→C on text rows then zero-pad to K; per-token affine C_i→C on
/// image tokens (a 1×1 convolution over the grid is exactly this map).
pub fn project_features(
    text: &TextEmbeddingMatrix,
    image: &ImageFeatureMap,
    k: usize,
    weights: &ProjectionWeights,
) -> Result<ProjectedFeatures> {
    let k_s = text.rows.nrows();
    if k < k_s {
        return Err(Error::data(format!(
            "category has {k_s} keypoints but the configured capacity is K={k}"
        )));
    }
    let c = weights.text_w.ncols();
    let projected = text.rows.dot(&weights.text_w) + &weights.text_b;
    let mut support = Array2::<f64>::zeros((k, c));
    support.slice_mut(s![..k_s, ..]).assign(&projected);
    let query = image.tokens.dot(&weights.image_w) + &weights.image_b;
    let mut keypoint_mask = vec![false; k];
    keypoint_mask[..k_s].fill(true);
    Ok(ProjectedFeatures { support, query, keypoint_mask })
}
