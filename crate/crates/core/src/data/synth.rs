//! Synthetic articulated-skeleton dataset. Each category is a distinct
//! topology of named joints; keypoint names come from a shared vocabulary
//! and recur across categories with consistent geometric meaning, so a
//! model can transfer name→appearance associations to unseen categories.
//! Every joint renders as a blob whose style is keyed to the full keypoint
//! name, identically in every category that uses the name.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::fnv1a;
use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::posegraph::{serialize_posegraph, PoseGraph};

use super::records::{write_records, DatasetSample};

#[derive(Clone, Copy, Debug)]
pub struct JointSpec {
    pub name: &'static str,
    /// Index into the template's joint list; `None` only for the root.
    pub parent: Option<usize>,
    /// Offset from the parent in the canonical frame (x right, y down;
    /// the creature faces up, tail down, left limbs at negative x).
    pub dx: f64,
    pub dy: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Template {
    pub category: &'static str,
    pub joints: &'static [JointSpec],
}

impl Template {
    pub fn names(&self) -> Vec<String> {
        self.joints.iter().map(|j| j.name.to_string()).collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.joints
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.parent.map(|p| (p, i)))
            .collect()
    }

    pub fn posegraph(&self) -> Result<PoseGraph> {
        PoseGraph::new(self.category, self.names(), self.edges())
    }
}

const fn root(name: &'static str) -> JointSpec {
    JointSpec { name, parent: None, dx: 0.0, dy: 0.0 }
}

const fn joint(name: &'static str, parent: usize, dx: f64, dy: f64) -> JointSpec {
    JointSpec { name, parent: Some(parent), dx, dy }
}

static BEETLE: &[JointSpec] = &[
    root("body middle"),
    joint("shoulder center", 0, 0.0, -1.0),
    joint("hip center", 0, 0.0, 1.0),
    joint("head top", 1, 0.0, -0.9),
    joint("left front leg tip", 1, -1.2, -0.3),
    joint("right front leg tip", 1, 1.2, -0.3),
    joint("left back leg tip", 2, -1.2, 0.3),
    joint("right back leg tip", 2, 1.2, 0.3),
];

static QUADRUPED: &[JointSpec] = &[
    root("hip center"),
    joint("body middle", 0, 0.0, -0.9),
    joint("shoulder center", 1, 0.0, -0.9),
    joint("head top", 2, 0.0, -0.8),
    joint("nose tip", 3, 0.45, -0.5),
    joint("tail tip", 0, 0.0, 0.9),
    joint("left front knee", 2, -0.9, 0.25),
    joint("left front leg tip", 6, -0.5, 0.6),
    joint("right front knee", 2, 0.9, 0.25),
    joint("right front leg tip", 8, 0.5, 0.6),
    joint("left back leg tip", 0, -1.1, 0.5),
    joint("right back leg tip", 0, 1.1, 0.5),
];

static BIRD: &[JointSpec] = &[
    root("body middle"),
    joint("shoulder center", 0, 0.0, -0.8),
    joint("head top", 1, 0.0, -0.7),
    joint("nose tip", 2, 0.5, -0.35),
    joint("left wing tip", 1, -1.5, 0.15),
    joint("right wing tip", 1, 1.5, 0.15),
    joint("tail base", 0, 0.0, 0.9),
    joint("tail tip", 6, 0.0, 0.8),
];

static FISH: &[JointSpec] = &[
    root("body middle"),
    joint("nose tip", 0, 0.0, -1.3),
    joint("left fin tip", 0, -1.1, 0.2),
    joint("right fin tip", 0, 1.1, 0.2),
    joint("tail base", 0, 0.0, 1.0),
    joint("tail tip", 4, 0.0, 0.8),
];

static SPIDER: &[JointSpec] = &[
    root("body middle"),
    joint("head top", 0, 0.0, -0.85),
    joint("left front leg tip", 0, -1.3, -0.6),
    joint("right front leg tip", 0, 1.3, -0.6),
    joint("left middle leg tip", 0, -1.5, 0.1),
    joint("right middle leg tip", 0, 1.5, 0.1),
    joint("left back leg tip", 0, -1.2, 0.8),
    joint("right back leg tip", 0, 1.2, 0.8),
];

static SNAKE: &[JointSpec] = &[
    root("head top"),
    joint("shoulder center", 0, 0.5, 0.8),
    joint("body middle", 1, -0.5, 0.8),
    joint("hip center", 2, 0.5, 0.8),
    joint("tail tip", 3, -0.4, 0.9),
];

static CRAB: &[JointSpec] = &[
    root("body middle"),
    joint("left eye", 0, -0.35, -0.8),
    joint("right eye", 0, 0.35, -0.8),
    joint("left arm tip", 0, -1.1, -0.5),
    joint("right arm tip", 0, 1.1, -0.5),
    joint("left front leg tip", 0, -1.3, 0.25),
    joint("right front leg tip", 0, 1.3, 0.25),
    joint("left back leg tip", 0, -1.0, 0.85),
    joint("right back leg tip", 0, 1.0, 0.85),
];

static BUTTERFLY: &[JointSpec] = &[
    root("body middle"),
    joint("head top", 0, 0.0, -0.9),
    joint("left antenna tip", 1, -0.5, -0.55),
    joint("right antenna tip", 1, 0.5, -0.55),
    joint("left wing tip", 0, -1.4, -0.1),
    joint("right wing tip", 0, 1.4, -0.1),
    joint("tail tip", 0, 0.0, 1.0),
];

static LIZARD: &[JointSpec] = &[
    root("hip center"),
    joint("body middle", 0, 0.0, -0.85),
    joint("shoulder center", 1, 0.0, -0.85),
    joint("head top", 2, 0.0, -0.7),
    joint("nose tip", 3, 0.4, -0.45),
    joint("left front leg tip", 2, -1.0, -0.2),
    joint("right front leg tip", 2, 1.0, -0.2),
    joint("left back leg tip", 0, -1.0, 0.35),
    joint("right back leg tip", 0, 1.0, 0.35),
    joint("tail base", 0, 0.0, 0.8),
    joint("tail tip", 9, -0.4, 0.85),
];

static SCORPION: &[JointSpec] = &[
    root("body middle"),
    joint("shoulder center", 0, 0.0, -0.8),
    joint("head top", 1, 0.0, -0.6),
    joint("left elbow", 1, -0.9, -0.45),
    joint("left arm tip", 3, -0.55, -0.55),
    joint("right elbow", 1, 0.9, -0.45),
    joint("right arm tip", 5, 0.55, -0.55),
    joint("hip center", 0, 0.0, 0.8),
    joint("tail base", 7, 0.35, 0.75),
    joint("tail tip", 8, 0.5, -0.6),
];

static ANT: &[JointSpec] = &[
    root("head top"),
    joint("left antenna tip", 0, -0.55, -0.5),
    joint("right antenna tip", 0, 0.55, -0.5),
    joint("shoulder center", 0, 0.0, 0.75),
    joint("body middle", 3, 0.0, 0.8),
    joint("hip center", 4, 0.0, 0.85),
    joint("left middle leg tip", 4, -1.2, 0.0),
    joint("right middle leg tip", 4, 1.2, 0.0),
    joint("left back leg tip", 5, -1.0, 0.6),
    joint("right back leg tip", 5, 1.0, 0.6),
];

static RAY: &[JointSpec] = &[
    root("body middle"),
    joint("nose tip", 0, 0.0, -1.0),
    joint("left wing tip", 0, -1.5, 0.0),
    joint("right wing tip", 0, 1.5, 0.0),
    joint("tail base", 0, 0.0, 0.85),
    joint("tail tip", 4, 0.15, 0.95),
];

static WORM: &[JointSpec] = &[
    root("head top"),
    joint("body middle", 0, 0.4, 0.95),
    joint("hip center", 1, -0.4, 0.95),
    joint("tail tip", 2, 0.35, 1.0),
];

static DRAGONFLY: &[JointSpec] = &[
    root("body middle"),
    joint("head top", 0, 0.0, -0.85),
    joint("left eye", 1, -0.35, -0.4),
    joint("right eye", 1, 0.35, -0.4),
    joint("left wing tip", 0, -1.5, -0.3),
    joint("right wing tip", 0, 1.5, -0.3),
    joint("tail base", 0, 0.0, 0.9),
    joint("tail tip", 6, 0.0, 0.9),
];

static TEMPLATES: &[Template] = &[
    Template { category: "beetle", joints: BEETLE },
    Template { category: "quadruped", joints: QUADRUPED },
    Template { category: "bird", joints: BIRD },
    Template { category: "fish", joints: FISH },
    Template { category: "spider", joints: SPIDER },
    Template { category: "snake", joints: SNAKE },
    Template { category: "crab", joints: CRAB },
    Template { category: "butterfly", joints: BUTTERFLY },
    Template { category: "lizard", joints: LIZARD },
    Template { category: "scorpion", joints: SCORPION },
    Template { category: "ant", joints: ANT },
    Template { category: "ray", joints: RAY },
    Template { category: "worm", joints: WORM },
    Template { category: "dragonfly", joints: DRAGONFLY },
];

pub fn built_in_templates() -> &'static [Template] {
    TEMPLATES
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_categories")]
    pub n_categories: usize,
    #[serde(default = "default_samples")]
    pub samples_per_category: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_seed() -> u64 {
    7
}
fn default_categories() -> usize {
    12
}
fn default_samples() -> usize {
    100
}
fn default_image_size() -> usize {
    64
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: default_seed(),
            n_categories: default_categories(),
            samples_per_category: default_samples(),
            image_size: default_image_size(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationSummary {
    pub categories: Vec<String>,
    pub samples_per_category: usize,
    pub image_size: usize,
}

const STYLE_SEED: u64 = 0x626c_6f62;
const STROKE_INTENSITY: f64 = 0.32;
const STROKE_WIDTH: f64 = 1.1;
const NOISE_AMPLITUDE: f64 = 0.07;
const PLACEMENT_MARGIN: f64 = 5.0;

/// Rendering style of one keypoint's blob, derived from the full keypoint
/// name only, so the same name looks the same in every category.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobStyle {
    pub radius: f64,
    pub peak: f64,
    pub ring: bool,
}

pub fn blob_style(name: &str) -> BlobStyle {
    let h = fnv1a(STYLE_SEED, name);
    let radius = 2.0 + ((h >> 8) & 0xFF) as f64 / 255.0 * 1.2;
    let peak = 0.62 + ((h >> 16) & 0xFF) as f64 / 255.0 * 0.38;
    let ring = (h >> 24) & 1 == 1;
    BlobStyle { radius, peak, ring }
}

fn blob_value(style: &BlobStyle, d: f64) -> f64 {
    if style.ring {
        style.peak * (1.0 - (d - 0.6 * style.radius).abs()).clamp(0.0, 1.0)
    } else {
        style.peak * (style.radius + 0.5 - d).clamp(0.0, 1.0)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-sample rng derived from (seed, category, sample) so generation order
/// never matters.
fn sample_rng(seed: u64, category_index: usize, sample_index: usize) -> ChaCha8Rng {
    let mixed = splitmix(
        splitmix(seed ^ (category_index as u64).wrapping_mul(0xA24B_AED4_963E_E407))
            ^ (sample_index as u64).wrapping_mul(0x9FB2_1C65_1E98_DF25),
    );
    seeded_rng(mixed)
}

/// Forward kinematics with a whole-body tilt and bounded per-bone jitter.
fn pose_points(template: &Template, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let n = template.joints.len();
    let tilt = rng.gen_range(-0.12..0.12);
    let mut angle = vec![0.0f64; n];
    let mut pos = vec![(0.0f64, 0.0f64); n];
    for (i, j) in template.joints.iter().enumerate() {
        match j.parent {
            None => angle[i] = tilt,
            Some(p) => {
                debug_assert!(p < i, "joints must be listed parent-first");
                let jitter = rng.gen_range(-0.22..0.22);
                angle[i] = angle[p] + jitter;
                let (s, c) = angle[i].sin_cos();
                pos[i] = (
                    pos[p].0 + c * j.dx - s * j.dy,
                    pos[p].1 + s * j.dx + c * j.dy,
                );
            }
        }
    }
    pos
}

struct PlacedPose {
    /// Pixel positions, one per joint.
    points: Vec<(f64, f64)>,
}

fn place(
    template: &Template,
    rng: &mut ChaCha8Rng,
    image_size: usize,
) -> Result<PlacedPose> {
    let side = image_size as f64;
    for _attempt in 0..64 {
        let pose = pose_points(template, rng);
        let min_x = pose.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_x = pose.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = pose.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_y = pose.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let long = (max_x - min_x).max(max_y - min_y);
        let target = (side * rng.gen_range(0.55..0.80)).min(side - 2.0 * PLACEMENT_MARGIN - 1.0);
        let scale = target / long;

        let off_x = {
            let lo = PLACEMENT_MARGIN - min_x * scale;
            let hi = side - PLACEMENT_MARGIN - max_x * scale;
            if hi <= lo { (lo + hi) / 2.0 } else { rng.gen_range(lo..hi) }
        };
        let off_y = {
            let lo = PLACEMENT_MARGIN - min_y * scale;
            let hi = side - PLACEMENT_MARGIN - max_y * scale;
            if hi <= lo { (lo + hi) / 2.0 } else { rng.gen_range(lo..hi) }
        };
        let points: Vec<(f64, f64)> = pose
            .iter()
            .map(|&(x, y)| (x * scale + off_x, y * scale + off_y))
            .collect();

        let min_dist = (0.12 * target).max(3.0);
        let mut ok = points
            .iter()
            .all(|&(x, y)| {
                x >= PLACEMENT_MARGIN - 1e-9
                    && y >= PLACEMENT_MARGIN - 1e-9
                    && x <= side - PLACEMENT_MARGIN + 1e-9
                    && y <= side - PLACEMENT_MARGIN + 1e-9
            });
        'pairs: for i in 0..points.len() {
            for j in i + 1..points.len() {
                let dx = points[i].0 - points[j].0;
                let dy = points[i].1 - points[j].1;
                if (dx * dx + dy * dy).sqrt() < min_dist {
                    ok = false;
                    break 'pairs;
                }
            }
        }
        if ok {
            return Ok(PlacedPose { points });
        }
    }
    Err(Error::data(format!(
        "could not place `{}` in a {image_size}px image after 64 attempts",
        template.category
    )))
}

fn draw_segment(canvas: &mut Array2<f64>, a: (f64, f64), b: (f64, f64)) {
    let (h, w) = canvas.dim();
    let pad = STROKE_WIDTH / 2.0 + 1.0;
    let r0 = ((a.1.min(b.1) - pad).floor().max(0.0)) as usize;
    let r1 = ((a.1.max(b.1) + pad).ceil().min(h as f64 - 1.0)) as usize;
    let c0 = ((a.0.min(b.0) - pad).floor().max(0.0)) as usize;
    let c1 = ((a.0.max(b.0) + pad).ceil().min(w as f64 - 1.0)) as usize;
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let (px, py) = (c as f64, r as f64);
            let t = if len2 == 0.0 {
                0.0
            } else {
                ((px - a.0) * abx + (py - a.1) * aby) / len2
            }
            .clamp(0.0, 1.0);
            let (qx, qy) = (a.0 + t * abx, a.1 + t * aby);
            let d = ((px - qx).powi(2) + (py - qy).powi(2)).sqrt();
            let coverage = (STROKE_WIDTH / 2.0 + 0.5 - d).clamp(0.0, 1.0);
            let v = coverage * STROKE_INTENSITY;
            if v > canvas[[r, c]] {
                canvas[[r, c]] = v;
            }
        }
    }
}

fn draw_blob(canvas: &mut Array2<f64>, center: (f64, f64), style: &BlobStyle) {
    let (h, w) = canvas.dim();
    let reach = style.radius + 1.5;
    let r0 = ((center.1 - reach).floor().max(0.0)) as usize;
    let r1 = ((center.1 + reach).ceil().min(h as f64 - 1.0)) as usize;
    let c0 = ((center.0 - reach).floor().max(0.0)) as usize;
    let c1 = ((center.0 + reach).ceil().min(w as f64 - 1.0)) as usize;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let d = ((c as f64 - center.0).powi(2) + (r as f64 - center.1).powi(2)).sqrt();
            let v = blob_value(style, d);
            if v > canvas[[r, c]] {
                canvas[[r, c]] = v;
            }
        }
    }
}

/// Renders one sample; returns pixels in [0,1] plus exact keypoints.
fn render_sample(
    template: &Template,
    rng: &mut ChaCha8Rng,
    image_size: usize,
) -> Result<(Array2<f64>, Array2<f64>, (f64, f64, f64, f64))> {
    let placed = place(template, rng, image_size)?;
    let mut canvas =
        Array2::from_shape_fn((image_size, image_size), |_| rng.gen_range(0.0..NOISE_AMPLITUDE));
    for (p, i) in template.edges() {
        draw_segment(&mut canvas, placed.points[p], placed.points[i]);
    }
    for (i, j) in template.joints.iter().enumerate() {
        draw_blob(&mut canvas, placed.points[i], &blob_style(j.name));
    }
    let mut keypoints = Array2::<f64>::zeros((placed.points.len(), 2));
    for (i, &(x, y)) in placed.points.iter().enumerate() {
        keypoints[[i, 0]] = x;
        keypoints[[i, 1]] = y;
    }
    let min_x = placed.points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = placed.points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = placed.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = placed.points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let bbox = (min_x, min_y, max_x - min_x, max_y - min_y);
    Ok((canvas, keypoints, bbox))
}

fn save_png(path: &Path, pixels: &Array2<f64>) -> Result<()> {
    let (h, w) = pixels.dim();
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Generates the dataset under `root`: one pose-graph and one record file
/// per category plus PNG images. Bitwise deterministic for a given spec.
pub fn generate_synthetic(root: &Path, spec: &SyntheticSpec) -> Result<GenerationSummary> {
    if spec.image_size < 32 {
        return Err(Error::data(format!(
            "image_size {} is too small to render a template (minimum 32)",
            spec.image_size
        )));
    }
    if spec.n_categories == 0 || spec.samples_per_category == 0 {
        return Err(Error::data("need at least one category and one sample"));
    }
    if spec.n_categories > TEMPLATES.len() {
        return Err(Error::data(format!(
            "only {} topology templates exist; {} categories requested",
            TEMPLATES.len(),
            spec.n_categories
        )));
    }
    fs::create_dir_all(root.join("posegraphs"))?;
    fs::create_dir_all(root.join("annotations"))?;

    let mut categories = Vec::new();
    for (c_idx, template) in TEMPLATES[..spec.n_categories].iter().enumerate() {
        let category = template.category;
        categories.push(category.to_string());
        let graph = template.posegraph()?;
        fs::write(
            root.join("posegraphs").join(format!("{category}.txt")),
            serialize_posegraph(&graph),
        )?;
        let image_dir = root.join("images").join(category);
        fs::create_dir_all(&image_dir)?;

        let mut samples = Vec::with_capacity(spec.samples_per_category);
        for s_idx in 0..spec.samples_per_category {
            let mut rng = sample_rng(spec.seed, c_idx, s_idx);
            let (pixels, keypoints, bbox) =
                render_sample(template, &mut rng, spec.image_size)?;
            let file = format!("{category}_{s_idx:03}.png");
            save_png(&image_dir.join(&file), &pixels)?;
            samples.push(DatasetSample {
                category: category.to_string(),
                image: Path::new("images").join(category).join(file),
                bbox,
                keypoints,
                visibility: vec![true; template.joints.len()],
            });
        }
        fs::write(
            root.join("annotations").join(format!("{category}.txt")),
            write_records(category, (spec.image_size, spec.image_size), &samples),
        )?;
    }
    Ok(GenerationSummary {
        categories,
        samples_per_category: spec.samples_per_category,
        image_size: spec.image_size,
    })
}
