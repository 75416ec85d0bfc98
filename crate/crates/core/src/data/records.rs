//! Annotation records and the split-aware dataset loader. One pose-graph
//! file and one sample-record file per category; the train/val/test split
//! is a disjoint partition of category names checked at load time.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posegraph::{parse_posegraph, PoseGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CategorySplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl CategorySplit {
    pub fn part(&self, part: SplitPart) -> &[String] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &str> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .map(String::as_str)
    }

    /// Errors name every category that appears in more than one part.
    pub fn validate_disjoint(&self) -> Result<()> {
        let mut seen = BTreeMap::<&str, usize>::new();
        for c in self.all() {
            *seen.entry(c).or_insert(0) += 1;
        }
        let dupes: Vec<&str> = seen
            .iter()
            .filter(|(_, &n)| n > 1)
            .map(|(&c, _)| c)
            .collect();
        if dupes.is_empty() {
            Ok(())
        } else {
            Err(Error::data(format!(
                "split parts overlap on categories: {}",
                dupes.join(", ")
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub category: String,
    /// Image path relative to the dataset root.
    pub image: PathBuf,
    /// (x, y, w, h) in pixels, tight over the keypoints.
    pub bbox: (f64, f64, f64, f64),
    /// K_s×2 pixel coordinates.
    pub keypoints: Array2<f64>,
    pub visibility: Vec<bool>,
}

/// Serializes samples into the versioned per-category record format.
/// Coordinates print in shortest round-trip form, so parsing restores the
/// exact bits.
pub fn write_records(
    category: &str,
    image_size: (usize, usize),
    samples: &[DatasetSample],
) -> String {
    let mut out = String::new();
    out.push_str("samples v1\n");
    let _ = writeln!(out, "category {category}");
    let _ = writeln!(out, "image_size {} {}", image_size.0, image_size.1);
    let _ = writeln!(out, "count {}", samples.len());
    for (idx, s) in samples.iter().enumerate() {
        let _ = writeln!(out, "sample {idx}");
        let _ = writeln!(out, "image {}", s.image.display());
        let (x, y, w, h) = s.bbox;
        let _ = writeln!(out, "bbox {x} {y} {w} {h}");
        for i in 0..s.keypoints.nrows() {
            let _ = writeln!(
                out,
                "keypoint {i} {} {} {}",
                s.keypoints[[i, 0]],
                s.keypoints[[i, 1]],
                u8::from(s.visibility[i])
            );
        }
    }
    out
}

struct SampleBuilder {
    image: Option<PathBuf>,
    bbox: Option<(f64, f64, f64, f64)>,
    keypoints: Vec<(f64, f64, bool)>,
}

fn parse_float(raw: &str, what: &str, line_no: usize) -> Result<f64> {
    raw.parse::<f64>().map_err(|_| {
        Error::data(format!("line {line_no}: {what} `{raw}` is not a number"))
    })
}

/// Parses one category's record document. `image_size` is returned with the
/// samples so bounds checks can run against it.
pub fn parse_records(text: &str) -> Result<(String, (usize, usize), Vec<DatasetSample>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let Some((_, header)) = lines.next() else {
        return Err(Error::data("empty record document"));
    };
    if header != "samples v1" {
        return Err(Error::data(format!(
            "bad record header `{header}`; expected `samples v1`"
        )));
    }
    let mut category: Option<String> = None;
    let mut image_size: Option<(usize, usize)> = None;
    let mut declared_count: Option<usize> = None;
    let mut samples = Vec::new();
    let mut current: Option<SampleBuilder> = None;

    let finish = |b: SampleBuilder, category: &str, at: usize| -> Result<DatasetSample> {
        let image = b
            .image
            .ok_or_else(|| Error::data(format!("sample before line {at} has no image")))?;
        let bbox = b
            .bbox
            .ok_or_else(|| Error::data(format!("sample before line {at} has no bbox")))?;
        if b.keypoints.is_empty() {
            return Err(Error::data(format!(
                "sample before line {at} has no keypoints"
            )));
        }
        let mut keypoints = Array2::<f64>::zeros((b.keypoints.len(), 2));
        let mut visibility = Vec::with_capacity(b.keypoints.len());
        for (i, &(x, y, v)) in b.keypoints.iter().enumerate() {
            keypoints[[i, 0]] = x;
            keypoints[[i, 1]] = y;
            visibility.push(v);
        }
        Ok(DatasetSample {
            category: category.to_string(),
            image,
            bbox,
            keypoints,
            visibility,
        })
    };

    for (line_no, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (directive, rest) = line.split_once(' ').unwrap_or((line, ""));
        match directive {
            "category" => {
                if rest.is_empty() {
                    return Err(Error::data(format!("line {line_no}: empty category")));
                }
                category = Some(rest.to_string());
            }
            "image_size" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(Error::data(format!(
                        "line {line_no}: image_size needs width and height"
                    )));
                }
                let w = parts[0].parse::<usize>().map_err(|_| {
                    Error::data(format!("line {line_no}: bad image width `{}`", parts[0]))
                })?;
                let h = parts[1].parse::<usize>().map_err(|_| {
                    Error::data(format!("line {line_no}: bad image height `{}`", parts[1]))
                })?;
                image_size = Some((w, h));
            }
            "count" => {
                declared_count = Some(rest.parse::<usize>().map_err(|_| {
                    Error::data(format!("line {line_no}: bad count `{rest}`"))
                })?);
            }
            "sample" => {
                let cat = category.as_deref().ok_or_else(|| {
                    Error::data(format!("line {line_no}: sample before category"))
                })?;
                if let Some(b) = current.take() {
                    samples.push(finish(b, cat, line_no)?);
                }
                current = Some(SampleBuilder {
                    image: None,
                    bbox: None,
                    keypoints: Vec::new(),
                });
            }
            "image" => {
                let b = current.as_mut().ok_or_else(|| {
                    Error::data(format!("line {line_no}: image outside a sample"))
                })?;
                if rest.is_empty() {
                    return Err(Error::data(format!("line {line_no}: empty image path")));
                }
                b.image = Some(PathBuf::from(rest));
            }
            "bbox" => {
                let b = current.as_mut().ok_or_else(|| {
                    Error::data(format!("line {line_no}: bbox outside a sample"))
                })?;
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(Error::data(format!(
                        "line {line_no}: bbox needs four numbers"
                    )));
                }
                b.bbox = Some((
                    parse_float(parts[0], "bbox x", line_no)?,
                    parse_float(parts[1], "bbox y", line_no)?,
                    parse_float(parts[2], "bbox w", line_no)?,
                    parse_float(parts[3], "bbox h", line_no)?,
                ));
            }
            "keypoint" => {
                let b = current.as_mut().ok_or_else(|| {
                    Error::data(format!("line {line_no}: keypoint outside a sample"))
                })?;
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(Error::data(format!(
                        "line {line_no}: keypoint needs index, x, y, visibility"
                    )));
                }
                let idx = parts[0].parse::<usize>().map_err(|_| {
                    Error::data(format!("line {line_no}: bad keypoint index `{}`", parts[0]))
                })?;
                if idx != b.keypoints.len() {
                    return Err(Error::data(format!(
                        "line {line_no}: keypoint index {idx} out of order (expected {})",
                        b.keypoints.len()
                    )));
                }
                let x = parse_float(parts[1], "keypoint x", line_no)?;
                let y = parse_float(parts[2], "keypoint y", line_no)?;
                let vis = match parts[3] {
                    "0" => false,
                    "1" => true,
                    other => {
                        return Err(Error::data(format!(
                            "line {line_no}: visibility must be 0 or 1, got `{other}`"
                        )))
                    }
                };
                b.keypoints.push((x, y, vis));
            }
            other => {
                return Err(Error::data(format!(
                    "line {line_no}: unknown record directive `{other}`"
                )));
            }
        }
    }
    let category =
        category.ok_or_else(|| Error::data("record document has no category"))?;
    let image_size =
        image_size.ok_or_else(|| Error::data("record document has no image_size"))?;
    if let Some(b) = current.take() {
        let at = text.lines().count() + 1;
        samples.push(finish(b, &category, at)?);
    }
    if let Some(n) = declared_count {
        if n != samples.len() {
            return Err(Error::data(format!(
                "record document declares {n} samples but contains {}",
                samples.len()
            )));
        }
    }
    Ok((category, image_size, samples))
}

/// Loaded dataset with access auditing: every post-load read of a
/// category's samples or pose-graph is logged, so tests can prove the
/// trainer never touches val/test categories.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    pub split: CategorySplit,
    pub image_size: (usize, usize),
    posegraphs: BTreeMap<String, PoseGraph>,
    samples: BTreeMap<String, Vec<DatasetSample>>,
    access_log: RefCell<BTreeSet<String>>,
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn posegraph(&self, category: &str) -> Result<&PoseGraph> {
        self.access_log.borrow_mut().insert(category.to_string());
        self.posegraphs
            .get(category)
            .ok_or_else(|| Error::data(format!("no pose-graph loaded for `{category}`")))
    }

    pub fn samples(&self, category: &str) -> Result<&[DatasetSample]> {
        self.access_log.borrow_mut().insert(category.to_string());
        self.samples
            .get(category)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::data(format!("no samples loaded for `{category}`")))
    }

    /// Categories whose contents were read since the last reset.
    pub fn accessed_categories(&self) -> BTreeSet<String> {
        self.access_log.borrow().clone()
    }

    pub fn reset_access_log(&self) {
        self.access_log.borrow_mut().clear();
    }

    /// Loads a sample's image as grayscale in [0,1].
    pub fn image_pixels(&self, sample: &DatasetSample) -> Result<Array2<f64>> {
        load_image(&self.root.join(&sample.image))
    }
}

/// Reads a grayscale image into [0,1].
pub fn load_image(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0] as f64 / 255.0
    }))
}

fn categories_on_disk(root: &Path) -> Result<BTreeSet<String>> {
    let dir = root.join("posegraphs");
    let mut out = BTreeSet::new();
    let entries = fs::read_dir(&dir)
        .map_err(|e| Error::data(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Loads and schema-validates every category named by the split. The split
/// must be disjoint and must cover exactly the categories present on disk.
pub fn load_dataset(root: &Path, split: CategorySplit) -> Result<Dataset> {
    split.validate_disjoint()?;
    let on_disk = categories_on_disk(root)?;
    let in_split: BTreeSet<String> = split.all().map(String::from).collect();
    let missing: Vec<&str> = in_split
        .difference(&on_disk)
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::data(format!(
            "split names categories with no pose-graph on disk: {}",
            missing.join(", ")
        )));
    }
    let uncovered: Vec<&str> = on_disk
        .difference(&in_split)
        .map(String::as_str)
        .collect();
    if !uncovered.is_empty() {
        return Err(Error::data(format!(
            "dataset categories missing from the split: {}",
            uncovered.join(", ")
        )));
    }

    let mut posegraphs = BTreeMap::new();
    let mut samples = BTreeMap::new();
    let mut image_size: Option<(usize, usize)> = None;
    for category in in_split {
        let graph_path = root.join("posegraphs").join(format!("{category}.txt"));
        let graph_text = fs::read_to_string(&graph_path)
            .map_err(|e| Error::data(format!("{}: {e}", graph_path.display())))?;
        let graph = parse_posegraph(&graph_text)?;
        if graph.category != category {
            return Err(Error::data(format!(
                "{}: pose-graph is tagged `{}`",
                graph_path.display(),
                graph.category
            )));
        }

        let rec_path = root.join("annotations").join(format!("{category}.txt"));
        let rec_text = fs::read_to_string(&rec_path)
            .map_err(|e| Error::data(format!("{}: {e}", rec_path.display())))?;
        let (rec_category, size, cat_samples) = parse_records(&rec_text)?;
        if rec_category != category {
            return Err(Error::data(format!(
                "{}: records are tagged `{rec_category}`",
                rec_path.display()
            )));
        }
        match image_size {
            None => image_size = Some(size),
            Some(existing) if existing != size => {
                return Err(Error::data(format!(
                    "category `{category}` uses image size {}x{} but the dataset started with {}x{}",
                    size.0, size.1, existing.0, existing.1
                )));
            }
            _ => {}
        }
        for (i, s) in cat_samples.iter().enumerate() {
            if s.keypoints.nrows() != graph.len() {
                return Err(Error::data(format!(
                    "category `{category}` sample {i} has {} keypoints but its pose-graph defines {}",
                    s.keypoints.nrows(),
                    graph.len()
                )));
            }
            for (k, &vis) in s.visibility.iter().enumerate() {
                if !vis {
                    continue;
                }
                let (x, y) = (s.keypoints[[k, 0]], s.keypoints[[k, 1]]);
                if x < 0.0 || y < 0.0 || x > size.0 as f64 || y > size.1 as f64 {
                    return Err(Error::data(format!(
                        "category `{category}` sample {i} keypoint {k} at ({x}, {y}) is outside the {}x{} image",
                        size.0, size.1
                    )));
                }
            }
            let (_, _, w, h) = s.bbox;
            if w <= 0.0 || h <= 0.0 {
                return Err(Error::data(format!(
                    "category `{category}` sample {i} has a degenerate bbox ({w}x{h})"
                )));
            }
        }
        posegraphs.insert(category.clone(), graph);
        samples.insert(category, cat_samples);
    }

    Ok(Dataset {
        root: root.to_path_buf(),
        split,
        image_size: image_size
            .ok_or_else(|| Error::data("split names no categories"))?,
        posegraphs,
        samples,
        access_log: RefCell::new(BTreeSet::new()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample(category: &str, idx: usize, k: usize) -> DatasetSample {
        let keypoints =
            Array2::from_shape_fn((k, 2), |(i, d)| 10.0 + (i * 2 + d) as f64 + 0.125);
        DatasetSample {
            category: category.to_string(),
            image: PathBuf::from(format!("images/{category}/{category}_{idx:03}.png")),
            bbox: (9.5, 10.25, 22.0, 21.75),
            keypoints,
            visibility: vec![true; k],
        }
    }

    #[test]
    fn records_roundtrip_exactly() {
        let mut s = sample("probe", 0, 3);
        s.keypoints[[1, 0]] = 17.000000000000004;
        s.visibility[2] = false;
        let text = write_records("probe", (64, 64), &[s.clone(), sample("probe", 1, 3)]);
        let (category, size, back) = parse_records(&text).unwrap();
        assert_eq!(category, "probe");
        assert_eq!(size, (64, 64));
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], s);
    }

    #[test]
    fn parse_rejects_malformed_documents() {
        for (text, needle) in [
            ("", "empty"),
            ("samples v2\ncategory a\nimage_size 8 8", "header"),
            ("samples v1\nimage_size 8 8\nsample 0", "before category"),
            (
                "samples v1\ncategory a\nimage_size 8 8\ncount 2\nsample 0\nimage i.png\nbbox 0 0 1 1\nkeypoint 0 1 1 1",
                "declares 2",
            ),
            (
                "samples v1\ncategory a\nimage_size 8 8\nsample 0\nimage i.png\nbbox 0 0 1 1\nkeypoint 1 1 1 1",
                "out of order",
            ),
            (
                "samples v1\ncategory a\nimage_size 8 8\nsample 0\nimage i.png\nbbox 0 0 1 1\nkeypoint 0 1 1 2",
                "visibility",
            ),
            (
                "samples v1\ncategory a\nimage_size 8 8\nwhatever x",
                "unknown record directive",
            ),
        ] {
            let err = parse_records(text).unwrap_err().to_string();
            assert!(err.contains(needle), "`{err}` should mention `{needle}`");
        }
    }

    fn write_category(root: &Path, category: &str, texts: &[&str], k_mismatch: Option<usize>) {
        let graph = PoseGraph::new(
            category,
            texts.iter().map(|t| t.to_string()).collect(),
            (1..texts.len()).map(|i| (i - 1, i)).collect(),
        )
        .unwrap();
        fs::create_dir_all(root.join("posegraphs")).unwrap();
        fs::create_dir_all(root.join("annotations")).unwrap();
        fs::write(
            root.join("posegraphs").join(format!("{category}.txt")),
            crate::posegraph::serialize_posegraph(&graph),
        )
        .unwrap();
        let k = k_mismatch.unwrap_or(texts.len());
        let records = write_records(category, (64, 64), &[sample(category, 0, k)]);
        fs::write(
            root.join("annotations").join(format!("{category}.txt")),
            records,
        )
        .unwrap();
    }

    fn three_way_split() -> CategorySplit {
        CategorySplit {
            train: vec!["a".into()],
            val: vec!["b".into()],
            test: vec!["c".into()],
        }
    }

    #[test]
    fn loads_a_clean_three_category_dataset() {
        let dir = tempfile::tempdir().unwrap();
        for c in ["a", "b", "c"] {
            write_category(dir.path(), c, &["head top", "tail tip"], None);
        }
        let ds = load_dataset(dir.path(), three_way_split()).unwrap();
        assert_eq!(ds.image_size, (64, 64));
        assert_eq!(ds.samples("a").unwrap().len(), 1);
        assert_eq!(ds.posegraph("b").unwrap().len(), 2);
    }

    #[test]
    fn overlapping_splits_name_the_offender() {
        let dir = tempfile::tempdir().unwrap();
        for c in ["a", "b", "c"] {
            write_category(dir.path(), c, &["head top"], None);
        }
        let split = CategorySplit {
            train: vec!["a".into(), "b".into()],
            val: vec!["b".into()],
            test: vec!["c".into()],
        };
        let err = load_dataset(dir.path(), split).unwrap_err().to_string();
        assert!(err.contains("overlap") && err.contains('b'), "{err}");
    }

    #[test]
    fn keypoint_count_mismatch_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        write_category(dir.path(), "a", &["head top", "tail tip"], Some(3));
        write_category(dir.path(), "b", &["head top"], None);
        write_category(dir.path(), "c", &["head top"], None);
        let err = load_dataset(dir.path(), three_way_split())
            .unwrap_err()
            .to_string();
        assert!(err.contains("3 keypoints") && err.contains("defines 2"), "{err}");
    }

    #[test]
    fn missing_and_uncovered_categories_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        for c in ["a", "b"] {
            write_category(dir.path(), c, &["head top"], None);
        }
        let err = load_dataset(dir.path(), three_way_split())
            .unwrap_err()
            .to_string();
        assert!(err.contains("no pose-graph") && err.contains('c'), "{err}");

        write_category(dir.path(), "c", &["head top"], None);
        write_category(dir.path(), "d", &["head top"], None);
        let err = load_dataset(dir.path(), three_way_split())
            .unwrap_err()
            .to_string();
        assert!(err.contains("missing from the split") && err.contains('d'), "{err}");
    }

    #[test]
    fn access_log_records_only_touched_categories() {
        let dir = tempfile::tempdir().unwrap();
        for c in ["a", "b", "c"] {
            write_category(dir.path(), c, &["head top"], None);
        }
        let ds = load_dataset(dir.path(), three_way_split()).unwrap();
        assert!(ds.accessed_categories().is_empty());
        ds.samples("a").unwrap();
        ds.posegraph("a").unwrap();
        let log = ds.accessed_categories();
        assert_eq!(log.into_iter().collect::<Vec<_>>(), vec!["a".to_string()]);
        ds.reset_access_log();
        assert!(ds.accessed_categories().is_empty());
    }

    #[test]
    fn out_of_bounds_visible_keypoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let graph = PoseGraph::new("a", vec!["head top".into()], vec![]).unwrap();
        fs::create_dir_all(dir.path().join("posegraphs")).unwrap();
        fs::create_dir_all(dir.path().join("annotations")).unwrap();
        fs::write(
            dir.path().join("posegraphs/a.txt"),
            crate::posegraph::serialize_posegraph(&graph),
        )
        .unwrap();
        let mut s = sample("a", 0, 1);
        s.keypoints[[0, 0]] = 200.0;
        fs::write(
            dir.path().join("annotations/a.txt"),
            write_records("a", (64, 64), &[s]),
        )
        .unwrap();
        let split = CategorySplit { train: vec!["a".into()], ..Default::default() };
        let err = load_dataset(dir.path(), split).unwrap_err().to_string();
        assert!(err.contains("outside"), "{err}");
    }
}
