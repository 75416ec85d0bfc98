//! Pose-graph schema: text-described keypoints plus a skeleton, with the
//! normalized adjacency consumed by the graph-convolution layers.
//!
//! The canonical on-disk form is line-based and human-editable:
//!
//! ```text
//! posegraph v1
//! category quadruped_a
//! keypoint 0 nose
//! keypoint 1 left front paw
//! edge 0 1
//! ```

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeypointDescriptor {
    pub index: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skeleton {
    /// Unordered edges stored canonically: each pair (a, b) with a < b,
    /// list sorted ascending.
    pub edges: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoseGraph {
    pub category: String,
    pub keypoints: Vec<KeypointDescriptor>,
    pub skeleton: Skeleton,
}

impl PoseGraph {
    /// Validates and canonicalizes: texts are trimmed, edges sorted with
    /// a < b. `texts[i]` describes keypoint `i`.
    pub fn new(
        category: impl Into<String>,
        texts: Vec<String>,
        edges: Vec<(usize, usize)>,
    ) -> Result<PoseGraph> {
        let category = category.into();
        if category.is_empty() || category.chars().any(char::is_whitespace) {
            return Err(Error::data(format!(
                "category tag `{category}` must be non-empty and contain no whitespace"
            )));
        }
        if texts.is_empty() {
            return Err(Error::data("a pose-graph needs at least one keypoint"));
        }
        let k_s = texts.len();
        let mut keypoints = Vec::with_capacity(k_s);
        for (index, raw) in texts.into_iter().enumerate() {
            let text = raw.trim().to_string();
            if text.is_empty() {
                return Err(Error::data(format!("keypoint {index} has empty description text")));
            }
            keypoints.push(KeypointDescriptor { index, text });
        }
        let mut canonical = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            if a == b {
                return Err(Error::data(format!("edge ({a}, {b}) is a self-loop")));
            }
            let e = (a.min(b), a.max(b));
            if e.1 >= k_s {
                return Err(Error::data(format!(
                    "edge ({a}, {b}) references keypoint {} but the graph has {k_s} keypoints",
                    e.1
                )));
            }
            canonical.push(e);
        }
        canonical.sort_unstable();
        if let Some(w) = canonical.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::data(format!("duplicate edge ({}, {})", w[0].0, w[0].1)));
        }
        Ok(PoseGraph { category, keypoints, skeleton: Skeleton { edges: canonical } })
    }

    /// Number of keypoints K_s.
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.keypoints.iter().map(|k| k.text.as_str())
    }

    /// Owned description list, in keypoint order.
    pub fn descriptions(&self) -> Vec<String> {
        self.keypoints.iter().map(|k| k.text.clone()).collect()
    }
}

/// Symmetric renormalized adjacency over a fixed capacity of K nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    /// K×K matrix D^(-1/2)·(A+I)·D^(-1/2).
    pub matrix: Array2<f64>,
    /// K_s; rows/cols at index ≥ valid_count are isolated self-loop nodes.
    pub valid_count: usize,
}

/// Builds D^(-1/2)·(A+I)·D^(-1/2) over `k` nodes, where A is the binary
/// symmetric skeleton adjacency and nodes at index ≥ K_s are isolated.
pub fn build_adjacency(graph: &PoseGraph, k: usize) -> Result<NormalizedAdjacency> {
    let k_s = graph.len();
    if k < k_s {
        return Err(Error::data(format!(
            "graph has {k_s} keypoints but the configured capacity is K={k}"
        )));
    }
    let mut a_plus_i = Array2::<f64>::eye(k);
    for &(i, j) in &graph.skeleton.edges {
        a_plus_i[[i, j]] = 1.0;
        a_plus_i[[j, i]] = 1.0;
    }
    let deg: Vec<f64> = (0..k).map(|i| a_plus_i.row(i).sum()).collect();
    let mut m = a_plus_i;
    for i in 0..k {
        for j in 0..k {
            // Divide once by √(dᵢdⱼ) so unit-degree and equal-degree entries
            // stay exact in floating point.
            m[[i, j]] /= (deg[i] * deg[j]).sqrt();
        }
    }
    Ok(NormalizedAdjacency { matrix: m, valid_count: k_s })
}

/// Canonical text form; `parse_posegraph(serialize_posegraph(g))` equals `g`.
pub fn serialize_posegraph(graph: &PoseGraph) -> String {
    let mut out = String::from("posegraph v1\n");
    out.push_str(&format!("category {}\n", graph.category));
    for kp in &graph.keypoints {
        out.push_str(&format!("keypoint {} {}\n", kp.index, kp.text));
    }
    for (a, b) in &graph.skeleton.edges {
        out.push_str(&format!("edge {a} {b}\n"));
    }
    out
}

pub fn parse_posegraph(document: &str) -> Result<PoseGraph> {
    let mut lines = document
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    match lines.next() {
        Some((_, "posegraph v1")) => {}
        Some((n, other)) => {
            return Err(Error::data(format!(
                "line {n}: expected header `posegraph v1`, found `{other}`"
            )))
        }
        None => return Err(Error::data("empty pose-graph document")),
    }

    let mut category: Option<String> = None;
    let mut indexed: Vec<(usize, String)> = Vec::new();
    let mut edges: Vec<(usize, usize)> = Vec::new();

    for (n, line) in lines {
        let (kind, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        match kind {
            "category" => {
                if category.is_some() {
                    return Err(Error::data(format!("line {n}: repeated category line")));
                }
                if rest.is_empty() {
                    return Err(Error::data(format!("line {n}: category tag is empty")));
                }
                category = Some(rest.to_string());
            }
            "keypoint" => {
                let (idx, text) = match rest.split_once(char::is_whitespace) {
                    Some((i, t)) => (i, t.trim()),
                    None => (rest, ""),
                };
                let idx: usize = idx.parse().map_err(|_| {
                    Error::data(format!("line {n}: keypoint index `{idx}` is not an integer"))
                })?;
                if text.is_empty() {
                    return Err(Error::data(format!("keypoint {idx} has empty description text")));
                }
                indexed.push((idx, text.to_string()));
            }
            "edge" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [a, b] = parts.as_slice() else {
                    return Err(Error::data(format!("line {n}: expected `edge <a> <b>`")));
                };
                let a: usize = a.parse().map_err(|_| {
                    Error::data(format!("line {n}: edge endpoint `{a}` is not an integer"))
                })?;
                let b: usize = b.parse().map_err(|_| {
                    Error::data(format!("line {n}: edge endpoint `{b}` is not an integer"))
                })?;
                edges.push((a, b));
            }
            other => {
                return Err(Error::data(format!("line {n}: unknown directive `{other}`")))
            }
        }
    }

    let category = category.ok_or_else(|| Error::data("pose-graph document has no category line"))?;
    indexed.sort_by_key(|(i, _)| *i);
    if let Some(w) = indexed.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::data(format!("duplicate keypoint index {}", w[0].0)));
    }
    for (pos, (idx, _)) in indexed.iter().enumerate() {
        if *idx != pos {
            return Err(Error::data(format!(
                "keypoint indices must cover 0..{} contiguously; found index {idx}",
                indexed.len().saturating_sub(1)
            )));
        }
    }
    let texts = indexed.into_iter().map(|(_, t)| t).collect();
    PoseGraph::new(category, texts, edges)
}
