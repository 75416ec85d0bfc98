//! Binary container for precomputed features, shared by text embeddings,
//! image feature grids, and heatmap/attention exports.
//!
//! Layout (all integers little-endian u32 unless noted):
//! magic `FEAT`, version, kind (u8: 0 = grid, 1 = rows), shape
//! (grid_h+grid_w or row count), dim, dtype (0 = f32), then row-major
//! little-endian f32 payload.

use ndarray::Array2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatShape {
    /// Image-token grid; row count is grid_h·grid_w.
    Grid { grid_h: usize, grid_w: usize },
    /// Plain row collection (e.g. one text embedding per keypoint).
    Rows(usize),
}

impl FeatShape {
    pub fn rows(&self) -> usize {
        match self {
            FeatShape::Grid { grid_h, grid_w } => grid_h * grid_w,
            FeatShape::Rows(n) => *n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub shape: FeatShape,
    /// Row-major matrix, rows() × dim. Payload is f32; f64 here is lossless.
    pub data: Array2<f64>,
}

const DTYPE_F32: u32 = 0;

pub fn write_feature_file(path: &Path, shape: FeatShape, data: &Array2<f64>) -> Result<()> {
    if data.nrows() != shape.rows() {
        return Err(Error::data(format!(
            "feature write: shape declares {} rows but data has {}",
            shape.rows(),
            data.nrows()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"FEAT")?;
    w.write_all(&1u32.to_le_bytes())?;
    match shape {
        FeatShape::Grid { grid_h, grid_w } => {
            w.write_all(&[0u8])?;
            w.write_all(&(grid_h as u32).to_le_bytes())?;
            w.write_all(&(grid_w as u32).to_le_bytes())?;
        }
        FeatShape::Rows(n) => {
            w.write_all(&[1u8])?;
            w.write_all(&(n as u32).to_le_bytes())?;
        }
    }
    w.write_all(&(data.ncols() as u32).to_le_bytes())?;
    w.write_all(&DTYPE_F32.to_le_bytes())?;
    for v in data.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<FeatureFile> {
    let ctx = path.display();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::data(format!("{ctx}: not a feature file (short header)")))?;
    if &magic != b"FEAT" {
        return Err(Error::data(format!("{ctx}: bad magic, not a feature file")));
    }
    let version = read_u32(&mut r, &format!("{ctx}"))?;
    if version != 1 {
        return Err(Error::data(format!("{ctx}: unsupported feature-file version {version}")));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let shape = match kind[0] {
        0 => {
            let grid_h = read_u32(&mut r, &format!("{ctx}"))? as usize;
            let grid_w = read_u32(&mut r, &format!("{ctx}"))? as usize;
            FeatShape::Grid { grid_h, grid_w }
        }
        1 => FeatShape::Rows(read_u32(&mut r, &format!("{ctx}"))? as usize),
        k => return Err(Error::data(format!("{ctx}: unknown shape kind {k}"))),
    };
    let dim = read_u32(&mut r, &format!("{ctx}"))? as usize;
    let dtype = read_u32(&mut r, &format!("{ctx}"))?;
    if dtype != DTYPE_F32 {
        return Err(Error::data(format!("{ctx}: unsupported dtype tag {dtype}")));
    }
    let rows = shape.rows();
    let mut payload = vec![0u8; rows * dim * 4];
    r.read_exact(&mut payload).map_err(|_| {
        Error::data(format!(
            "{ctx}: truncated payload, expected {rows} rows of dim {dim}"
        ))
    })?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::data(format!("{ctx}: trailing bytes after {rows}x{dim} payload")));
    }
    let mut data = Array2::<f64>::zeros((rows, dim));
    for (i, v) in data.iter_mut().enumerate() {
        let b = [payload[i * 4], payload[i * 4 + 1], payload[i * 4 + 2], payload[i * 4 + 3]];
        *v = f32::from_le_bytes(b) as f64;
    }
    Ok(FeatureFile { shape, data })
}

fn read_u32<R: Read>(r: &mut R, ctx: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::data(format!("{ctx}: truncated feature-file header")))?;
    Ok(u32::from_le_bytes(buf))
}
