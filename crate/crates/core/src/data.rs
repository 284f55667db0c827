//! Dataset loading: IDX image files and small synthetic generators.

use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{random_sere_model, LinearGaussianModel};
use crate::rng::{seeded, Rng};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images as rows of intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Tensor,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX image file held in memory.
pub fn parse_idx_images(bytes: &[u8]) -> Result<ImageSet> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad IDX image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Format(format!("truncated IDX payload: {} of {need} bytes", payload.len())));
    }
    let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(ImageSet { rows, cols, pixels: Tensor::matrix(n, rows * cols, data)? })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    bytes
        .get(8..8 + n)
        .map(<[u8]>::to_vec)
        .ok_or_else(|| Error::Format("truncated IDX payload".into()))
}

/// Selection and resizing applied after parsing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageOptions {
    /// 2×2 average pooling (28×28 → 14×14).
    pub downscale: bool,
    pub offset: usize,
    pub limit: Option<usize>,
}

pub fn load_idx(path: &Path, options: ImageOptions) -> Result<ImageSet> {
    let bytes = std::fs::read(path)?;
    let set = parse_idx_images(&bytes)?;
    let n = set.pixels.rows();
    if options.offset > n {
        return Err(Error::invalid("offset", format!("{} exceeds {n} images", options.offset)));
    }
    let take = options.limit.unwrap_or(n - options.offset).min(n - options.offset);
    let sub = ImageSet { pixels: set.pixels.slice_rows(options.offset, take)?, ..set };
    if options.downscale {
        avg_pool2(&sub)
    } else {
        Ok(sub)
    }
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&std::fs::read(path)?)
}

/// 2×2 average pooling; odd trailing rows or columns are dropped.
pub fn avg_pool2(set: &ImageSet) -> Result<ImageSet> {
    let (h, w) = (set.rows / 2, set.cols / 2);
    if h == 0 || w == 0 {
        return Err(Error::invalid("images", "too small to downscale"));
    }
    let n = set.pixels.rows();
    let mut out = Vec::with_capacity(n * h * w);
    for i in 0..n {
        let img = set.pixels.row(i);
        for r in 0..h {
            for c in 0..w {
                let at = |dr: usize, dc: usize| img[(2 * r + dr) * set.cols + 2 * c + dc];
                out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
            }
        }
    }
    Ok(ImageSet { rows: h, cols: w, pixels: Tensor::matrix(n, h * w, out)? })
}

/// Synthetic data generators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SynthKind {
    /// Eight isotropic components (sd 0.1) on the circle of radius 2.
    GaussianMixture,
    /// Uniform over the dark squares of a 4×4 board on `[-2, 2]²`.
    Checkerboard,
    /// Draws from [`linear_model`]`(model_seed)`; exact likelihoods exist.
    LinearModel { model_seed: u64 },
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-mixture" => Ok(Self::GaussianMixture),
            "checkerboard" => Ok(Self::Checkerboard),
            "linear-model" => Ok(Self::LinearModel { model_seed: 0 }),
            other => Err(Error::invalid(
                "kind",
                format!("unknown synthetic dataset `{other}` (gaussian-mixture, checkerboard, linear-model)"),
            )),
        }
    }
}

impl SynthKind {
    pub fn dim(&self) -> usize {
        match self {
            Self::GaussianMixture | Self::Checkerboard => 2,
            Self::LinearModel { .. } => LINEAR_DATA_DIM,
        }
    }
}

const LINEAR_DATA_DIM: usize = 4;

/// The linear-Gaussian model behind the `linear-model` dataset.
pub fn linear_model(model_seed: u64) -> LinearGaussianModel {
    random_sere_model(&mut seeded(model_seed), &[2, 2, 2], LINEAR_DATA_DIM)
}

/// Whether `(x, y)` lies on a dark square of the checkerboard.
pub fn checkerboard_support(x: f64, y: f64) -> bool {
    if !(-2.0..2.0).contains(&x) || !(-2.0..2.0).contains(&y) {
        return false;
    }
    let (i, j) = ((x + 2.0).floor() as i64, (y + 2.0).floor() as i64);
    (i + j) % 2 == 0
}

pub fn synth_dataset(kind: SynthKind, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("n", "need at least one sample"));
    }
    let mut rng = seeded(seed);
    let normal = |rng: &mut Rng| rng.sample::<f64, _>(StandardNormal);
    match kind {
        SynthKind::GaussianMixture => {
            let mut out = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let k = rng.random_range(0..8) as f64;
                let a = 2.0 * PI * k / 8.0;
                out.push(2.0 * a.cos() + 0.1 * normal(&mut rng));
                out.push(2.0 * a.sin() + 0.1 * normal(&mut rng));
            }
            Tensor::matrix(n, 2, out)
        }
        SynthKind::Checkerboard => {
            let mut out = Vec::with_capacity(2 * n);
            for _ in 0..n {
                // pick one of the 8 dark squares, then a uniform point inside
                let s = rng.random_range(0..8);
                let (row, k) = (s / 2, s % 2);
                let col = 2 * k + row % 2;
                out.push(col as f64 - 2.0 + rng.random::<f64>());
                out.push(row as f64 - 2.0 + rng.random::<f64>());
            }
            Tensor::matrix(n, 2, out)
        }
        SynthKind::LinearModel { model_seed } => Ok(linear_model(model_seed).sample(n, &mut rng)?.1),
    }
}
