//! Evaluation metrics: Dice overlap of warped masks, SSIM, folding percentage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::warp::{sample, DisplacementField};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Contents of `metrics.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: BTreeMap<String, f64>,
    pub ssim: f64,
    pub folding_pct: f64,
    pub config_digest: String,
}

/// Binary segmentation on a pixel grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DataLength {
                shape: vec![height, width],
                len: data.len(),
            });
        }
        Ok(Mask { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|k| f(k / width, k % width)).collect();
        Mask { height, width, data }
    }

    /// Pixels whose channel mean exceeds `threshold`.
    pub fn from_image(img: &Image, threshold: f64) -> Self {
        let c = img.channels();
        let data = img
            .data()
            .chunks_exact(c)
            .map(|p| p.iter().sum::<f64>() / c as f64 > threshold)
            .collect();
        Mask {
            height: img.height(),
            width: img.width(),
            data,
        }
    }

    pub fn to_image(&self) -> Image {
        Image::new(
            self.height,
            self.width,
            1,
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask shape")
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Grows the mask by `radius` pixels (square structuring element).
    pub fn dilate(&self, radius: usize) -> Mask {
        let (h, w) = (self.height, self.width);
        Mask::from_fn(h, w, |i, j| {
            (i.saturating_sub(radius)..=(i + radius).min(h - 1))
                .any(|r| (j.saturating_sub(radius)..=(j + radius).min(w - 1)).any(|c| self.get(r, c)))
        })
    }
}

/// `2|A∩B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if a.dims() != b.dims() {
        let (da, db) = (a.dims(), b.dims());
        return Err(Error::shape("dice", &[da.0, da.1], &[db.0, db.1]));
    }
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    let both = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Bilinear sample of the mask at `Φ(grid)`, thresholded at 0.5.
pub fn warp_mask(mask: &Mask, field: &DisplacementField) -> Result<Mask> {
    if mask.dims() != (field.height(), field.width()) {
        let d = mask.dims();
        return Err(Error::shape("warp_mask", &[d.0, d.1], &[field.height(), field.width()]));
    }
    let img = mask.to_image().to_tensor();
    let warped = sample(&img, &field.transformation()?)?;
    Mask::new(
        mask.height,
        mask.width,
        warped.data().iter().map(|&v| v > 0.5).collect(),
    )
}

/// Normalized 1D Gaussian of length [`SSIM_WINDOW`].
fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filter of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * src[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM over every full 11×11 Gaussian window (σ = 1.5, data range 1),
/// averaged across channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::shape(
            "ssim",
            &[a.height(), a.width(), a.channels()],
            &[b.height(), b.width(), b.channels()],
        ));
    }
    let (h, w, c) = (a.height(), a.width(), a.channels());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::DegenerateGrid {
            height: h,
            width: w,
            min: SSIM_WINDOW,
        });
    }
    let k = gaussian_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.data().iter().skip(ch).step_by(c).copied().collect();
        let y: Vec<f64> = b.data().iter().skip(ch).step_by(c).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let n = mx.len();
        let sum: f64 = (0..n)
            .map(|p| {
                let (ux, uy) = (mx[p], my[p]);
                let vx = sxx[p] - ux * ux;
                let vy = syy[p] - uy * uy;
                let cov = sxy[p] - ux * uy;
                ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
            })
            .sum();
        total += sum / n as f64;
    }
    Ok(total / c as f64)
}

/// Percentage of pixels with a non-positive Jacobian determinant.
pub fn folding_pct(det: &Tensor) -> f64 {
    if det.is_empty() {
        return 0.0;
    }
    let folded = det.data().iter().filter(|&&d| d <= 0.0).count();
    100.0 * folded as f64 / det.len() as f64
}
