//! Grid geometry, differentiable bilinear sampling and finite-difference
//! spatial derivatives.
//!
//! Coordinates are normalized to `[-1, 1]²` with corners aligned: `x` runs
//! along the width (column `j`), `y` along the height (row `i`), and pixel
//! `(i, j)` sits at `(-1 + 2j/(W-1), -1 + 2i/(H-1))`.
//!
//! # Field file layout
//!
//! ```text
//! magic   b"INRF"
//! height  u32 little-endian
//! width   u32 little-endian
//! data    H·W·2 little-endian f32, row-major, (Δx, Δy) per pixel
//! ```

use std::io::{Read, Write};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const FIELD_MAGIC: &[u8; 4] = b"INRF";

/// Pixel positions within this distance of a lattice point snap onto it, so
/// an identity transform reproduces the sampled image exactly.
const LATTICE_SNAP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid {
    height: usize,
    width: usize,
    coords: Tensor,
}

impl CoordinateGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::DegenerateGrid {
                height,
                width,
                min: 2,
            });
        }
        let mut data = Vec::with_capacity(height * width * 2);
        for i in 0..height {
            for j in 0..width {
                data.push(normalized(j, width));
                data.push(normalized(i, height));
            }
        }
        Ok(CoordinateGrid {
            height,
            width,
            coords: Tensor::new(vec![height * width, 2], data)?,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[H·W, 2]` normalized coordinates, row-major.
    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    /// Pixels per normalized unit along x and y.
    pub fn pixels_per_unit(&self) -> (f64, f64) {
        ((self.width - 1) as f64 / 2.0, (self.height - 1) as f64 / 2.0)
    }
}

fn normalized(index: usize, extent: usize) -> f64 {
    -1.0 + 2.0 * index as f64 / (extent - 1) as f64
}

/// Per-pixel displacement `Δx` in normalized units; `Φ(x) = x + Δx`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    height: usize,
    width: usize,
    /// `[H, W, 2]`.
    delta: Tensor,
}

impl DisplacementField {
    pub fn zeros(height: usize, width: usize) -> Self {
        DisplacementField {
            height,
            width,
            delta: Tensor::zeros(vec![height, width, 2]),
        }
    }

    /// Accepts `[H, W, 2]` or `[H·W, 2]` data.
    pub fn from_tensor(height: usize, width: usize, delta: Tensor) -> Result<Self> {
        if delta.len() != height * width * 2 {
            return Err(Error::shape("displacement field", delta.shape(), &[height, width, 2]));
        }
        Ok(DisplacementField {
            height,
            width,
            delta: delta.reshape(vec![height, width, 2])?,
        })
    }

    /// Builds a field by evaluating `f(x, y) -> (Δx, Δy)` at every grid point.
    pub fn from_fn(grid: &CoordinateGrid, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let data = grid
            .coords()
            .data()
            .chunks_exact(2)
            .flat_map(|p| {
                let (dx, dy) = f(p[0], p[1]);
                [dx, dy]
            })
            .collect();
        DisplacementField {
            height: grid.height(),
            width: grid.width(),
            delta: Tensor::new(vec![grid.height(), grid.width(), 2], data).expect("grid shape"),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn delta(&self) -> &Tensor {
        &self.delta
    }

    pub fn is_finite(&self) -> bool {
        self.delta.is_finite()
    }

    /// Sampling locations `Φ(x) = x + Δx` as a `[H·W, 2]` tensor.
    pub fn transformation(&self) -> Result<Tensor> {
        let grid = CoordinateGrid::new(self.height, self.width)?;
        let data = grid
            .coords()
            .data()
            .iter()
            .zip(self.delta.data())
            .map(|(x, d)| x + d)
            .collect();
        Tensor::new(vec![self.len(), 2], data)
    }

    fn len(&self) -> usize {
        self.height * self.width
    }

    /// Displacement length of every pixel, in pixels.
    pub fn magnitudes_px(&self) -> Vec<f64> {
        let sx = (self.width.max(2) - 1) as f64 / 2.0;
        let sy = (self.height.max(2) - 1) as f64 / 2.0;
        self.delta
            .data()
            .chunks_exact(2)
            .map(|d| (d[0] * sx).hypot(d[1] * sy))
            .collect()
    }

    /// Mean pixel distance between the endpoints of two fields.
    pub fn mean_endpoint_error_px(&self, other: &DisplacementField) -> Result<f64> {
        if self.delta.shape() != other.delta.shape() {
            return Err(Error::shape("endpoint error", self.delta.shape(), other.delta.shape()));
        }
        let sx = (self.width - 1) as f64 / 2.0;
        let sy = (self.height - 1) as f64 / 2.0;
        let total: f64 = self
            .delta
            .data()
            .chunks_exact(2)
            .zip(other.delta.data().chunks_exact(2))
            .map(|(a, b)| ((a[0] - b[0]) * sx).hypot((a[1] - b[1]) * sy))
            .sum();
        Ok(total / self.len() as f64)
    }

    pub fn jacobian_det(&self) -> Result<Tensor> {
        let tape = Tape::new();
        let field = tape.constant(self.delta.clone());
        Ok(jacobian_det(field)?.to_tensor())
    }

    /// The same field after a trip through the on-disk `f32` representation.
    pub fn quantized(&self) -> Self {
        let data = self.delta.data().iter().map(|&v| v as f32 as f64).collect();
        DisplacementField {
            height: self.height,
            width: self.width,
            delta: Tensor::new(self.delta.shape().to_vec(), data).expect("same shape"),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(FIELD_MAGIC)?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.delta.len() * 4);
        for &v in self.delta.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(mut r: R) -> std::io::Result<Self> {
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let mut header = [0u8; 12];
        r.read_exact(&mut header)?;
        if &header[..4] != FIELD_MAGIC {
            return Err(bad("not a displacement field file"));
        }
        let height = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let n = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(2))
            .ok_or_else(|| bad("field dimensions overflow"))?;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after field data"));
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(DisplacementField {
            height,
            width,
            delta: Tensor::new(vec![height, width, 2], data).expect("sized above"),
        })
    }
}

/// Continuous pixel position for a normalized coordinate, clamped to the
/// image. Returns the base index, fractional offset and whether the
/// coordinate was inside (clamped coordinates carry no location gradient).
fn locate(x: f64, extent: usize) -> (usize, f64, bool) {
    let max = (extent - 1) as f64;
    let mut p = (x + 1.0) * 0.5 * max;
    let inside = (0.0..=max).contains(&p);
    p = p.clamp(0.0, max);
    let r = p.round();
    if (p - r).abs() <= LATTICE_SNAP {
        p = r;
    }
    let base = (p.floor() as usize).min(extent.saturating_sub(2));
    (base, p - base as f64, inside)
}

struct Tap {
    i0: usize,
    j0: usize,
    i1: usize,
    j1: usize,
    fx: f64,
    fy: f64,
    in_x: bool,
    in_y: bool,
}

fn tap(x: f64, y: f64, h: usize, w: usize) -> Tap {
    let (j0, fx, in_x) = locate(x, w);
    let (i0, fy, in_y) = locate(y, h);
    Tap {
        i0,
        j0,
        i1: (i0 + 1).min(h - 1),
        j1: (j0 + 1).min(w - 1),
        fx,
        fy,
        in_x,
        in_y,
    }
}

/// Bilinear interpolation of an `[H, W, C]` image at `[P, 2]` normalized
/// points, giving `[P, C]`. Out-of-range points read the border.
/// Differentiable in both the image values and the point locations.
pub fn bilinear_sample<'t>(image: Var<'t>, points: Var<'t>) -> Result<Var<'t>> {
    let (value, h, w, c) = {
        let img = image.value();
        let pts = points.value();
        let s = img.shape();
        if s.len() != 3 || s[0] == 0 || s[1] == 0 {
            return Err(Error::shape("bilinear_sample", s, pts.shape()));
        }
        if pts.rank() != 2 || pts.shape()[1] != 2 {
            return Err(Error::shape("bilinear_sample", s, pts.shape()));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let n = pts.shape()[0];
        let src = img.data();
        let mut out = Vec::with_capacity(n * c);
        for p in pts.data().chunks_exact(2) {
            let t = tap(p[0], p[1], h, w);
            let (w00, w01) = ((1.0 - t.fx) * (1.0 - t.fy), t.fx * (1.0 - t.fy));
            let (w10, w11) = ((1.0 - t.fx) * t.fy, t.fx * t.fy);
            for k in 0..c {
                out.push(
                    w00 * src[(t.i0 * w + t.j0) * c + k]
                        + w01 * src[(t.i0 * w + t.j1) * c + k]
                        + w10 * src[(t.i1 * w + t.j0) * c + k]
                        + w11 * src[(t.i1 * w + t.j1) * c + k],
                );
            }
        }
        (Tensor::new(vec![n, c], out)?, h, w, c)
    };
    let tape = image.tape();
    Ok(tape.custom(
        &[image, points],
        value,
        Box::new(move |ctx| {
            let src = ctx.inputs[0].data();
            let pts = ctx.inputs[1].data();
            let g = ctx.grad;
            let mut g_img = ctx.needs[0].then(|| vec![0.0; src.len()]);
            let mut g_pts = ctx.needs[1].then(|| vec![0.0; pts.len()]);
            let (sx, sy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
            for (pi, p) in pts.chunks_exact(2).enumerate() {
                let t = tap(p[0], p[1], h, w);
                let (w00, w01) = ((1.0 - t.fx) * (1.0 - t.fy), t.fx * (1.0 - t.fy));
                let (w10, w11) = ((1.0 - t.fx) * t.fy, t.fx * t.fy);
                let (mut dx, mut dy) = (0.0, 0.0);
                for k in 0..c {
                    let gk = g[pi * c + k];
                    let i00 = (t.i0 * w + t.j0) * c + k;
                    let i01 = (t.i0 * w + t.j1) * c + k;
                    let i10 = (t.i1 * w + t.j0) * c + k;
                    let i11 = (t.i1 * w + t.j1) * c + k;
                    if let Some(gi) = g_img.as_mut() {
                        gi[i00] += w00 * gk;
                        gi[i01] += w01 * gk;
                        gi[i10] += w10 * gk;
                        gi[i11] += w11 * gk;
                    }
                    if g_pts.is_some() {
                        let (v00, v01, v10, v11) = (src[i00], src[i01], src[i10], src[i11]);
                        dx += gk * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                        dy += gk * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                    }
                }
                if let Some(gp) = g_pts.as_mut() {
                    if t.in_x && w > 1 {
                        gp[2 * pi] = dx * sx;
                    }
                    if t.in_y && h > 1 {
                        gp[2 * pi + 1] = dy * sy;
                    }
                }
            }
            vec![g_img, g_pts]
        }),
    ))
}

/// Untracked bilinear sampling of an `[H, W, C]` tensor at `[P, 2]` points.
pub fn sample(image: &Tensor, points: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let out = bilinear_sample(tape.constant(image.clone()), tape.constant(points.clone()))?;
    Ok(out.to_tensor())
}

fn check_min_grid(shape: &[usize]) -> Result<(usize, usize)> {
    let (h, w) = (shape[0], shape[1]);
    if h < 3 || w < 3 {
        return Err(Error::DegenerateGrid {
            height: h,
            width: w,
            min: 3,
        });
    }
    Ok((h, w))
}

/// Finite-difference derivative weights along one axis: for index `i` of an
/// axis of length `n`, returns `(lo, hi, scale)` with
/// `d/ds v[i] ≈ (v[hi] - v[lo]) * scale`.
fn stencil(i: usize, n: usize, spacing: f64) -> (usize, usize, f64) {
    if i == 0 {
        (0, 1, 1.0 / spacing)
    } else if i == n - 1 {
        (n - 2, n - 1, 1.0 / spacing)
    } else {
        (i - 1, i + 1, 0.5 / spacing)
    }
}

/// Spatial derivatives of an `[H, W, C]` grid in normalized units, giving
/// `[H, W, C, 2]` with `(∂/∂x, ∂/∂y)` last. Central differences inside,
/// one-sided at the borders.
pub fn spatial_gradient(values: Var<'_>) -> Result<Var<'_>> {
    let (value, h, w, c) = {
        let v = values.value();
        let s = v.shape();
        if s.len() != 3 {
            return Err(Error::shape("spatial_gradient", s, &[0, 0, 0]));
        }
        let (h, w) = check_min_grid(s)?;
        let c = s[2];
        let (hx, hy) = (2.0 / (w - 1) as f64, 2.0 / (h - 1) as f64);
        let src = v.data();
        let mut out = vec![0.0; h * w * c * 2];
        for i in 0..h {
            let (ilo, ihi, sy) = stencil(i, h, hy);
            for j in 0..w {
                let (jlo, jhi, sx) = stencil(j, w, hx);
                for k in 0..c {
                    let o = ((i * w + j) * c + k) * 2;
                    out[o] = (src[(i * w + jhi) * c + k] - src[(i * w + jlo) * c + k]) * sx;
                    out[o + 1] = (src[(ihi * w + j) * c + k] - src[(ilo * w + j) * c + k]) * sy;
                }
            }
        }
        (Tensor::new(vec![h, w, c, 2], out)?, h, w, c)
    };
    Ok(values.tape().custom(
        &[values],
        value,
        Box::new(move |ctx| {
            let (hx, hy) = (2.0 / (w - 1) as f64, 2.0 / (h - 1) as f64);
            let g = ctx.grad;
            let mut out = vec![0.0; h * w * c];
            for i in 0..h {
                let (ilo, ihi, sy) = stencil(i, h, hy);
                for j in 0..w {
                    let (jlo, jhi, sx) = stencil(j, w, hx);
                    for k in 0..c {
                        let o = ((i * w + j) * c + k) * 2;
                        let (gx, gy) = (g[o] * sx, g[o + 1] * sy);
                        out[(i * w + jhi) * c + k] += gx;
                        out[(i * w + jlo) * c + k] -= gx;
                        out[(ihi * w + j) * c + k] += gy;
                        out[(ilo * w + j) * c + k] -= gy;
                    }
                }
            }
            vec![Some(out)]
        }),
    ))
}

/// Determinant of the Jacobian of `Φ(x) = x + Δx` for an `[H, W, 2]`
/// displacement grid, giving `[H, W]`.
pub fn jacobian_det(field: Var<'_>) -> Result<Var<'_>> {
    let s = field.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(Error::shape("jacobian_det", &s, &[0, 0, 2]));
    }
    let (h, w) = check_min_grid(&s)?;
    let g = spatial_gradient(field)?.reshape(vec![h, w, 4])?;
    // Component order: ∂Δx/∂x, ∂Δx/∂y, ∂Δy/∂x, ∂Δy/∂y.
    let dxx = g.take_last(0)?.add_scalar(1.0);
    let dxy = g.take_last(1)?;
    let dyx = g.take_last(2)?;
    let dyy = g.take_last(3)?.add_scalar(1.0);
    dxx.mul(dyy)?.sub(dxy.mul(dyx)?)
}
