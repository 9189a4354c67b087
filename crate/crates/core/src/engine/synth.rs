//! Synthetic benchmark pairs with a known displacement field.
//!
//! The fixed image is an analytic phantom: a soft elliptical "brain" with a
//! few interior structures over a field of faint smooth blobs. The moving image satisfies
//! `M(x + t(x)) = F(x)` for the returned field `t`, plus optional Gaussian
//! "expression" blobs painted in moving space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::metrics::Mask;
use crate::warp::{CoordinateGrid, DisplacementField};

/// Mask threshold on the blob envelope.
const TEXTURE_MASK_LEVEL: f64 = 0.1;
const INVERSION_ITERS: usize = 200;
const INVERSION_TOL: f64 = 1e-13;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureConfig {
    pub blobs: usize,
    /// Peak intensity added at each blob centre.
    pub contrast: f64,
    /// Gaussian radius in pixels.
    pub radius_px: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig {
            blobs: 4,
            contrast: 0.4,
            radius_px: 2.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// `(height, width)`.
    pub size: (usize, usize),
    /// Maximum displacement magnitude in pixels.
    pub deform_amp: f64,
    pub texture: Option<TextureConfig>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            size: (64, 64),
            deform_amp: 6.0,
            texture: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub moving: Image,
    pub fixed: Image,
    /// `M(x + t(x)) = F(x)`.
    pub true_field: DisplacementField,
    pub texture_mask: Mask,
    /// Interior structures in fixed space.
    pub fixed_structures: Vec<Mask>,
    /// The same structures in moving space.
    pub moving_structures: Vec<Mask>,
}

#[derive(Clone, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    intensity: f64,
}

impl Ellipse {
    /// Normalized radius: 1 on the boundary.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        (u * u + v * v).sqrt()
    }

    /// Soft indicator in `[0, 1]`, 0.5 on the boundary.
    fn occupancy(&self, x: f64, y: f64, edge: f64) -> f64 {
        let d = (self.rho(x, y) - 1.0) * self.rx.min(self.ry);
        0.5 * (1.0 - (d / edge).tanh())
    }
}

struct Phantom {
    tissue: Ellipse,
    structures: Vec<Ellipse>,
    /// `(cx, cy, radius, amplitude)` of the smooth background blobs.
    blobs: Vec<(f64, f64, f64, f64)>,
    edge: f64,
}

const BACKGROUND: f64 = 0.12;
const TISSUE: f64 = 0.35;
const STRUCTURE_LEVELS: [f64; 4] = [0.8, 0.6, 0.95, 0.15];
const BLOB_COUNT: usize = 30;
const BLOB_AMPLITUDE: f64 = 0.1;

impl Phantom {
    fn random(rng: &mut ChaCha8Rng, edge: f64) -> Self {
        let tissue = Ellipse {
            cx: rng.gen_range(-0.05..0.05),
            cy: rng.gen_range(-0.05..0.05),
            rx: rng.gen_range(0.72..0.8),
            ry: rng.gen_range(0.62..0.72),
            cos: 1.0,
            sin: 0.0,
            intensity: TISSUE,
        };
        let mut structures: Vec<Ellipse> = Vec::new();
        let mut attempts = 0;
        while structures.len() < STRUCTURE_LEVELS.len() && attempts < 10_000 {
            attempts += 1;
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let cand = Ellipse {
                cx: tissue.cx + rng.gen_range(-0.45..0.45),
                cy: tissue.cy + rng.gen_range(-0.4..0.4),
                rx: rng.gen_range(0.14..0.26),
                ry: rng.gen_range(0.1..0.2),
                cos: theta.cos(),
                sin: theta.sin(),
                intensity: STRUCTURE_LEVELS[structures.len()],
            };
            let inside = (0..16).all(|k| {
                let a = k as f64 * std::f64::consts::TAU / 16.0;
                let (u, v) = (cand.rx * 1.3 * a.cos(), cand.ry * 1.3 * a.sin());
                let x = cand.cx + u * cand.cos - v * cand.sin;
                let y = cand.cy + u * cand.sin + v * cand.cos;
                tissue.rho(x, y) < 0.92
            });
            let apart = structures.iter().all(|s| {
                let dist = ((s.cx - cand.cx).powi(2) + (s.cy - cand.cy).powi(2)).sqrt();
                dist > 1.25 * (s.rx.max(s.ry) + cand.rx.max(cand.ry))
            });
            if inside && apart {
                structures.push(cand);
            }
        }
        let blobs = (0..BLOB_COUNT)
            .map(|_| {
                (
                    rng.gen_range(-1.1..1.1),
                    rng.gen_range(-1.1..1.1),
                    rng.gen_range(0.2..0.4),
                    rng.gen_range(-BLOB_AMPLITUDE..BLOB_AMPLITUDE),
                )
            })
            .collect();
        Phantom {
            tissue,
            structures,
            blobs,
            edge,
        }
    }

    fn intensity(&self, x: f64, y: f64) -> f64 {
        let t = self.tissue.occupancy(x, y, self.edge);
        let shade: f64 = self
            .blobs
            .iter()
            .map(|&(cx, cy, r, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp())
            .sum();
        let mut v = BACKGROUND + t * (TISSUE - BACKGROUND) + shade;
        for s in &self.structures {
            let o = s.occupancy(x, y, self.edge);
            v = v * (1.0 - o) + s.intensity * o;
        }
        v
    }
}

/// Low-frequency sinusoidal field in normalized units, the rotated gradient
/// of a two-term stream function, so it is divergence-free.
struct SineField {
    freq: [f64; 4],
    phase: [f64; 4],
    amp: (f64, f64),
    scale: f64,
}

impl SineField {
    fn raw(&self, x: f64, y: f64) -> (f64, f64) {
        let pi = std::f64::consts::PI;
        let k = self.freq.map(|f| pi * f);
        let p = self.phase;
        let (a, b) = self.amp;
        // psi = a sin(k0 x + p0) sin(k1 y + p1) + b cos(k2 x + p2) cos(k3 y + p3)
        let psi_x = a * k[0] * (k[0] * x + p[0]).cos() * (k[1] * y + p[1]).sin()
            - b * k[2] * (k[2] * x + p[2]).sin() * (k[3] * y + p[3]).cos();
        let psi_y = a * k[1] * (k[0] * x + p[0]).sin() * (k[1] * y + p[1]).cos()
            - b * k[3] * (k[2] * x + p[2]).cos() * (k[3] * y + p[3]).sin();
        (psi_y, -psi_x)
    }

    fn eval(&self, x: f64, y: f64) -> (f64, f64) {
        let (a, b) = self.raw(x, y);
        (self.scale * a, self.scale * b)
    }
}

/// Generates a pair with `M(x + t(x)) = F(x)`.
pub fn make_synthetic_pair(config: &SynthConfig) -> Result<SyntheticPair> {
    let (h, w) = config.size;
    let grid = CoordinateGrid::new(h, w)?;
    if !(config.deform_amp.is_finite() && config.deform_amp >= 0.0) {
        return Err(Error::Config(format!("deform_amp must be a finite non-negative pixel count, got {}", config.deform_amp)));
    }
    if let Some(t) = &config.texture {
        if t.radius_px.is_nan() || t.radius_px <= 0.0 || !t.contrast.is_finite() {
            return Err(Error::Config("texture radius must be positive and contrast finite".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (sx, sy) = grid.pixels_per_unit();
    let edge = 1.0 / sx.max(sy);
    let phantom = Phantom::random(&mut rng, edge);

    let mut field = SineField {
        freq: [0.0; 4].map(|_| rng.gen_range(0.5..1.0)),
        phase: [0.0; 4].map(|_| rng.gen_range(0.0..std::f64::consts::TAU)),
        amp: (rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)),
        scale: 0.0,
    };
    let peak_px = grid
        .coords()
        .data()
        .chunks_exact(2)
        .map(|p| {
            let (dx, dy) = field.raw(p[0], p[1]);
            (dx * sx).hypot(dy * sy)
        })
        .fold(0.0, f64::max);
    field.scale = if config.deform_amp == 0.0 { 0.0 } else { config.deform_amp / peak_px };

    let true_field = DisplacementField::from_fn(&grid, |x, y| field.eval(x, y));
    let det = true_field.jacobian_det()?;
    let min_det = det.data().iter().copied().fold(f64::INFINITY, f64::min);
    if min_det.is_nan() || min_det <= 0.0 {
        return Err(Error::FoldingField { min_det });
    }

    // Pre-image of each moving-space pixel under x -> x + t(x).
    let mut preimages = Vec::with_capacity(h * w);
    for p in grid.coords().data().chunks_exact(2) {
        let (y0, y1) = (p[0], p[1]);
        let (mut x0, mut x1) = (y0, y1);
        let mut converged = field.scale == 0.0;
        for _ in 0..INVERSION_ITERS {
            let (t0, t1) = field.eval(x0, x1);
            let (n0, n1) = (y0 - t0, y1 - t1);
            let step = (n0 - x0).abs().max((n1 - x1).abs());
            (x0, x1) = (n0, n1);
            if step < INVERSION_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::FoldingField { min_det });
        }
        preimages.push((x0, x1));
    }

    let fixed = intensity_image(&grid, |x, y| phantom.intensity(x, y));
    let mut moving_data: Vec<f64> = preimages.iter().map(|&(x, y)| phantom.intensity(x, y)).collect();
    if field.scale == 0.0 {
        moving_data.copy_from_slice(fixed.data());
    }

    let mut envelope = vec![0.0f64; h * w];
    if let Some(t) = config.texture.filter(|t| t.blobs > 0) {
        let r = t.radius_px / sx.min(sy);
        for _ in 0..t.blobs {
            // Centres inside the tissue, away from the border.
            let (cx, cy) = loop {
                let c = (rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7));
                if phantom.tissue.rho(c.0, c.1) < 0.8 {
                    break c;
                }
            };
            for (k, p) in grid.coords().data().chunks_exact(2).enumerate() {
                let d2 = (p[0] - cx).powi(2) + (p[1] - cy).powi(2);
                let g = (-d2 / (2.0 * r * r)).exp();
                moving_data[k] += t.contrast * g;
                envelope[k] = envelope[k].max(g);
            }
        }
    }
    let moving = Image::new(h, w, 1, moving_data)?;
    let texture_mask = Mask::new(h, w, envelope.iter().map(|&g| g > TEXTURE_MASK_LEVEL).collect())?;

    let coords = grid.coords().data();
    let fixed_structures = phantom
        .structures
        .iter()
        .map(|s| Mask::from_fn(h, w, |i, j| {
            let k = 2 * (i * w + j);
            s.rho(coords[k], coords[k + 1]) < 1.0
        }))
        .collect();
    let moving_structures = phantom
        .structures
        .iter()
        .map(|s| Mask::from_fn(h, w, |i, j| {
            let (x, y) = preimages[i * w + j];
            s.rho(x, y) < 1.0
        }))
        .collect();

    Ok(SyntheticPair {
        moving,
        fixed,
        true_field,
        texture_mask,
        fixed_structures,
        moving_structures,
    })
}

fn intensity_image(grid: &CoordinateGrid, f: impl Fn(f64, f64) -> f64) -> Image {
    let data = grid.coords().data().chunks_exact(2).map(|p| f(p[0], p[1])).collect();
    Image::new(grid.height(), grid.width(), 1, data).expect("grid shape")
}
