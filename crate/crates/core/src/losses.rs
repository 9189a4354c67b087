//! Registration and decomposition objectives.
//!
//! Every function records onto the tape of its inputs, so the returned scalar
//! can be differentiated with respect to whatever produced them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::warp::spatial_gradient;

/// Weights of the five objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Similarity between the fixed image and the warped moving image.
    pub cc_moving: f64,
    /// Similarity between the fixed image and the warped support image.
    pub cc_support: f64,
    /// Jacobian-determinant regularizer.
    pub reg: f64,
    /// Support + residual reconstruction of the moving image.
    pub rec: f64,
    /// Exclusion between support and residual gradients.
    pub excl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cc_moving: 1.0,
            cc_support: 1.0,
            reg: 1.0,
            rec: 100.0,
            excl: 1.0,
        }
    }
}

impl LossWeights {
    pub fn from_array(a: [f64; 5]) -> Self {
        LossWeights {
            cc_moving: a[0],
            cc_support: a[1],
            reg: a[2],
            rec: a[3],
            excl: a[4],
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.cc_moving, self.cc_support, self.reg, self.rec, self.excl]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|a| a.is_finite() && *a >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LnccConfig {
    /// Window extent in pixels, `(rows, cols)`.
    pub window: (usize, usize),
    /// Added to covariance and both variances.
    pub eps: f64,
}

impl Default for LnccConfig {
    fn default() -> Self {
        LnccConfig {
            window: (32, 32),
            eps: 1e-5,
        }
    }
}

impl LnccConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let (wh, ww) = self.window;
        if wh < 2 || ww < 2 || wh > height || ww > width {
            return Err(Error::Config(format!(
                "LNCC window {wh}x{ww} must be at least 2x2 and fit in {height}x{width}"
            )));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("LNCC epsilon must be non-negative, got {}", self.eps)));
        }
        Ok(())
    }

    /// `(before, after)` offsets for an extent: `before + 1 + after = extent`.
    fn offsets(extent: usize) -> (usize, usize) {
        let before = extent / 2;
        (before, extent - 1 - before)
    }
}

/// Channel mean of an `[H, W, C]` grid.
pub fn luminance(v: Var<'_>) -> Result<Var<'_>> {
    let s = v.shape();
    if s.len() != 3 {
        return Err(Error::shape("luminance", &s, &[0, 0, 0]));
    }
    Ok(v.mean_last())
}

/// `(a + ε) / sqrt((b + ε)(c + ε))`. Exactly ±1 for identical or negated inputs
/// when `a = ±b = ±c`.
fn stabilized_ratio<'t>(cov: Var<'t>, var_a: Var<'t>, var_b: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let den = var_a.add_scalar(eps).mul(var_b.add_scalar(eps))?.sqrt();
    cov.add_scalar(eps).div(den)
}

/// Global Pearson correlation of two equally shaped tensors.
pub fn ncc<'t>(f: Var<'t>, t: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let (sf, st) = (f.shape(), t.shape());
    if sf != st {
        return Err(Error::shape("ncc", &sf, &st));
    }
    let fc = f.sub(f.mean())?;
    let tc = t.sub(t.mean())?;
    let cov = fc.mul(tc)?.mean();
    let var_f = fc.square().mean();
    let var_t = tc.square().mean();
    stabilized_ratio(cov, var_f, var_t, eps)
}

/// Per-pixel Pearson correlation over a sliding window clipped at the
/// borders, for two `[H, W]` grids.
pub fn lncc_map<'t>(f: Var<'t>, t: Var<'t>, cfg: &LnccConfig) -> Result<Var<'t>> {
    let (sf, st) = (f.shape(), t.shape());
    if sf != st || sf.len() != 2 {
        return Err(Error::shape("lncc", &sf, &st));
    }
    let (h, w) = (sf[0], sf[1]);
    cfg.validate(h, w)?;
    let rows = LnccConfig::offsets(cfg.window.0);
    let cols = LnccConfig::offsets(cfg.window.1);
    let tape = f.tape();
    let counts = kernels_count(h, w, rows, cols);
    let inv_n = tape.constant(counts);

    let local_mean = |v: Var<'t>| -> Result<Var<'t>> { v.box_sum2d(rows, cols)?.mul(inv_n) };
    let mu_f = local_mean(f)?;
    let mu_t = local_mean(t)?;
    let cov = local_mean(f.mul(t)?)?.sub(mu_f.mul(mu_t)?)?;
    let var_f = local_mean(f.square())?.sub(mu_f.square())?;
    let var_t = local_mean(t.square())?.sub(mu_t.square())?;
    stabilized_ratio(cov, var_f, var_t, cfg.eps)
}

/// Reciprocal window sizes for every pixel.
fn kernels_count(h: usize, w: usize, rows: (usize, usize), cols: (usize, usize)) -> Tensor {
    let ones = vec![1.0; h * w];
    let n = crate::autodiff::kernels::box_sum(&ones, h, w, rows, cols);
    Tensor::new(vec![h, w], n.into_iter().map(|c| 1.0 / c).collect()).expect("grid shape")
}

/// `½[(1 − NCC) + (1 − mean LNCC)]` between the luminance of two `[H, W, C]`
/// grids (channel counts may differ).
pub fn loss_cc<'t>(fixed: Var<'t>, warped: Var<'t>, cfg: &LnccConfig) -> Result<Var<'t>> {
    let (sf, st) = (fixed.shape(), warped.shape());
    if sf.len() != 3 || st.len() != 3 || sf[..2] != st[..2] {
        return Err(Error::shape("loss_cc", &sf, &st));
    }
    let f = luminance(fixed)?;
    let t = luminance(warped)?;
    let global = ncc(f, t, cfg.eps)?;
    let local = lncc_map(f, t, cfg)?.mean();
    Ok(global.add(local)?.neg().add_scalar(2.0).scale(0.5))
}

/// Mean of `|1 − det|` over the grid.
pub fn loss_reg(det: Var<'_>) -> Var<'_> {
    det.neg().add_scalar(1.0).abs().mean()
}

/// Mean squared difference between the moving image and support + residual.
pub fn loss_rec<'t>(moving: Var<'t>, support: Var<'t>, residual: Var<'t>) -> Result<Var<'t>> {
    let (sm, ss, sr) = (moving.shape(), support.shape(), residual.shape());
    if sm != ss {
        return Err(Error::shape("loss_rec", &sm, &ss));
    }
    if sm != sr {
        return Err(Error::shape("loss_rec", &sm, &sr));
    }
    Ok(moving.sub(support)?.sub(residual)?.square().mean())
}

/// Mean over pixels of `Σ |tanh(∇S) ⊙ tanh(∇R)|` for `[H, W, C, 2]` gradient grids.
pub fn loss_excl<'t>(grad_support: Var<'t>, grad_residual: Var<'t>) -> Result<Var<'t>> {
    let (ss, sr) = (grad_support.shape(), grad_residual.shape());
    if ss != sr || ss.len() < 2 {
        return Err(Error::shape("loss_excl", &ss, &sr));
    }
    let pixels = (ss[0] * ss[1]).max(1);
    Ok(grad_support
        .tanh()
        .mul(grad_residual.tanh())?
        .abs()
        .sum()
        .scale(1.0 / pixels as f64))
}

/// Exclusion loss computed from rendered `[H, W, C]` support and residual grids.
pub fn loss_excl_images<'t>(support: Var<'t>, residual: Var<'t>) -> Result<Var<'t>> {
    loss_excl(spatial_gradient(support)?, spatial_gradient(residual)?)
}

/// The individual objective terms; absent terms are skipped.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub cc_moving: Var<'t>,
    pub cc_support: Option<Var<'t>>,
    pub reg: Var<'t>,
    pub rec: Option<Var<'t>>,
    pub excl: Option<Var<'t>>,
}

impl<'t> LossTerms<'t> {
    pub fn values(&self) -> [Option<f64>; 5] {
        [
            Some(self.cc_moving.item()),
            self.cc_support.map(|v| v.item()),
            Some(self.reg.item()),
            self.rec.map(|v| v.item()),
            self.excl.map(|v| v.item()),
        ]
    }
}

/// `Σ αᵢ · termᵢ` over the present terms.
pub fn composite_loss<'t>(terms: &LossTerms<'t>, weights: &LossWeights) -> Result<Var<'t>> {
    let mut total = terms.cc_moving.scale(weights.cc_moving);
    total = total.add(terms.reg.scale(weights.reg))?;
    for (term, alpha) in [
        (terms.cc_support, weights.cc_support),
        (terms.rec, weights.rec),
        (terms.excl, weights.excl),
    ] {
        if let Some(t) = term {
            total = total.add(t.scale(alpha))?;
        }
    }
    Ok(total)
}

/// Untracked global NCC between the luminance of two `[H, W, C]` grids.
pub fn ncc_value(a: &Tensor, b: &Tensor, eps: f64) -> Result<f64> {
    let tape = Tape::new();
    let la = luminance(tape.constant(a.clone()))?;
    let lb = luminance(tape.constant(b.clone()))?;
    Ok(ncc(la, lb, eps)?.item())
}

/// Untracked exclusion loss between two rendered `[H, W, C]` grids.
pub fn exclusion_value(support: &Tensor, residual: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(loss_excl_images(tape.constant(support.clone()), tape.constant(residual.clone()))?.item())
}
