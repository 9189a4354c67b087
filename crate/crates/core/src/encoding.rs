//! Fourier positional encoding of normalized coordinates.
//!
//! For frequency index `j = 0..N` and each coordinate component `x_d` the
//! encoding emits `cos(2π σ^j x_d)` followed by `sin(2π σ^j x_d)`. Frequencies
//! form the outer loop, components the inner loop.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierConfig {
    pub num_frequencies: usize,
    pub sigma: f64,
    pub input_dim: usize,
}

impl Default for FourierConfig {
    fn default() -> Self {
        FourierConfig {
            num_frequencies: 6,
            sigma: 2.0,
            input_dim: 2,
        }
    }
}

impl FourierConfig {
    pub fn new(num_frequencies: usize, sigma: f64, input_dim: usize) -> Result<Self> {
        let cfg = FourierConfig {
            num_frequencies,
            sigma,
            input_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frequencies == 0 {
            return Err(Error::Config("at least one Fourier frequency is required".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("Fourier base must be positive, got {}", self.sigma)));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        Ok(())
    }

    /// `2 · N · d`.
    pub fn encoded_len(&self) -> usize {
        2 * self.num_frequencies * self.input_dim
    }

    /// Raw coordinates plus encoding, `d + 2 · N · d`.
    pub fn network_input_len(&self) -> usize {
        self.input_dim + self.encoded_len()
    }

    fn write_encoding(&self, x: &[f64], out: &mut Vec<f64>) {
        assert_eq!(x.len(), self.input_dim, "coordinate dimension");
        let mut freq = 2.0 * PI;
        for _ in 0..self.num_frequencies {
            for &xd in x {
                let arg = freq * xd;
                out.push(arg.cos());
                out.push(arg.sin());
            }
            freq *= self.sigma;
        }
    }
}

pub fn fourier_encode(x: &[f64], cfg: &FourierConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.encoded_len());
    cfg.write_encoding(x, &mut out);
    out
}

/// `[x, FE(x)]`.
pub fn network_input(x: &[f64], cfg: &FourierConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.network_input_len());
    out.extend_from_slice(x);
    cfg.write_encoding(x, &mut out);
    out
}

/// Network inputs for a `[P, d]` batch of coordinates, as a `[P, d + 2Nd]` tensor.
pub fn encode_batch(coords: &Tensor, cfg: &FourierConfig) -> Result<Tensor> {
    let d = cfg.input_dim;
    if coords.rank() != 2 || coords.shape()[1] != d {
        return Err(Error::shape("encode_batch", coords.shape(), &[0, d]));
    }
    let rows = coords.shape()[0];
    let mut data = Vec::with_capacity(rows * cfg.network_input_len());
    for x in coords.data().chunks_exact(d) {
        data.extend_from_slice(x);
        cfg.write_encoding(x, &mut data);
    }
    Tensor::new(vec![rows, cfg.network_input_len()], data)
}
