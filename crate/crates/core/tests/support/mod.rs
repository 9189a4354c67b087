//! Finite-difference gradient checks for every loss term, driven through
//! small sinusoidal networks. Shared with the workspace acceptance suite.

#![allow(dead_code)]

use impreg_core::losses::{loss_cc, loss_excl_images, loss_rec, loss_reg, LnccConfig};
use impreg_core::warp::{bilinear_sample, jacobian_det, spatial_gradient};
use impreg_core::{
    make_synthetic_pair, CoordinateGrid, FourierConfig, Image, SirenConfig, SirenNetwork, SynthConfig, Tape,
    Tensor, TextureConfig,
};

pub const STEP: f64 = 1e-4;
/// Denominator floor for the per-parameter relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Cc,
    Reg,
    Rec,
    Excl,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Cc, Term::Reg, Term::Rec, Term::Excl];

    pub fn name(self) -> &'static str {
        match self {
            Term::Cc => "cc",
            Term::Reg => "reg",
            Term::Rec => "rec",
            Term::Excl => "excl",
        }
    }

    fn uses_deformation(self) -> bool {
        matches!(self, Term::Cc | Term::Reg)
    }
}

/// Small networks and a small image pair.
pub struct Fixture {
    pub grid: CoordinateGrid,
    pub moving: Image,
    pub fixed: Image,
    pub lncc: LnccConfig,
    pub deformation: SirenNetwork,
    pub support: SirenNetwork,
    pub residual: SirenNetwork,
}

pub const SIZE: usize = 10;

/// A network with three sine layers, the skip after the second.
pub fn small_config() -> SirenConfig {
    SirenConfig {
        hidden_width: 8,
        num_hidden: 3,
        skip_after: 2,
        encoding: FourierConfig {
            num_frequencies: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

impl Fixture {
    pub fn new(draw: u64) -> Fixture {
        let pair = make_synthetic_pair(&SynthConfig {
            seed: 100,
            size: (SIZE, SIZE),
            deform_amp: 0.8,
            texture: Some(TextureConfig {
                blobs: 1,
                contrast: 0.3,
                radius_px: 1.5,
            }),
        })
        .unwrap();
        let cfg = small_config();
        let mut deformation = SirenNetwork::init(3 * draw, 2, &cfg).unwrap();
        // Offset the field so sample points sit inside pixel cells.
        let unit = 2.0 / (SIZE - 1) as f64;
        let bias = deformation.params_mut().pop().unwrap();
        bias.data_mut().copy_from_slice(&[-0.37 * unit, -0.23 * unit]);
        Fixture {
            grid: CoordinateGrid::new(SIZE, SIZE).unwrap(),
            moving: pair.moving,
            fixed: pair.fixed,
            lncc: LnccConfig {
                window: (3, 3),
                ..Default::default()
            },
            deformation,
            support: SirenNetwork::init(3 * draw + 1, 1, &cfg).unwrap(),
            residual: SirenNetwork::init(3 * draw + 2, 1, &cfg).unwrap(),
        }
    }

    fn networks(&self, term: Term) -> Vec<&SirenNetwork> {
        if term.uses_deformation() {
            vec![&self.deformation]
        } else {
            vec![&self.support, &self.residual]
        }
    }

    fn networks_mut(&mut self, term: Term) -> Vec<&mut SirenNetwork> {
        if term.uses_deformation() {
            vec![&mut self.deformation]
        } else {
            vec![&mut self.support, &mut self.residual]
        }
    }

    /// Loss value and, when `trainable`, the flattened parameter gradient.
    pub fn evaluate(&self, term: Term, trainable: bool) -> (f64, Vec<f64>) {
        let tape = Tape::new();
        let (h, w) = (SIZE, SIZE);
        let coords = self.grid.coords();
        let fwds: Vec<_> = self
            .networks(term)
            .into_iter()
            .map(|n| n.forward(&tape, coords, trainable).unwrap())
            .collect();
        let loss = match term {
            Term::Cc => {
                let phi = tape.constant(coords.clone()).add(fwds[0].output).unwrap();
                let warped = bilinear_sample(tape.constant(self.moving.to_tensor()), phi)
                    .unwrap()
                    .reshape(vec![h, w, 1])
                    .unwrap();
                loss_cc(tape.constant(self.fixed.to_tensor()), warped, &self.lncc).unwrap()
            }
            Term::Reg => loss_reg(jacobian_det(fwds[0].output.reshape(vec![h, w, 2]).unwrap()).unwrap()),
            Term::Rec | Term::Excl => {
                let s = fwds[0].output.reshape(vec![h, w, 1]).unwrap();
                let r = fwds[1].output.reshape(vec![h, w, 1]).unwrap();
                if term == Term::Rec {
                    loss_rec(tape.constant(self.moving.to_tensor()), s, r).unwrap()
                } else {
                    loss_excl_images(s, r).unwrap()
                }
            }
        };
        let value = loss.item();
        if !trainable {
            return (value, Vec::new());
        }
        let grads = tape.backward(loss).unwrap();
        let flat = fwds
            .iter()
            .flat_map(|f| f.params.iter().flat_map(|&p| grads.wrt(p).into_data()))
            .collect();
        (value, flat)
    }

    /// Which side of every non-differentiable point the current parameters
    /// sit on: bilinear cell indices for `cc`, signs of the `abs` arguments
    /// for `reg` and `excl`.
    pub fn kink_signature(&self, term: Term) -> Vec<i64> {
        let tape = Tape::new();
        let (h, w) = (SIZE, SIZE);
        let sign = |v: f64| if v > 0.0 { 1 } else if v < 0.0 { -1 } else { 0 };
        match term {
            Term::Cc => {
                let delta = self.deformation.eval(self.grid.coords()).unwrap();
                let scale = (SIZE - 1) as f64 / 2.0;
                self.grid
                    .coords()
                    .data()
                    .iter()
                    .zip(delta.data())
                    .map(|(c, d)| ((c + d + 1.0) * scale).floor() as i64)
                    .collect()
            }
            Term::Reg => {
                let delta = self.deformation.eval(self.grid.coords()).unwrap();
                let det = jacobian_det(tape.constant(delta.reshape(vec![h, w, 2]).unwrap())).unwrap();
                let signs = det.value().data().iter().map(|d| sign(1.0 - d)).collect();
                signs
            }
            Term::Rec => Vec::new(),
            Term::Excl => {
                let render = |n: &SirenNetwork| {
                    let out = n.eval(self.grid.coords()).unwrap().reshape(vec![h, w, 1]).unwrap();
                    spatial_gradient(tape.constant(out)).unwrap().tanh().to_tensor()
                };
                let (gs, gr) = (render(&self.support), render(&self.residual));
                gs.data().iter().zip(gr.data()).map(|(a, b)| sign(a * b)).collect()
            }
        }
    }

    /// Parameter tensor lengths of the term's networks, in gradient order.
    pub fn tensor_lengths(&self, term: Term) -> Vec<usize> {
        self.networks(term)
            .iter()
            .flat_map(|n| n.params().into_iter().map(|t| t.len()).collect::<Vec<_>>())
            .collect()
    }

    /// Central differences of the loss over every parameter of the term's
    /// networks, or `None` when a stencil crosses a non-differentiable point.
    pub fn numeric_gradient(&mut self, term: Term) -> Option<Vec<f64>> {
        let base = self.kink_signature(term);
        let mut out = Vec::new();
        let counts: Vec<Vec<usize>> = self
            .networks(term)
            .iter()
            .map(|n| n.params().iter().map(|t| t.len()).collect())
            .collect();
        for (ni, tensors) in counts.iter().enumerate() {
            for (ti, &len) in tensors.iter().enumerate() {
                for k in 0..len {
                    let original = self.networks(term)[ni].params()[ti].data()[k];
                    let probe = |v: f64, fx: &mut Fixture| {
                        fx.networks_mut(term).swap_remove(ni).params_mut()[ti].data_mut()[k] = v;
                        let value = fx.evaluate(term, false).0;
                        (value, fx.kink_signature(term))
                    };
                    let (plus, sig_plus) = probe(original + STEP, self);
                    let (minus, sig_minus) = probe(original - STEP, self);
                    probe(original, self);
                    if sig_plus != base || sig_minus != base {
                        return None;
                    }
                    out.push((plus - minus) / (2.0 * STEP));
                }
            }
        }
        Some(out)
    }
}

#[derive(Clone, Debug)]
pub struct TermReport {
    pub term: Term,
    pub draws: usize,
    /// Draws replaced because a stencil crossed a kink.
    pub skipped: usize,
    /// Worst `‖a − n‖ / max(‖a‖, ‖n‖)` over parameter tensors.
    pub worst_tensor: f64,
    /// Worst per-component [`relative_error`].
    pub worst_component: f64,
    pub params: usize,
}

/// Norm-wise relative error of one parameter tensor's gradient.
pub fn tensor_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale.max(REL_FLOOR)
    }
}

/// Checks `draws` accepted parameter draws for one term.
pub fn check_term(term: Term, draws: usize) -> TermReport {
    let mut report = TermReport {
        term,
        draws,
        skipped: 0,
        worst_tensor: 0.0,
        worst_component: 0.0,
        params: 0,
    };
    let mut seed = 0u64;
    let mut accepted = 0;
    while accepted < draws {
        let mut fx = Fixture::new(seed);
        seed += 1;
        let Some(numeric) = fx.numeric_gradient(term) else {
            report.skipped += 1;
            assert!(report.skipped < 10 * draws, "too many draws near a kink for {}", term.name());
            continue;
        };
        let (_, analytic) = fx.evaluate(term, true);
        assert_eq!(analytic.len(), numeric.len());
        report.params = analytic.len();
        let mut offset = 0;
        for len in fx.tensor_lengths(term) {
            let (a, n) = (&analytic[offset..offset + len], &numeric[offset..offset + len]);
            report.worst_tensor = report.worst_tensor.max(tensor_relative_error(a, n));
            offset += len;
        }
        for (a, n) in analytic.iter().zip(&numeric) {
            report.worst_component = report.worst_component.max(relative_error(*a, *n));
        }
        accepted += 1;
    }
    report
}

/// Loss of a `2 → 16 → 1` sine network on fixed inputs, for the plain
/// network check.
pub fn tiny_net_check(seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut w1: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut b1: Vec<f64> = (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let mut w2: Vec<f64> = (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |w1: &[f64], b1: &[f64], w2: &[f64], grad: bool| {
        let tape = Tape::new();
        let xs = tape.constant(Tensor::new(vec![5, 2], x.clone()).unwrap());
        let (a, b, c) = if grad {
            (
                tape.leaf(Tensor::new(vec![2, 16], w1.to_vec()).unwrap()),
                tape.leaf(Tensor::from_vec(b1.to_vec())),
                tape.leaf(Tensor::new(vec![16, 1], w2.to_vec()).unwrap()),
            )
        } else {
            (
                tape.constant(Tensor::new(vec![2, 16], w1.to_vec()).unwrap()),
                tape.constant(Tensor::from_vec(b1.to_vec())),
                tape.constant(Tensor::new(vec![16, 1], w2.to_vec()).unwrap()),
            )
        };
        let hidden = xs.matmul(a).unwrap().sub(b).unwrap().scale(3.0).sin();
        let out = hidden.matmul(c).unwrap();
        let t = tape.constant(Tensor::new(vec![5, 1], target.clone()).unwrap());
        let l = out.sub(t).unwrap().square().mean();
        let value = l.item();
        let g = grad.then(|| {
            let g = tape.backward(l).unwrap();
            [g.wrt(a), g.wrt(b), g.wrt(c)].into_iter().flat_map(|t| t.into_data()).collect::<Vec<_>>()
        });
        (value, g)
    };
    let analytic = loss(&w1, &b1, &w2, true).1.unwrap();
    let mut numeric = Vec::new();
    for which in 0..3 {
        let len = [32, 16, 16][which];
        for k in 0..len {
            let mut fd = |d: f64| {
                let v = match which {
                    0 => &mut w1[k],
                    1 => &mut b1[k],
                    _ => &mut w2[k],
                };
                *v += d;
                let r = loss(&w1, &b1, &w2, false).0;
                let v = match which {
                    0 => &mut w1[k],
                    1 => &mut b1[k],
                    _ => &mut w2[k],
                };
                *v -= d;
                r
            };
            numeric.push((fd(STEP) - fd(-STEP)) / (2.0 * STEP));
        }
    }
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}
