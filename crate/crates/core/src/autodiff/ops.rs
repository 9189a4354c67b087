//! Differentiable primitives.
//!
//! Binary elementwise operations accept a right-hand side whose shape equals
//! the left-hand shape or is a suffix of it (a scalar included); the right
//! operand is then repeated over the leading extents.

use super::kernels;
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn suffix_broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<()> {
    if rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        Ok(())
    } else {
        Err(Error::shape(op, lhs, rhs))
    }
}

/// Sums `g` (laid out like the lhs) down to the rhs length.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn zip_bcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let n = b.len();
    a.iter()
        .enumerate()
        .map(|(i, &x)| f(x, b[i % n]))
        .collect()
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

// Shape-checked ops return `Result`, so they cannot be the operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn binary(self, rhs: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let value = {
            let a = self.value();
            let b = rhs.value();
            suffix_broadcast(name, a.shape(), b.shape())?;
            let data = match kind {
                Binary::Add => zip_bcast(a.data(), b.data(), |x, y| x + y),
                Binary::Sub => zip_bcast(a.data(), b.data(), |x, y| x - y),
                Binary::Mul => zip_bcast(a.data(), b.data(), |x, y| x * y),
                Binary::Div => zip_bcast(a.data(), b.data(), |x, y| x / y),
            };
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.custom(
            &[self, rhs],
            value,
            Box::new(move |ctx| {
                let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
                let nb = b.len();
                match kind {
                    Binary::Add => vec![
                        ctx.needs[0].then(|| g.to_vec()),
                        ctx.needs[1].then(|| reduce_to(g, nb)),
                    ],
                    Binary::Sub => vec![
                        ctx.needs[0].then(|| g.to_vec()),
                        ctx.needs[1].then(|| reduce_to(g, nb).into_iter().map(|v| -v).collect()),
                    ],
                    Binary::Mul => vec![
                        ctx.needs[0].then(|| zip_bcast(g, b, |g, y| g * y)),
                        ctx.needs[1].then(|| {
                            let ga: Vec<f64> = g.iter().zip(a).map(|(g, x)| g * x).collect();
                            reduce_to(&ga, nb)
                        }),
                    ],
                    Binary::Div => vec![
                        ctx.needs[0].then(|| zip_bcast(g, b, |g, y| g / y)),
                        ctx.needs[1].then(|| {
                            let ga: Vec<f64> = g
                                .iter()
                                .zip(a)
                                .enumerate()
                                .map(|(i, (g, x))| {
                                    let y = b[i % nb];
                                    -g * x / (y * y)
                                })
                                .collect();
                            reduce_to(&ga, nb)
                        }),
                    ],
                }
            }),
        ))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Mul)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Div)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let value = {
            let a = self.value();
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
                .expect("same shape")
        };
        self.tape.custom(
            &[self],
            value,
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let y = ctx.output.data();
                let g = ctx
                    .grad
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(f64::sin, |x, _| x.cos())
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// `|x|`, with derivative 0 at exactly 0.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sum(self) -> Var<'t> {
        let (value, n) = {
            let a = self.value();
            (Tensor::scalar(a.data().iter().sum()), a.len())
        };
        self.tape.custom(
            &[self],
            value,
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums over the last axis.
    pub fn sum_last(self) -> Var<'t> {
        let (value, k) = {
            let a = self.value();
            let shape = a.shape();
            let k = shape.last().copied().unwrap_or(1);
            let data = a.data().chunks(k.max(1)).map(|c| c.iter().sum()).collect();
            let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
            (Tensor::new(out_shape, data).expect("reduced shape"), k)
        };
        self.tape.custom(
            &[self],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.iter().flat_map(|&g| std::iter::repeat_n(g, k)).collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn mean_last(self) -> Var<'t> {
        let k = self.value().shape().last().copied().unwrap_or(1).max(1);
        self.sum_last().scale(1.0 / k as f64)
    }

    /// Picks `index` along the last axis, dropping that axis.
    pub fn take_last(self, index: usize) -> Result<Var<'t>> {
        let (value, k) = {
            let a = self.value();
            let shape = a.shape();
            let k = match shape.last() {
                Some(&k) if index < k => k,
                _ => return Err(Error::shape("take_last", shape, &[index])),
            };
            let data = a.data().chunks(k).map(|c| c[index]).collect();
            (Tensor::new(shape[..shape.len() - 1].to_vec(), data)?, k)
        };
        Ok(self.tape.custom(
            &[self],
            value,
            Box::new(move |ctx| {
                let mut g = vec![0.0; ctx.inputs[0].len()];
                for (i, &v) in ctx.grad.iter().enumerate() {
                    g[i * k + index] = v;
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (value, ka, kb) = {
            let a = self.value();
            let b = rhs.value();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
                return Err(Error::shape("concat_last", sa, sb));
            }
            let (ka, kb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
            let rows = a.len() / ka.max(1);
            let mut data = Vec::with_capacity(a.len() + b.len());
            for r in 0..rows {
                data.extend_from_slice(&a.data()[r * ka..(r + 1) * ka]);
                data.extend_from_slice(&b.data()[r * kb..(r + 1) * kb]);
            }
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = ka + kb;
            (Tensor::new(shape, data)?, ka, kb)
        };
        Ok(self.tape.custom(
            &[self, rhs],
            value,
            Box::new(move |ctx| {
                let k = ka + kb;
                let rows = ctx.grad.len() / k.max(1);
                let mut ga = Vec::with_capacity(rows * ka);
                let mut gb = Vec::with_capacity(rows * kb);
                for r in 0..rows {
                    ga.extend_from_slice(&ctx.grad[r * k..r * k + ka]);
                    gb.extend_from_slice(&ctx.grad[r * k + ka..(r + 1) * k]);
                }
                vec![ctx.needs[0].then_some(ga), ctx.needs[1].then_some(gb)]
            }),
        ))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            if shape.iter().product::<usize>() != a.len() {
                return Err(Error::shape("reshape", a.shape(), &shape));
            }
            Tensor::new(shape, a.data().to_vec())?
        };
        Ok(self
            .tape
            .custom(&[self], value, Box::new(|ctx| vec![Some(ctx.grad.to_vec())])))
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let tape = self.tape;
        let (value, m, k, n) = {
            let a = self.value();
            let b = rhs.value();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::shape("matmul", sa, sb));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let data = kernels::matmul(a.data(), b.data(), m, k, n, tape.mode());
            (Tensor::new(vec![m, n], data)?, m, k, n)
        };
        Ok(tape.custom(
            &[self, rhs],
            value,
            Box::new(move |ctx| {
                let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
                vec![
                    ctx.needs[0].then(|| kernels::matmul_nt(g, b, m, k, n, ctx.mode)),
                    ctx.needs[1].then(|| kernels::matmul_tn(a, g, m, k, n, ctx.mode)),
                ]
            }),
        ))
    }

    /// `sin(ω(x·W − b))` for `x: [m, k]`, `W: [k, n]`, `b: [n]` as one node.
    /// Matches the composed ops exactly.
    pub fn sine_layer(self, weight: Var<'t>, bias: Var<'t>, omega: f64) -> Result<Var<'t>> {
        let tape = self.tape;
        let (value, cos, m, k, n) = {
            let (x, w, b) = (self.value(), weight.value(), bias.value());
            let (sx, sw, sb) = (x.shape(), w.shape(), b.shape());
            if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
                return Err(Error::shape("sine_layer", sx, sw));
            }
            if sb != [sw[1]] {
                return Err(Error::shape("sine_layer", sw, sb));
            }
            let (m, k, n) = (sx[0], sx[1], sw[1]);
            let mut pre = kernels::matmul(x.data(), w.data(), m, k, n, tape.mode());
            let mut cos = vec![0.0; m * n];
            for (row, crow) in pre.chunks_exact_mut(n).zip(cos.chunks_exact_mut(n)) {
                for ((v, c), &bj) in row.iter_mut().zip(crow).zip(b.data()) {
                    let arg = omega * (*v - bj);
                    *v = arg.sin();
                    *c = arg.cos();
                }
            }
            (Tensor::new(vec![m, n], pre)?, cos, m, k, n)
        };
        Ok(tape.custom(
            &[self, weight, bias],
            value,
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let gp: Vec<f64> = ctx.grad.iter().zip(&cos).map(|(g, c)| g * omega * c).collect();
                vec![
                    ctx.needs[0].then(|| kernels::matmul_nt(&gp, w, m, k, n, ctx.mode)),
                    ctx.needs[1].then(|| kernels::matmul_tn(x, &gp, m, k, n, ctx.mode)),
                    ctx.needs[2].then(|| reduce_to(&gp, n).into_iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    /// Clipped-window box sum over a `[H, W]` grid; see [`kernels::box_sum`].
    pub fn box_sum2d(self, rows: (usize, usize), cols: (usize, usize)) -> Result<Var<'t>> {
        let (value, h, w) = {
            let a = self.value();
            let s = a.shape();
            if s.len() != 2 {
                return Err(Error::shape("box_sum2d", s, &[0, 0]));
            }
            let (h, w) = (s[0], s[1]);
            (
                Tensor::new(vec![h, w], kernels::box_sum(a.data(), h, w, rows, cols))?,
                h,
                w,
            )
        };
        Ok(self.tape.custom(
            &[self],
            value,
            // The adjoint of a clipped window sum is the mirrored window sum.
            Box::new(move |ctx| {
                let flipped_rows = (rows.1, rows.0);
                let flipped_cols = (cols.1, cols.0);
                vec![Some(kernels::box_sum(ctx.grad, h, w, flipped_rows, flipped_cols))]
            }),
        ))
    }
}

impl Tape {
    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }
}
