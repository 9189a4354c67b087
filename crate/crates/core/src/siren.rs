//! Sinusoidal coordinate network with a mid-depth input skip.
//!
//! The input `z0 = [x, FE(x)]` passes through `num_hidden` layers
//! `z = sin(ω (z W − b))`. After layer `skip_after` the activations are
//! concatenated with `z0`. A final linear layer `z W − b` produces the output.
//!
//! # Checkpoint layout
//!
//! All integers are little-endian `u32`, all reals little-endian `f64`:
//!
//! ```text
//! magic        b"INRC"
//! version      u32 (= 1)
//! output_dim   u32
//! hidden_width u32
//! num_hidden   u32
//! skip_after   u32
//! omega        f64
//! init_c       f64
//! enc.input_dim       u32
//! enc.num_frequencies u32
//! enc.sigma           f64
//! num_layers   u32
//! per layer:   in u32, out u32
//! per layer:   weight (in·out values, row-major [in][out]), then bias (out values)
//! ```

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoding::{encode_batch, FourierConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"INRC";
const CHECKPOINT_VERSION: u32 = 1;

/// Last-layer init bound used for the deformation network.
pub const DEFORMATION_LAST_LAYER_BOUND: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SirenConfig {
    pub hidden_width: usize,
    pub num_hidden: usize,
    pub omega: f64,
    /// 1-based hidden layer whose output is concatenated with the network
    /// input; 0 disables the skip.
    pub skip_after: usize,
    /// `c` in the init bound `sqrt(c / (n ω²))`, with `n` the hidden width.
    pub init_c: f64,
    /// Uniform bound for the output layer weights. `None` uses the hidden bound.
    pub last_layer_bound: Option<f64>,
    pub encoding: FourierConfig,
}

impl Default for SirenConfig {
    fn default() -> Self {
        SirenConfig {
            hidden_width: 256,
            num_hidden: 5,
            omega: 30.0,
            skip_after: 3,
            init_c: 6.0,
            last_layer_bound: None,
            encoding: FourierConfig::default(),
        }
    }
}

impl SirenConfig {
    pub fn with_width(mut self, width: usize) -> Self {
        self.hidden_width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoding.validate()?;
        if self.hidden_width == 0 || self.num_hidden == 0 {
            return Err(Error::Config("network needs at least one hidden unit and layer".into()));
        }
        if self.skip_after > self.num_hidden {
            return Err(Error::Config(format!(
                "skip layer {} exceeds {} hidden layers",
                self.skip_after, self.num_hidden
            )));
        }
        if !(self.omega > 0.0 && self.init_c > 0.0) {
            return Err(Error::Config("omega and init constant must be positive".into()));
        }
        Ok(())
    }

    /// `sqrt(c / (n ω²))`.
    pub fn hidden_bound(&self) -> f64 {
        (self.init_c / (self.hidden_width as f64 * self.omega * self.omega)).sqrt()
    }

    /// `(fan_in, fan_out)` for every layer including the output layer.
    pub fn layer_dims(&self, output_dim: usize) -> Vec<(usize, usize)> {
        let input = self.encoding.network_input_len();
        let n = self.hidden_width;
        let mut dims = Vec::with_capacity(self.num_hidden + 1);
        let mut fan_in = input;
        for l in 1..=self.num_hidden {
            dims.push((fan_in, n));
            fan_in = if l == self.skip_after { n + input } else { n };
        }
        dims.push((fan_in, output_dim));
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[fan_in, fan_out]`.
    pub weight: Tensor,
    /// `[fan_out]`.
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SirenNetwork {
    config: SirenConfig,
    output_dim: usize,
    layers: Vec<Layer>,
}

/// Output of a recorded forward pass.
pub struct SirenForward<'t> {
    pub output: Var<'t>,
    /// Weight and bias handles in layer order, parallel to [`SirenNetwork::params`].
    pub params: Vec<Var<'t>>,
}

impl SirenNetwork {
    /// Hidden weights are drawn from `U(±sqrt(c / (n ω²)))`, output weights
    /// from `U(±last_layer_bound)`, biases start at zero.
    pub fn init(seed: u64, output_dim: usize, config: &SirenConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = config.hidden_bound();
        let last = config.last_layer_bound.unwrap_or(hidden);
        let dims = config.layer_dims(output_dim);
        let n_layers = dims.len();
        let layers = dims
            .into_iter()
            .enumerate()
            .map(|(i, (fan_in, fan_out))| {
                let bound = if i + 1 == n_layers { last } else { hidden };
                let weight = (0..fan_in * fan_out)
                    .map(|_| if bound > 0.0 { rng.gen_range(-bound..=bound) } else { 0.0 })
                    .collect();
                Layer {
                    weight: Tensor::new(vec![fan_in, fan_out], weight).expect("layer shape"),
                    bias: Tensor::zeros(vec![fan_out]),
                }
            })
            .collect();
        Ok(SirenNetwork {
            config: config.clone(),
            output_dim,
            layers,
        })
    }

    pub fn zeros(output_dim: usize, config: &SirenConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims(output_dim)
            .into_iter()
            .map(|(i, o)| Layer {
                weight: Tensor::zeros(vec![i, o]),
                bias: Tensor::zeros(vec![o]),
            })
            .collect();
        Ok(SirenNetwork {
            config: config.clone(),
            output_dim,
            layers,
        })
    }

    pub fn config(&self) -> &SirenConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Order-sensitive fingerprint of every parameter bit.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the raw bit patterns.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params() {
            for v in p.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    fn check_widths(&self) -> Result<()> {
        let expected = self.config.layer_dims(self.output_dim);
        let actual: Vec<(usize, usize)> = self
            .layers
            .iter()
            .map(|l| (l.weight.shape()[0], l.weight.shape()[1]))
            .collect();
        if expected != actual {
            let flat = |d: &[(usize, usize)]| d.iter().flat_map(|&(a, b)| [a, b]).collect::<Vec<_>>();
            return Err(Error::shape("siren forward", &flat(&actual), &flat(&expected)));
        }
        Ok(())
    }

    /// Records the forward pass for a `[P, d]` batch of coordinates, giving a
    /// `[P, output_dim]` output. Parameters enter the tape as trainable leaves
    /// when `trainable`, as constants otherwise.
    pub fn forward<'t>(&self, tape: &'t Tape, coords: &Tensor, trainable: bool) -> Result<SirenForward<'t>> {
        self.check_widths()?;
        let input = tape.constant(encode_batch(coords, &self.config.encoding)?);
        let mut params = Vec::with_capacity(2 * self.layers.len());
        let mut z = input;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = if trainable {
                (tape.leaf(layer.weight.clone()), tape.leaf(layer.bias.clone()))
            } else {
                (tape.constant(layer.weight.clone()), tape.constant(layer.bias.clone()))
            };
            params.push(w);
            params.push(b);
            if i == last {
                z = z.matmul(w)?.sub(b)?;
            } else {
                z = z.sine_layer(w, b, self.config.omega)?;
                if i + 1 == self.config.skip_after {
                    z = z.concat_last(input)?;
                }
            }
        }
        Ok(SirenForward { output: z, params })
    }

    /// Untracked evaluation on a `[P, d]` batch.
    pub fn eval(&self, coords: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.forward(&tape, coords, false)?.output.to_tensor())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let c = &self.config;
        let u32le = |v: usize| (v as u32).to_le_bytes();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&u32le(self.output_dim))?;
        w.write_all(&u32le(c.hidden_width))?;
        w.write_all(&u32le(c.num_hidden))?;
        w.write_all(&u32le(c.skip_after))?;
        w.write_all(&c.omega.to_le_bytes())?;
        w.write_all(&c.init_c.to_le_bytes())?;
        w.write_all(&u32le(c.encoding.input_dim))?;
        w.write_all(&u32le(c.encoding.num_frequencies))?;
        w.write_all(&c.encoding.sigma.to_le_bytes())?;
        w.write_all(&u32le(self.layers.len()))?;
        for l in &self.layers {
            w.write_all(&u32le(l.weight.shape()[0]))?;
            w.write_all(&u32le(l.weight.shape()[1]))?;
        }
        for l in &self.layers {
            for v in l.weight.data().iter().chain(l.bias.data()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> std::io::Result<Self> {
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a network checkpoint"));
        }
        if read_u32(&mut r)? != CHECKPOINT_VERSION as usize {
            return Err(bad("unsupported checkpoint version"));
        }
        let output_dim = read_u32(&mut r)?;
        let hidden_width = read_u32(&mut r)?;
        let num_hidden = read_u32(&mut r)?;
        let skip_after = read_u32(&mut r)?;
        let omega = read_f64(&mut r)?;
        let init_c = read_f64(&mut r)?;
        let input_dim = read_u32(&mut r)?;
        let num_frequencies = read_u32(&mut r)?;
        let sigma = read_f64(&mut r)?;
        let config = SirenConfig {
            hidden_width,
            num_hidden,
            omega,
            skip_after,
            init_c,
            last_layer_bound: None,
            encoding: FourierConfig {
                num_frequencies,
                sigma,
                input_dim,
            },
        };
        config.validate().map_err(|e| bad(&e.to_string()))?;
        let n_layers = read_u32(&mut r)?;
        let mut dims = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            dims.push((read_u32(&mut r)?, read_u32(&mut r)?));
        }
        if dims != config.layer_dims(output_dim) {
            return Err(bad("layer dimensions disagree with the header"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (fan_in, fan_out) in dims {
            let weight = (0..fan_in * fan_out)
                .map(|_| read_f64(&mut r))
                .collect::<std::io::Result<Vec<_>>>()?;
            let bias = (0..fan_out)
                .map(|_| read_f64(&mut r))
                .collect::<std::io::Result<Vec<_>>>()?;
            layers.push(Layer {
                weight: Tensor::new(vec![fan_in, fan_out], weight).expect("dims"),
                bias: Tensor::new(vec![fan_out], bias).expect("dims"),
            });
        }
        Ok(SirenNetwork {
            config,
            output_dim,
            layers,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
