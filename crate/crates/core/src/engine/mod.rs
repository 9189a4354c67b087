//! Registration jobs: network setup, the epoch loop and result assembly.
//!
//! Every epoch renders the deformation network (and, in decomposition modes,
//! the support and residual networks) on the full pixel grid, evaluates the
//! weighted objective on its own tape, and pushes the resulting output
//! gradients back through each network. Networks are rendered in row chunks
//! so large grids fit in memory; the gradient is the same full-batch gradient
//! either way.

mod synth;

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use synth::{make_synthetic_pair, SynthConfig, SyntheticPair, TextureConfig};

use crate::autodiff::{ExecMode, Tape, Tensor};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::losses::{
    composite_loss, loss_cc, loss_excl_images, loss_rec, loss_reg, LnccConfig, LossTerms, LossWeights,
};
use crate::metrics::{folding_pct, ssim, MetricReport};
use crate::optim::{AdamW, AdamWConfig};
use crate::siren::{SirenConfig, SirenNetwork, DEFORMATION_LAST_LAYER_BOUND};
use crate::warp::{bilinear_sample, jacobian_det, CoordinateGrid, DisplacementField};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Deformation network only.
    Plain,
    /// Adds the support/residual decomposition.
    Dec,
    /// Decomposition plus the exclusion loss.
    #[default]
    DecExcl,
}

impl Mode {
    pub fn decomposes(self) -> bool {
        !matches!(self, Mode::Plain)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Plain => "plain",
            Mode::Dec => "dec",
            Mode::DecExcl => "dec-excl",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// `(height, width)`.
    pub grid_size: (usize, usize),
    pub weights: LossWeights,
    pub lncc: LnccConfig,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub network: SirenConfig,
    pub deterministic: bool,
    /// Maximum grid points per recorded network pass.
    pub chunk_rows: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            mode: Mode::DecExcl,
            epochs: 1000,
            grid_size: (256, 256),
            weights: LossWeights::default(),
            lncc: LnccConfig::default(),
            seed: 0,
            optimizer: AdamWConfig::default(),
            network: SirenConfig::default(),
            deterministic: true,
            chunk_rows: 16_384,
        }
    }
}

impl RegistrationConfig {
    /// Small configuration for tests and quick experiments: 64×64 grid,
    /// 500 epochs, 128 hidden units, LNCC window scaled with the grid.
    pub fn desk(mode: Mode) -> Self {
        RegistrationConfig {
            mode,
            epochs: 500,
            grid_size: (64, 64),
            lncc: LnccConfig {
                window: (8, 8),
                ..Default::default()
            },
            network: SirenConfig::default().with_width(128),
            ..Default::default()
        }
    }

    /// Weights with the terms the mode disables forced to zero.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        match self.mode {
            Mode::Plain => {
                w.cc_support = 0.0;
                w.rec = 0.0;
                w.excl = 0.0;
            }
            Mode::Dec => w.excl = 0.0,
            Mode::DecExcl => {}
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid_size;
        if h < 3 || w < 3 {
            return Err(Error::DegenerateGrid {
                height: h,
                width: w,
                min: 3,
            });
        }
        self.weights.validate()?;
        self.lncc.validate(h, w)?;
        self.network.validate()?;
        if self.chunk_rows == 0 {
            return Err(Error::Config("chunk_rows must be positive".into()));
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn exec_mode(&self) -> ExecMode {
        if self.deterministic {
            ExecMode::Deterministic
        } else {
            ExecMode::Parallel
        }
    }

    /// SHA-256 of the canonical JSON form, with mode-forced weights applied.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.weights = self.effective_weights();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Objective terms recorded for one epoch (before that epoch's update).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTerms {
    pub epoch: usize,
    pub total: f64,
    pub cc_moving: f64,
    pub cc_support: Option<f64>,
    pub reg: f64,
    pub rec: Option<f64>,
    pub excl: Option<f64>,
}

impl EpochTerms {
    fn is_finite(&self) -> bool {
        [Some(self.total), Some(self.cc_moving), self.cc_support, Some(self.reg), self.rec, self.excl]
            .into_iter()
            .flatten()
            .all(f64::is_finite)
    }
}

impl fmt::Display for EpochTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "total={:.6} cc_moving={:.6} cc_support={} reg={:.6} rec={} excl={}",
            self.total,
            self.cc_moving,
            opt(self.cc_support),
            self.reg,
            opt(self.rec),
            opt(self.excl)
        )
    }
}

pub const LOSS_HISTORY_HEADER: &str = "epoch,total,cc_moving,cc_support,reg,rec,excl";

/// Writes `loss_history.csv`; absent terms are left empty.
pub fn write_loss_history<W: Write>(mut w: W, history: &[EpochTerms]) -> std::io::Result<()> {
    writeln!(w, "{LOSS_HISTORY_HEADER}")?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:e}"));
    for t in history {
        writeln!(
            w,
            "{},{:e},{:e},{},{:e},{},{}",
            t.epoch,
            t.total,
            t.cc_moving,
            opt(t.cc_support),
            t.reg,
            opt(t.rec),
            opt(t.excl)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    /// `T_Φ(M)`, unclamped.
    pub moved: Image,
    /// Support image `M_S` in moving-image space (decomposition modes).
    pub support: Option<Image>,
    /// Residual image `M_R` in moving-image space (decomposition modes).
    pub residual: Option<Image>,
    /// `T_Φ(M_S)` (decomposition modes).
    pub moved_support: Option<Image>,
    pub field: DisplacementField,
    pub loss_history: Vec<EpochTerms>,
    /// SSIM and folding of the exported (8-bit image, `f32` field) outputs.
    pub metrics: MetricReport,
    pub deformation: SirenNetwork,
    pub support_net: Option<SirenNetwork>,
    pub residual_net: Option<SirenNetwork>,
}

/// A network rendered on the grid, with the recorded pass kept when the
/// whole grid fits in a single chunk.
struct Rendered {
    output: Tensor,
    recorded: Option<(Tape, usize, Vec<usize>)>,
}

struct Trainee {
    net: SirenNetwork,
    opt: AdamW,
}

/// An in-progress registration job.
pub struct Registration {
    config: RegistrationConfig,
    grid: CoordinateGrid,
    moving: Image,
    fixed: Image,
    deformation: Trainee,
    /// Built in every mode; only rendered and stepped when decomposing.
    support: Trainee,
    residual: Trainee,
    history: Vec<EpochTerms>,
}

impl Registration {
    pub fn new(moving: &Image, fixed: &Image, config: &RegistrationConfig) -> Result<Self> {
        config.validate()?;
        let (h, w) = config.grid_size;
        for (name, img) in [("moving", moving), ("fixed", fixed)] {
            if img.dims() != (h, w) {
                return Err(Error::Config(format!(
                    "{name} image is {}x{}, expected the {h}x{w} grid",
                    img.height(),
                    img.width()
                )));
            }
        }
        let grid = CoordinateGrid::new(h, w)?;
        let d_cfg = SirenConfig {
            last_layer_bound: Some(DEFORMATION_LAST_LAYER_BOUND),
            ..config.network.clone()
        };
        let trainee = |net: SirenNetwork| Trainee {
            net,
            opt: AdamW::new(config.optimizer),
        };
        let c = moving.channels();
        let deformation = trainee(SirenNetwork::init(config.seed, 2, &d_cfg)?);
        let support = trainee(SirenNetwork::init(config.seed.wrapping_add(1), c, &config.network)?);
        let residual = trainee(SirenNetwork::init(config.seed.wrapping_add(2), c, &config.network)?);
        Ok(Registration {
            config: config.clone(),
            grid,
            moving: moving.clone(),
            fixed: fixed.clone(),
            deformation,
            support,
            residual,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &RegistrationConfig {
        &self.config
    }

    pub fn history(&self) -> &[EpochTerms] {
        &self.history
    }

    pub fn deformation(&self) -> &SirenNetwork {
        &self.deformation.net
    }

    pub fn support_net(&self) -> &SirenNetwork {
        &self.support.net
    }

    pub fn residual_net(&self) -> &SirenNetwork {
        &self.residual.net
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    fn chunk_ranges(&self) -> Vec<(usize, usize)> {
        let n = self.grid.len();
        let step = self.config.chunk_rows;
        (0..n).step_by(step).map(|s| (s, (s + step).min(n))).collect()
    }

    fn chunk_coords(&self, (start, end): (usize, usize)) -> Tensor {
        Tensor::new(vec![end - start, 2], self.grid.coords().data()[2 * start..2 * end].to_vec())
            .expect("chunk shape")
    }

    fn render(&self, net: &SirenNetwork, record: bool) -> Result<Rendered> {
        let chunks = self.chunk_ranges();
        if record && chunks.len() == 1 {
            let tape = Tape::with_mode(self.config.exec_mode());
            let fwd = net.forward(&tape, self.grid.coords(), true)?;
            let output = fwd.output.to_tensor();
            let ids = fwd.params.iter().map(|p| p.id()).collect();
            let out_id = fwd.output.id();
            return Ok(Rendered {
                output,
                recorded: Some((tape, out_id, ids)),
            });
        }
        let mut data = Vec::with_capacity(self.grid.len() * net.output_dim());
        for range in chunks {
            let tape = Tape::with_mode(self.config.exec_mode());
            let out = net.forward(&tape, &self.chunk_coords(range), false)?.output;
            data.extend_from_slice(out.value().data());
        }
        Ok(Rendered {
            output: Tensor::new(vec![self.grid.len(), net.output_dim()], data)?,
            recorded: None,
        })
    }

    /// Parameter gradients of `<upstream, net(grid)>`.
    fn pull_back(&self, net: &SirenNetwork, rendered: Rendered, upstream: &Tensor) -> Result<Vec<Tensor>> {
        if let Some((tape, out_id, ids)) = rendered.recorded {
            let grads = tape.backward_with(tape.var(out_id), upstream.clone())?;
            return Ok(ids.into_iter().map(|id| grads.wrt_id(id)).collect());
        }
        let k = net.output_dim();
        let mut total: Option<Vec<Tensor>> = None;
        for (start, end) in self.chunk_ranges() {
            let tape = Tape::with_mode(self.config.exec_mode());
            let fwd = net.forward(&tape, &self.chunk_coords((start, end)), true)?;
            let seed = Tensor::new(vec![end - start, k], upstream.data()[start * k..end * k].to_vec())?;
            let grads = tape.backward_with(fwd.output, seed)?;
            let chunk: Vec<Tensor> = fwd.params.iter().map(|&p| grads.wrt(p)).collect();
            match total.as_mut() {
                None => total = Some(chunk),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(chunk) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        Ok(total.expect("at least one chunk"))
    }

    /// Evaluates the objective for the current parameters. When `want_grads`,
    /// also returns the gradients with respect to the rendered displacement,
    /// support and residual grids.
    fn objective(
        &self,
        delta: &Tensor,
        support: Option<&Tensor>,
        residual: Option<&Tensor>,
        want_grads: bool,
    ) -> Result<(EpochTerms, Option<[Option<Tensor>; 3]>)> {
        let (h, w) = self.config.grid_size;
        let c = self.moving.channels();
        let weights = self.config.effective_weights();
        let tape = Tape::with_mode(self.config.exec_mode());
        let leaf = |t: &Tensor, shape: Vec<usize>| -> Result<_> {
            let t = t.clone().reshape(shape)?;
            Ok(if want_grads { tape.leaf(t) } else { tape.constant(t) })
        };
        let delta_v = leaf(delta, vec![h, w, 2])?;
        let moving = tape.constant(self.moving.to_tensor());
        let fixed = tape.constant(self.fixed.to_tensor());
        let phi = tape.constant(self.grid.coords().clone()).add(delta_v.reshape(vec![h * w, 2])?)?;

        let moved = bilinear_sample(moving, phi)?.reshape(vec![h, w, c])?;
        let cc_moving = loss_cc(fixed, moved, &self.config.lncc)?;
        let reg = loss_reg(jacobian_det(delta_v)?);

        let mut dec_vars = None;
        let (mut cc_support, mut rec, mut excl) = (None, None, None);
        if let (Some(s), Some(r)) = (support, residual) {
            let s_v = leaf(s, vec![h, w, c])?;
            let r_v = leaf(r, vec![h, w, c])?;
            let moved_s = bilinear_sample(s_v, phi)?.reshape(vec![h, w, c])?;
            cc_support = Some(loss_cc(fixed, moved_s, &self.config.lncc)?);
            rec = Some(loss_rec(moving, s_v, r_v)?);
            excl = Some(loss_excl_images(s_v, r_v)?);
            dec_vars = Some((s_v, r_v));
        }
        let terms = LossTerms {
            cc_moving,
            cc_support,
            reg,
            rec,
            excl,
        };
        let total = composite_loss(&terms, &weights)?;
        let v = terms.values();
        let record = EpochTerms {
            epoch: self.history.len(),
            total: total.item(),
            cc_moving: v[0].expect("always present"),
            cc_support: v[1],
            reg: v[2].expect("always present"),
            rec: v[3],
            excl: v[4],
        };
        if !record.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: record.epoch,
                terms: record.to_string(),
            });
        }
        if !want_grads {
            return Ok((record, None));
        }
        let grads = tape.backward(total)?;
        let flat = |t: Tensor, k: usize| t.reshape(vec![h * w, k]).expect("grid shape");
        let g_delta = flat(grads.wrt(delta_v), 2);
        let (g_s, g_r) = match dec_vars {
            Some((s_v, r_v)) => (Some(flat(grads.wrt(s_v), c)), Some(flat(grads.wrt(r_v), c))),
            None => (None, None),
        };
        Ok((record, Some([Some(g_delta), g_s, g_r])))
    }

    fn render_all(&self, record: bool) -> Result<(Rendered, Option<Rendered>, Option<Rendered>)> {
        let d = self.render(&self.deformation.net, record)?;
        if !self.config.mode.decomposes() {
            return Ok((d, None, None));
        }
        let s = self.render(&self.support.net, record)?;
        let r = self.render(&self.residual.net, record)?;
        Ok((d, Some(s), Some(r)))
    }

    /// Objective terms at the current parameters, without updating anything.
    pub fn evaluate_terms(&self) -> Result<EpochTerms> {
        let (d, s, r) = self.render_all(false)?;
        let (terms, _) = self.objective(
            &d.output,
            s.as_ref().map(|x| &x.output),
            r.as_ref().map(|x| &x.output),
            false,
        )?;
        Ok(terms)
    }

    /// One full-batch epoch: render, evaluate, backpropagate, step every
    /// active network. Returns the terms evaluated before the update.
    pub fn step(&mut self) -> Result<EpochTerms> {
        let (d, s, r) = self.render_all(true)?;
        let (terms, grads) = self.objective(
            &d.output,
            s.as_ref().map(|x| &x.output),
            r.as_ref().map(|x| &x.output),
            true,
        )?;
        let [g_d, g_s, g_r] = grads.expect("gradients requested");

        let mut updates = vec![self.pull_back(&self.deformation.net, d, &g_d.expect("deformation"))?];
        if let (Some(s), Some(g)) = (s, g_s) {
            updates.push(self.pull_back(&self.support.net, s, &g)?);
        }
        if let (Some(r), Some(g)) = (r, g_r) {
            updates.push(self.pull_back(&self.residual.net, r, &g)?);
        }
        let mut trainees = vec![&mut self.deformation];
        if self.config.mode.decomposes() {
            trainees.push(&mut self.support);
            trainees.push(&mut self.residual);
        }
        for (trainee, grads) in trainees.iter_mut().zip(&updates) {
            let mut params = trainee.net.params_mut();
            trainee.opt.step(&mut params, grads)?;
        }
        self.history.push(terms.clone());
        Ok(terms)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<()> {
        while self.history.len() < self.config.epochs {
            self.step()?;
        }
        Ok(())
    }

    /// Renders the final outputs.
    pub fn finish(&self) -> Result<RegistrationResult> {
        let (h, w) = self.config.grid_size;
        let c = self.moving.channels();
        let decomposes = self.config.mode.decomposes();
        let (d, s, r) = self.render_all(false)?;
        let field = DisplacementField::from_tensor(h, w, d.output)?;
        let phi = field.transformation()?;
        let warp = |img: &Tensor| -> Result<Image> {
            let out = crate::warp::sample(img, &phi)?.reshape(vec![h, w, c])?;
            Image::from_tensor(&out)
        };
        let moved = warp(&self.moving.to_tensor())?;
        let to_image = |t: Tensor| -> Result<Image> { Image::from_tensor(&t.reshape(vec![h, w, c])?) };
        let support = s.map(|x| to_image(x.output)).transpose()?;
        let residual = r.map(|x| to_image(x.output)).transpose()?;
        let moved_support = support.as_ref().map(|s| warp(&s.to_tensor())).transpose()?;

        let metrics = MetricReport {
            dice: Default::default(),
            ssim: ssim_any(&moved.clamped().quantized(), &self.fixed)?,
            folding_pct: folding_pct(&field.quantized().jacobian_det()?),
            config_digest: self.config.digest(),
        };
        Ok(RegistrationResult {
            moved,
            support,
            residual,
            moved_support,
            field,
            loss_history: self.history.clone(),
            metrics,
            deformation: self.deformation.net.clone(),
            support_net: decomposes.then(|| self.support.net.clone()),
            residual_net: decomposes.then(|| self.residual.net.clone()),
        })
    }
}

/// SSIM that falls back to luminance when channel counts differ.
pub fn ssim_any(a: &Image, b: &Image) -> Result<f64> {
    if a.channels() == b.channels() {
        ssim(a, b)
    } else {
        ssim(&a.to_gray(), &b.to_gray())
    }
}

/// Registers `moving` to `fixed` for `config.epochs` epochs.
pub fn run_registration(moving: &Image, fixed: &Image, config: &RegistrationConfig) -> Result<RegistrationResult> {
    let mut job = Registration::new(moving, fixed, config)?;
    job.run()?;
    job.finish()
}
