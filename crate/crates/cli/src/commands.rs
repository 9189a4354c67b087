use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use impreg_core::engine::{ssim_any, write_loss_history};
use impreg_core::metrics::{dice, folding_pct, warp_mask};
use impreg_core::warp::sample;
use impreg_core::{
    make_synthetic_pair, DisplacementField, Image, LnccConfig, LossWeights, Mask, MetricReport, Registration,
    RegistrationConfig, RegistrationResult, SirenConfig, SynthConfig, TextureConfig,
};

use crate::args::{EvaluateArgs, RegisterArgs, SynthArgs, WarpArgs};

const MASK_LEVEL: f64 = 0.5;
const DICE_KEY: &str = "mask";

fn load_on_grid(path: &Path, (h, w): (usize, usize)) -> Result<Image> {
    let img = Image::load_png(path)?;
    Ok(if img.dims() == (h, w) { img } else { img.resize(h, w)? })
}

fn load_mask(path: &Path, dims: (usize, usize)) -> Result<Mask> {
    Ok(Mask::from_image(&load_on_grid(path, dims)?, MASK_LEVEL))
}

fn read_field(path: &Path) -> Result<DisplacementField> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    DisplacementField::read_from(BufReader::new(file)).with_context(|| format!("reading field {}", path.display()))
}

fn write_field(field: &DisplacementField, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    field.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dice_entry(moving_mask: &Mask, fixed_mask: &Mask, field: &DisplacementField) -> Result<f64> {
    Ok(dice(&warp_mask(moving_mask, field)?, fixed_mask)?)
}

pub fn registration_config(a: &RegisterArgs) -> RegistrationConfig {
    RegistrationConfig {
        mode: a.mode.into(),
        epochs: a.epochs,
        grid_size: a.size,
        weights: LossWeights::from_array([a.alpha1, a.alpha2, a.alpha3, a.alpha4, a.alpha5]),
        lncc: LnccConfig {
            window: a.lncc_window,
            ..Default::default()
        },
        seed: a.seed,
        optimizer: impreg_core::AdamWConfig {
            lr: a.lr,
            ..Default::default()
        },
        network: SirenConfig::default().with_width(a.width),
        deterministic: !a.parallel,
        chunk_rows: a.chunk_rows,
    }
}

pub fn register(a: &RegisterArgs) -> Result<()> {
    let config = registration_config(a);
    config.validate()?;
    let moving = load_on_grid(&a.moving, config.grid_size)?;
    let fixed = load_on_grid(&a.fixed, config.grid_size)?;
    let masks = match (&a.moving_mask, &a.fixed_mask) {
        (Some(m), Some(f)) => Some((load_mask(m, config.grid_size)?, load_mask(f, config.grid_size)?)),
        _ => None,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&config, &a.out.join("config.json"))?;

    let mut job = Registration::new(&moving, &fixed, &config)?;
    let history_path = a.out.join("loss_history.csv");
    while job.epochs_done() < config.epochs {
        match job.step() {
            Ok(terms) => {
                if a.log_every > 0 && (terms.epoch % a.log_every == 0 || terms.epoch + 1 == config.epochs) {
                    eprintln!("epoch {:>5}  {terms}", terms.epoch);
                }
            }
            Err(e) => {
                write_loss_history(File::create(&history_path)?, job.history())?;
                return Err(e).context("registration aborted; partial loss history written");
            }
        }
    }
    let mut result = job.finish()?;
    if let Some((mm, fm)) = &masks {
        let d = dice_entry(mm, fm, &result.field.quantized())?;
        result.metrics.dice.insert(DICE_KEY.into(), d);
    }
    write_outputs(&result, &a.out, a.save_networks)?;
    write_loss_history(BufWriter::new(File::create(&history_path)?), &result.loss_history)?;
    eprintln!(
        "ssim {:.4}  folding {:.3}%  -> {}",
        result.metrics.ssim,
        result.metrics.folding_pct,
        a.out.display()
    );
    Ok(())
}

fn write_outputs(r: &RegistrationResult, out: &Path, save_networks: bool) -> Result<()> {
    r.moved.save_png(out.join("moved.png"))?;
    if let (Some(s), Some(res)) = (&r.support, &r.residual) {
        s.save_png(out.join("support.png"))?;
        res.save_png(out.join("residual.png"))?;
    }
    write_field(&r.field, &out.join("field.inrf"))?;
    write_json(&r.metrics, &out.join("metrics.json"))?;
    if save_networks {
        let nets = [("deformation", Some(&r.deformation)), ("support", r.support_net.as_ref()), ("residual", r.residual_net.as_ref())];
        for (name, net) in nets {
            if let Some(net) = net {
                let path = out.join(format!("{name}.inrc"));
                let mut w = BufWriter::new(File::create(&path)?);
                net.write_checkpoint(&mut w)?;
                w.flush()?;
            }
        }
    }
    Ok(())
}

pub fn warp(a: &WarpArgs) -> Result<()> {
    let field = read_field(&a.field)?;
    let img = Image::load_png(&a.image)?;
    let dims = (field.height(), field.width());
    if img.dims() != dims {
        bail!(
            "image {} is {}x{} but field {} is {}x{}",
            a.image.display(),
            img.height(),
            img.width(),
            a.field.display(),
            dims.0,
            dims.1
        );
    }
    if a.mask {
        warp_mask(&Mask::from_image(&img, MASK_LEVEL), &field)?.to_image().save_png(&a.out)?;
    } else {
        let phi = field.transformation()?;
        let out = sample(&img.to_tensor(), &phi)?.reshape(vec![dims.0, dims.1, img.channels()])?;
        Image::from_tensor(&out)?.save_png(&a.out)?;
    }
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<MetricReport> {
    let moved = Image::load_png(&a.moved)?;
    let field = read_field(&a.field)?;
    let dims = moved.dims();
    if (field.height(), field.width()) != dims {
        bail!(
            "moved image is {}x{} but field is {}x{}",
            dims.0,
            dims.1,
            field.height(),
            field.width()
        );
    }
    let fixed = load_on_grid(&a.fixed, dims)?;
    let mut report = MetricReport {
        ssim: ssim_any(&moved, &fixed)?,
        folding_pct: folding_pct(&field.jacobian_det()?),
        ..Default::default()
    };
    if let (Some(m), Some(f)) = (&a.moved_mask, &a.fixed_mask) {
        let mm = Mask::from_image(&Image::load_png(m)?, MASK_LEVEL);
        if mm.dims() != dims {
            bail!("moving mask is {}x{} but field is {}x{}", mm.dims().0, mm.dims().1, dims.0, dims.1);
        }
        let fm = load_mask(f, dims)?;
        report.dice.insert(DICE_KEY.into(), dice_entry(&mm, &fm, &field)?);
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: RegistrationConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        report.config_digest = config.digest();
    }
    match &a.out {
        Some(path) => write_json(&report, path)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(report)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let config = SynthConfig {
        seed: a.seed,
        size: a.size,
        deform_amp: a.deform_amp,
        texture: (a.texture > 0).then_some(TextureConfig {
            blobs: a.texture,
            contrast: a.texture_contrast,
            radius_px: a.texture_radius,
        }),
    };
    let pair = make_synthetic_pair(&config)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    pair.moving.save_png(a.out.join("moving.png"))?;
    pair.fixed.save_png(a.out.join("fixed.png"))?;
    write_field(&pair.true_field, &a.out.join("true_field.inrf"))?;
    pair.texture_mask.to_image().save_png(a.out.join("texture_mask.png"))?;
    for (k, (m, f)) in pair.moving_structures.iter().zip(&pair.fixed_structures).enumerate() {
        m.to_image().save_png(a.out.join(format!("moving_structure_{k}.png")))?;
        f.to_image().save_png(a.out.join(format!("fixed_structure_{k}.png")))?;
    }
    Ok(())
}
