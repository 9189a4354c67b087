//! Images, PNG input/output and resampling.

use std::path::Path;

use image::{DynamicImage, GenericImageView, ImageBuffer, Luma, Rgb};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Luminance weights for RGB → gray.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Row-major, channel-last image with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::DataLength {
                shape: vec![height, width, channels],
                len: data.len(),
            });
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Image::new(height, width, channels, vec![0.0; height * width * channels])
    }

    /// Single-channel image from `f(row, col)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Image {
            height,
            width,
            channels: 1,
            data,
        }
    }

    /// Accepts a `[H, W, C]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[h, w, c] => Image::new(h, w, c, t.data().to_vec()),
            s => Err(Error::shape("image", s, &[0, 0, 0])),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.channels], self.data.clone()).expect("image shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Weighted luminance for RGB; a copy for gray images.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// The image as it reads back after an 8-bit save.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }

    /// Bilinear resize with pixel-center alignment; aspect ratio is not kept.
    pub fn resize(&self, target_h: usize, target_w: usize) -> Result<Image> {
        if target_h < 2 || target_w < 2 {
            return Err(Error::Config(format!("resize target {target_h}x{target_w} is below 2x2")));
        }
        if (target_h, target_w) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let c = self.channels;
        let src_pos = |dst: usize, dst_n: usize, src_n: usize| -> (usize, usize, f64) {
            let p = ((dst as f64 + 0.5) * src_n as f64 / dst_n as f64 - 0.5).clamp(0.0, (src_n - 1) as f64);
            let p0 = p.floor() as usize;
            let p1 = (p0 + 1).min(src_n - 1);
            (p0, p1, p - p0 as f64)
        };
        let mut data = Vec::with_capacity(target_h * target_w * c);
        for i in 0..target_h {
            let (i0, i1, fy) = src_pos(i, target_h, self.height);
            for j in 0..target_w {
                let (j0, j1, fx) = src_pos(j, target_w, self.width);
                for k in 0..c {
                    let v = (1.0 - fy) * ((1.0 - fx) * self.get(i0, j0, k) + fx * self.get(i0, j1, k))
                        + fy * ((1.0 - fx) * self.get(i1, j0, k) + fx * self.get(i1, j1, k));
                    data.push(v);
                }
            }
        }
        Image::new(target_h, target_w, c, data)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| match source {
            image::ImageError::IoError(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })?;
        Ok(Image::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &DynamicImage) -> Image {
        let (w, h) = img.dimensions();
        let (h, w) = (h as usize, w as usize);
        let gray = !img.color().has_color();
        let sixteen = img.color().bytes_per_pixel() / img.color().channel_count() > 1;
        let (channels, data): (usize, Vec<f64>) = match (gray, sixteen) {
            (true, false) => (1, img.to_luma8().pixels().map(|p| p.0[0] as f64 / 255.0).collect()),
            (true, true) => (1, img.to_luma16().pixels().map(|p| p.0[0] as f64 / 65535.0).collect()),
            (false, false) => (
                3,
                img.to_rgb8().pixels().flat_map(|p| p.0.map(|v| v as f64 / 255.0)).collect(),
            ),
            (false, true) => (
                3,
                img.to_rgb16().pixels().flat_map(|p| p.0.map(|v| v as f64 / 65535.0)).collect(),
            ),
        };
        Image {
            height: h,
            width: w,
            channels,
            data,
        }
    }

    /// Writes an 8-bit PNG after clamping to `[0, 1]`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let res = if self.channels == 1 {
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer size")
                .save(path)
        } else {
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer size")
                .save(path)
        };
        res.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
