//! Per-visit image embedding and the sinusoidal time encodings.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::{init_normal, Graph, Params, Tensor, Var};
use crate::error::{Error, Result};

/// One visit's image, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Data("image extents must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::Data(format!(
                "image has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Sinusoidal encoding of a non-negative time value into `d` features:
/// `sin(v / 10000^(2i/d))` at `2i` and the matching cosine at `2i + 1`.
pub fn temporal_encode(v: f64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("encoding width {d} must be even and positive")));
    }
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::Data(format!("time value {v} must be finite and non-negative")));
    }
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / d as f64);
        let (s, c) = (v / freq).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
    Ok(out)
}

/// Encoding of the gap between consecutive visits; same family as [`temporal_encode`].
pub fn relative_encode(gap_months: f64, d: usize) -> Result<Vec<f64>> {
    if gap_months < 0.0 {
        return Err(Error::Data(format!(
            "negative visit gap {gap_months}: visits out of order"
        )));
    }
    temporal_encode(gap_months, d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels of each conv + pool block.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub d: usize,
}

impl EncoderConfig {
    pub fn desk(d: usize) -> Self {
        Self {
            in_channels: 1,
            image_size: 32,
            conv_channels: vec![8, 16, 16],
            kernel: 3,
            d,
        }
    }

    fn flat_features(&self) -> usize {
        let side = self.image_size >> self.conv_channels.len();
        side * side * self.conv_channels.last().copied().unwrap_or(self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::Config("encoder needs at least one conv block".into()));
        }
        if self.image_size >> self.conv_channels.len() == 0
            || self.image_size % (1 << self.conv_channels.len()) != 0
        {
            return Err(Error::Config(format!(
                "image size {} not divisible through {} pooling stages",
                self.image_size,
                self.conv_channels.len()
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("conv kernel must be odd".into()));
        }
        Ok(())
    }

    pub fn init_params(&self, params: &mut Params, rng: &mut impl Rng, prefix: &str) -> Result<()> {
        self.validate()?;
        let mut c_in = self.in_channels;
        for (i, &c_out) in self.conv_channels.iter().enumerate() {
            let fan_in = c_in * self.kernel * self.kernel;
            params.insert(
                format!("{prefix}.conv{i}.w"),
                init_normal(rng, &[c_out, c_in, self.kernel, self.kernel], fan_in, 2f64.sqrt()),
            )?;
            params.insert(format!("{prefix}.conv{i}.b"), Tensor::zeros(&[c_out]))?;
            c_in = c_out;
        }
        let flat = self.flat_features();
        params.insert(format!("{prefix}.fc.w"), init_normal(rng, &[flat, self.d], flat, 1.0))?;
        params.insert(format!("{prefix}.fc.b"), Tensor::zeros(&[self.d]))?;
        Ok(())
    }

    /// Embeds `images` (`[n, c, h, w]`, already standardised) into `[n, d]`.
    pub fn encode(&self, g: &mut Graph, params: &Params, prefix: &str, images: Tensor) -> Result<Var> {
        let shape = images.shape().to_vec();
        if shape.len() != 4
            || shape[1] != self.in_channels
            || shape[2] != self.image_size
            || shape[3] != self.image_size
        {
            return Err(Error::Data(format!(
                "image batch {shape:?} does not match encoder resolution {}x{}x{}",
                self.in_channels, self.image_size, self.image_size
            )));
        }
        let n = shape[0];
        let mut x = g.constant(images);
        for i in 0..self.conv_channels.len() {
            let w = g.param_named(params, &format!("{prefix}.conv{i}.w"))?;
            let b = g.param_named(params, &format!("{prefix}.conv{i}.b"))?;
            x = g.conv2d(x, w, b)?;
            x = g.relu(x);
            x = g.max_pool2(x)?;
        }
        let x = g.reshape(x, vec![n, self.flat_features()])?;
        let w = g.param_named(params, &format!("{prefix}.fc.w"))?;
        let b = g.param_named(params, &format!("{prefix}.fc.b"))?;
        let x = g.matmul(x, w)?;
        g.add_bias(x, b)
    }
}

/// Per-channel pixel standardisation fitted on training images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for img in images {
            let (c, h, w) = img.shape();
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::Data("mixed channel counts in training images".into()));
            }
            for ch in 0..c {
                for &v in &img.data()[ch * h * w..(ch + 1) * h * w] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64).powi(2);
                }
            }
            count += h * w;
        }
        if count == 0 {
            return Err(Error::Data("no images to fit standardisation".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    /// Writes the standardised image into `out` as `f64`.
    pub fn apply_into(&self, img: &Image, out: &mut [f64]) {
        let (c, h, w) = img.shape();
        for ch in 0..c {
            let (m, s) = (self.mean[ch], self.std[ch]);
            for (o, &v) in out[ch * h * w..(ch + 1) * h * w]
                .iter_mut()
                .zip(&img.data()[ch * h * w..(ch + 1) * h * w])
            {
                *o = (v as f64 - m) / s;
            }
        }
    }
}

/// Training-time perturbation: Gaussian pixel noise and a small random shift,
/// each applied with probability one half.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub noise_std: f64,
    pub max_shift: i32,
    pub prob: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            noise_std: 0.02,
            max_shift: 2,
            prob: 0.5,
        }
    }
}

impl Augmentation {
    pub fn apply(&self, img: &Image, rng: &mut impl Rng) -> Image {
        let (c, h, w) = img.shape();
        let mut data = img.data().to_vec();
        if rng.random::<f64>() < self.prob && self.max_shift > 0 {
            let dy = rng.random_range(-self.max_shift..=self.max_shift);
            let dx = rng.random_range(-self.max_shift..=self.max_shift);
            let src = img.data();
            for ch in 0..c {
                for y in 0..h as i32 {
                    for x in 0..w as i32 {
                        let (sy, sx) = (y - dy, x - dx);
                        let inside = sy >= 0 && sy < h as i32 && sx >= 0 && sx < w as i32;
                        data[(ch * h + y as usize) * w + x as usize] = if inside {
                            src[(ch * h + sy as usize) * w + sx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
        if rng.random::<f64>() < self.prob && self.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.noise_std).expect("positive std");
            for v in &mut data {
                *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
            }
        }
        Image {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }
}
