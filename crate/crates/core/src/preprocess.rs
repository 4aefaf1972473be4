//! Raw samples to fixed-shape model inputs, with train-time augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageRaster, OpticalProfile, ParticleSample, NUM_CHANNELS};
use crate::error::{Error, Result};

/// Side length of model inputs and the resampled profile length.
pub const INPUT_SIZE: usize = 224;
/// Intermediate resize before cropping.
pub const RESIZE_SIZE: usize = 236;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrepMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Area fraction of the resized image kept by the random crop.
    pub crop_scale: (f64, f64),
    /// Brightness and contrast factor range.
    pub jitter: (f64, f64),
    pub amplitude_scale: (f64, f64),
    /// Per-channel probability of zeroing a profile band.
    pub band_drop: f64,
    /// Synchronized horizontal flip of image and profile.
    pub flip: f64,
    /// Image-only vertical flip.
    pub vertical_flip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: (0.8, 1.0),
            jitter: (0.8, 1.2),
            amplitude_scale: (0.7, 1.3),
            band_drop: 0.1,
            flip: 0.5,
            vertical_flip: 0.5,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all; train mode then differs from eval only in the
    /// crop position.
    pub fn none() -> Self {
        AugmentConfig {
            crop_scale: (1.0, 1.0),
            jitter: (1.0, 1.0),
            amplitude_scale: (1.0, 1.0),
            band_drop: 0.0,
            flip: 0.0,
            vertical_flip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64), min_excl: f64| -> Result<()> {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo > min_excl) {
                return Err(Error::config(
                    format!("augment.{name}"),
                    format!("invalid range ({lo}, {hi})"),
                ));
            }
            Ok(())
        };
        range("crop_scale", self.crop_scale, 0.0)?;
        if self.crop_scale.1 > 1.0 {
            return Err(Error::config(
                "augment.crop_scale",
                "upper bound must be at most 1",
            ));
        }
        range("jitter", self.jitter, 0.0)?;
        range("amplitude_scale", self.amplitude_scale, 0.0)?;
        if !(0.0..1.0).contains(&self.band_drop) {
            return Err(Error::config("augment.band_drop", "must be in [0, 1)"));
        }
        for (name, p) in [("flip", self.flip), ("vertical_flip", self.vertical_flip)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(
                    format!("augment.{name}"),
                    "must be in [0, 1]",
                ));
            }
        }
        Ok(())
    }
}

/// `224 x 224` image, row-major, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub values: Vec<f32>,
    /// `max(H, W) / 224` of the raw image.
    pub size_feature: f64,
}

/// `224 x 6` profile, time-major, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTensor {
    pub values: Vec<f32>,
    /// Raw `T / 224`.
    pub length_feature: f64,
}

impl ImageTensor {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * INPUT_SIZE + x]
    }
}

impl ProfileTensor {
    pub fn get(&self, t: usize, c: usize) -> f32 {
        self.values[t * NUM_CHANNELS + c]
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn bernoulli(rng: &mut impl Rng, p: f64) -> bool {
    rng.gen::<f64>() < p
}

/// Pads the shorter side by replicating edge pixels so the image becomes
/// `max(H, W)` square, keeping the content centered.
pub fn edge_pad_square(img: &ImageRaster) -> ImageRaster {
    let (h, w) = (img.height(), img.width());
    let s = h.max(w);
    let (top, left) = ((s - h) / 2, (s - w) / 2);
    let mut px = Vec::with_capacity(s * s);
    for y in 0..s {
        let sy = y.saturating_sub(top).min(h - 1);
        for x in 0..s {
            let sx = x.saturating_sub(left).min(w - 1);
            px.push(img.get(sy, sx));
        }
    }
    ImageRaster::new(s, s, px).expect("square padding keeps a valid shape")
}

/// Bilinear resize of a square-or-rectangular `f64` grid with half-pixel
/// centers. The source window is `src[y0..y0+sh, x0..x0+sw]` inside a grid of
/// row stride `stride`.
#[allow(clippy::too_many_arguments)]
fn bilinear(
    src: &[f64],
    stride: usize,
    y0: f64,
    x0: f64,
    sh: f64,
    sw: f64,
    out_h: usize,
    out_w: usize,
    max_y: usize,
    max_x: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w];
    let cols: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|j| {
            let fx = (x0 + (j as f64 + 0.5) * sw / out_w as f64 - 0.5).clamp(0.0, max_x as f64);
            let x_lo = fx.floor() as usize;
            (x_lo, (x_lo + 1).min(max_x), fx - x_lo as f64)
        })
        .collect();
    for i in 0..out_h {
        let fy = (y0 + (i as f64 + 0.5) * sh / out_h as f64 - 0.5).clamp(0.0, max_y as f64);
        let y_lo = fy.floor() as usize;
        let y_hi = (y_lo + 1).min(max_y);
        let wy = fy - y_lo as f64;
        let (r0, r1) = (&src[y_lo * stride..], &src[y_hi * stride..]);
        for (j, &(x_lo, x_hi, wx)) in cols.iter().enumerate() {
            let top = r0[x_lo] * (1.0 - wx) + r0[x_hi] * wx;
            let bot = r1[x_lo] * (1.0 - wx) + r1[x_hi] * wx;
            out[i * out_w + j] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

pub fn preprocess_image(
    img: &ImageRaster,
    mode: PrepMode,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> ImageTensor {
    preprocess_image_with_crop(img, |i| i.clone(), mode, cfg, rng)
}

/// Like [`preprocess_image`] with a caller-supplied crop applied to the raw
/// raster first (for removing instrument overlays such as scale bars). The
/// size feature is taken from the raster returned by `pre_crop`.
pub fn preprocess_image_with_crop(
    img: &ImageRaster,
    pre_crop: impl Fn(&ImageRaster) -> ImageRaster,
    mode: PrepMode,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> ImageTensor {
    let img = pre_crop(img);
    let size_feature = img.height().max(img.width()) as f64 / INPUT_SIZE as f64;
    let sq = edge_pad_square(&img);
    let s = sq.height();
    let src: Vec<f64> = sq.pixels().iter().map(|&p| p as f64).collect();
    let r = RESIZE_SIZE;
    let resized = bilinear(&src, s, 0.0, 0.0, s as f64, s as f64, r, r, s - 1, s - 1);

    let mut v = match mode {
        PrepMode::Train => {
            let area = uniform(rng, cfg.crop_scale);
            let side = ((r * r) as f64 * area).sqrt().round().clamp(1.0, r as f64) as usize;
            let oy = rng.gen_range(0..=r - side);
            let ox = rng.gen_range(0..=r - side);
            bilinear(
                &resized,
                r,
                oy as f64,
                ox as f64,
                side as f64,
                side as f64,
                INPUT_SIZE,
                INPUT_SIZE,
                r - 1,
                r - 1,
            )
        }
        PrepMode::Eval => {
            let off = (r - INPUT_SIZE) / 2;
            let mut out = Vec::with_capacity(INPUT_SIZE * INPUT_SIZE);
            for y in 0..INPUT_SIZE {
                out.extend_from_slice(
                    &resized[(y + off) * r + off..(y + off) * r + off + INPUT_SIZE],
                );
            }
            out
        }
    };

    if mode == PrepMode::Train {
        let brightness = uniform(rng, cfg.jitter);
        let contrast = uniform(rng, cfg.jitter);
        v.iter_mut()
            .for_each(|p| *p = (*p * brightness).clamp(0.0, 255.0));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut()
            .for_each(|p| *p = ((*p - mean) * contrast + mean).clamp(0.0, 255.0));
    }
    let values = v
        .iter()
        .map(|&p| (p / 127.5 - 1.0).clamp(-1.0, 1.0) as f32)
        .collect();
    ImageTensor {
        values,
        size_feature,
    }
}

/// Linear interpolation of `values` onto `out_len` points, with both
/// endpoints kept.
pub fn resample_linear(values: &[f64], out_len: usize) -> Vec<f64> {
    let n = values.len();
    if n == 1 || out_len == 1 {
        return vec![values[0]; out_len];
    }
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * (n - 1) as f64 / (out_len - 1) as f64;
            let lo = (pos.floor() as usize).min(n - 2);
            let w = pos - lo as f64;
            values[lo] * (1.0 - w) + values[lo + 1] * w
        })
        .collect()
}

pub fn preprocess_profile(
    prof: &OpticalProfile,
    mode: PrepMode,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<ProfileTensor> {
    if let Some((t, c)) = prof
        .samples()
        .iter()
        .enumerate()
        .find_map(|(t, row)| row.iter().position(|v| *v < 0.0).map(|c| (t, c)))
    {
        return Err(Error::Domain(format!(
            "negative profile value at time step {t}, channel {c}"
        )));
    }
    let length_feature = prof.len() as f64 / INPUT_SIZE as f64;
    let mut values = vec![0.0f64; INPUT_SIZE * NUM_CHANNELS];
    for c in 0..NUM_CHANNELS {
        let col: Vec<f64> = resample_linear(&prof.channel(c), INPUT_SIZE)
            .into_iter()
            .map(f64::ln_1p)
            .collect();
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        for (t, v) in col.iter().enumerate() {
            values[t * NUM_CHANNELS + c] = if hi > lo {
                2.0 * (v - lo) / (hi - lo) - 1.0
            } else {
                -1.0
            };
        }
    }
    if mode == PrepMode::Train {
        let amp = uniform(rng, cfg.amplitude_scale);
        values.iter_mut().for_each(|v| *v *= amp);
        for c in 0..NUM_CHANNELS {
            if bernoulli(rng, cfg.band_drop) {
                (0..INPUT_SIZE).for_each(|t| values[t * NUM_CHANNELS + c] = 0.0);
            }
        }
    }
    Ok(ProfileTensor {
        values: values.iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect(),
        length_feature,
    })
}

pub fn flip_image_horizontal(img: &mut ImageTensor) {
    img.values
        .chunks_mut(INPUT_SIZE)
        .for_each(|row| row.reverse());
}

pub fn flip_image_vertical(img: &mut ImageTensor) {
    for y in 0..INPUT_SIZE / 2 {
        let (a, b) = img.values.split_at_mut((INPUT_SIZE - 1 - y) * INPUT_SIZE);
        a[y * INPUT_SIZE..(y + 1) * INPUT_SIZE].swap_with_slice(&mut b[..INPUT_SIZE]);
    }
}

pub fn flip_profile_time(prof: &mut ProfileTensor) {
    for t in 0..INPUT_SIZE / 2 {
        let (a, b) = prof
            .values
            .split_at_mut((INPUT_SIZE - 1 - t) * NUM_CHANNELS);
        a[t * NUM_CHANNELS..(t + 1) * NUM_CHANNELS].swap_with_slice(&mut b[..NUM_CHANNELS]);
    }
}

/// Reverses image columns and the profile time axis together with
/// probability `p`. Returns whether the flip happened.
pub fn synchronized_flip(
    img: &mut ImageTensor,
    prof: &mut ProfileTensor,
    p: f64,
    rng: &mut impl Rng,
) -> bool {
    let flip = bernoulli(rng, p);
    if flip {
        flip_image_horizontal(img);
        flip_profile_time(prof);
    }
    flip
}

pub fn random_vertical_flip_image(img: &mut ImageTensor, p: f64, rng: &mut impl Rng) -> bool {
    let flip = bernoulli(rng, p);
    if flip {
        flip_image_vertical(img);
    }
    flip
}

/// Full per-sample pipeline used by training and evaluation.
pub fn preprocess_sample(
    sample: &ParticleSample,
    mode: PrepMode,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, ProfileTensor)> {
    let mut img = preprocess_image(&sample.image, mode, cfg, rng);
    let mut prof = preprocess_profile(&sample.profile, mode, cfg, rng)
        .map_err(|e| Error::InvalidInput(format!("sample `{}`: {e}", sample.id)))?;
    if mode == PrepMode::Train {
        synchronized_flip(&mut img, &mut prof, cfg.flip, rng);
        random_vertical_flip_image(&mut img, cfg.vertical_flip, rng);
    }
    Ok((img, prof))
}
