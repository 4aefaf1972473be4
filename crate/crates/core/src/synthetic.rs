//! Synthetic paired image/profile particles.
//!
//! Each sample draws a latent particle length `L` and intensity scale `s`.
//! The image is a horizontal chain of `blob_count` ellipses spanning `L`
//! pixels; the profile has `round(L * length_scale)` time steps with one
//! Gaussian bump per blob in every channel, scaled by `s`. Both modalities see
//! the same latent, so the pairing carries information a contrastive model
//! can learn from.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    self, DatasetManifest, ImageRaster, OpticalProfile, ParticleSample, Split, NUM_CHANNELS,
};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticClassSpec {
    pub name: String,
    pub blob_count: usize,
    /// Eccentricity of each blob, in `[0, 1)`.
    pub eccentricity: f64,
    /// Mean horizontal extent in pixels.
    pub mean_length: f64,
    /// Relative standard deviation of the length.
    pub length_jitter: f64,
    pub amplitudes: [f64; NUM_CHANNELS],
    /// Bump widths as a fraction of the per-blob segment length.
    pub widths: [f64; NUM_CHANNELS],
    /// Relative standard deviation of the multiplicative profile noise.
    pub noise: f64,
}

impl SyntheticClassSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("classes.{}.{f}", self.name);
        if self.name.is_empty() || self.name.contains(char::is_whitespace) {
            return Err(Error::config(
                "classes.name",
                format!(
                    "class name `{}` must be non-empty without whitespace",
                    self.name
                ),
            ));
        }
        if self.blob_count == 0 {
            return Err(Error::config(field("blob_count"), "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.eccentricity) {
            return Err(Error::config(
                field("eccentricity"),
                format!("{} is outside [0, 1)", self.eccentricity),
            ));
        }
        if !(self.mean_length.is_finite() && self.mean_length >= 1.0) {
            return Err(Error::config(
                field("mean_length"),
                "must be a finite length of at least 1 pixel",
            ));
        }
        if !(self.length_jitter.is_finite() && self.length_jitter >= 0.0) {
            return Err(Error::config(
                field("length_jitter"),
                "must be finite and non-negative",
            ));
        }
        if self.amplitudes.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::config(
                field("amplitudes"),
                "must be finite and non-negative",
            ));
        }
        if self.widths.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::config(
                field("widths"),
                "must be finite and positive",
            ));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config(
                field("noise"),
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Settings shared by all classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorOptions {
    /// Profile time steps per pixel of particle length.
    pub length_scale: f64,
    /// Log-normal standard deviation of the global intensity scale.
    pub intensity_jitter: f64,
    /// Dark border around the particle, in pixels.
    pub margin: usize,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions {
            length_scale: 1.0,
            intensity_jitter: 0.2,
            margin: 6,
        }
    }
}

/// Four classes with distinct blob counts, channel patterns and sizes.
pub fn default_classes() -> Vec<SyntheticClassSpec> {
    vec![
        SyntheticClassSpec {
            name: "alpha".into(),
            blob_count: 1,
            eccentricity: 0.5,
            mean_length: 70.0,
            length_jitter: 0.15,
            amplitudes: [3.0, 1.0, 0.0, 0.3, 0.2, 2.0],
            widths: [0.30, 0.20, 0.25, 0.15, 0.35, 0.25],
            noise: 0.1,
        },
        SyntheticClassSpec {
            name: "beta".into(),
            blob_count: 2,
            eccentricity: 0.7,
            mean_length: 110.0,
            length_jitter: 0.15,
            amplitudes: [2.0, 2.5, 0.4, 1.5, 0.0, 0.3],
            widths: [0.25, 0.30, 0.15, 0.20, 0.25, 0.30],
            noise: 0.1,
        },
        SyntheticClassSpec {
            name: "gamma".into(),
            blob_count: 3,
            eccentricity: 0.8,
            mean_length: 150.0,
            length_jitter: 0.15,
            amplitudes: [1.5, 0.8, 2.5, 0.0, 1.2, 0.2],
            widths: [0.20, 0.25, 0.30, 0.25, 0.15, 0.20],
            noise: 0.1,
        },
        SyntheticClassSpec {
            name: "delta".into(),
            blob_count: 4,
            eccentricity: 0.85,
            mean_length: 190.0,
            length_jitter: 0.15,
            amplitudes: [1.0, 1.8, 0.4, 0.4, 2.2, 0.0],
            widths: [0.15, 0.20, 0.20, 0.30, 0.25, 0.35],
            noise: 0.1,
        },
    ]
}

const BACKGROUND: f64 = 12.0;
const FOREGROUND_BASE: f64 = 70.0;
const FOREGROUND_GAIN: f64 = 120.0;
/// Pixels brighter than this are foreground in generated images.
pub const FOREGROUND_THRESHOLD: u8 = 45;

pub fn generate_sample(spec: &SyntheticClassSpec, rng_seed: u64) -> ParticleSample {
    generate_sample_with(
        spec,
        &GeneratorOptions::default(),
        rng_seed,
        format!("{}_{rng_seed}", spec.name),
    )
}

pub fn generate_sample_with(
    spec: &SyntheticClassSpec,
    opts: &GeneratorOptions,
    rng_seed: u64,
    id: String,
) -> ParticleSample {
    let mut rng = seed::rng(rng_seed, seed::streams::SYNTHETIC, 0);
    let z_len: f64 = rng.sample(StandardNormal);
    let z_int: f64 = rng.sample(StandardNormal);
    let length =
        (spec.mean_length * (1.0 + spec.length_jitter * z_len)).max(2.0 * spec.blob_count as f64);
    let scale = (opts.intensity_jitter * z_int).exp();

    let image = render_image(spec, opts, length, scale, &mut rng);
    let profile = render_profile(spec, opts, length, scale, &mut rng);
    ParticleSample {
        id,
        image,
        profile,
        label: Some(spec.name.clone()),
    }
}

fn render_image(
    spec: &SyntheticClassSpec,
    opts: &GeneratorOptions,
    length: f64,
    scale: f64,
    rng: &mut impl Rng,
) -> ImageRaster {
    let n = spec.blob_count as f64;
    let a = length / (2.0 * n);
    let b = (a * (1.0 - spec.eccentricity * spec.eccentricity).sqrt()).max(1.0);
    let half_h = b.ceil() as usize;
    let m = opts.margin;
    let width = length.ceil() as usize + 2 * m + 1;
    let height = 2 * (half_h + m) + 1;
    let cy = (half_h + m) as f64;
    // Pixel centers sit on integer coordinates; the particle spans [x0, x0 + L].
    let x0 = m as f64 + 0.5;
    let pixel_noise = 20.0 * spec.noise;
    let mut pixels = vec![0u8; height * width];
    for y in 0..height {
        for x in 0..width {
            let px = x as f64 - x0;
            let mut inside = None;
            if (0.0..=length).contains(&px) {
                let k = ((px / (2.0 * a)).floor() as usize).min(spec.blob_count - 1);
                let cx = a * (2 * k + 1) as f64;
                let r2 = ((px - cx) / a).powi(2) + ((y as f64 - cy) / b).powi(2);
                if r2 <= 1.0 {
                    inside = Some(r2);
                }
            }
            let jitter = if pixel_noise > 0.0 {
                pixel_noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let v = match inside {
                Some(r2) => {
                    (FOREGROUND_BASE + FOREGROUND_GAIN * scale.min(1.5) * (1.0 - 0.4 * r2) + jitter)
                        .clamp(FOREGROUND_THRESHOLD as f64 + 5.0, 255.0)
                }
                None => (BACKGROUND + jitter).clamp(0.0, FOREGROUND_THRESHOLD as f64 - 10.0),
            };
            pixels[y * width + x] = v.round() as u8;
        }
    }
    ImageRaster::new(height, width, pixels).expect("generated image dimensions are consistent")
}

fn render_profile(
    spec: &SyntheticClassSpec,
    opts: &GeneratorOptions,
    length: f64,
    scale: f64,
    rng: &mut impl Rng,
) -> OpticalProfile {
    let steps = ((length * opts.length_scale).round() as usize).max(1);
    let n = spec.blob_count as f64;
    let seg = steps as f64 / n;
    let mut rows = vec![[0.0; NUM_CHANNELS]; steps];
    for (t, row) in rows.iter_mut().enumerate() {
        for c in 0..NUM_CHANNELS {
            let sigma = spec.widths[c] * seg;
            let mut v = 0.0;
            for k in 0..spec.blob_count {
                let mu = (k as f64 + 0.5) * seg;
                v += (-0.5 * ((t as f64 + 0.5 - mu) / sigma).powi(2)).exp();
            }
            let noise = if spec.noise > 0.0 {
                (spec.noise * rng.sample::<f64, _>(StandardNormal)).exp()
            } else {
                1.0
            };
            row[c] = spec.amplitudes[c] * scale * v * noise;
        }
    }
    OpticalProfile::new(rows).expect("generated profile values are finite")
}

/// Horizontal extent (in pixels) of the columns containing any pixel above
/// `threshold`, or 0 for an empty image.
pub fn foreground_extent(image: &ImageRaster, threshold: u8) -> usize {
    let cols: Vec<usize> = (0..image.width())
        .filter(|&x| (0..image.height()).any(|y| image.get(y, x) > threshold))
        .collect();
    match (cols.first(), cols.last()) {
        (Some(a), Some(b)) => b - a + 1,
        _ => 0,
    }
}

/// Generates `samples_per_class` particles per class in memory. Sample `i`
/// (class-major order) is driven by a seed derived from `(seed, i)`.
pub fn generate_samples(
    specs: &[SyntheticClassSpec],
    samples_per_class: usize,
    seed: u64,
    opts: &GeneratorOptions,
) -> Result<Vec<ParticleSample>> {
    if specs.is_empty() {
        return Err(Error::config(
            "classes",
            "at least one class spec is required",
        ));
    }
    if samples_per_class == 0 {
        return Err(Error::config("per_class", "must be at least 1"));
    }
    let mut names = std::collections::HashSet::new();
    for s in specs {
        s.validate()?;
        if !names.insert(&s.name) {
            return Err(Error::config(
                "classes",
                format!("duplicate class name `{}`", s.name),
            ));
        }
    }
    let mut out = Vec::with_capacity(specs.len() * samples_per_class);
    for (ci, spec) in specs.iter().enumerate() {
        for j in 0..samples_per_class {
            let index = (ci * samples_per_class + j) as u64;
            let sample_seed = seed::derive(seed, seed::streams::SYNTHETIC, index);
            out.push(generate_sample_with(
                spec,
                opts,
                sample_seed,
                format!("{}_{j:05}", spec.name),
            ));
        }
    }
    Ok(out)
}

/// Writes a generated dataset under `out_dir`: `images/`, `profiles/` and
/// `manifest.tsv`. Returns the manifest.
pub fn generate_dataset(
    specs: &[SyntheticClassSpec],
    samples_per_class: usize,
    seed: u64,
    opts: &GeneratorOptions,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let samples = generate_samples(specs, samples_per_class, seed, opts)?;
    let manifest = data::write_samples(&samples, out_dir)?;
    data::write_manifest(&manifest, &out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Splits a manifest by class and writes `train.tsv`, `val.tsv` and
/// `test.tsv` next to it. Returns per-split entry counts keyed by split.
pub fn write_split_manifests(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
    out_dir: &Path,
) -> Result<BTreeMap<String, usize>> {
    let labels: Vec<Option<&str>> = manifest
        .entries
        .iter()
        .map(|e| e.label.as_deref())
        .collect();
    let idx = data::stratified_split_labels(&labels, fractions, seed)?;
    let mut counts = BTreeMap::new();
    for (split, ix) in [
        (Split::Train, &idx.train),
        (Split::Val, &idx.val),
        (Split::Test, &idx.test),
    ] {
        let part = DatasetManifest {
            entries: ix.iter().map(|&i| manifest.entries[i].clone()).collect(),
            split: Some(split),
        };
        data::write_manifest(&part, &out_dir.join(format!("{split}.tsv")))?;
        counts.insert(split.to_string(), ix.len());
    }
    Ok(counts)
}
