//! Domain types shared across the pipeline and their on-disk forms.
//!
//! A dataset is a tab-separated manifest, one particle per line:
//!
//! ```text
//! id<TAB>image_path<TAB>profile_path<TAB>label
//! ```
//!
//! Paths are relative to the manifest's directory and the label may be empty.
//! Images are 8-bit grayscale PNG; profiles are text tables with one row per
//! time step and the six channels in [`CHANNELS`] order.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Optical channel names in file column order.
pub const CHANNELS: [&str; 6] = ["FSC", "SSC", "Green", "Yellow", "Orange", "Red"];
pub const NUM_CHANNELS: usize = 6;

/// Grayscale image, row-major, intensities 0–255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRaster {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl ImageRaster {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(ImageRaster {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Six-channel pulse-shape signal sampled along the particle.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalProfile {
    samples: Vec<[f64; NUM_CHANNELS]>,
}

impl OpticalProfile {
    pub fn new(samples: Vec<[f64; NUM_CHANNELS]>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput(
                "profile must have at least one time step".into(),
            ));
        }
        if let Some(t) = samples
            .iter()
            .position(|row| row.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidInput(format!(
                "profile has a non-finite value at time step {t}"
            )));
        }
        Ok(OpticalProfile { samples })
    }

    /// Number of time steps `T`.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[[f64; NUM_CHANNELS]] {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.samples.iter().map(|row| row[c]).collect()
    }
}

/// One particle: its image and profile recorded together, plus an optional
/// class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSample {
    pub id: String,
    pub image: ImageRaster,
    pub profile: OpticalProfile,
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "I")]
    Image,
    #[serde(rename = "P")]
    Profile,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "I",
            Modality::Profile => "P",
        })
    }
}

/// Non-empty subset of the two modalities, written `I`, `P` or `I+P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalitySet {
    image: bool,
    profile: bool,
}

impl ModalitySet {
    pub const IMAGE: ModalitySet = ModalitySet {
        image: true,
        profile: false,
    };
    pub const PROFILE: ModalitySet = ModalitySet {
        image: false,
        profile: true,
    };
    pub const BOTH: ModalitySet = ModalitySet {
        image: true,
        profile: true,
    };
    /// Row/column order of the evaluation matrix.
    pub const ALL: [ModalitySet; 3] = [Self::IMAGE, Self::PROFILE, Self::BOTH];

    pub fn contains(self, m: Modality) -> bool {
        match m {
            Modality::Image => self.image,
            Modality::Profile => self.profile,
        }
    }

    pub fn modalities(self) -> Vec<Modality> {
        let mut v = Vec::with_capacity(2);
        if self.image {
            v.push(Modality::Image);
        }
        if self.profile {
            v.push(Modality::Profile);
        }
        v
    }

    pub fn len(self) -> usize {
        self.image as usize + self.profile as usize
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn bits(self) -> u8 {
        self.image as u8 | (self.profile as u8) << 1
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        let s = ModalitySet {
            image: bits & 1 != 0,
            profile: bits & 2 != 0,
        };
        (bits & !3 == 0 && !s.is_empty()).then_some(s)
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match (self.image, self.profile) {
            (true, true) => "I+P",
            (true, false) => "I",
            (false, true) => "P",
            (false, false) => "-",
        })
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace(' ', "").as_str() {
            "I" | "IMAGE" => Ok(Self::IMAGE),
            "P" | "PROFILE" => Ok(Self::PROFILE),
            "I+P" | "P+I" | "IP" | "BOTH" => Ok(Self::BOTH),
            other => Err(Error::InvalidInput(format!(
                "unknown modality set `{other}` (expected I, P or I+P)"
            ))),
        }
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// As written in the manifest, relative to its directory.
    pub image_path: String,
    pub profile_path: String,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Option<Split>,
}

const SPLIT_PREFIX: &str = "# split: ";

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = DatasetManifest::default();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let row = lineno + 1;
        if let Some(split) = line.strip_prefix(SPLIT_PREFIX) {
            manifest.split = Some(split.parse().map_err(|_| Error::Format {
                path: path.into(),
                row,
                message: format!("unknown split `{split}`"),
            })?);
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Format {
                path: path.into(),
                row,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(Error::Format {
                path: path.into(),
                row,
                message: "empty id".into(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(Error::Format {
                path: path.into(),
                row,
                message: format!("duplicate id `{id}`"),
            });
        }
        let label = fields
            .get(3)
            .filter(|l| !l.is_empty())
            .map(|l| l.to_string());
        manifest.entries.push(ManifestEntry {
            id,
            image_path: fields[1].to_string(),
            profile_path: fields[2].to_string(),
            label,
        });
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    if let Some(split) = manifest.split {
        out.push_str(SPLIT_PREFIX);
        out.push_str(&split.to_string());
        out.push('\n');
    }
    for e in &manifest.entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.id,
            e.image_path,
            e.profile_path,
            e.label.as_deref().unwrap_or("")
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

/// Loads every sample listed in the manifest, in manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<ParticleSample>> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_dir(manifest_path);
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(ParticleSample {
                id: e.id.clone(),
                image: read_png(&dir.join(&e.image_path))?,
                profile: read_profile(&dir.join(&e.profile_path))?,
                label: e.label.clone(),
            })
        })
        .collect()
}

/// Parses a profile table. Blank lines and lines starting with `#` are
/// skipped; columns may be separated by tabs, commas or spaces.
pub fn parse_profile(text: &str, path: &Path) -> Result<OpticalProfile> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let row = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed
            .split(['\t', ',', ' '])
            .filter(|s| !s.is_empty())
            .collect();
        if cols.len() != NUM_CHANNELS {
            return Err(Error::Format {
                path: path.into(),
                row,
                message: format!("expected {NUM_CHANNELS} columns, found {}", cols.len()),
            });
        }
        let mut values = [0.0; NUM_CHANNELS];
        for (v, c) in values.iter_mut().zip(&cols) {
            *v = c.parse::<f64>().map_err(|_| Error::Format {
                path: path.into(),
                row,
                message: format!("`{c}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Format {
                    path: path.into(),
                    row,
                    message: format!("non-finite value `{c}`"),
                });
            }
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::Format {
            path: path.into(),
            row: 0,
            message: "profile has no data rows".into(),
        });
    }
    OpticalProfile::new(rows)
}

pub fn read_profile(path: &Path) -> Result<OpticalProfile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_profile(&text, path)
}

pub fn format_profile(profile: &OpticalProfile) -> String {
    let mut out = String::with_capacity(profile.len() * 48);
    out.push_str("# ");
    out.push_str(&CHANNELS.join("\t"));
    out.push('\n');
    for row in profile.samples() {
        let cols: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cols.join("\t"));
        out.push('\n');
    }
    out
}

pub fn write_profile(profile: &OpticalProfile, path: &Path) -> Result<()> {
    write_atomic(path, format_profile(profile).as_bytes())
}

pub fn write_png(image: &ImageRaster, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        image.width() as u32,
        image.height() as u32,
    );
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let img_err = |e: png::EncodingError| Error::Image {
        path: path.into(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(image.pixels()).map_err(img_err)?;
    writer.finish().map_err(img_err)?;
    Ok(())
}

/// Reads a PNG as 8-bit grayscale. Color images are converted with Rec. 601
/// luma weights; alpha is ignored.
pub fn read_png(path: &Path) -> Result<ImageRaster> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let img_err = |e: png::DecodingError| Error::Image {
        path: path.into(),
        message: e.to_string(),
    };
    let mut reader = dec.read_info().map_err(img_err)?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(img_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let stride = info.line_size;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Image {
                path: path.into(),
                message: "indexed PNG not expanded".into(),
            })
        }
    };
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        let line = &data[y * stride..y * stride + w * channels];
        for px in line.chunks(channels) {
            pixels.push(if channels >= 3 {
                (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64)
                    .round()
                    .clamp(0.0, 255.0) as u8
            } else {
                px[0]
            });
        }
    }
    ImageRaster::new(h, w, pixels)
}

/// Indices of one stratified partition plus any per-class warnings.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Per-class partition of `labels` into train/val/test.
///
/// Within each class the members are shuffled with a seeded RNG and counts are
/// apportioned by largest remainder, so each split is within one sample of
/// its requested share. Classes too small to give every non-empty split a
/// sample are kept whole in train. Each output list is in input order.
pub fn stratified_split_labels(
    labels: &[Option<&str>],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitIndices> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput(format!(
            "split fractions must be non-negative, got {f:?}"
        )));
    }
    if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split fractions must sum to 1, got {f:?}"
        )));
    }
    let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        let l = l.ok_or_else(|| {
            Error::InvalidInput(format!(
                "sample {i} has no label; stratified split needs labels"
            ))
        })?;
        classes.entry(l).or_default().push(i);
    }
    let active = f.iter().filter(|v| **v > 0.0).count();
    let mut rng = seed::rng(seed, seed::streams::SPLIT, 0);
    let mut out = SplitIndices::default();
    for (label, mut members) in classes {
        let n = members.len();
        members.shuffle(&mut rng);
        if n < 3 {
            let msg = format!("class `{label}` has only {n} sample(s)");
            warn!("{msg}");
            out.warnings.push(msg);
        }
        if n < active {
            let msg = format!("class `{label}` has fewer samples ({n}) than splits ({active}); kept whole in train");
            warn!("{msg}");
            out.warnings.push(msg);
            out.train.extend(members);
            continue;
        }
        let counts = apportion(n, &f);
        out.train.extend_from_slice(&members[..counts[0]]);
        out.val
            .extend_from_slice(&members[counts[0]..counts[0] + counts[1]]);
        out.test
            .extend_from_slice(&members[counts[0] + counts[1]..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Largest-remainder rounding of `n * f[i]`; ties go to the earlier split.
fn apportion(n: usize, f: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = f.iter().map(|v| v * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = (exact[i] + 1e-9).floor() as usize;
    }
    let mut rest = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if f[i] > 0.0 {
            counts[i] += 1;
            rest -= 1;
        }
    }
    counts
}

/// The three sample lists of a stratified split.
#[derive(Debug, Clone, Default)]
pub struct SampleSplit {
    pub train: Vec<ParticleSample>,
    pub val: Vec<ParticleSample>,
    pub test: Vec<ParticleSample>,
    pub warnings: Vec<String>,
}

pub fn stratified_split(
    samples: &[ParticleSample],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SampleSplit> {
    let labels: Vec<Option<&str>> = samples.iter().map(|s| s.label.as_deref()).collect();
    let idx = stratified_split_labels(&labels, fractions, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok(SampleSplit {
        train: pick(&idx.train),
        val: pick(&idx.val),
        test: pick(&idx.test),
        warnings: idx.warnings,
    })
}

/// Writes `samples` as PNG + profile files under `dir` and returns a manifest
/// referencing them.
pub fn write_samples(samples: &[ParticleSample], dir: &Path) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::default();
    for s in samples {
        let image_path = format!("images/{}.png", s.id);
        let profile_path = format!("profiles/{}.tsv", s.id);
        write_png(&s.image, &dir.join(&image_path))?;
        write_profile(&s.profile, &dir.join(&profile_path))?;
        manifest.entries.push(ManifestEntry {
            id: s.id.clone(),
            image_path,
            profile_path,
            label: s.label.clone(),
        });
    }
    Ok(manifest)
}

/// Sorted distinct labels.
pub fn class_names(samples: &[ParticleSample]) -> Vec<String> {
    let mut v: Vec<String> = samples.iter().filter_map(|s| s.label.clone()).collect();
    v.sort();
    v.dedup();
    v
}
