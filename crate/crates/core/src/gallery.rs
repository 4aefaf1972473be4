//! Labeled embedding galleries and cosine-distance k-NN classification.
//!
//! Every query embedding searches the whole gallery, so with a mixed I+P
//! gallery an image query can retrieve profile entries and vice versa. The
//! neighbors of all query modalities are pooled into one majority vote.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::data::{
    write_atomic, ImageRaster, Modality, ModalitySet, OpticalProfile, ParticleSample,
};
use crate::encoders::{DualEncoder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::losses::cosine_similarity_slices;
use crate::nn::Float;
use crate::preprocess::{self, AugmentConfig, PrepMode};
use crate::seed;
use crate::training::eval_tensors;

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub embedding: EmbeddingVector,
    pub label: String,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGallery {
    entries: Vec<GalleryEntry>,
    modalities: ModalitySet,
    class_counts: BTreeMap<String, usize>,
}

impl LabeledGallery {
    /// Checks that all entries share one dimension and are unit norm.
    pub fn new(entries: Vec<GalleryEntry>, modalities: ModalitySet) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Gallery("gallery has no entries".into()));
        }
        let dim = entries[0].embedding.dim();
        for (i, e) in entries.iter().enumerate() {
            if e.embedding.dim() != dim {
                return Err(Error::Gallery(format!(
                    "entry {i} has dimension {} instead of {dim}",
                    e.embedding.dim()
                )));
            }
            if (e.embedding.norm() - 1.0).abs() > 1e-5 {
                return Err(Error::Gallery(format!(
                    "entry {i} is not unit norm (norm {})",
                    e.embedding.norm()
                )));
            }
            if !modalities.contains(e.embedding.modality) {
                return Err(Error::Gallery(format!(
                    "entry {i} has modality {} outside {modalities}",
                    e.embedding.modality
                )));
            }
        }
        let mut class_counts = BTreeMap::new();
        for e in &entries {
            *class_counts.entry(e.label.clone()).or_insert(0) += 1;
        }
        Ok(LabeledGallery {
            entries,
            modalities,
            class_counts,
        })
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].embedding.dim()
    }

    pub fn modalities(&self) -> ModalitySet {
        self.modalities
    }

    /// Number of entries per class label.
    pub fn class_counts(&self) -> &BTreeMap<String, usize> {
        &self.class_counts
    }
}

/// Chooses up to `n_per_class` indices per label without replacement.
/// Returns the chosen indices (ascending) and a warning per short class.
pub fn select_per_class(
    labels: &[&str],
    n_per_class: usize,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<String>) {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut chosen = Vec::new();
    let mut warnings = Vec::new();
    for (label, members) in by_class {
        if members.len() <= n_per_class {
            if members.len() < n_per_class {
                let msg = format!(
                    "class `{label}` has only {} samples for a gallery of {n_per_class}",
                    members.len()
                );
                warn!("{msg}");
                warnings.push(msg);
            }
            chosen.extend(members);
        } else {
            chosen.extend(
                sample_indices(rng, members.len(), n_per_class)
                    .into_iter()
                    .map(|j| members[j]),
            );
        }
    }
    chosen.sort_unstable();
    (chosen, warnings)
}

/// Gallery entries for the particles at `chosen`, one per requested modality,
/// from embeddings computed beforehand.
pub fn gallery_from_embeddings(
    ids: &[String],
    labels: &[String],
    image: Option<&[EmbeddingVector]>,
    profile: Option<&[EmbeddingVector]>,
    chosen: &[usize],
    modalities: ModalitySet,
) -> Result<LabeledGallery> {
    let mut entries = Vec::with_capacity(chosen.len() * modalities.len());
    for &i in chosen {
        for m in modalities.modalities() {
            let source = match m {
                Modality::Image => image,
                Modality::Profile => profile,
            }
            .ok_or_else(|| Error::Gallery(format!("no {m} embeddings available")))?;
            entries.push(GalleryEntry {
                embedding: source[i].clone(),
                label: labels[i].clone(),
                id: ids[i].clone(),
            });
        }
    }
    LabeledGallery::new(entries, modalities)
}

/// Encodes up to `n_per_class` labeled samples per class with eval
/// preprocessing and collects one embedding per requested modality.
pub fn build_gallery<T: Float>(
    samples: &[ParticleSample],
    model: &DualEncoder<T>,
    modalities: ModalitySet,
    n_per_class: usize,
    augment: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(LabeledGallery, Vec<String>)> {
    if samples.is_empty() {
        return Err(Error::Gallery(
            "no labeled samples to build a gallery from".into(),
        ));
    }
    if n_per_class == 0 {
        return Err(Error::Gallery(
            "gallery size per class must be at least 1".into(),
        ));
    }
    let labels = samples
        .iter()
        .map(|s| {
            s.label
                .clone()
                .ok_or_else(|| Error::Gallery(format!("sample `{}` has no label", s.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let (chosen, warnings) = select_per_class(&label_refs, n_per_class, rng);
    let picked: Vec<ParticleSample> = chosen.iter().map(|&i| samples[i].clone()).collect();
    let (imgs, profs) = eval_tensors(&picked, augment)?;
    let image = if modalities.contains(Modality::Image) {
        Some(model.embed_images(&imgs, 64)?)
    } else {
        None
    };
    let profile = if modalities.contains(Modality::Profile) {
        Some(model.embed_profiles(&profs, 64)?)
    } else {
        None
    };
    let ids: Vec<String> = picked.iter().map(|s| s.id.clone()).collect();
    let labels: Vec<String> = chosen.iter().map(|&i| labels[i].clone()).collect();
    let all: Vec<usize> = (0..picked.len()).collect();
    let g = gallery_from_embeddings(
        &ids,
        &labels,
        image.as_deref(),
        profile.as_deref(),
        &all,
        modalities,
    )?;
    Ok((g, warnings))
}

/// `1 - cos(u, v)`, in `[0, 2]`.
pub fn cosine_distance(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    Ok(1.0 - cosine_similarity_slices(&u.values, &v.values)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub distance: f64,
    pub label: String,
    pub id: String,
    /// Position in the gallery.
    pub index: usize,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: String,
    pub tally: BTreeMap<String, usize>,
    /// Pooled neighbors, grouped by query embedding, nearest first.
    pub neighbors: Vec<Neighbor>,
}

/// k-NN vote over the pooled neighbors of every query embedding.
///
/// Ties on vote count go to the class with the smallest summed neighbor
/// distance, then to the lexicographically smallest label. Neighbors at equal
/// distance are taken in gallery order. `k` larger than the gallery is
/// clamped.
pub fn classify_embeddings(
    queries: &[EmbeddingVector],
    gallery: &LabeledGallery,
    k: usize,
) -> Result<Prediction> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if queries.is_empty() {
        return Err(Error::InvalidInput("no query embeddings".into()));
    }
    let k = if k > gallery.len() {
        warn!(
            "k={k} exceeds the gallery size {}; using {}",
            gallery.len(),
            gallery.len()
        );
        gallery.len()
    } else {
        k
    };
    let mut neighbors = Vec::with_capacity(k * queries.len());
    for q in queries {
        if q.dim() != gallery.dim() {
            return Err(Error::Shape(format!(
                "query dimension {} does not match gallery dimension {}",
                q.dim(),
                gallery.dim()
            )));
        }
        let mut dists = gallery
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                Ok((
                    1.0 - cosine_similarity_slices(&e.embedding.values, &q.values)?,
                    i,
                ))
            })
            .collect::<Result<Vec<(f64, usize)>>>()?;
        let by_distance =
            |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dists.len() {
            dists.select_nth_unstable_by(k - 1, by_distance);
            dists.truncate(k);
        }
        dists.sort_unstable_by(by_distance);
        for (d, i) in dists {
            let e = &gallery.entries[i];
            neighbors.push(Neighbor {
                distance: d,
                label: e.label.clone(),
                id: e.id.clone(),
                index: i,
                modality: e.embedding.modality,
            });
        }
    }
    let mut tally: BTreeMap<String, usize> = BTreeMap::new();
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    for n in &neighbors {
        *tally.entry(n.label.clone()).or_insert(0) += 1;
        *sums.entry(n.label.as_str()).or_insert(0.0) += n.distance;
    }
    let label = tally
        .iter()
        .min_by(|(la, ca), (lb, cb)| {
            cb.cmp(ca)
                .then(sums[la.as_str()].total_cmp(&sums[lb.as_str()]))
                .then(la.cmp(lb))
        })
        .map(|(l, _)| l.clone())
        .expect("at least one neighbor");
    Ok(Prediction {
        label,
        tally,
        neighbors,
    })
}

/// Encodes one sample in the requested modalities and classifies it.
pub fn classify<T: Float>(
    sample: &ParticleSample,
    query: ModalitySet,
    gallery: &LabeledGallery,
    model: &DualEncoder<T>,
    k: usize,
    augment: &AugmentConfig,
) -> Result<Prediction> {
    classify_parts(
        Some(&sample.image),
        Some(&sample.profile),
        query,
        gallery,
        model,
        k,
        augment,
    )
}

/// Like [`classify`] for a particle where only some modalities were
/// recorded. Every modality in `query` must be present.
pub fn classify_parts<T: Float>(
    image: Option<&ImageRaster>,
    profile: Option<&OpticalProfile>,
    query: ModalitySet,
    gallery: &LabeledGallery,
    model: &DualEncoder<T>,
    k: usize,
    augment: &AugmentConfig,
) -> Result<Prediction> {
    // Eval preprocessing draws no random numbers.
    let mut rng = seed::rng(0, 0, 0);
    let mut q = Vec::with_capacity(2);
    if query.contains(Modality::Image) {
        let img = image
            .ok_or_else(|| Error::InvalidInput("query needs an image but none was given".into()))?;
        let t = preprocess::preprocess_image(img, PrepMode::Eval, augment, &mut rng);
        q.extend(model.embed_images(std::slice::from_ref(&t), 1)?);
    }
    if query.contains(Modality::Profile) {
        let prof = profile.ok_or_else(|| {
            Error::InvalidInput("query needs a profile but none was given".into())
        })?;
        let t = preprocess::preprocess_profile(prof, PrepMode::Eval, augment, &mut rng)?;
        q.extend(model.embed_profiles(std::slice::from_ref(&t), 1)?);
    }
    classify_embeddings(&q, gallery, k)
}

const GALLERY_MAGIC: &[u8; 8] = b"CYPGAL01";
pub const GALLERY_VERSION: u32 = 1;

/// Binary layout, little endian: magic, version, dim, modality bits, class
/// table, entry count, then packed `f32` embeddings, `u32` label indices,
/// `u8` entry modalities and length-prefixed ids.
pub fn gallery_to_bytes(g: &LabeledGallery) -> Vec<u8> {
    let classes: Vec<&String> = g.class_counts.keys().collect();
    let mut out = Vec::new();
    out.extend_from_slice(GALLERY_MAGIC);
    out.extend_from_slice(&GALLERY_VERSION.to_le_bytes());
    out.extend_from_slice(&(g.dim() as u32).to_le_bytes());
    out.push(g.modalities.bits());
    out.extend_from_slice(&(classes.len() as u32).to_le_bytes());
    for c in &classes {
        put_str(&mut out, c);
    }
    out.extend_from_slice(&(g.len() as u32).to_le_bytes());
    for e in &g.entries {
        for v in &e.embedding.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for e in &g.entries {
        let idx = classes
            .binary_search(&&e.label)
            .expect("label is in the class table") as u32;
        out.extend_from_slice(&idx.to_le_bytes());
    }
    for e in &g.entries {
        out.push(match e.embedding.modality {
            Modality::Image => 0,
            Modality::Profile => 1,
        });
    }
    for e in &g.entries {
        put_str(&mut out, &e.id);
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::InvalidInput(format!(
                "{} file truncated at byte {}",
                self.what, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::InvalidInput(format!("{} file has a non-UTF-8 string", self.what)))
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn gallery_from_bytes(bytes: &[u8]) -> Result<LabeledGallery> {
    let mut r = Reader::new(bytes, "gallery");
    if r.take(8)? != GALLERY_MAGIC {
        return Err(Error::Gallery("not a gallery file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version > GALLERY_VERSION {
        return Err(Error::Version {
            what: "gallery",
            found: version,
            supported: GALLERY_VERSION,
        });
    }
    let dim = r.u32()? as usize;
    let modalities = ModalitySet::from_bits(r.u8()?)
        .ok_or_else(|| Error::Gallery("invalid modality flags".into()))?;
    let n_classes = r.u32()? as usize;
    let classes = (0..n_classes)
        .map(|_| r.string())
        .collect::<Result<Vec<_>>>()?;
    let n = r.u32()? as usize;
    let raw = r.take(
        n.checked_mul(dim * 4)
            .ok_or_else(|| Error::Gallery("entry count overflow".into()))?,
    )?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = (0..n)
        .map(|_| {
            let i = r.u32()? as usize;
            classes
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Gallery(format!("label index {i} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mods = (0..n)
        .map(|_| match r.u8()? {
            0 => Ok(Modality::Image),
            1 => Ok(Modality::Profile),
            m => Err(Error::Gallery(format!("invalid entry modality {m}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let ids = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    if !r.finished() {
        return Err(Error::Gallery("trailing bytes after gallery data".into()));
    }
    let entries = (0..n)
        .map(|i| GalleryEntry {
            embedding: EmbeddingVector {
                values: values[i * dim..(i + 1) * dim].to_vec(),
                modality: mods[i],
                normalized: true,
            },
            label: labels[i].clone(),
            id: ids[i].clone(),
        })
        .collect();
    LabeledGallery::new(entries, modalities)
}

pub fn save_gallery(g: &LabeledGallery, path: &Path) -> Result<()> {
    write_atomic(path, &gallery_to_bytes(g))
}

pub fn load_gallery(path: &Path) -> Result<LabeledGallery> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    gallery_from_bytes(&bytes)
}
