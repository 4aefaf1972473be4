//! Gallery-modality by query-modality accuracy matrix with repeated gallery
//! resampling.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, ModalitySet, ParticleSample};
use crate::encoders::{DualEncoder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::gallery::{classify_embeddings, gallery_from_embeddings, select_per_class};
use crate::nn::Float;
use crate::preprocess::AugmentConfig;
use crate::seed;
use crate::training::eval_tensors;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub gallery_modalities: Vec<ModalitySet>,
    pub query_modalities: Vec<ModalitySet>,
    pub n_per_class: usize,
    pub k: usize,
    pub resamples: usize,
    pub seed: u64,
    /// Gallery sizes for the optional size sweep; empty disables it.
    pub gallery_sizes: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            gallery_modalities: ModalitySet::ALL.to_vec(),
            query_modalities: ModalitySet::ALL.to_vec(),
            n_per_class: 16,
            k: 3,
            resamples: 10,
            seed: 0,
            gallery_sizes: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resamples == 0 {
            return Err(Error::config("eval.resamples", "must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::config("eval.k", "must be at least 1"));
        }
        if self.n_per_class == 0 {
            return Err(Error::config("eval.n_per_class", "must be at least 1"));
        }
        if self.gallery_modalities.is_empty() || self.query_modalities.is_empty() {
            return Err(Error::config(
                "eval",
                "gallery and query modality lists must be non-empty",
            ));
        }
        if self.gallery_sizes.contains(&0) {
            return Err(Error::config(
                "eval.gallery_sizes",
                "sizes must be positive",
            ));
        }
        Ok(())
    }
}

/// Produces embeddings for samples in one modality. Implemented by trained
/// models; tests can substitute their own.
pub trait Embedder {
    fn embed(&self, samples: &[ParticleSample], modality: Modality)
        -> Result<Vec<EmbeddingVector>>;
}

/// Trained model with the preprocessing settings it was trained with.
pub struct ModelEmbedder<'a, T: Float> {
    pub model: &'a DualEncoder<T>,
    pub augment: &'a AugmentConfig,
    pub chunk: usize,
}

impl<T: Float> Embedder for ModelEmbedder<'_, T> {
    fn embed(
        &self,
        samples: &[ParticleSample],
        modality: Modality,
    ) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(samples.len());
        for part in samples.chunks(self.chunk.max(1)) {
            let (imgs, profs) = eval_tensors(part, self.augment)?;
            out.extend(match modality {
                Modality::Image => self.model.embed_images(&imgs, self.chunk)?,
                Modality::Profile => self.model.embed_profiles(&profs, self.chunk)?,
            });
        }
        Ok(out)
    }
}

/// Labeled samples with their embeddings in each needed modality.
#[derive(Debug, Clone)]
pub struct EmbeddedSet {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub image: Option<Vec<EmbeddingVector>>,
    pub profile: Option<Vec<EmbeddingVector>>,
}

impl EmbeddedSet {
    pub fn new(
        samples: &[ParticleSample],
        embedder: &impl Embedder,
        modalities: ModalitySet,
    ) -> Result<Self> {
        let labels = samples
            .iter()
            .map(|s| {
                s.label
                    .clone()
                    .ok_or_else(|| Error::InvalidInput(format!("sample `{}` has no label", s.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let image = if modalities.contains(Modality::Image) {
            Some(embedder.embed(samples, Modality::Image)?)
        } else {
            None
        };
        let profile = if modalities.contains(Modality::Profile) {
            Some(embedder.embed(samples, Modality::Profile)?)
        } else {
            None
        };
        for (m, e) in [(Modality::Image, &image), (Modality::Profile, &profile)] {
            if let Some(e) = e {
                if e.len() != samples.len() {
                    return Err(Error::Shape(format!(
                        "{m} embedder returned {} embeddings for {} samples",
                        e.len(),
                        samples.len()
                    )));
                }
            }
        }
        Ok(EmbeddedSet {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            labels,
            image,
            profile,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn query(&self, i: usize, set: ModalitySet) -> Result<Vec<EmbeddingVector>> {
        set.modalities()
            .into_iter()
            .map(|m| {
                let src = match m {
                    Modality::Image => &self.image,
                    Modality::Profile => &self.profile,
                };
                src.as_ref().map(|v| v[i].clone()).ok_or_else(|| {
                    Error::InvalidInput(format!("query `{}` lacks the {m} modality", self.ids[i]))
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub gallery: ModalitySet,
    pub query: ModalitySet,
    /// Accuracy in percent for each resample.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over resamples.
    pub std: f64,
    /// `confusion[true][predicted]` summed over resamples, indexed by
    /// [`EvalReport::classes`].
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub n_per_class: usize,
    pub k: usize,
    pub resamples: usize,
    pub seed: u64,
    pub queries: usize,
    /// Row-major over gallery modality, then query modality.
    pub cells: Vec<CellResult>,
}

impl EvalReport {
    pub fn cell(&self, gallery: ModalitySet, query: ModalitySet) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.gallery == gallery && c.query == query)
    }

    pub fn mean(&self, gallery: ModalitySet, query: ModalitySet) -> Option<f64> {
        self.cell(gallery, query).map(|c| c.mean)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn needed(sets: &[ModalitySet]) -> ModalitySet {
    let image = sets.iter().any(|s| s.contains(Modality::Image));
    let profile = sets.iter().any(|s| s.contains(Modality::Profile));
    match (image, profile) {
        (true, true) => ModalitySet::BOTH,
        (true, false) => ModalitySet::IMAGE,
        _ => ModalitySet::PROFILE,
    }
}

/// Embeds the gallery pool and the queries once, then runs
/// [`evaluate_embedded`].
pub fn evaluate(
    pool: &[ParticleSample],
    queries: &[ParticleSample],
    embedder: &impl Embedder,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let pool_e = EmbeddedSet::new(pool, embedder, needed(&cfg.gallery_modalities))?;
    let query_e = EmbeddedSet::new(queries, embedder, needed(&cfg.query_modalities))?;
    evaluate_embedded(&pool_e, &query_e, cfg)
}

/// For every resample a gallery of `n_per_class` particles per class is drawn
/// from `pool` with a seed derived from `(cfg.seed, r)`; the same particles
/// back every gallery-modality row of that resample.
pub fn evaluate_embedded(
    pool: &EmbeddedSet,
    queries: &EmbeddedSet,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if pool.is_empty() || queries.is_empty() {
        return Err(Error::InvalidInput(
            "gallery pool and query set must be non-empty".into(),
        ));
    }
    let pool_ids: std::collections::HashSet<&String> = pool.ids.iter().collect();
    if let Some(id) = queries.ids.iter().find(|id| pool_ids.contains(id)) {
        return Err(Error::InvalidInput(format!(
            "sample `{id}` is both in the gallery pool and a query"
        )));
    }
    let mut classes: Vec<String> = pool.labels.iter().chain(&queries.labels).cloned().collect();
    classes.sort();
    classes.dedup();
    let class_index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let mut cells: Vec<CellResult> = Vec::new();
    for &g in &cfg.gallery_modalities {
        for &q in &cfg.query_modalities {
            cells.push(CellResult {
                gallery: g,
                query: q,
                accuracies: Vec::with_capacity(cfg.resamples),
                mean: 0.0,
                std: 0.0,
                confusion: vec![vec![0; classes.len()]; classes.len()],
            });
        }
    }
    let query_sets: Vec<Vec<Vec<EmbeddingVector>>> = cfg
        .query_modalities
        .iter()
        .map(|&q| {
            (0..queries.len())
                .map(|i| queries.query(i, q))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let pool_labels: Vec<&str> = pool.labels.iter().map(String::as_str).collect();
    let mut k_warned = false;

    for r in 0..cfg.resamples {
        let mut rng = seed::rng(cfg.seed, seed::streams::GALLERY, r as u64);
        let (chosen, _) = select_per_class(&pool_labels, cfg.n_per_class, &mut rng);
        let mut cell = 0;
        for &gm in &cfg.gallery_modalities {
            let gallery = gallery_from_embeddings(
                &pool.ids,
                &pool.labels,
                pool.image.as_deref(),
                pool.profile.as_deref(),
                &chosen,
                gm,
            )?;
            let k = if cfg.k > gallery.len() {
                if !k_warned {
                    warn!(
                        "k={} exceeds a gallery of {} entries; using the whole gallery",
                        cfg.k,
                        gallery.len()
                    );
                    k_warned = true;
                }
                gallery.len()
            } else {
                cfg.k
            };
            for qs in &query_sets {
                let c = &mut cells[cell];
                let mut correct = 0usize;
                for (i, q) in qs.iter().enumerate() {
                    let pred = classify_embeddings(q, &gallery, k)?;
                    let t = class_index[queries.labels[i].as_str()];
                    c.confusion[t][class_index[pred.label.as_str()]] += 1;
                    correct += (pred.label == queries.labels[i]) as usize;
                }
                c.accuracies
                    .push(100.0 * correct as f64 / queries.len() as f64);
                cell += 1;
            }
        }
    }
    for c in &mut cells {
        (c.mean, c.std) = mean_std(&c.accuracies);
    }
    Ok(EvalReport {
        classes,
        n_per_class: cfg.n_per_class,
        k: cfg.k,
        resamples: cfg.resamples,
        seed: cfg.seed,
        queries: queries.len(),
        cells,
    })
}

pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.2}±{std:.2}")
}

/// Tab-separated matrix: rows are gallery modalities, columns query
/// modalities, cells `mean±std`.
pub fn report_table(report: &EvalReport) -> String {
    let mut rows: Vec<ModalitySet> = Vec::new();
    let mut cols: Vec<ModalitySet> = Vec::new();
    for c in &report.cells {
        if !rows.contains(&c.gallery) {
            rows.push(c.gallery);
        }
        if !cols.contains(&c.query) {
            cols.push(c.query);
        }
    }
    let mut s = String::from("Gallery\\Test");
    for c in &cols {
        s.push('\t');
        s.push_str(&c.to_string());
    }
    s.push('\n');
    for r in &rows {
        s.push_str(&r.to_string());
        for c in &cols {
            s.push('\t');
            match report.cell(*r, *c) {
                Some(cell) => s.push_str(&format_cell(cell.mean, cell.std)),
                None => s.push('-'),
            }
        }
        s.push('\n');
    }
    s
}

/// Machine-readable long form: one line per cell and resample.
pub fn report_records(report: &EvalReport) -> String {
    let mut s = String::from("gallery\tquery\tresample\taccuracy\n");
    for c in &report.cells {
        for (r, a) in c.accuracies.iter().enumerate() {
            s.push_str(&format!("{}\t{}\t{r}\t{a}\n", c.gallery, c.query));
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub sizes: Vec<usize>,
    pub reports: Vec<EvalReport>,
}

/// Repeats the evaluation for each gallery size.
pub fn sweep_embedded(
    pool: &EmbeddedSet,
    queries: &EmbeddedSet,
    cfg: &EvalConfig,
    sizes: &[usize],
) -> Result<SweepReport> {
    if sizes.is_empty() {
        return Err(Error::InvalidInput("gallery size list is empty".into()));
    }
    let reports = sizes
        .iter()
        .map(|&n| {
            evaluate_embedded(
                pool,
                queries,
                &EvalConfig {
                    n_per_class: n,
                    ..cfg.clone()
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        sizes: sizes.to_vec(),
        reports,
    })
}

pub fn sweep(
    pool: &[ParticleSample],
    queries: &[ParticleSample],
    embedder: &impl Embedder,
    cfg: &EvalConfig,
    sizes: &[usize],
) -> Result<SweepReport> {
    cfg.validate()?;
    let pool_e = EmbeddedSet::new(pool, embedder, needed(&cfg.gallery_modalities))?;
    let query_e = EmbeddedSet::new(queries, embedder, needed(&cfg.query_modalities))?;
    sweep_embedded(&pool_e, &query_e, cfg, sizes)
}

/// One row per gallery size, one column per modality cell.
pub fn sweep_table(sweep: &SweepReport) -> String {
    let mut s = String::from("size");
    if let Some(first) = sweep.reports.first() {
        for c in &first.cells {
            s.push_str(&format!("\t{}->{}", c.gallery, c.query));
        }
    }
    s.push('\n');
    for (n, r) in sweep.sizes.iter().zip(&sweep.reports) {
        s.push_str(&n.to_string());
        for c in &r.cells {
            s.push('\t');
            s.push_str(&format_cell(c.mean, c.std));
        }
        s.push('\n');
    }
    s
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_rounding() {
        assert_eq!(format_cell(96.014, 0.557), "96.01±0.56");
        assert_eq!(format_cell(100.0, 0.0), "100.00±0.00");
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[5.0]).1, 0.0);
    }

    #[test]
    fn spearman_monotone() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
