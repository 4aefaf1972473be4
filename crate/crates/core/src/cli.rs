//! Command-line interface. `run` returns the process exit code: 0 on
//! success, 1 for usage errors, 2 for runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, DEFAULT_CONFIG_TOML};
use crate::data::{self, write_atomic, ModalitySet};
use crate::encoders::{DualEncoder, ImageEncoderKind, ProfileEncoderKind};
use crate::error::{Error, Result};
use crate::evaluation::{self, EmbeddedSet, ModelEmbedder};
use crate::gallery;
use crate::losses::LossKind;
use crate::nn::{DType, Float};
use crate::plot;
use crate::seed;
use crate::synthetic;
use crate::training;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "cytopair",
    version,
    about = "Paired image/profile contrastive pre-training and k-NN gallery classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root; overrides the config and the CYTOPAIR_OUTPUT_ROOT variable.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with train/val/test manifests.
    Generate(GenerateArgs),
    /// Train the dual encoder and write the best checkpoint.
    Train(TrainArgs),
    /// Accuracy for every gallery/query modality combination.
    Evaluate(EvaluateArgs),
    /// Embed a labeled gallery and save it.
    BuildGallery(BuildGalleryArgs),
    /// Classify one particle against a saved gallery; prints JSON.
    Classify(ClassifyArgs),
    /// Print the annotated default config.
    DefaultConfig,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Use only the first N class specs.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, value_parser = parse_from_str::<LossKind>)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = parse_from_str::<ImageEncoderKind>)]
    pub image_encoder: Option<ImageEncoderKind>,
    #[arg(long, value_parser = parse_from_str::<ProfileEncoderKind>)]
    pub profile_encoder: Option<ProfileEncoderKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// f32 or f64.
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<DType>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Labeled pool the galleries are drawn from (default: the train split).
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Query manifest (default: the test split).
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Comma-separated, e.g. `I,P,I+P`.
    #[arg(long, value_parser = parse_modality_list)]
    pub gallery_modalities: Option<ModalityList>,
    #[arg(long, value_parser = parse_modality_list)]
    pub query_modalities: Option<ModalityList>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub resamples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated gallery sizes for an accuracy sweep.
    #[arg(long, value_delimiter = ',')]
    pub gallery_sizes: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct BuildGalleryArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Labeled manifest (default: the train split).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "I+P", value_parser = parse_from_str::<ModalitySet>)]
    pub modalities: ModalitySet,
    #[arg(long, default_value_t = 16)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub gallery: PathBuf,
    /// Grayscale PNG of the particle.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Profile table of the particle.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Query modalities (default: those with a file given).
    #[arg(long, value_parser = parse_from_str::<ModalitySet>)]
    pub modalities: Option<ModalitySet>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct ModalityList(pub Vec<ModalitySet>);

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_dtype(s: &str) -> std::result::Result<DType, String> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(format!("unknown dtype `{s}` (f32, f64)")),
    }
}

fn parse_modality_list(s: &str) -> std::result::Result<ModalityList, String> {
    s.split(',')
        .map(|p| parse_from_str::<ModalitySet>(p.trim()))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(ModalityList)
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::BuildGallery(a) => cmd_build_gallery(&a),
        Command::Classify(a) => cmd_classify(&a),
        Command::DefaultConfig => {
            print!("{DEFAULT_CONFIG_TOML}");
            Ok(())
        }
    }
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let root = common.out.clone().unwrap_or_else(|| cfg.output_root());
    Ok((cfg, root))
}

fn split_path(
    explicit: &Option<PathBuf>,
    configured: &Option<PathBuf>,
    root: &Path,
    name: &str,
) -> PathBuf {
    explicit
        .clone()
        .or_else(|| configured.clone())
        .unwrap_or_else(|| root.join("data").join(format!("{name}.tsv")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let (mut cfg, root) = load_config(&a.common)?;
    if let Some(n) = a.classes {
        if n == 0 || n > cfg.synthetic.classes.len() {
            return Err(Error::config(
                "classes",
                format!("must be in 1..={}", cfg.synthetic.classes.len()),
            ));
        }
        cfg.synthetic.classes.truncate(n);
    }
    if let Some(n) = a.per_class {
        cfg.synthetic.per_class = n;
    }
    if let Some(s) = a.seed {
        cfg.synthetic.seed = s;
    }
    cfg.validate()?;
    let s = &cfg.synthetic;
    let dir = root.join("data");
    let manifest = synthetic::generate_dataset(&s.classes, s.per_class, s.seed, &s.options, &dir)?;
    let counts = synthetic::write_split_manifests(&manifest, s.split, s.seed, &dir)?;
    println!("manifest\t{}", dir.join("manifest.tsv").display());
    println!("samples\t{}", manifest.entries.len());
    for spec in &s.classes {
        println!(
            "class\t{}\t{}",
            spec.name,
            manifest
                .entries
                .iter()
                .filter(|e| e.label.as_deref() == Some(spec.name.as_str()))
                .count()
        );
    }
    for (split, n) in counts {
        println!("split\t{split}\t{n}");
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (mut cfg, root) = load_config(&a.common)?;
    let t = &mut cfg.train;
    if let Some(l) = a.loss {
        t.loss = l;
    }
    if a.lr.is_some() {
        t.lr = a.lr;
    }
    if let Some(k) = a.image_encoder {
        t.encoder.image = k;
    }
    if let Some(k) = a.profile_encoder {
        t.encoder.profile = k;
    }
    if let Some(n) = a.epochs {
        t.max_epochs = n;
        t.warmup_epochs = t.warmup_epochs.min(n);
    }
    if let Some(n) = a.batch_size {
        t.batch_size = n;
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(d) = a.dtype {
        t.dtype = d;
    }
    cfg.validate()?;
    let train_path = split_path(&a.train, &cfg.data.train, &root, "train");
    let val_path = split_path(&a.val, &cfg.data.val, &root, "val");
    let train_set = data::load_dataset(&train_path)?;
    let val_set = data::load_dataset(&val_path)?;
    eprintln!(
        "training {}+{} with {} loss, lr {}, on {} pairs ({} validation)",
        cfg.train.encoder.image,
        cfg.train.encoder.profile,
        cfg.train.loss,
        cfg.train.base_lr(),
        train_set.len(),
        val_set.len()
    );
    let (ck, report) = match cfg.train.dtype {
        DType::F32 => train_typed::<f32>(&train_set, &val_set, &cfg)?,
        DType::F64 => train_typed::<f64>(&train_set, &val_set, &cfg)?,
    };
    ck.save(&root.join("checkpoint.ckpt"))?;
    write_text(&root.join("train_report.tsv"), &report.to_table())?;
    write_text(&root.join("loss_curve.svg"), &plot::loss_curve_svg(&report))?;
    write_text(&root.join("config.toml"), &cfg.to_toml())?;
    println!("checkpoint\t{}", root.join("checkpoint.ckpt").display());
    println!("lr\t{}", report.base_lr);
    println!("best_epoch\t{}", report.best_epoch);
    println!("best_val_loss\t{}", report.best_val_loss);
    println!("stop\t{}", report.stop_reason);
    Ok(())
}

fn train_typed<T: Float>(
    train_set: &[data::ParticleSample],
    val_set: &[data::ParticleSample],
    cfg: &ExperimentConfig,
) -> Result<(Checkpoint, training::TrainReport)> {
    let (model, report) =
        training::train_with_callback::<T>(train_set, val_set, &cfg.train, |e| {
            eprintln!(
                "epoch {:>3}  train {:.5}  val {:.5}  lr {:.6}  tau {:.3}  bias {:.3}",
                e.epoch, e.train_loss, e.val_loss, e.lr, e.tau, e.bias
            );
        })?;
    let ck = Checkpoint::from_model(&model, cfg, report.best_val_loss, report.best_epoch);
    Ok((ck, report))
}

fn load_checkpoint(
    explicit: &Option<PathBuf>,
    root: &Path,
    common: &Common,
    cfg: &ExperimentConfig,
) -> Result<Checkpoint> {
    let path = explicit
        .clone()
        .unwrap_or_else(|| root.join("checkpoint.ckpt"));
    let ck = Checkpoint::load(&path)?;
    if common.config.is_some() && cfg.train.encoder != ck.config.train.encoder {
        return Err(Error::Checkpoint(format!(
            "{}: encoder settings differ from the given config (checkpoint {}+{} with embedding dim {}, config {}+{} with embedding dim {})",
            path.display(),
            ck.config.train.encoder.image,
            ck.config.train.encoder.profile,
            ck.config.train.encoder.embed_dim,
            cfg.train.encoder.image,
            cfg.train.encoder.profile,
            cfg.train.encoder.embed_dim
        )));
    }
    Ok(ck)
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let (cfg, root) = load_config(&a.common)?;
    let ck = load_checkpoint(&a.checkpoint, &root, &a.common, &cfg)?;
    let mut ec = cfg.eval.clone();
    if let Some(m) = &a.gallery_modalities {
        ec.gallery_modalities = m.0.clone();
    }
    if let Some(m) = &a.query_modalities {
        ec.query_modalities = m.0.clone();
    }
    if let Some(n) = a.n_per_class {
        ec.n_per_class = n;
    }
    if let Some(k) = a.k {
        ec.k = k;
    }
    if let Some(r) = a.resamples {
        ec.resamples = r;
    }
    if let Some(s) = a.seed {
        ec.seed = s;
    }
    if let Some(g) = &a.gallery_sizes {
        ec.gallery_sizes = g.clone();
    }
    ec.validate()?;
    let pool = data::load_dataset(&split_path(&a.pool, &cfg.data.train, &root, "train"))?;
    let test = data::load_dataset(&split_path(&a.test, &cfg.data.test, &root, "test"))?;
    let (pool_e, test_e) = match ck.dtype {
        DType::F32 => embed_sets(&ck.model::<f32>()?, &ck, &pool, &test, &ec)?,
        DType::F64 => embed_sets(&ck.model::<f64>()?, &ck, &pool, &test, &ec)?,
    };
    let report = evaluation::evaluate_embedded(&pool_e, &test_e, &ec)?;
    let table = evaluation::report_table(&report);
    print!("{table}");
    write_text(&root.join("eval_table.txt"), &table)?;
    write_text(
        &root.join("eval_records.tsv"),
        &evaluation::report_records(&report),
    )?;
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidInput(e.to_string()))?;
    write_text(&root.join("eval_report.json"), &json)?;
    if !ec.gallery_sizes.is_empty() {
        let sweep = evaluation::sweep_embedded(&pool_e, &test_e, &ec, &ec.gallery_sizes)?;
        let t = evaluation::sweep_table(&sweep);
        println!();
        print!("{t}");
        write_text(&root.join("sweep_table.tsv"), &t)?;
        write_text(&root.join("sweep.svg"), &plot::sweep_svg(&sweep))?;
    }
    Ok(())
}

fn embed_sets<T: Float>(
    model: &DualEncoder<T>,
    ck: &Checkpoint,
    pool: &[data::ParticleSample],
    test: &[data::ParticleSample],
    ec: &evaluation::EvalConfig,
) -> Result<(EmbeddedSet, EmbeddedSet)> {
    let embedder = ModelEmbedder {
        model,
        augment: &ck.config.train.augment,
        chunk: 64,
    };
    let pool_e = EmbeddedSet::new(pool, &embedder, union(&ec.gallery_modalities))?;
    let test_e = EmbeddedSet::new(test, &embedder, union(&ec.query_modalities))?;
    Ok((pool_e, test_e))
}

fn union(sets: &[ModalitySet]) -> ModalitySet {
    ModalitySet::from_bits(sets.iter().fold(0, |b, s| b | s.bits())).unwrap_or(ModalitySet::BOTH)
}

pub fn cmd_build_gallery(a: &BuildGalleryArgs) -> Result<()> {
    let (cfg, root) = load_config(&a.common)?;
    let ck = load_checkpoint(&a.checkpoint, &root, &a.common, &cfg)?;
    let samples = data::load_dataset(&split_path(&a.manifest, &cfg.data.train, &root, "train"))?;
    let mut rng = seed::rng(a.seed, seed::streams::GALLERY, 0);
    let aug = &ck.config.train.augment;
    let (g, warnings) = match ck.dtype {
        DType::F32 => gallery::build_gallery(
            &samples,
            &ck.model::<f32>()?,
            a.modalities,
            a.n_per_class,
            aug,
            &mut rng,
        )?,
        DType::F64 => gallery::build_gallery(
            &samples,
            &ck.model::<f64>()?,
            a.modalities,
            a.n_per_class,
            aug,
            &mut rng,
        )?,
    };
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let out = a.output.clone().unwrap_or_else(|| root.join("gallery.bin"));
    gallery::save_gallery(&g, &out)?;
    println!("gallery\t{}", out.display());
    println!("entries\t{}", g.len());
    for (c, n) in g.class_counts() {
        println!("class\t{c}\t{n}");
    }
    Ok(())
}

#[derive(Serialize)]
struct ClassifyOutput<'a> {
    label: &'a str,
    tally: &'a std::collections::BTreeMap<String, usize>,
    k: usize,
    modalities: ModalitySet,
    neighbors: Vec<NeighborOut<'a>>,
}

#[derive(Serialize)]
struct NeighborOut<'a> {
    distance: f64,
    label: &'a str,
    id: &'a str,
    modality: crate::data::Modality,
}

pub fn cmd_classify(a: &ClassifyArgs) -> Result<()> {
    let (cfg, root) = load_config(&a.common)?;
    let ck = load_checkpoint(&a.checkpoint, &root, &a.common, &cfg)?;
    let g = gallery::load_gallery(&a.gallery)?;
    if g.dim() != ck.config.train.encoder.embed_dim {
        return Err(Error::Gallery(format!(
            "gallery dimension {} does not match the checkpoint embedding dimension {}",
            g.dim(),
            ck.config.train.encoder.embed_dim
        )));
    }
    let modalities = match (a.modalities, &a.image, &a.profile) {
        (Some(m), _, _) => m,
        (None, Some(_), Some(_)) => ModalitySet::BOTH,
        (None, Some(_), None) => ModalitySet::IMAGE,
        (None, None, Some(_)) => ModalitySet::PROFILE,
        (None, None, None) => {
            return Err(Error::config("classify", "give --image and/or --profile"))
        }
    };
    let image = a.image.as_deref().map(data::read_png).transpose()?;
    let profile = a.profile.as_deref().map(data::read_profile).transpose()?;
    let aug = &ck.config.train.augment;
    let pred = match ck.dtype {
        DType::F32 => gallery::classify_parts(
            image.as_ref(),
            profile.as_ref(),
            modalities,
            &g,
            &ck.model::<f32>()?,
            a.k,
            aug,
        )?,
        DType::F64 => gallery::classify_parts(
            image.as_ref(),
            profile.as_ref(),
            modalities,
            &g,
            &ck.model::<f64>()?,
            a.k,
            aug,
        )?,
    };
    let out = ClassifyOutput {
        label: &pred.label,
        tally: &pred.tally,
        k: a.k,
        modalities,
        neighbors: pred
            .neighbors
            .iter()
            .map(|n| NeighborOut {
                distance: n.distance,
                label: &n.label,
                id: &n.id,
                modality: n.modality,
            })
            .collect(),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&out).map_err(|e| Error::InvalidInput(e.to_string()))?
    );
    Ok(())
}
