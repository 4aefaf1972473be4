//! Experiment configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::synthetic::{default_classes, GeneratorOptions, SyntheticClassSpec};
use crate::training::TrainConfig;

/// Overrides `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "CYTOPAIR_OUTPUT_ROOT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: Vec<SyntheticClassSpec>,
    pub per_class: usize,
    pub seed: u64,
    pub options: GeneratorOptions,
    /// Train, validation and test fractions.
    pub split: (f64, f64, f64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: default_classes(),
            per_class: 200,
            seed: 0,
            options: GeneratorOptions::default(),
            split: (0.8, 0.05, 0.15),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataPaths,
    pub synthetic: SyntheticConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs"),
            data: DataPaths::default(),
            synthetic: SyntheticConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| format!("bytes {}..{}", s.start, s.end))
                .unwrap_or_default();
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.val, &mut cfg.data.test]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.synthetic.split;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "synthetic.split",
                "fractions must be in [0, 1] and sum to 1",
            ));
        }
        if self.synthetic.per_class == 0 {
            return Err(Error::config("synthetic.per_class", "must be at least 1"));
        }
        for spec in &self.synthetic.classes {
            spec.validate()?;
        }
        self.train.validate()?;
        self.eval.validate()
    }

    /// `output_dir`, unless the output-root environment variable is set.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

/// Annotated config listing every default. Parsing it gives
/// `ExperimentConfig::default()`.
pub const DEFAULT_CONFIG_TOML: &str = r#"# cytopair experiment configuration.
# Every key is optional; missing keys take the values shown here.

# Where generated data, checkpoints and reports go. The CYTOPAIR_OUTPUT_ROOT
# environment variable overrides it.
output_dir = "runs"

[data]
# Manifests for training and evaluation, relative to this file. When absent,
# the commands use <output_dir>/data/{train,val,test}.tsv as written by
# `cytopair generate`.
# train = "data/train.tsv"
# val = "data/val.tsv"
# test = "data/test.tsv"

[synthetic]
per_class = 200
seed = 0
# train / val / test fractions
split = [0.8, 0.05, 0.15]
# The four built-in classes are used unless [[synthetic.classes]] tables are
# given, for example:
#
# [[synthetic.classes]]
# name = "alpha"
# blob_count = 1
# eccentricity = 0.5
# mean_length = 70.0
# length_jitter = 0.15
# amplitudes = [1.0, 0.6, 0.0, 0.4, 0.8, 0.2]   # FSC SSC Green Yellow Orange Red
# widths = [0.3, 0.3, 0.3, 0.3, 0.3, 0.3]
# noise = 0.1

[synthetic.options]
length_scale = 1.0       # profile samples per pixel of length
intensity_jitter = 0.2   # log-normal sd of the per-particle brightness
margin = 6               # dark border in pixels

[train]
loss = "infonce"         # infonce | sigmoid
# lr = 0.005             # default 0.005 for infonce, 0.002 for sigmoid
min_lr = 0.0
momentum = 0.9           # Nesterov
weight_decay = 0.001     # not applied to log_tau and the sigmoid bias
max_epochs = 100
warmup_epochs = 5
patience = 30            # early stopping on validation loss
batch_size = 64          # the paper used 256
seed = 0
dtype = "f32"            # f32 | f64

[train.encoder]
image = "small-conv"     # small-conv | small-transformer
profile = "conv1d"       # conv1d | bilstm | transformer1d
embed_dim = 512
dropout = 0.2
init_tau = 14.285714285714285
init_bias = -10.0

[train.encoder.small_conv]
widths = [8, 16, 32, 64]

[train.encoder.small_transformer]
patch = 16
dim = 64
depth = 2
heads = 4
head_dim = 16
ff_dim = 128
pooling = "mean"         # mean | first

[train.encoder.conv1d]
base_channels = 32
blocks = [2, 2, 2, 2]
stem_kernel = 7

[train.encoder.bilstm]
hidden = 128
input_dim = 128

[train.encoder.transformer1d]
dim = 128
heads = 4
head_dim = 64
layers = 6
ff_dim = 256
pooling = "mean"

[train.augment]
crop_scale = [0.8, 1.0]
jitter = [0.8, 1.2]          # brightness and contrast factors
amplitude_scale = [0.7, 1.3]
band_drop = 0.1
flip = 0.5                   # synchronized image/profile horizontal flip
vertical_flip = 0.5          # image only

[eval]
gallery_modalities = ["I", "P", "I+P"]
query_modalities = ["I", "P", "I+P"]
n_per_class = 16
k = 3
resamples = 10
seed = 0
gallery_sizes = []           # e.g. [1, 2, 4, 8, 16] for a size sweep
"#;
