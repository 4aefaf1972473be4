//! Image and profile encoders, projection heads and the learnable loss
//! scalars, all held in one [`ParamStore`].
//!
//! Parameter names are prefixed `image_encoder.`, `profile_encoder.`,
//! `image_head.`, `profile_head.` and `loss.`; checkpoints store them by name.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::layers::{BasicBlock, BatchNorm, Conv, LayerNorm, Linear, TransformerBlock};
use crate::nn::{Float, Graph, Mode, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::preprocess::{ImageTensor, ProfileTensor, INPUT_SIZE};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageEncoderKind {
    SmallConv,
    SmallTransformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileEncoderKind {
    Conv1d,
    Bilstm,
    Transformer1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    First,
}

impl std::fmt::Display for ImageEncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SmallConv => "small-conv",
            Self::SmallTransformer => "small-transformer",
        })
    }
}

impl std::fmt::Display for ProfileEncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Conv1d => "conv1d",
            Self::Bilstm => "bilstm",
            Self::Transformer1d => "transformer1d",
        })
    }
}

impl std::str::FromStr for ImageEncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-conv" => Ok(Self::SmallConv),
            "small-transformer" => Ok(Self::SmallTransformer),
            _ => Err(Error::InvalidInput(format!(
                "unknown image encoder `{s}` (small-conv, small-transformer)"
            ))),
        }
    }
}

impl std::str::FromStr for ProfileEncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv1d" => Ok(Self::Conv1d),
            "bilstm" => Ok(Self::Bilstm),
            "transformer1d" => Ok(Self::Transformer1d),
            _ => Err(Error::InvalidInput(format!(
                "unknown profile encoder `{s}` (conv1d, bilstm, transformer1d)"
            ))),
        }
    }
}

/// Strided residual conv net: a 4x4 stride-4 stem followed by one stride-2
/// residual block per further width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmallConvConfig {
    pub widths: Vec<usize>,
}

impl Default for SmallConvConfig {
    fn default() -> Self {
        SmallConvConfig {
            widths: vec![8, 16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmallTransformerConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
    pub pooling: Pooling,
}

impl Default for SmallTransformerConfig {
    fn default() -> Self {
        SmallTransformerConfig {
            patch: 16,
            dim: 64,
            depth: 2,
            heads: 4,
            head_dim: 16,
            ff_dim: 128,
            pooling: Pooling::Mean,
        }
    }
}

/// 1-D ResNet-18 layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Conv1dConfig {
    pub base_channels: usize,
    pub blocks: Vec<usize>,
    pub stem_kernel: usize,
}

impl Default for Conv1dConfig {
    fn default() -> Self {
        Conv1dConfig {
            base_channels: 32,
            blocks: vec![2, 2, 2, 2],
            stem_kernel: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilstmConfig {
    pub hidden: usize,
    /// Width of the linear input embedding in front of the recurrence.
    pub input_dim: usize,
}

impl Default for BilstmConfig {
    fn default() -> Self {
        BilstmConfig {
            hidden: 128,
            input_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Transformer1dConfig {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub pooling: Pooling,
}

impl Default for Transformer1dConfig {
    fn default() -> Self {
        Transformer1dConfig {
            dim: 128,
            heads: 4,
            head_dim: 64,
            layers: 6,
            ff_dim: 256,
            pooling: Pooling::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image: ImageEncoderKind,
    pub profile: ProfileEncoderKind,
    pub embed_dim: usize,
    pub dropout: f64,
    pub small_conv: SmallConvConfig,
    pub small_transformer: SmallTransformerConfig,
    pub conv1d: Conv1dConfig,
    pub bilstm: BilstmConfig,
    pub transformer1d: Transformer1dConfig,
    /// Initial temperature; stored as its logarithm.
    pub init_tau: f64,
    pub init_bias: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image: ImageEncoderKind::SmallConv,
            profile: ProfileEncoderKind::Conv1d,
            embed_dim: 512,
            dropout: 0.2,
            small_conv: SmallConvConfig::default(),
            small_transformer: SmallTransformerConfig::default(),
            conv1d: Conv1dConfig::default(),
            bilstm: BilstmConfig::default(),
            transformer1d: Transformer1dConfig::default(),
            init_tau: 1.0 / 0.07,
            init_bias: -10.0,
        }
    }
}

impl EncoderConfig {
    /// Every width divided by `factor` (at least 1), embedding dim included.
    /// Used for gradient checks on small models.
    pub fn scaled(&self, factor: usize) -> Self {
        let d = |v: usize| (v / factor).max(1);
        let mut c = self.clone();
        c.embed_dim = d(c.embed_dim);
        c.small_conv.widths = c.small_conv.widths.iter().map(|&w| d(w)).collect();
        c.small_transformer.dim = d(c.small_transformer.dim);
        c.small_transformer.head_dim = d(c.small_transformer.head_dim);
        c.small_transformer.ff_dim = d(c.small_transformer.ff_dim);
        c.conv1d.base_channels = d(c.conv1d.base_channels);
        c.bilstm.hidden = d(c.bilstm.hidden);
        c.bilstm.input_dim = d(c.bilstm.input_dim);
        c.transformer1d.dim = d(c.transformer1d.dim);
        c.transformer1d.head_dim = d(c.transformer1d.head_dim);
        c.transformer1d.ff_dim = d(c.transformer1d.ff_dim);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::config("encoder.embed_dim", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("encoder.dropout", "must be in [0, 1)"));
        }
        if self.small_conv.widths.is_empty() || self.small_conv.widths.contains(&0) {
            return Err(Error::config(
                "encoder.small_conv.widths",
                "needs at least one positive width",
            ));
        }
        let t = &self.small_transformer;
        if t.patch == 0 || !INPUT_SIZE.is_multiple_of(t.patch) {
            return Err(Error::config(
                "encoder.small_transformer.patch",
                format!("must divide {INPUT_SIZE}"),
            ));
        }
        if [t.dim, t.depth, t.heads, t.head_dim, t.ff_dim].contains(&0) {
            return Err(Error::config(
                "encoder.small_transformer",
                "sizes must be positive",
            ));
        }
        let c = &self.conv1d;
        if c.base_channels == 0
            || c.blocks.is_empty()
            || c.blocks.contains(&0)
            || c.stem_kernel.is_multiple_of(2)
        {
            return Err(Error::config(
                "encoder.conv1d",
                "needs positive widths, non-empty blocks and an odd stem kernel",
            ));
        }
        if self.bilstm.hidden == 0 || self.bilstm.input_dim == 0 {
            return Err(Error::config("encoder.bilstm", "sizes must be positive"));
        }
        let p = &self.transformer1d;
        if [p.dim, p.heads, p.head_dim, p.layers, p.ff_dim].contains(&0) {
            return Err(Error::config(
                "encoder.transformer1d",
                "sizes must be positive",
            ));
        }
        if !(self.init_tau.is_finite() && self.init_tau > 0.0) {
            return Err(Error::config("encoder.init_tau", "must be positive"));
        }
        if !self.init_bias.is_finite() {
            return Err(Error::config("encoder.init_bias", "must be finite"));
        }
        Ok(())
    }

    /// Intermediate dimension `u` of the image encoder, including the
    /// appended size feature.
    pub fn image_rep_dim(&self) -> usize {
        1 + match self.image {
            ImageEncoderKind::SmallConv => *self.small_conv.widths.last().unwrap(),
            ImageEncoderKind::SmallTransformer => self.small_transformer.dim,
        }
    }

    /// Intermediate dimension `v` of the profile encoder, including the
    /// appended length feature.
    pub fn profile_rep_dim(&self) -> usize {
        1 + match self.profile {
            ProfileEncoderKind::Conv1d => {
                self.conv1d.base_channels << (self.conv1d.blocks.len() - 1)
            }
            ProfileEncoderKind::Bilstm => 2 * self.bilstm.hidden,
            ProfileEncoderKind::Transformer1d => self.transformer1d.dim,
        }
    }
}

/// One row of encoder output before projection; the last element is the
/// appended scalar feature.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateRep {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub modality: Modality,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone)]
enum ImageNet {
    SmallConv {
        stem: Conv,
        stem_bn: BatchNorm,
        blocks: Vec<BasicBlock>,
    },
    SmallTransformer {
        patch: usize,
        embed: Linear,
        pos: ParamId,
        blocks: Vec<TransformerBlock>,
        norm: LayerNorm,
        pooling: Pooling,
    },
}

#[derive(Debug, Clone)]
enum ProfileNet {
    Conv1d {
        stem: Conv,
        stem_bn: BatchNorm,
        blocks: Vec<BasicBlock>,
    },
    Bilstm {
        input: Linear,
        fwd: (Linear, ParamId),
        bwd: (Linear, ParamId),
    },
    Transformer1d {
        embed: Linear,
        pos: ParamId,
        blocks: Vec<TransformerBlock>,
        norm: LayerNorm,
        pooling: Pooling,
    },
}

/// The two encoders, their projection heads and the loss scalars.
#[derive(Debug, Clone)]
pub struct DualEncoder<T: Float> {
    pub config: EncoderConfig,
    pub store: ParamStore<T>,
    image: ImageNet,
    profile: ProfileNet,
    image_head: Linear,
    profile_head: Linear,
    pub log_tau: ParamId,
    pub bias: ParamId,
}

const NO_DECAY: ParamKind = ParamKind::Weight { decay: false };

impl<T: Float> DualEncoder<T> {
    pub fn new(config: &EncoderConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(init_seed, seed::streams::INIT, 0);
        let mut store = ParamStore::new();
        let image = build_image(&mut store, &mut rng, config);
        let profile = build_profile(&mut store, &mut rng, config);
        let image_head = Linear::new(
            &mut store,
            &mut rng,
            "image_head",
            config.image_rep_dim(),
            config.embed_dim,
            true,
        );
        let profile_head = Linear::new(
            &mut store,
            &mut rng,
            "profile_head",
            config.profile_rep_dim(),
            config.embed_dim,
            true,
        );
        let log_tau = store.add(
            "loss.log_tau",
            Tensor::scalar(T::of(config.init_tau.ln())),
            NO_DECAY,
        );
        let bias = store.add(
            "loss.bias",
            Tensor::scalar(T::of(config.init_bias)),
            NO_DECAY,
        );
        Ok(DualEncoder {
            config: config.clone(),
            store,
            image,
            profile,
            image_head,
            profile_head,
            log_tau,
            bias,
        })
    }

    /// The same model with parameters converted to another float type.
    pub fn cast<U: Float>(&self) -> DualEncoder<U> {
        DualEncoder {
            config: self.config.clone(),
            store: self.store.cast(),
            image: self.image.clone(),
            profile: self.profile.clone(),
            image_head: self.image_head.clone(),
            profile_head: self.profile_head.clone(),
            log_tau: self.log_tau,
            bias: self.bias,
        }
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.log_tau).item().f64().exp()
    }

    pub fn bias_value(&self) -> f64 {
        self.store.get(self.bias).item().f64()
    }

    pub fn param_count(&self, prefix: &str) -> usize {
        self.store.count_trainable(prefix)
    }

    /// `[N, u]` image representations with the size feature as last column.
    pub fn encode_images(&self, g: &mut Graph<'_, T>, batch: &[ImageTensor]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Shape("empty image batch".into()));
        }
        if let Some(i) = batch
            .iter()
            .position(|b| b.values.len() != INPUT_SIZE * INPUT_SIZE)
        {
            return Err(Error::Shape(format!(
                "image {i} has {} values, expected {}",
                batch[i].values.len(),
                INPUT_SIZE * INPUT_SIZE
            )));
        }
        let n = batch.len();
        let sizes: Vec<T> = batch.iter().map(|b| T::of(b.size_feature)).collect();
        let p = self.config.dropout;
        let features = match &self.image {
            ImageNet::SmallConv {
                stem,
                stem_bn,
                blocks,
            } => {
                let data = batch
                    .iter()
                    .flat_map(|b| b.values.iter().map(|&v| T::of(v as f64)))
                    .collect();
                let x = g.constant(Tensor::from_vec(&[n, 1, INPUT_SIZE, INPUT_SIZE], data));
                let h = stem.forward(g, x);
                let h = stem_bn.forward(g, h);
                let mut h = g.relu(h);
                for b in blocks {
                    h = b.forward(g, h);
                }
                g.mean_pool(h)
            }
            ImageNet::SmallTransformer {
                patch,
                embed,
                pos,
                blocks,
                norm,
                pooling,
            } => {
                let x = g.constant(patchify(batch, *patch));
                let h = embed.forward(g, x);
                let pe = g.param(*pos);
                let mut h = g.add_broadcast(h, pe);
                for b in blocks {
                    h = b.forward(g, h);
                }
                let h = norm.forward(g, h);
                pool_tokens(g, h, *pooling)
            }
        };
        let features = g.dropout(features, p);
        Ok(g.append_column(features, &sizes))
    }

    /// `[N, v]` profile representations with the length feature as last
    /// column.
    pub fn encode_profiles(&self, g: &mut Graph<'_, T>, batch: &[ProfileTensor]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Shape("empty profile batch".into()));
        }
        if let Some(i) = batch
            .iter()
            .position(|b| b.values.len() != INPUT_SIZE * NUM_CHANNELS)
        {
            return Err(Error::Shape(format!(
                "profile {i} has {} values, expected {}",
                batch[i].values.len(),
                INPUT_SIZE * NUM_CHANNELS
            )));
        }
        let n = batch.len();
        let lengths: Vec<T> = batch.iter().map(|b| T::of(b.length_feature)).collect();
        let time_major = || -> Tensor<T> {
            let data = batch
                .iter()
                .flat_map(|b| b.values.iter().map(|&v| T::of(v as f64)))
                .collect();
            Tensor::from_vec(&[n, INPUT_SIZE, NUM_CHANNELS], data)
        };
        let features = match &self.profile {
            ProfileNet::Conv1d {
                stem,
                stem_bn,
                blocks,
            } => {
                let mut data = Vec::with_capacity(n * NUM_CHANNELS * INPUT_SIZE);
                for b in batch {
                    for c in 0..NUM_CHANNELS {
                        data.extend(
                            (0..INPUT_SIZE).map(|t| T::of(b.values[t * NUM_CHANNELS + c] as f64)),
                        );
                    }
                }
                let x = g.constant(Tensor::from_vec(&[n, NUM_CHANNELS, INPUT_SIZE], data));
                let h = stem.forward(g, x);
                let h = stem_bn.forward(g, h);
                let mut h = g.relu(h);
                for b in blocks {
                    h = b.forward(g, h);
                }
                g.mean_pool(h)
            }
            ProfileNet::Bilstm { input, fwd, bwd } => {
                let x = g.constant(time_major());
                let h = input.forward(g, x);
                let run = |g: &mut Graph<'_, T>, (proj, w_hh): &(Linear, ParamId), reverse| {
                    let z = proj.forward(g, h);
                    let w = g.param(*w_hh);
                    g.lstm(z, w, reverse)
                };
                let hf = run(g, fwd, false);
                let hb = run(g, bwd, true);
                g.concat_cols(hf, hb)
            }
            ProfileNet::Transformer1d {
                embed,
                pos,
                blocks,
                norm,
                pooling,
            } => {
                let x = g.constant(time_major());
                let h = embed.forward(g, x);
                let pe = g.param(*pos);
                let mut h = g.add_broadcast(h, pe);
                for b in blocks {
                    h = b.forward(g, h);
                }
                let h = norm.forward(g, h);
                pool_tokens(g, h, *pooling)
            }
        };
        let features = g.dropout(features, self.config.dropout);
        Ok(g.append_column(features, &lengths))
    }

    /// Linear head followed by row-wise ℓ2 normalization.
    pub fn project(&self, g: &mut Graph<'_, T>, rep: Var, modality: Modality) -> Result<Var> {
        let head = match modality {
            Modality::Image => &self.image_head,
            Modality::Profile => &self.profile_head,
        };
        let cols = *g.shape(rep).last().unwrap();
        if cols != head.in_features {
            return Err(Error::Shape(format!(
                "{modality} head expects {} inputs, got {cols}",
                head.in_features
            )));
        }
        let z = head.forward(g, rep);
        g.l2_normalize_rows(z).map_err(|e| {
            Error::ZeroVector(format!(
                "{modality} projection of batch row {} is zero",
                e.0
            ))
        })
    }

    /// Eval-mode embeddings, computed in chunks of `chunk` samples.
    pub fn embed_images(
        &self,
        batch: &[ImageTensor],
        chunk: usize,
    ) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(batch.len());
        for part in batch.chunks(chunk.max(1)) {
            let mut g = Graph::new(&self.store, Mode::Eval, 0);
            let r = self.encode_images(&mut g, part)?;
            let e = self.project(&mut g, r, Modality::Image)?;
            out.extend(rows_to_embeddings(g.value(e), Modality::Image));
        }
        Ok(out)
    }

    pub fn embed_profiles(
        &self,
        batch: &[ProfileTensor],
        chunk: usize,
    ) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(batch.len());
        for part in batch.chunks(chunk.max(1)) {
            let mut g = Graph::new(&self.store, Mode::Eval, 0);
            let r = self.encode_profiles(&mut g, part)?;
            let e = self.project(&mut g, r, Modality::Profile)?;
            out.extend(rows_to_embeddings(g.value(e), Modality::Profile));
        }
        Ok(out)
    }

    /// Eval-mode intermediate representations.
    pub fn image_reps(&self, batch: &[ImageTensor]) -> Result<Vec<IntermediateRep>> {
        let mut g = Graph::new(&self.store, Mode::Eval, 0);
        let r = self.encode_images(&mut g, batch)?;
        Ok(rows(g.value(r)))
    }

    pub fn profile_reps(&self, batch: &[ProfileTensor]) -> Result<Vec<IntermediateRep>> {
        let mut g = Graph::new(&self.store, Mode::Eval, 0);
        let r = self.encode_profiles(&mut g, batch)?;
        Ok(rows(g.value(r)))
    }

    /// Projects one intermediate representation through a head.
    pub fn project_and_normalize(
        &self,
        rep: &IntermediateRep,
        modality: Modality,
    ) -> Result<EmbeddingVector> {
        let mut g = Graph::new(&self.store, Mode::Eval, 0);
        let x = g.constant(Tensor::from_vec(
            &[1, rep.values.len()],
            rep.values.iter().map(|&v| T::of(v)).collect(),
        ));
        let e = self.project(&mut g, x, modality)?;
        Ok(rows_to_embeddings(g.value(e), modality).remove(0))
    }
}

fn rows<T: Float>(t: &Tensor<T>) -> Vec<IntermediateRep> {
    let d = t.dim(1);
    t.data()
        .chunks(d)
        .map(|r| IntermediateRep {
            values: r.iter().map(|v| v.f64()).collect(),
        })
        .collect()
}

fn rows_to_embeddings<T: Float>(t: &Tensor<T>, modality: Modality) -> Vec<EmbeddingVector> {
    let d = t.dim(1);
    t.data()
        .chunks(d)
        .map(|r| EmbeddingVector {
            values: r.iter().map(|v| v.f64() as f32).collect(),
            modality,
            normalized: true,
        })
        .collect()
}

fn pool_tokens<T: Float>(g: &mut Graph<'_, T>, h: Var, pooling: Pooling) -> Var {
    match pooling {
        Pooling::Mean => g.mean_tokens(h),
        Pooling::First => g.select_token(h, 0),
    }
}

/// `[N, 224, 224]` images to `[N, P, patch²]` flattened non-overlapping
/// patches in row-major patch order.
fn patchify<T: Float>(batch: &[ImageTensor], patch: usize) -> Tensor<T> {
    let per_side = INPUT_SIZE / patch;
    let tokens = per_side * per_side;
    let mut data = Vec::with_capacity(batch.len() * tokens * patch * patch);
    for b in batch {
        for py in 0..per_side {
            for px in 0..per_side {
                for y in 0..patch {
                    let row = (py * patch + y) * INPUT_SIZE + px * patch;
                    data.extend(b.values[row..row + patch].iter().map(|&v| T::of(v as f64)));
                }
            }
        }
    }
    Tensor::from_vec(&[batch.len(), tokens, patch * patch], data)
}

fn build_image<T: Float, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    c: &EncoderConfig,
) -> ImageNet {
    match c.image {
        ImageEncoderKind::SmallConv => {
            let w = &c.small_conv.widths;
            let stem = Conv::new_2d(store, rng, "image_encoder.stem", 1, w[0], 4, 4, 0);
            let stem_bn = BatchNorm::new(store, "image_encoder.stem_bn", w[0]);
            let blocks = w
                .windows(2)
                .enumerate()
                .map(|(i, p)| {
                    BasicBlock::new(
                        store,
                        rng,
                        &format!("image_encoder.block{i}"),
                        p[0],
                        p[1],
                        2,
                        true,
                    )
                })
                .collect();
            ImageNet::SmallConv {
                stem,
                stem_bn,
                blocks,
            }
        }
        ImageEncoderKind::SmallTransformer => {
            let t = &c.small_transformer;
            let tokens = (INPUT_SIZE / t.patch).pow(2);
            let embed = Linear::new(
                store,
                rng,
                "image_encoder.patch_embed",
                t.patch * t.patch,
                t.dim,
                true,
            );
            let pos = store.add(
                "image_encoder.pos_embed",
                crate::nn::layers::normal(rng, &[tokens, t.dim], 0.02),
                ParamKind::Weight { decay: true },
            );
            let blocks = (0..t.depth)
                .map(|i| {
                    TransformerBlock::new(
                        store,
                        rng,
                        &format!("image_encoder.layer{i}"),
                        t.dim,
                        t.heads,
                        t.head_dim,
                        t.ff_dim,
                        c.dropout,
                    )
                })
                .collect();
            let norm = LayerNorm::new(store, "image_encoder.norm", t.dim);
            ImageNet::SmallTransformer {
                patch: t.patch,
                embed,
                pos,
                blocks,
                norm,
                pooling: t.pooling,
            }
        }
    }
}

fn build_profile<T: Float, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    c: &EncoderConfig,
) -> ProfileNet {
    match c.profile {
        ProfileEncoderKind::Conv1d => {
            let cc = &c.conv1d;
            let base = cc.base_channels;
            let stem = Conv::new_1d(
                store,
                rng,
                "profile_encoder.stem",
                NUM_CHANNELS,
                base,
                cc.stem_kernel,
                1,
                cc.stem_kernel / 2,
            );
            let stem_bn = BatchNorm::new(store, "profile_encoder.stem_bn", base);
            let mut blocks = Vec::new();
            let mut in_ch = base;
            for (stage, &count) in cc.blocks.iter().enumerate() {
                let out_ch = base << stage;
                for j in 0..count {
                    let stride = if j == 0 { 2 } else { 1 };
                    let name = format!("profile_encoder.layer{}.{j}", stage + 1);
                    blocks.push(BasicBlock::new(
                        store, rng, &name, in_ch, out_ch, stride, false,
                    ));
                    in_ch = out_ch;
                }
            }
            ProfileNet::Conv1d {
                stem,
                stem_bn,
                blocks,
            }
        }
        ProfileEncoderKind::Bilstm => {
            let b = &c.bilstm;
            let input = Linear::new(
                store,
                rng,
                "profile_encoder.input",
                NUM_CHANNELS,
                b.input_dim,
                true,
            );
            let bound = 1.0 / (b.hidden as f64).sqrt();
            let mut direction = |name: &str| {
                let proj = Linear {
                    weight: store.add(
                        format!("profile_encoder.{name}.w_ih"),
                        crate::nn::layers::uniform(rng, &[4 * b.hidden, b.input_dim], bound),
                        ParamKind::Weight { decay: true },
                    ),
                    bias: Some(store.add(
                        format!("profile_encoder.{name}.bias"),
                        forget_gate_bias(b.hidden),
                        ParamKind::Weight { decay: true },
                    )),
                    in_features: b.input_dim,
                    out_features: 4 * b.hidden,
                };
                let w_hh = store.add(
                    format!("profile_encoder.{name}.w_hh"),
                    crate::nn::layers::uniform(rng, &[4 * b.hidden, b.hidden], bound),
                    ParamKind::Weight { decay: true },
                );
                (proj, w_hh)
            };
            let fwd = direction("forward");
            let bwd = direction("backward");
            ProfileNet::Bilstm { input, fwd, bwd }
        }
        ProfileEncoderKind::Transformer1d => {
            let t = &c.transformer1d;
            let embed = Linear::new(
                store,
                rng,
                "profile_encoder.embed",
                NUM_CHANNELS,
                t.dim,
                true,
            );
            let pos = store.add(
                "profile_encoder.pos_embed",
                crate::nn::layers::normal(rng, &[INPUT_SIZE, t.dim], 0.02),
                ParamKind::Weight { decay: true },
            );
            let blocks = (0..t.layers)
                .map(|i| {
                    TransformerBlock::new(
                        store,
                        rng,
                        &format!("profile_encoder.layer{i}"),
                        t.dim,
                        t.heads,
                        t.head_dim,
                        t.ff_dim,
                        c.dropout,
                    )
                })
                .collect();
            let norm = LayerNorm::new(store, "profile_encoder.norm", t.dim);
            ProfileNet::Transformer1d {
                embed,
                pos,
                blocks,
                norm,
                pooling: t.pooling,
            }
        }
    }
}

/// LSTM gate bias with the forget gate opened (bias 1), others zero.
fn forget_gate_bias<T: Float>(hidden: usize) -> Tensor<T> {
    let mut v = vec![T::zero(); 4 * hidden];
    v[hidden..2 * hidden].iter_mut().for_each(|x| *x = T::one());
    Tensor::from_vec(&[4 * hidden], v)
}

impl<T: Float> DualEncoder<T> {
    /// Test hook: copies the forward-direction LSTM weights into the backward
    /// direction so the two directions compute the same function.
    pub fn tie_lstm_directions(&mut self) -> Result<()> {
        let ProfileNet::Bilstm { fwd, bwd, .. } = &self.profile else {
            return Err(Error::InvalidInput(
                "profile encoder is not a bilstm".into(),
            ));
        };
        let pairs = [
            (fwd.0.weight, bwd.0.weight),
            (fwd.0.bias.unwrap(), bwd.0.bias.unwrap()),
            (fwd.1, bwd.1),
        ];
        for (src, dst) in pairs {
            let v = self.store.get(src).clone();
            *self.store.get_mut(dst) = v;
        }
        Ok(())
    }
}
