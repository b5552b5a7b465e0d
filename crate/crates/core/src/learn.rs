//! Contrastive scoring, few-shot sampling and the SGD training loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adapter::{
    adapter_forward, mean_pool_patches, project_domain_features, AdapterOptions, NoiseMode,
    NoiseScale, PromptShape, PromptState, PromptVars,
};
use crate::encoders::{
    class_text_tokens, init_frozen_encoder, language_forward, vision_forward, Branch, Fnv,
    FrozenEncoder, PatchStem,
};
use crate::error::{dim_err, Error, Result};
use crate::eval::{evaluate_accuracy, EmbeddingDataset};
use crate::grad::{Tape, Tensor, Var};
use crate::qnum::QuatMode;

/// Template token positions drawn per class name.
pub const CLASS_TOKENS: usize = 2;

/// Which encoder branches receive deep prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Hash)]
pub enum BranchMode {
    /// Language prompts only.
    Language,
    /// Vision prompts only.
    Vision,
    /// Both branches.
    #[default]
    Both,
}

impl BranchMode {
    pub fn language(self) -> bool {
        matches!(self, BranchMode::Language | BranchMode::Both)
    }

    pub fn vision(self) -> bool {
        matches!(self, BranchMode::Vision | BranchMode::Both)
    }
}

impl FromStr for BranchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PL" => Ok(BranchMode::Language),
            "PV" => Ok(BranchMode::Vision),
            "PL+PV" | "PLPV" | "BOTH" => Ok(BranchMode::Both),
            _ => Err(Error::Config(format!("unknown branch_mode `{s}`"))),
        }
    }
}

impl fmt::Display for BranchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BranchMode::Language => "PL",
            BranchMode::Vision => "PV",
            BranchMode::Both => "PL+PV",
        })
    }
}

/// Widths and depths of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Encoder depth.
    pub m: usize,
    pub d_model: usize,
    pub d_joint: usize,
    /// Learnable context tokens.
    pub n_ctx: usize,
    /// Prompt tokens per layer.
    pub n_p: usize,
    /// Width of the domain foundation-model features.
    pub d_domain: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            m: 12,
            d_model: 64,
            d_joint: 32,
            n_ctx: 4,
            n_p: 2,
            d_domain: 48,
        }
    }
}

/// Optimization recipe and ablation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub shots: usize,
    pub epochs: usize,
    /// Prompt depth.
    pub k: usize,
    /// Softmax temperature.
    pub tau: f64,
    pub seed: u64,
    /// Seed of the frozen encoders (stands in for which pre-trained model is used).
    pub encoder_seed: u64,
    pub noise_mode: NoiseMode,
    pub noise_scale: NoiseScale,
    pub quat_mode: QuatMode,
    /// False swaps every quaternion layer for a real layer of equal weight count.
    pub use_quaternion: bool,
    pub branch_mode: BranchMode,
    pub eq9_literal: bool,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Stop after this many optimizer steps (0 = run all epochs).
    pub max_steps: usize,
    /// Independent repetitions for evaluation protocols.
    pub runs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.0035,
            batch: 4,
            shots: 16,
            epochs: 10,
            k: 9,
            tau: 0.01,
            seed: 1,
            encoder_seed: 2024,
            noise_mode: NoiseMode::Language,
            noise_scale: NoiseScale::Scalar,
            quat_mode: QuatMode::Hamilton,
            use_quaternion: true,
            branch_mode: BranchMode::Both,
            eq9_literal: false,
            momentum: 0.0,
            weight_decay: 0.0,
            max_steps: 0,
            runs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        if self.k == 0 || self.k > dims.m {
            return Err(Error::Config(format!(
                "prompt depth k must be in 1..={}, got {}",
                dims.m, self.k
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        if self.quat_mode == QuatMode::Hadamard && !self.use_quaternion {
            return Err(Error::Config("quat_mode=hadamard needs use_quaternion=true".into()));
        }
        if dims.d_model == 0 || dims.d_model % 4 != 0 {
            return Err(Error::Config(format!(
                "d_model must be a positive multiple of 4, got {}",
                dims.d_model
            )));
        }
        if dims.n_ctx == 0 || dims.d_domain == 0 || dims.d_joint == 0 {
            return Err(Error::Config("n_ctx, d_domain and d_joint must be positive".into()));
        }
        Ok(())
    }

    pub fn prompt_shape(&self, dims: &ModelDims) -> PromptShape {
        PromptShape {
            d_domain: dims.d_domain,
            d_model: dims.d_model,
            n_ctx: dims.n_ctx,
            n_p: dims.n_p,
            depth: self.k,
            use_quaternion: self.use_quaternion,
            quat_mode: self.quat_mode,
            noise_mode: self.noise_mode,
        }
    }
}

/// Both frozen towers plus the frozen patch embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    pub language: FrozenEncoder,
    pub vision: FrozenEncoder,
    pub stem: PatchStem,
}

impl FrozenBackbone {
    pub fn new(dims: &ModelDims, seed: u64) -> Result<Self> {
        Ok(FrozenBackbone {
            language: init_frozen_encoder(Branch::Language, dims.m, dims.d_model, dims.d_joint, seed)?,
            vision: init_frozen_encoder(Branch::Vision, dims.m, dims.d_model, dims.d_joint, seed)?,
            stem: PatchStem::new(dims.d_domain, dims.d_model, seed),
        })
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        h.bytes(&self.language.checksum().to_le_bytes());
        h.bytes(&self.vision.checksum().to_le_bytes());
        h.tensor(&self.stem.weight);
        h.finish()
    }
}

/// Per-forward switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardSettings {
    pub k: usize,
    pub branch_mode: BranchMode,
    pub eq9_literal: bool,
    pub tau: f64,
}

impl From<&TrainConfig> for ForwardSettings {
    fn from(c: &TrainConfig) -> Self {
        ForwardSettings {
            k: c.k,
            branch_mode: c.branch_mode,
            eq9_literal: c.eq9_literal,
            tau: c.tau,
        }
    }
}

/// Noise already scaled by each image's `Mean(F̂_d)`, added on the real axis
/// of the language (`ctx`) or vision-prompt (`prompt`) quaternion inputs.
#[derive(Clone, Debug, Default)]
pub struct InjectedNoise {
    pub ctx: Option<Tensor>,
    pub prompt: Option<Tensor>,
}

/// `C_t` for a list of class names: `[C, CLASS_TOKENS, d_model]`.
pub fn class_token_table(names: &[&str], d_model: usize) -> Tensor {
    let mut data = Vec::with_capacity(names.len() * CLASS_TOKENS * d_model);
    for n in names {
        data.extend_from_slice(class_text_tokens(n, CLASS_TOKENS, d_model).data());
    }
    Tensor::new(vec![names.len(), CLASS_TOKENS, d_model], data).expect("sized above")
}

/// Tape outputs of one scoring pass.
#[derive(Clone, Copy, Debug)]
pub struct Scores {
    /// Unit-norm image embeddings `E_m`: `[B, d_joint]`.
    pub image: Var,
    /// Unit-norm class embeddings `W_m`: `[B, C, d_joint]` (conditioned per image).
    pub text: Var,
    /// `cos(E_m, W_m^i) / τ`: `[B, C]`.
    pub logits: Var,
}

/// Full differentiable pipeline for a batch: adapter, both towers, cosine
/// logits.
///
/// `patches: [B, n_patches, d_domain]` are the images' domain-model patch
/// features (also the input to the frozen patch stem); `class_tokens` comes
/// from [`class_token_table`].
pub fn score_batch(
    tape: &mut Tape,
    backbone: &FrozenBackbone,
    vars: &PromptVars,
    settings: ForwardSettings,
    patches: &Tensor,
    class_tokens: &Tensor,
    noise: &InjectedNoise,
) -> Result<Scores> {
    let ps = patches.shape();
    if ps.len() != 3 {
        return Err(dim_err!("patch batch must be [B, n, d_domain], got {:?}", ps));
    }
    let (b, n_patch, d_domain) = (ps[0], ps[1], ps[2]);
    let c = class_tokens.shape()[0];
    let d = backbone.language.d_model;
    let d_joint = backbone.language.d_joint;
    if c == 0 {
        return Err(Error::Data("no classes to score against".into()));
    }

    let mut pooled = Vec::with_capacity(b * d_domain);
    for i in 0..b {
        let img = Tensor::new(
            vec![n_patch, d_domain],
            patches.data()[i * n_patch * d_domain..(i + 1) * n_patch * d_domain].to_vec(),
        )?;
        pooled.extend_from_slice(mean_pool_patches(&img)?.data());
    }
    let pooled = tape.constant(Tensor::new(vec![b, d_domain], pooled)?);
    let ctx_noise = noise.ctx.clone().map(|t| tape.constant(t));
    let prompt_noise = noise.prompt.clone().map(|t| tape.constant(t));
    let adapted = adapter_forward(
        tape,
        vars,
        pooled,
        ctx_noise,
        prompt_noise,
        AdapterOptions {
            eq9_literal: settings.eq9_literal,
            vision_prompts: settings.branch_mode.vision(),
        },
    )?;

    // language: one sequence per (image, class)
    let img_idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(c)).collect();
    let cls_idx: Vec<usize> = (0..b).flat_map(|_| 0..c).collect();
    let t_d = tape.index_select(adapted.t_d, img_idx)?;
    let ct = tape.constant(class_tokens.clone());
    let ct = tape.index_select(ct, cls_idx)?;
    let w1 = tape.concat(&[t_d, ct], 1)?;
    let (lang_prompts, lang_k) = if settings.branch_mode.language() {
        (vars.p_l.clone(), settings.k)
    } else {
        (Vec::new(), 0)
    };
    let text = language_forward(&backbone.language, tape, w1, &lang_prompts, lang_k)?;
    let text = tape.l2_normalize(text)?;
    let text = tape.reshape(text, &[b, c, d_joint])?;

    // vision
    let e1 = tape.constant(backbone.stem.embed(patches)?);
    debug_assert_eq!(tape.shape(e1)[2], d);
    let vis_k = if settings.branch_mode.vision() { settings.k } else { 0 };
    let image = vision_forward(&backbone.vision, tape, e1, &adapted.p_v, vis_k)?;
    let image = tape.l2_normalize(image)?;

    let img3 = tape.reshape(image, &[b, 1, d_joint])?;
    let text_t = tape.transpose(text)?;
    let sims = tape.matmul(img3, text_t)?;
    let sims = tape.reshape(sims, &[b, c])?;
    let logits = tape.scale(sims, 1.0 / settings.tau)?;
    Ok(Scores {
        image,
        text,
        logits,
    })
}

/// `a · b / (|a| |b|)`.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.numel() != b.numel() {
        return Err(dim_err!("cosine of {:?} and {:?}", a.shape(), b.shape()));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Softmax over `cos(image, class_i) / τ`.
pub fn class_probabilities(image: &Tensor, classes: &[Tensor], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    if classes.is_empty() {
        return Err(Error::Data("need at least one class embedding".into()));
    }
    let logits: Vec<f64> = classes
        .iter()
        .map(|c| cosine_similarity(image, c).map(|s| s / tau))
        .collect::<Result<_>>()?;
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// `shots` record indices per base class, drawn without replacement.
pub fn few_shot_sample<R: Rng + ?Sized>(
    dataset: &EmbeddingDataset,
    shots: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(shots * dataset.base.len());
    for &class in &dataset.base {
        let members: Vec<usize> = dataset
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < shots {
            return Err(Error::Data(format!(
                "class `{}` has {} records, fewer than {} shots",
                dataset.class_names[class],
                members.len(),
                shots
            )));
        }
        out.extend(members.choose_multiple(rng, shots).copied());
    }
    Ok(out)
}

/// `θ ← θ − lr·g` for every parameter.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        p.data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(w, gv)| *w -= lr * gv);
    }
    Ok(())
}

fn check_grads(params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Usage(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(dim_err!("param {} is {:?}, grad {:?}", i, p.shape(), g.shape()));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} at parameter {} coordinate {}",
                g.data()[j],
                i,
                j
            )));
        }
    }
    Ok(())
}

/// SGD with optional momentum and weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if self.momentum == 0.0 && self.weight_decay == 0.0 {
            return sgd_step(params, grads, self.lr);
        }
        check_grads(params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, gv), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gv + self.weight_decay * *w;
                *vel = self.momentum * *vel + d;
                *w -= self.lr * *vel;
            }
        }
        Ok(())
    }
}

/// Step after which [`TrainReport::probe_loss`] is measured.
pub const PROBE_STEP: usize = 50;

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mini-batch loss at every optimizer step.
    pub losses: Vec<f64>,
    /// Loss over the whole few-shot subset, noise off, before the first step.
    pub initial_train_loss: f64,
    /// Same, after the last step.
    pub final_train_loss: f64,
    /// Few-shot subset loss right after step [`PROBE_STEP`], if reached.
    pub probe_loss: Option<f64>,
    /// Accuracy on base-class records outside the few-shot subset.
    pub acc_base: f64,
    /// Accuracy on novel-class records.
    pub acc_novel: f64,
    pub steps: usize,
    pub wall_seconds: f64,
    pub frozen_checksum_before: u64,
    pub frozen_checksum_after: u64,
    pub trainable_checksum_before: u64,
    pub trainable_checksum_after: u64,
    /// Indices of the few-shot training records.
    pub train_indices: Vec<usize>,
}

impl TrainReport {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &TrainReport) -> bool {
        let mut a = self.clone();
        a.wall_seconds = other.wall_seconds;
        a == *other
    }
}

/// Random streams used by training; each purpose has its own ChaCha stream so
/// changing one consumer never shifts another.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub(crate) const STREAM_INIT: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_NOISE: u64 = 4;

/// Fresh trainable state for `config`.
pub fn init_prompt_state(config: &TrainConfig, dims: &ModelDims) -> PromptState {
    PromptState::init(&config.prompt_shape(dims), &mut stream(config.seed, STREAM_INIT))
}

/// Gather `[B, n_patches, d_domain]` for the given record indices.
pub fn gather_patches(dataset: &EmbeddingDataset, indices: &[usize]) -> Result<Tensor> {
    let first = &dataset.records[indices[0]].patches;
    let (n, d) = (first.shape()[0], first.shape()[1]);
    let mut data = Vec::with_capacity(indices.len() * n * d);
    for &i in indices {
        let p = &dataset.records[i].patches;
        if p.shape() != first.shape() {
            return Err(Error::Data("records disagree on patch shape".into()));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![indices.len(), n, d], data)
}

fn draw_noise(
    config: &TrainConfig,
    dims: &ModelDims,
    state: &PromptState,
    patches: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<InjectedNoise> {
    let rows = match config.noise_mode {
        NoiseMode::Off => return Ok(InjectedNoise::default()),
        NoiseMode::Language => dims.n_ctx,
        NoiseMode::Vision => dims.n_p,
    };
    let (b, n, d) = (patches.shape()[0], patches.shape()[1], patches.shape()[2]);
    let mut data = Vec::with_capacity(b * rows * dims.d_model);
    for i in 0..b {
        let img = Tensor::new(vec![n, d], patches.data()[i * n * d..(i + 1) * n * d].to_vec())?;
        let f_hat = project_domain_features(&state.projector, &img)?;
        let nz = crate::adapter::sample_noise(&f_hat, rows, config.noise_scale, rng);
        data.extend_from_slice(nz.data());
    }
    let t = Tensor::new(vec![b, rows, dims.d_model], data)?;
    Ok(match config.noise_mode {
        NoiseMode::Language => InjectedNoise {
            ctx: Some(t),
            prompt: None,
        },
        _ => InjectedNoise {
            ctx: None,
            prompt: Some(t),
        },
    })
}

/// Mean cross-entropy of `records` against `classes` (dataset class ids) with
/// noise disabled.
pub fn dataset_loss(
    backbone: &FrozenBackbone,
    state: &PromptState,
    settings: ForwardSettings,
    dataset: &EmbeddingDataset,
    records: &[usize],
    classes: &[usize],
) -> Result<f64> {
    let names: Vec<&str> = classes.iter().map(|&c| dataset.class_names[c].as_str()).collect();
    let table = class_token_table(&names, backbone.language.d_model);
    let mut total = 0.0;
    for chunk in records.chunks(16) {
        let labels = local_labels(dataset, chunk, classes)?;
        let patches = gather_patches(dataset, chunk)?;
        let mut tape = Tape::new();
        let vars = PromptVars::register(&mut tape, state);
        let s = score_batch(
            &mut tape,
            backbone,
            &vars,
            settings,
            &patches,
            &table,
            &InjectedNoise::default(),
        )?;
        let loss = tape.softmax_ce(s.logits, labels)?;
        total += tape.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / records.len().max(1) as f64)
}

fn local_labels(dataset: &EmbeddingDataset, records: &[usize], classes: &[usize]) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|&i| {
            let label = dataset.records[i].label;
            classes
                .iter()
                .position(|&c| c == label)
                .ok_or_else(|| Error::Data(format!("record {i} has a class outside the subset")))
        })
        .collect()
}

/// One optimizer step's worth of forward + backward on `batch` records.
/// Returns the mini-batch loss and gradients in `named_tensors` order.
pub fn batch_gradients(
    backbone: &FrozenBackbone,
    state: &PromptState,
    settings: ForwardSettings,
    dataset: &EmbeddingDataset,
    batch: &[usize],
    classes: &[usize],
    class_tokens: &Tensor,
    noise: &InjectedNoise,
) -> Result<(f64, Vec<Tensor>)> {
    let labels = local_labels(dataset, batch, classes)?;
    let patches = gather_patches(dataset, batch)?;
    let mut tape = Tape::new();
    let vars = PromptVars::register(&mut tape, state);
    let s = score_batch(&mut tape, backbone, &vars, settings, &patches, class_tokens, noise)?;
    let loss = tape.softmax_ce(s.logits, labels)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss diverged to {value}")));
    }
    let grads = tape.backward(loss)?;
    let out = vars
        .all
        .iter()
        .map(|v| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(*v)))
        })
        .collect();
    Ok((value, out))
}

/// Train `state` on the few-shot subset of `dataset`'s base classes.
pub fn train(
    config: &TrainConfig,
    dims: &ModelDims,
    dataset: &EmbeddingDataset,
    backbone: &FrozenBackbone,
    state: &mut PromptState,
) -> Result<TrainReport> {
    config.validate(dims)?;
    if state.depth() != config.k {
        return Err(Error::Config(format!(
            "prompt state has depth {} but config k = {}",
            state.depth(),
            config.k
        )));
    }
    if dataset.d_domain() != dims.d_domain {
        return Err(Error::Data(format!(
            "dataset features are {}-d, model expects {}",
            dataset.d_domain(),
            dims.d_domain
        )));
    }
    let started = Instant::now();
    let frozen_before = backbone.checksum();
    let trainable_before = state.checksum();
    let settings = ForwardSettings::from(config);
    let train_idx = few_shot_sample(dataset, config.shots, &mut stream(config.seed, STREAM_SAMPLE))?;
    let classes = dataset.base.clone();
    let names: Vec<&str> = classes.iter().map(|&c| dataset.class_names[c].as_str()).collect();
    let table = class_token_table(&names, dims.d_model);

    let initial_train_loss = dataset_loss(backbone, state, settings, dataset, &train_idx, &classes)?;
    let mut shuffle_rng = stream(config.seed, STREAM_SHUFFLE);
    let mut noise_rng = stream(config.seed, STREAM_NOISE);
    let mut opt = Sgd::new(config.lr, config.momentum, config.weight_decay);
    let mut losses = Vec::new();
    let mut probe_loss = None;
    let mut order = train_idx.clone();
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch) {
            let patches = gather_patches(dataset, batch)?;
            let noise = draw_noise(config, dims, state, &patches, &mut noise_rng)?;
            let (loss, grads) =
                batch_gradients(backbone, state, settings, dataset, batch, &classes, &table, &noise)?;
            losses.push(loss);
            let mut params = state.tensors_mut();
            opt.step(&mut params, &grads)?;
            if losses.len() == PROBE_STEP {
                probe_loss = Some(dataset_loss(backbone, state, settings, dataset, &train_idx, &classes)?);
            }
            if config.max_steps > 0 && losses.len() >= config.max_steps {
                break 'epochs;
            }
        }
        log::debug!(
            "epoch {} done, last loss {:.4}",
            epoch,
            losses.last().copied().unwrap_or(f64::NAN)
        );
    }

    let final_train_loss = dataset_loss(backbone, state, settings, dataset, &train_idx, &classes)?;
    let held_out: Vec<usize> = dataset
        .records_of(&dataset.base)
        .into_iter()
        .filter(|i| !train_idx.contains(i))
        .collect();
    let base_records = if held_out.is_empty() {
        dataset.records_of(&dataset.base)
    } else {
        held_out
    };
    let acc_base = evaluate_accuracy(backbone, state, settings, dataset, &dataset.base, &base_records)?;
    let novel_records = dataset.records_of(&dataset.novel);
    let acc_novel = if novel_records.is_empty() {
        0.0
    } else {
        evaluate_accuracy(backbone, state, settings, dataset, &dataset.novel, &novel_records)?
    };
    Ok(TrainReport {
        steps: losses.len(),
        losses,
        initial_train_loss,
        final_train_loss,
        probe_loss,
        acc_base,
        acc_novel,
        wall_seconds: started.elapsed().as_secs_f64(),
        frozen_checksum_before: frozen_before,
        frozen_checksum_after: backbone.checksum(),
        trainable_checksum_before: trainable_before,
        trainable_checksum_after: state.checksum(),
        train_indices: train_idx,
    })
}

/// Draw one standard normal; exposed for noise-contract tests.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
