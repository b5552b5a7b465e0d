//! Datasets, accuracy, harmonic mean, and the evaluation protocols:
//! base-to-novel, cross-dataset, domain generalization, and ablations.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::adapter::{NoiseMode, PromptState, PromptVars};
use crate::config::Config;
use crate::encoders::{semantic_code, SEMANTIC_RANK};
use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor};
use crate::learn::{
    class_token_table, gather_patches, init_prompt_state, score_batch, stream, train,
    BranchMode, ForwardSettings, FrozenBackbone, InjectedNoise, ModelDims, TrainConfig,
    TrainReport,
};

/// One labeled image: its pooled domain feature and its patch features.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// `[d_domain]`.
    pub feature: Tensor,
    /// `[n_patches, d_domain]`.
    pub patches: Tensor,
    pub label: usize,
}

/// Labeled records plus the base/novel class partition.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    pub name: String,
    pub records: Vec<Record>,
    pub class_names: Vec<String>,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

impl EmbeddingDataset {
    /// Build a dataset, deriving the split from the class names.
    pub fn new(name: &str, class_names: Vec<String>, records: Vec<Record>) -> Result<Self> {
        let (base, novel) = base_novel_split(&class_names)?;
        let ds = EmbeddingDataset {
            name: name.to_string(),
            records,
            class_names,
            base,
            novel,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        let mut seen = vec![0u8; c];
        for &i in self.base.iter().chain(&self.novel) {
            if i >= c {
                return Err(Error::Data(format!("split names class {i} of {c}")));
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&s| s != 1) {
            return Err(Error::Data("base and novel must partition the classes".into()));
        }
        let Some(first) = self.records.first() else {
            return Ok(());
        };
        let d = first.feature.numel();
        let pshape = first.patches.shape().to_vec();
        if pshape.len() != 2 || pshape[1] != d || pshape[0] == 0 {
            return Err(Error::Data(format!(
                "patches must be [n, {d}], got {:?}",
                pshape
            )));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.label >= c {
                return Err(Error::Data(format!("record {i} has label {} of {c}", r.label)));
            }
            if r.feature.shape() != [d] || r.patches.shape() != pshape.as_slice() {
                return Err(Error::Data(format!("record {i} has inconsistent shapes")));
            }
            if !r.feature.is_finite() || !r.patches.is_finite() {
                return Err(Error::Data(format!("record {i} has non-finite values")));
            }
        }
        Ok(())
    }

    pub fn d_domain(&self) -> usize {
        self.records.first().map_or(0, |r| r.feature.numel())
    }

    pub fn n_patches(&self) -> usize {
        self.records.first().map_or(0, |r| r.patches.shape()[0])
    }

    /// Indices of records whose label is in `classes`, in dataset order.
    pub fn records_of(&self, classes: &[usize]) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| classes.contains(&r.label))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn all_classes(&self) -> Vec<usize> {
        (0..self.class_names.len()).collect()
    }
}

/// `2ab / (a + b)`; both zero yields 0 with a warning.
pub fn harmonic_mean(acc_base: f64, acc_novel: f64) -> f64 {
    if acc_base == 0.0 && acc_novel == 0.0 {
        log::warn!("harmonic mean of two zero accuracies is defined as 0");
        return 0.0;
    }
    2.0 * acc_base * acc_novel / (acc_base + acc_novel)
}

/// Lexicographically first `⌈C/2⌉` classes are base, the rest novel.
/// Returns class indices into `class_names`.
pub fn base_novel_split(class_names: &[String]) -> Result<(Vec<usize>, Vec<usize>)> {
    if class_names.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 classes for a base/novel split, got {}",
            class_names.len()
        )));
    }
    let mut order: Vec<usize> = (0..class_names.len()).collect();
    order.sort_by(|&a, &b| class_names[a].cmp(&class_names[b]));
    for w in order.windows(2) {
        if class_names[w[0]] == class_names[w[1]] {
            return Err(Error::Data(format!("duplicate class name `{}`", class_names[w[0]])));
        }
    }
    let n_base = class_names.len().div_ceil(2);
    let novel = order.split_off(n_base);
    Ok((order, novel))
}

const EVAL_CHUNK: usize = 32;

/// Predicted class id (from `classes`) for every record in `records`, noise off.
pub fn predict(
    backbone: &FrozenBackbone,
    state: &PromptState,
    settings: ForwardSettings,
    dataset: &EmbeddingDataset,
    classes: &[usize],
    records: &[usize],
) -> Result<Vec<usize>> {
    if classes.is_empty() {
        return Err(Error::Data("evaluation needs a nonempty class subset".into()));
    }
    let names: Vec<&str> = classes.iter().map(|&c| dataset.class_names[c].as_str()).collect();
    let table = class_token_table(&names, backbone.language.d_model);
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_CHUNK) {
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
        let logits = tape.value(s.logits);
        let c = classes.len();
        for row in logits.data().chunks(c) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite logits during evaluation".into()));
            }
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            out.push(classes[best]);
        }
    }
    Ok(out)
}

/// Top-1 accuracy over `records`, classifying among `classes` only.
pub fn evaluate_accuracy(
    backbone: &FrozenBackbone,
    state: &PromptState,
    settings: ForwardSettings,
    dataset: &EmbeddingDataset,
    classes: &[usize],
    records: &[usize],
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Data("evaluation needs at least one record".into()));
    }
    let preds = predict(backbone, state, settings, dataset, classes, records)?;
    let hits = preds
        .iter()
        .zip(records)
        .filter(|(p, &r)| **p == dataset.records[r].label)
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Accuracy for one class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAccuracy {
    pub name: String,
    pub novel: bool,
    pub correct: usize,
    pub total: usize,
}

/// Base-to-novel evaluation outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub acc_base: f64,
    pub acc_novel: f64,
    pub hm: f64,
    pub per_class: Vec<ClassAccuracy>,
    /// `key=value` echo of the configuration evaluated.
    pub config: String,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>6} {:>8} {:>7}", "class", "split", "correct", "acc")?;
        for c in &self.per_class {
            writeln!(
                f,
                "{:<24} {:>6} {:>4}/{:<3} {:>7.2}",
                c.name,
                if c.novel { "novel" } else { "base" },
                c.correct,
                c.total,
                100.0 * c.correct as f64 / c.total.max(1) as f64
            )?;
        }
        writeln!(f, "base  {:6.2}", 100.0 * self.acc_base)?;
        writeln!(f, "novel {:6.2}", 100.0 * self.acc_novel)?;
        write!(f, "HM    {:6.2}", 100.0 * self.hm)
    }
}

/// Base classes scored among base names, novel among novel names.
/// `exclude` removes records (the few-shot training subset) from the base pool.
pub fn base_to_novel(
    backbone: &FrozenBackbone,
    state: &PromptState,
    config: &Config,
    dataset: &EmbeddingDataset,
    exclude: &[usize],
) -> Result<EvalReport> {
    let settings = ForwardSettings::from(&config.train);
    let mut per_class = Vec::new();
    let mut split_acc = [0.0; 2];
    for (slot, (classes, novel)) in [(&dataset.base, false), (&dataset.novel, true)]
        .into_iter()
        .enumerate()
    {
        let records: Vec<usize> = dataset
            .records_of(classes)
            .into_iter()
            .filter(|i| !exclude.contains(i))
            .collect();
        if records.is_empty() {
            return Err(Error::Data(format!(
                "no {} records left to evaluate",
                if novel { "novel" } else { "base" }
            )));
        }
        let preds = predict(backbone, state, settings, dataset, classes, &records)?;
        let mut correct = 0;
        for &c in classes.iter() {
            let mut acc = ClassAccuracy {
                name: dataset.class_names[c].clone(),
                novel,
                correct: 0,
                total: 0,
            };
            for (p, &r) in preds.iter().zip(&records) {
                if dataset.records[r].label == c {
                    acc.total += 1;
                    acc.correct += usize::from(*p == c);
                }
            }
            correct += acc.correct;
            per_class.push(acc);
        }
        split_acc[slot] = correct as f64 / records.len() as f64;
    }
    Ok(EvalReport {
        acc_base: split_acc[0],
        acc_novel: split_acc[1],
        hm: harmonic_mean(split_acc[0], split_acc[1]),
        per_class,
        config: config.to_text(),
    })
}

/// Accuracy on every target over all its classes, with no adaptation.
pub fn cross_dataset_eval(
    backbone: &FrozenBackbone,
    state: &PromptState,
    settings: ForwardSettings,
    source_name: &str,
    targets: &[EmbeddingDataset],
) -> Result<Vec<(String, f64)>> {
    let d = state.projector.d_domain();
    let mut table = Vec::with_capacity(targets.len());
    for t in targets {
        if t.d_domain() != d {
            return Err(Error::Data(format!(
                "target `{}` has {}-d features, model trained on `{}` expects {}",
                t.name,
                t.d_domain(),
                source_name,
                d
            )));
        }
        let classes = t.all_classes();
        let records: Vec<usize> = (0..t.records.len()).collect();
        let acc = evaluate_accuracy(backbone, state, settings, t, &classes, &records)?;
        table.push((t.name.clone(), acc));
    }
    Ok(table)
}

/// Parameters of the synthetic feature generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub d_domain: usize,
    /// Per-coordinate standard deviation of records around their centroid.
    pub spread: f64,
    /// Per-coordinate standard deviation of patches around their record.
    pub patch_jitter: f64,
    pub n_patches: usize,
    /// Seeds the map from semantic codes to feature space.
    pub domain_shift_seed: u64,
    pub seed: u64,
    pub name: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 12,
            per_class: 40,
            d_domain: 48,
            spread: 0.05,
            patch_jitter: 0.05,
            n_patches: 4,
            domain_shift_seed: 7,
            seed: 1,
            name: "synthetic".into(),
        }
    }
}

const SCENE_WORDS: [&str; 32] = [
    "airport", "bareland", "baseball_field", "beach", "bridge", "center", "church",
    "commercial", "dense_residential", "desert", "farmland", "forest", "freeway",
    "golf_course", "harbor", "industrial", "intersection", "island", "lake", "meadow",
    "mountain", "overpass", "park", "parking_lot", "playground", "pond", "railway_station",
    "resort", "river", "school", "stadium", "storage_tanks",
];

/// Deterministic class names: scene words shuffled by `seed`, numbered
/// beyond the word list.
pub fn synthetic_class_names(classes: usize, seed: u64) -> Vec<String> {
    let mut words: Vec<&str> = SCENE_WORDS.to_vec();
    words.shuffle(&mut stream(seed, 11));
    (0..classes)
        .map(|i| {
            let w = words[i % words.len()];
            if i < words.len() {
                w.to_string()
            } else {
                format!("{w}_{}", i / words.len())
            }
        })
        .collect()
}

/// Unit-norm class centroid: a fixed linear image of the class name's
/// semantic code, so appearance shares latent structure with the name.
pub fn class_centroid(name: &str, d_domain: usize, domain_shift_seed: u64) -> Tensor {
    let basis = Tensor::normal(&[d_domain, SEMANTIC_RANK], 1.0, &mut stream(domain_shift_seed, 12));
    let code = semantic_code(name);
    let v: Vec<f64> = (0..d_domain)
        .map(|i| {
            (0..SEMANTIC_RANK)
                .map(|r| basis.data()[i * SEMANTIC_RANK + r] * code[r])
                .sum()
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    Tensor::from_vec(v.into_iter().map(|x| x / n).collect())
}

/// Seeded clustered features with `n_patches` jittered copies per record.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<EmbeddingDataset> {
    if spec.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.per_class == 0 || spec.d_domain == 0 || spec.n_patches == 0 {
        return Err(Error::Config("per_class, d_domain and n_patches must be positive".into()));
    }
    if !(spec.spread >= 0.0 && spec.patch_jitter >= 0.0) {
        return Err(Error::Config("spread and patch_jitter must be >= 0".into()));
    }
    let names = synthetic_class_names(spec.classes, spec.seed);
    let mut rng = stream(spec.seed, 13);
    let mut records = Vec::with_capacity(spec.classes * spec.per_class);
    for (label, name) in names.iter().enumerate() {
        let centroid = class_centroid(name, spec.d_domain, spec.domain_shift_seed);
        for _ in 0..spec.per_class {
            let feature = jitter(&centroid, spec.spread, &mut rng);
            let mut patches = Vec::with_capacity(spec.n_patches * spec.d_domain);
            for _ in 0..spec.n_patches {
                patches.extend_from_slice(jitter(&feature, spec.patch_jitter, &mut rng).data());
            }
            records.push(Record {
                feature,
                patches: Tensor::new(vec![spec.n_patches, spec.d_domain], patches)?,
                label,
            });
        }
    }
    EmbeddingDataset::new(&spec.name, names, records)
}

fn jitter<R: Rng + ?Sized>(x: &Tensor, std: f64, rng: &mut R) -> Tensor {
    if std == 0.0 {
        return x.clone();
    }
    let noise = Tensor::normal(x.shape(), std, rng);
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect(),
    )
    .expect("same shape")
}

/// Copy of `dataset` with a constant offset added to every feature and patch.
pub fn shifted_copy(dataset: &EmbeddingDataset, offset: f64, name: &str) -> EmbeddingDataset {
    let mut out = dataset.clone();
    out.name = name.to_string();
    for r in &mut out.records {
        r.feature = r.feature.map(|v| v + offset);
        r.patches = r.patches.map(|v| v + offset);
    }
    out
}

/// Domain-generalization variant: per-dimension scaling drawn from
/// `1 ± scale_spread` plus Gaussian feature noise, applied to every record.
pub fn perturbed_copy(
    dataset: &EmbeddingDataset,
    noise_std: f64,
    scale_spread: f64,
    seed: u64,
) -> EmbeddingDataset {
    let mut rng = stream(seed, 14);
    let d = dataset.d_domain();
    let scales: Vec<f64> = (0..d)
        .map(|_| 1.0 + scale_spread * (2.0 * rng.gen::<f64>() - 1.0))
        .collect();
    let mut out = dataset.clone();
    out.name = format!("{}-v2", dataset.name);
    for r in &mut out.records {
        let shift = Tensor::normal(&[d], noise_std, &mut rng);
        let warp = |v: &Tensor| {
            let data = v
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x * scales[i % d] + shift.data()[i % d])
                .collect();
            Tensor::new(v.shape().to_vec(), data).expect("same shape")
        };
        r.feature = warp(&r.feature);
        r.patches = warp(&r.patches);
    }
    out
}

/// Which knob an ablation cell varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AblationAxis {
    Quaternion,
    Branch,
    Depth,
    Noise,
}

/// One trained ablation configuration.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub axis: AblationAxis,
    pub value: String,
    pub config: Config,
    pub report: TrainReport,
    pub hm: f64,
}

/// Line-delimited record emitted per ablation cell.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRecord<'a> {
    pub axis: AblationAxis,
    pub value: &'a str,
    pub config_hash: String,
    pub acc_base: f64,
    pub acc_novel: f64,
    pub hm: f64,
    pub final_loss: f64,
    pub probe_loss: Option<f64>,
}

impl AblationCell {
    pub fn record(&self) -> AblationRecord<'_> {
        AblationRecord {
            axis: self.axis,
            value: &self.value,
            config_hash: format!("{:016x}", self.config.hash()),
            acc_base: self.report.acc_base,
            acc_novel: self.report.acc_novel,
            hm: self.hm,
            final_loss: self.report.final_train_loss,
            probe_loss: self.report.probe_loss,
        }
    }

    pub fn json_line(&self) -> String {
        serde_json::to_string(&self.record()).expect("plain record serializes")
    }
}

/// The one-axis-at-a-time grid: QN {on, off}, branch {PL, PV, PL+PV},
/// depth {3, 6, 9, 12}, noise {off, LB, VB}. Depths beyond `m` are skipped.
pub fn ablation_grid(base: &Config) -> Vec<(AblationAxis, String, Config)> {
    let mut grid = Vec::new();
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c.train);
        c
    };
    for on in [true, false] {
        grid.push((
            AblationAxis::Quaternion,
            if on { "on" } else { "off" }.to_string(),
            with(&|t| {
                t.use_quaternion = on;
                if !on {
                    t.quat_mode = Default::default();
                }
            }),
        ));
    }
    for mode in [BranchMode::Language, BranchMode::Vision, BranchMode::Both] {
        grid.push((AblationAxis::Branch, mode.to_string(), with(&|t| t.branch_mode = mode)));
    }
    for k in [3, 6, 9, 12] {
        if k <= base.dims.m {
            grid.push((AblationAxis::Depth, k.to_string(), with(&|t| t.k = k)));
        }
    }
    for noise in [NoiseMode::Off, NoiseMode::Language, NoiseMode::Vision] {
        grid.push((AblationAxis::Noise, noise.to_string(), with(&|t| t.noise_mode = noise)));
    }
    grid
}

/// Train every grid cell from a fresh prompt state with the base seed.
pub fn ablation_suite(base: &Config, dataset: &EmbeddingDataset) -> Result<Vec<AblationCell>> {
    ablation_suite_with(base, dataset, |_| {})
}

/// [`ablation_suite`] with a callback after each finished cell.
pub fn ablation_suite_with(
    base: &Config,
    dataset: &EmbeddingDataset,
    mut on_cell: impl FnMut(&AblationCell),
) -> Result<Vec<AblationCell>> {
    base.validate()?;
    let backbone = FrozenBackbone::new(&base.dims, base.train.encoder_seed)?;
    let mut cells = Vec::new();
    for (axis, value, config) in ablation_grid(base) {
        let mut state = init_prompt_state(&config.train, &config.dims);
        let report = train(&config.train, &config.dims, dataset, &backbone, &mut state)?;
        let cell = AblationCell {
            axis,
            value,
            hm: harmonic_mean(report.acc_base, report.acc_novel),
            config,
            report,
        };
        on_cell(&cell);
        cells.push(cell);
    }
    Ok(cells)
}

/// Dims check shared by protocols that load a model against a dataset.
pub fn check_compatible(dims: &ModelDims, dataset: &EmbeddingDataset) -> Result<()> {
    if dataset.d_domain() != dims.d_domain {
        return Err(Error::Data(format!(
            "dataset `{}` has {}-d features, model expects {}",
            dataset.name,
            dataset.d_domain(),
            dims.d_domain
        )));
    }
    Ok(())
}
