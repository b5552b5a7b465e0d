//! Command-line front end: data generation, training, evaluation and
//! gradient checking.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::adapter::{NoiseMode, ParamGroup, PromptVars};
use crate::config::Config;
use crate::encoders::Fnv;
use crate::error::{Error, Result};
use crate::eval::{
    ablation_suite_with, base_to_novel, check_compatible, cross_dataset_eval,
    generate_synthetic_dataset, harmonic_mean, perturbed_copy, EmbeddingDataset, SyntheticSpec,
};
use crate::format::{self, Section};
use crate::grad::{analytic_gradients, compare_with_finite_differences, Tape, Tensor, Var};
use crate::learn::{
    class_token_table, gather_patches, init_prompt_state, score_batch, train, ForwardSettings,
    FrozenBackbone, InjectedNoise, ModelDims, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "dple", version, about = "Quaternion domain prompt learning on frozen toy encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic feature dataset.
    GenData(GenDataArgs),
    /// Train prompts on the base classes of a dataset.
    Train(TrainArgs),
    /// Evaluate a trained model.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a small pipeline.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 12)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    /// Domain feature width.
    #[arg(long, default_value_t = 48)]
    pub dim: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub spread: Option<f64>,
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub domain_shift_seed: Option<u64>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override `key=value` after the config file is read.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    BaseNovel,
    Cross,
    DomainGen,
    Ablate,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Protocol::BaseNovel)]
    pub protocol: Protocol,
    /// Target datasets for `cross` and `domain-gen`.
    #[arg(long = "target")]
    pub targets: Vec<PathBuf>,
    /// Where `ablate` writes its line-delimited records (stdout when omitted).
    #[arg(long)]
    pub jsonl: Option<PathBuf>,
    /// Seed of the domain-generalization perturbation.
    #[arg(long, default_value_t = 99)]
    pub shift_seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    /// Perturb the analytic gradients before comparing (self-test of the checker).
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

/// Run a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out).map(|_| ()),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    if a.classes < 2 {
        return Err(Error::Usage(format!("--classes must be at least 2, got {}", a.classes)));
    }
    let defaults = SyntheticSpec::default();
    let spec = SyntheticSpec {
        classes: a.classes,
        per_class: a.per_class,
        d_domain: a.dim,
        spread: a.spread.unwrap_or(defaults.spread),
        n_patches: a.patches.unwrap_or(defaults.n_patches),
        domain_shift_seed: a.domain_shift_seed.unwrap_or(defaults.domain_shift_seed),
        seed: a.seed,
        name: a.name.clone().unwrap_or(defaults.name),
        ..defaults
    };
    let ds = generate_synthetic_dataset(&spec).map_err(|e| match e {
        Error::Config(m) => Error::Usage(m),
        other => other,
    })?;
    format::save_dataset(&a.out, &ds)?;
    writeln!(
        out,
        "wrote {} records, {} classes ({} base / {} novel), d_domain {} to {}",
        ds.records.len(),
        ds.class_names.len(),
        ds.base.len(),
        ds.novel.len(),
        ds.d_domain(),
        a.out.display()
    )?;
    Ok(())
}

/// Fingerprint of a dataset's contents, used to tell whether stored training
/// indices refer to the dataset being evaluated.
pub fn dataset_fingerprint(ds: &EmbeddingDataset) -> u64 {
    let mut h = Fnv::new();
    h.bytes(ds.name.as_bytes());
    for r in &ds.records {
        h.tensor(&r.patches);
        h.bytes(&(r.label as u64).to_le_bytes());
    }
    h.finish()
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut c = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        c.set(k.trim(), v.trim())?;
    }
    c.validate()?;
    Ok(c)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let config = load_config(a.config.as_deref(), &a.overrides)?;
    let data = format::load_dataset(&a.data)?;
    check_compatible(&config.dims, &data)?;
    let backbone = FrozenBackbone::new(&config.dims, config.train.encoder_seed)?;

    let mut saved = None;
    let mut accs = Vec::new();
    for run in 0..config.train.runs {
        let mut run_cfg = config.clone();
        run_cfg.train.seed = config.train.seed.wrapping_add(run as u64);
        let mut state = init_prompt_state(&run_cfg.train, &run_cfg.dims);
        let report = train(&run_cfg.train, &run_cfg.dims, &data, &backbone, &mut state)?;
        let per_epoch = report.steps.div_ceil(config.train.epochs.max(1)).max(1);
        writeln!(out, "run {run} (seed {})", run_cfg.train.seed)?;
        for (e, chunk) in report.losses.chunks(per_epoch).enumerate() {
            let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
            writeln!(out, "  epoch {:>3}  mean batch loss {:.6}", e + 1, mean)?;
        }
        if report.trainable_checksum_before == report.trainable_checksum_after {
            writeln!(
                out,
                "warning: parameters never moved, loss stayed at {:.6} (lr = {})",
                report.final_train_loss, run_cfg.train.lr
            )?;
        }
        writeln!(
            out,
            "  train loss {:.6} -> {:.6}  base {:.2}  novel {:.2}  HM {:.2}  steps {}  {:.2}s",
            report.initial_train_loss,
            report.final_train_loss,
            100.0 * report.acc_base,
            100.0 * report.acc_novel,
            100.0 * harmonic_mean(report.acc_base, report.acc_novel),
            report.steps,
            report.wall_seconds
        )?;
        writeln!(
            out,
            "  frozen checksum {:016x} -> {:016x}  trainable {:016x} -> {:016x}",
            report.frozen_checksum_before,
            report.frozen_checksum_after,
            report.trainable_checksum_before,
            report.trainable_checksum_after
        )?;
        if report.frozen_checksum_before != report.frozen_checksum_after {
            return Err(Error::Numeric("frozen encoder weights changed during training".into()));
        }
        accs.push((report.acc_base, report.acc_novel));
        if saved.is_none() {
            saved = Some((run_cfg, state, report.train_indices));
        }
    }
    if accs.len() > 1 {
        let n = accs.len() as f64;
        let b = accs.iter().map(|a| a.0).sum::<f64>() / n;
        let v = accs.iter().map(|a| a.1).sum::<f64>() / n;
        writeln!(
            out,
            "mean over {} runs: base {:.2}  novel {:.2}  HM {:.2}",
            accs.len(),
            100.0 * b,
            100.0 * v,
            100.0 * harmonic_mean(b, v)
        )?;
    }
    let (cfg, state, idx) = saved.expect("runs >= 1");
    let mut sections = format::model_sections(&cfg, &state);
    sections.push(Section::new(
        "train_indices",
        Tensor::from_vec(idx.iter().map(|&i| i as f64).collect()),
    ));
    sections.push(Section::new(
        "train_data",
        format::text_tensor(&format!("{:016x}", dataset_fingerprint(&data))),
    ));
    format::write_file(&a.out, &sections)?;
    writeln!(out, "saved model to {}", a.out.display())?;
    Ok(())
}

fn load_datasets(paths: &[PathBuf]) -> Result<Vec<EmbeddingDataset>> {
    paths.iter().map(|p| format::load_dataset(p)).collect()
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let sections = format::read_file(&a.model)?;
    let (config, state) = format::model_from_sections(&sections)?;
    let data = format::load_dataset(&a.data)?;
    check_compatible(&config.dims, &data)?;
    let backbone = FrozenBackbone::new(&config.dims, config.train.encoder_seed)?;
    let settings = ForwardSettings::from(&config.train);

    match a.protocol {
        Protocol::BaseNovel => {
            let same_data = sections
                .iter()
                .find(|s| s.name == "train_data")
                .and_then(|s| format::tensor_text(&s.tensor).ok())
                .is_some_and(|f| f == format!("{:016x}", dataset_fingerprint(&data)));
            let exclude: Vec<usize> = match sections.iter().find(|s| s.name == "train_indices") {
                Some(s) if same_data => s.tensor.data().iter().map(|&v| v as usize).collect(),
                _ => Vec::new(),
            };
            let report = base_to_novel(&backbone, &state, &config, &data, &exclude)?;
            writeln!(out, "{report}")?;
        }
        Protocol::Cross => {
            let targets = load_datasets(&a.targets)?;
            let table = cross_dataset_eval(&backbone, &state, settings, &data.name, &targets)?;
            writeln!(out, "source {}", data.name)?;
            for (name, acc) in &table {
                writeln!(out, "{:<24} {:6.2}", name, 100.0 * acc)?;
            }
        }
        Protocol::DomainGen => {
            let mut targets = vec![data.clone()];
            targets.extend(load_datasets(&a.targets)?);
            let shifted: Vec<EmbeddingDataset> = targets
                .iter()
                .map(|t| perturbed_copy(t, 0.02, 0.2, a.shift_seed))
                .collect();
            let clean = cross_dataset_eval(&backbone, &state, settings, &data.name, &targets)?;
            let moved = cross_dataset_eval(&backbone, &state, settings, &data.name, &shifted)?;
            writeln!(out, "{:<24} {:>8} {:>8}", "dataset", "clean", "v2")?;
            for ((name, c), (_, m)) in clean.iter().zip(&moved) {
                writeln!(out, "{:<24} {:8.2} {:8.2}", name, 100.0 * c, 100.0 * m)?;
            }
        }
        Protocol::Ablate => {
            let mut sink: Option<std::fs::File> = match &a.jsonl {
                Some(p) => Some(std::fs::File::create(p)?),
                None => None,
            };
            writeln!(out, "{:<10} {:<8} {:>7} {:>7} {:>7} {:>10}", "axis", "value", "base", "novel", "HM", "loss@50")?;
            let mut lines = Vec::new();
            let cells = ablation_suite_with(&config, &data, |cell| {
                lines.push(cell.json_line());
            })?;
            for cell in &cells {
                writeln!(
                    out,
                    "{:<10} {:<8} {:7.2} {:7.2} {:7.2} {:>10}",
                    format!("{:?}", cell.axis).to_lowercase(),
                    cell.value,
                    100.0 * cell.report.acc_base,
                    100.0 * cell.report.acc_novel,
                    100.0 * cell.hm,
                    cell.report
                        .probe_loss
                        .map_or("-".to_string(), |l| format!("{l:.4}"))
                )?;
            }
            for line in lines {
                match sink.as_mut() {
                    Some(f) => writeln!(f, "{line}")?,
                    None => writeln!(out, "{line}")?,
                }
            }
        }
    }
    Ok(())
}

/// Per-group outcome of [`cmd_gradcheck`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOutcome {
    /// Max relative error per group label, in a fixed order.
    pub groups: Vec<(&'static str, f64)>,
    pub max_rel_error: f64,
    /// Parameter name, coordinate, analytic, numeric.
    pub worst: Option<(String, usize, f64, f64)>,
    pub passed: bool,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Small full pipeline: m = 3, d_model = 16, 4 classes, noise off.
pub fn gradcheck_pipeline(seed: u64) -> Result<(Config, EmbeddingDataset)> {
    let mut config = Config {
        dims: ModelDims {
            m: 3,
            d_model: 16,
            d_joint: 8,
            n_ctx: 2,
            n_p: 2,
            d_domain: 8,
        },
        train: TrainConfig {
            k: 2,
            noise_mode: NoiseMode::Off,
            seed,
            encoder_seed: seed.wrapping_add(17),
            ..TrainConfig::default()
        },
    };
    config.train.shots = 1;
    let spec = SyntheticSpec {
        classes: 4,
        per_class: 1,
        d_domain: 8,
        n_patches: 3,
        spread: 0.1,
        seed,
        name: "gradcheck".into(),
        ..SyntheticSpec::default()
    };
    Ok((config, generate_synthetic_dataset(&spec)?))
}

pub fn gradient_check(seed: u64, step: f64, corrupt: bool) -> Result<GradcheckOutcome> {
    let (config, data) = gradcheck_pipeline(seed)?;
    let backbone = FrozenBackbone::new(&config.dims, config.train.encoder_seed)?;
    let mut state = init_prompt_state(&config.train, &config.dims);
    // move the small-init prompts off the relu kinks' neighbourhood
    let mut rng = crate::learn::stream(seed, 40);
    for t in state.tensors_mut() {
        let n = Tensor::normal(t.shape(), 0.3, &mut rng);
        t.data_mut().iter_mut().zip(n.data()).for_each(|(a, b)| *a += b);
    }
    let settings = ForwardSettings::from(&config.train);
    let classes = data.all_classes();
    let records: Vec<usize> = (0..data.records.len()).collect();
    let labels: Vec<usize> = records.iter().map(|&i| data.records[i].label).collect();
    let names: Vec<&str> = classes.iter().map(|&c| data.class_names[c].as_str()).collect();
    let table = class_token_table(&names, config.dims.d_model);
    let patches = gather_patches(&data, &records)?;

    let named = state.named_tensors();
    let params: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let loss_fn = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let pv = PromptVars::from_vars(&state, vars)?;
        let s = score_batch(tape, &backbone, &pv, settings, &patches, &table, &InjectedNoise::default())?;
        tape.softmax_ce(s.logits, labels.clone())
    };
    let mut analytic = analytic_gradients(&loss_fn, &params)?;
    if corrupt {
        for g in &mut analytic {
            g.data_mut().iter_mut().for_each(|v| *v *= 1.5);
        }
    }
    let report = compare_with_finite_differences(&loss_fn, &params, &analytic, step)?;

    let order = [
        ParamGroup::Context,
        ParamGroup::LanguagePrompts,
        ParamGroup::LanguageFusion,
        ParamGroup::VisionFusion,
        ParamGroup::Projector,
    ];
    let groups = order
        .iter()
        .map(|g| {
            let err = names
                .iter()
                .zip(&report.per_param)
                .filter(|(n, _)| ParamGroup::of(n) == *g)
                .map(|(_, e)| *e)
                .fold(0.0, f64::max);
            (g.label(), err)
        })
        .collect();
    Ok(GradcheckOutcome {
        groups,
        max_rel_error: report.max_rel_error,
        worst: report
            .worst
            .map(|(p, c, a, n)| (names[p].clone(), c, a, n)),
        passed: report.max_rel_error <= GRADCHECK_TOLERANCE,
    })
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<GradcheckOutcome> {
    let outcome = gradient_check(a.seed, a.step, a.corrupt)?;
    for (label, err) in &outcome.groups {
        writeln!(out, "{:<10} max rel err {:.3e}", label, err)?;
    }
    writeln!(out, "overall    max rel err {:.3e}", outcome.max_rel_error)?;
    if outcome.passed {
        writeln!(out, "PASS (tolerance {GRADCHECK_TOLERANCE:e})")?;
        Ok(outcome)
    } else {
        let detail = outcome
            .worst
            .as_ref()
            .map(|(n, c, an, nu)| format!("worst at {n}[{c}]: analytic {an:.6e}, numeric {nu:.6e}"))
            .unwrap_or_default();
        writeln!(out, "FAIL {detail}")?;
        Err(Error::Numeric(format!(
            "gradient check failed: max rel err {:.3e} > {GRADCHECK_TOLERANCE:e}; {detail}",
            outcome.max_rel_error
        )))
    }
}
