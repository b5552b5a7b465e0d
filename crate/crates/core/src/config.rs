//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Every key is optional; unknown keys are rejected.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::encoders::Fnv;
use crate::error::{Error, Result};
use crate::learn::{ModelDims, TrainConfig};

/// Training recipe plus model dimensions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub dims: ModelDims,
}

/// Every accepted key, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "lr",
    "batch",
    "shots",
    "epochs",
    "k",
    "tau",
    "seed",
    "encoder_seed",
    "noise_mode",
    "noise_scale",
    "quat_mode",
    "use_quaternion",
    "branch_mode",
    "eq9_literal",
    "momentum",
    "weight_decay",
    "max_steps",
    "runs",
    "m",
    "d_model",
    "d_joint",
    "n_ctx",
    "n_p",
    "d_domain",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value `{value}` for `{key}`: expected a boolean"))),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(key.trim(), value.trim())
                .map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                    other => other,
                })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Config::parse(&text)
    }

    /// Assign one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.dims;
        match key {
            "lr" => t.lr = parse(key, value)?,
            "batch" => t.batch = parse(key, value)?,
            "shots" => t.shots = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "k" => t.k = parse(key, value)?,
            "tau" => t.tau = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "encoder_seed" => t.encoder_seed = parse(key, value)?,
            "noise_mode" => t.noise_mode = value.parse()?,
            "noise_scale" => t.noise_scale = value.parse()?,
            "quat_mode" => t.quat_mode = value.parse()?,
            "use_quaternion" => t.use_quaternion = parse_bool(key, value)?,
            "branch_mode" => t.branch_mode = value.parse()?,
            "eq9_literal" => t.eq9_literal = parse_bool(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "runs" => t.runs = parse(key, value)?,
            "m" => d.m = parse(key, value)?,
            "d_model" => d.d_model = parse(key, value)?,
            "d_joint" => d.d_joint = parse(key, value)?,
            "n_ctx" => d.n_ctx = parse(key, value)?,
            "n_p" => d.n_p = parse(key, value)?,
            "d_domain" => d.d_domain = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.m == 0 {
            return Err(Error::Config("m must be >= 1".into()));
        }
        self.train.validate(&self.dims)
    }

    /// Canonical text form; `parse(to_text())` returns an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let d = &self.dims;
        let values: [String; 24] = [
            format!("{:?}", t.lr),
            t.batch.to_string(),
            t.shots.to_string(),
            t.epochs.to_string(),
            t.k.to_string(),
            format!("{:?}", t.tau),
            t.seed.to_string(),
            t.encoder_seed.to_string(),
            t.noise_mode.to_string(),
            t.noise_scale.to_string(),
            t.quat_mode.to_string(),
            t.use_quaternion.to_string(),
            t.branch_mode.to_string(),
            t.eq9_literal.to_string(),
            format!("{:?}", t.momentum),
            format!("{:?}", t.weight_decay),
            t.max_steps.to_string(),
            t.runs.to_string(),
            d.m.to_string(),
            d.d_model.to_string(),
            d.d_joint.to_string(),
            d.n_ctx.to_string(),
            d.n_p.to_string(),
            d.d_domain.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// FNV-1a of the canonical text.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.bytes(self.to_text().as_bytes());
        h.finish()
    }
}
