//! `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; every key must be known.
//! [`render_config`] writes a file that parses back to the same values.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::model::{Head, LatentStdHead, ModelConfig, ObsVariance};
use crate::objectives::SiviPrior;
use crate::tensor::PoolMode;
use crate::training::{NpDivergence, ObjectiveKind, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: cannot parse `{value}` for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: Option<u64>,
    pub epoch: Option<usize>,
}

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_choice<T: Copy>(v: &str, options: &[(&str, T)]) -> Result<T, String> {
    options.iter().find(|(n, _)| *n == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(vec![]);
    }
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

const POOLING: &[(&str, PoolMode)] = &[("max", PoolMode::Max), ("mean", PoolMode::Mean)];
const HEAD: &[(&str, Head)] = &[("plain", Head::Plain), ("sivi", Head::Sivi)];
const OBS: &[(&str, ObsVariance)] = &[("fixed", ObsVariance::Fixed), ("learned", ObsVariance::Learned)];
const LATENT: &[(&str, LatentStdHead)] = &[("narrow", LatentStdHead::Narrow), ("wide", LatentStdHead::Wide)];
const OBJECTIVE: &[(&str, ObjectiveKind)] = &[
    ("np", ObjectiveKind::Np),
    ("elbo", ObjectiveKind::Elbo),
    ("sivi", ObjectiveKind::Sivi),
];
const DIVERGENCE: &[(&str, NpDivergence)] =
    &[("analytic", NpDivergence::Analytic), ("sampled", NpDivergence::Sampled)];
const PRIOR: &[(&str, SiviPrior)] = &[("standard", SiviPrior::Standard), ("context", SiviPrior::Context)];

fn name_of<T: PartialEq>(options: &[(&'static str, T)], v: &T) -> &'static str {
    options.iter().find(|(_, t)| t == v).map(|(n, _)| *n).expect("every variant is named")
}

impl RunConfig {
    /// Sets one key. `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool, String> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "d_x" => m.d_x = parse_num(v)?,
            "d_y" => m.d_y = parse_num(v)?,
            "d_h" => m.d_h = parse_num(v)?,
            "d_s" => m.d_s = parse_num(v)?,
            "d_z" => m.d_z = parse_num(v)?,
            "d_psi" => m.d_psi = parse_num(v)?,
            "d_eps" => m.d_eps = parse_num(v)?,
            "pooling" => m.pooling = parse_choice(v, POOLING)?,
            "head" => m.head = parse_choice(v, HEAD)?,
            "obs_variance" => m.obs_variance = parse_choice(v, OBS)?,
            "obs_std" => m.obs_std = parse_num(v)?,
            "latent_std" => m.latent_std = parse_choice(v, LATENT)?,
            "objective" => t.objective = parse_choice(v, OBJECTIVE)?,
            "np_divergence" => t.np_divergence = parse_choice(v, DIVERGENCE)?,
            "sivi_prior" => t.sivi_prior = parse_choice(v, PRIOR)?,
            "sivi_k" => t.sivi_k = parse_num(v)?,
            "z_samples" => t.z_samples = parse_num(v)?,
            "batch_size" => t.batch_size = parse_num(v)?,
            "epochs" => t.epochs = parse_num(v)?,
            "lr" => t.lr = parse_num(v)?,
            "schedule" => t.schedule = parse_bool(v)?,
            "milestones" => t.milestones = parse_list(v)?,
            "lr_factor" => t.lr_factor = parse_num(v)?,
            "n_min" => t.n_range.0 = parse_num(v)?,
            "n_max" => t.n_range.1 = parse_num(v)?,
            "mprime_min" => t.mprime_range.0 = parse_num(v)?,
            "mprime_max" => t.mprime_range.1 = parse_num(v)?,
            "beta1" => t.beta1 = parse_num(v)?,
            "beta2" => t.beta2 = parse_num(v)?,
            "adam_eps" => t.adam_eps = parse_num(v)?,
            "grad_clip" => {
                t.grad_clip = match v {
                    "none" | "off" => None,
                    _ => Some(parse_num(v)?),
                }
            }
            "data_dir" => t.data_dir = PathBuf::from(v),
            "train_images" => t.train_images = parse_num(v)?,
            "test_images" => t.test_images = parse_num(v)?,
            "checkpoint_every" => t.checkpoint_every = parse_num(v)?,
            "seed" => self.seed = Some(parse_num(v)?),
            "epoch" => self.epoch = Some(parse_num(v)?),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Applies one `key=value` override. Call [`RunConfig::validate`] once
    /// all overrides are in, since some keys constrain each other.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        apply_line(self, 0, assignment)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::OutOfRange(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::OutOfRange(e.to_string()))?;
        match (self.train.objective, self.model.head) {
            (ObjectiveKind::Np, Head::Sivi) => {
                return Err(ConfigError::OutOfRange("objective np needs head = plain".into()))
            }
            (ObjectiveKind::Sivi, Head::Plain) => {
                return Err(ConfigError::OutOfRange("objective sivi needs head = sivi".into()))
            }
            _ => {}
        }
        if self.model.d_x != 2 || self.model.d_y != 1 {
            return Err(ConfigError::OutOfRange(
                "image tasks need d_x = 2 and d_y = 1".into(),
            ));
        }
        Ok(())
    }
}

fn apply_line(cfg: &mut RunConfig, line: usize, text: &str) -> Result<(), ConfigError> {
    let (key, value) = text.split_once('=').ok_or_else(|| ConfigError::Syntax {
        line,
        text: text.to_string(),
    })?;
    let (key, value) = (key.trim(), value.trim());
    if key.is_empty() {
        return Err(ConfigError::Syntax {
            line,
            text: text.to_string(),
        });
    }
    match cfg.set(key, value) {
        Ok(true) => Ok(()),
        Ok(false) => Err(ConfigError::UnknownKey {
            line,
            key: key.to_string(),
        }),
        Err(reason) => Err(ConfigError::BadValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
            reason,
        }),
    }
}

/// Parses config text on top of the defaults.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        apply_line(&mut cfg, i + 1, line)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

/// Every key with its current value.
pub fn render_config(cfg: &RunConfig) -> String {
    let (m, t) = (&cfg.model, &cfg.train);
    let milestones: Vec<String> = t.milestones.iter().map(|v| v.to_string()).collect();
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    put("d_x", m.d_x.to_string());
    put("d_y", m.d_y.to_string());
    put("d_h", m.d_h.to_string());
    put("d_s", m.d_s.to_string());
    put("d_z", m.d_z.to_string());
    put("d_psi", m.d_psi.to_string());
    put("d_eps", m.d_eps.to_string());
    put("pooling", name_of(POOLING, &m.pooling).into());
    put("head", name_of(HEAD, &m.head).into());
    put("obs_variance", name_of(OBS, &m.obs_variance).into());
    put("obs_std", format!("{:?}", m.obs_std));
    put("latent_std", name_of(LATENT, &m.latent_std).into());
    put("objective", name_of(OBJECTIVE, &t.objective).into());
    put("np_divergence", name_of(DIVERGENCE, &t.np_divergence).into());
    put("sivi_prior", name_of(PRIOR, &t.sivi_prior).into());
    put("sivi_k", t.sivi_k.to_string());
    put("z_samples", t.z_samples.to_string());
    put("batch_size", t.batch_size.to_string());
    put("epochs", t.epochs.to_string());
    put("lr", format!("{:?}", t.lr));
    put("schedule", t.schedule.to_string());
    put("milestones", milestones.join(","));
    put("lr_factor", format!("{:?}", t.lr_factor));
    put("n_min", t.n_range.0.to_string());
    put("n_max", t.n_range.1.to_string());
    put("mprime_min", t.mprime_range.0.to_string());
    put("mprime_max", t.mprime_range.1.to_string());
    put("beta1", format!("{:?}", t.beta1));
    put("beta2", format!("{:?}", t.beta2));
    put("adam_eps", format!("{:?}", t.adam_eps));
    put(
        "grad_clip",
        t.grad_clip.map_or("none".into(), |c| format!("{c:?}")),
    );
    put("data_dir", t.data_dir.display().to_string());
    put("train_images", t.train_images.to_string());
    put("test_images", t.test_images.to_string());
    put("checkpoint_every", t.checkpoint_every.to_string());
    if let Some(s) = cfg.seed {
        put("seed", s.to_string());
    }
    if let Some(e) = cfg.epoch {
        put("epoch", e.to_string());
    }
    out
}
