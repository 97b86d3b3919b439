//! Experiment configuration, sweeps, and on-disk outputs.
//!
//! A config is a TOML document. Every key is optional; `validate_config`
//! fills defaults and checks ranges. Per-trial generator seeds are
//! `seed + trial_index`. Each trial draws its prompt from that generator and
//! then keeps using it for decoding.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{
    build_neighbor_index, replace_with_uniform_neighbor, synthesize_codebook, Codebook, CodebookError, NeighborIndex,
    ProximityMeasureKind,
};
use crate::decoding::{decode_with_rng, DecodeConfig, DecodeError, DecodeMode, DecodeTrace};
use crate::metrics::{build_report, MetricsError, StatsReport};
use crate::models::{synthesize_pair, AmbiguityProfile, AutoregressiveModel, DrafterCorruption, ModelError, TableModel};
use crate::prob::{rng_from_seed, sample, tvd, DistanceMetricKind, TokenId};
use crate::proximity::DivergenceBound;

pub const DEFAULT_K_GRID: [usize; 3] = [100, 300, 1000];
pub const DEFAULT_DELTA_GRID: [f64; 4] = [0.05, 0.1, 0.2, 0.4];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("config value out of range for `{field}`: {message}")]
    Range { field: String, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("codebook: {0}")]
    Codebook(#[from] CodebookError),
    #[error("decode: {0}")]
    Decode(#[from] DecodeError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// 2 for configuration problems, 3 for I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Io { .. } | HarnessError::Csv(_) => 3,
            HarnessError::Model(ModelError::Io(_)) | HarnessError::Codebook(CodebookError::Io(_)) => 3,
            _ => 2,
        }
    }
}

fn range(field: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Range {
        field: field.to_string(),
        message: message.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---- raw document ----

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<DecodeMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trials: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    min_target_len: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt_len: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metric: Option<DistanceMetricKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    write_traces: Option<bool>,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    codebook: RawCodebook,
    #[serde(default)]
    proximity: RawProximity,
    #[serde(default)]
    sweep: RawSweep,
    #[serde(default)]
    sampling: RawSampling,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vocab: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    order: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    concentration: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    drafter_noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    corruption: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    radius: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    drafter: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCodebook {
    #[serde(skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dim: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    correlated: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProximity {
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<i64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<Vec<i64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tau: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<Vec<i64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSampling {
    #[serde(skip_serializing_if = "Option::is_none")]
    top_k: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_p: Option<f64>,
}

// ---- resolved config ----

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Synthesize {
        vocab: usize,
        order: usize,
        profile: AmbiguityProfile,
        drafter_noise: f64,
        corruption: DrafterCorruption,
    },
    Load { target: PathBuf, drafter: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub enum CodebookSource {
    Synthesize { dim: usize, seed: u64, correlated: bool },
    Load { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    /// `None` selects the default grid scaled to the vocabulary.
    pub k: Option<Vec<usize>>,
    pub delta: Vec<f64>,
    pub tau: Vec<f64>,
    pub gamma: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model_source: ModelSource,
    pub codebook_source: CodebookSource,
    pub sweep: Sweep,
    pub metric: DistanceMetricKind,
    pub proximity: ProximityMeasureKind,
    pub mode: DecodeMode,
    pub trials: usize,
    pub min_target_len: usize,
    pub prompt_len: usize,
    /// `None` means the full vocabulary.
    pub top_k: Option<usize>,
    pub top_p: f64,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub write_traces: bool,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn positive(field: &str, v: i64) -> Result<usize, HarnessError> {
    if v < 1 {
        return Err(range(field, format!("must be >= 1, got {v}")));
    }
    Ok(v as usize)
}

fn non_negative(field: &str, v: i64) -> Result<u64, HarnessError> {
    if v < 0 {
        return Err(range(field, format!("must be >= 0, got {v}")));
    }
    Ok(v as u64)
}

fn non_empty<T>(field: &str, v: Vec<T>) -> Result<Vec<T>, HarnessError> {
    if v.is_empty() {
        return Err(range(field, "list must not be empty"));
    }
    Ok(v)
}

fn only_for(field: &str, present: bool, source: &str) -> Result<(), HarnessError> {
    if present {
        return Err(range(field, format!("only valid with source = \"{source}\"")));
    }
    Ok(())
}

/// Command-line values that shadow the document's top-level keys. They are
/// applied before defaults, so values derived from `seed` follow it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub mode: Option<DecodeMode>,
}

/// Parses and checks a config document, filling every default.
pub fn validate_config(raw_text: &str) -> Result<ExperimentConfig, HarnessError> {
    validate_config_with(raw_text, &Overrides::default())
}

pub fn validate_config_with(raw_text: &str, overrides: &Overrides) -> Result<ExperimentConfig, HarnessError> {
    let mut raw: RawConfig = toml::from_str(raw_text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(raw_text, s.start));
        HarnessError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    if let Some(seed) = overrides.seed {
        raw.seed = Some(i64::try_from(seed).map_err(|_| range("seed", "must fit in a signed 64-bit integer"))?);
    }
    if let Some(dir) = &overrides.out_dir {
        raw.out_dir = Some(dir.clone());
    }
    if let Some(mode) = overrides.mode {
        raw.mode = Some(mode);
    }
    resolve(raw)
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    load_config_with(path, &Overrides::default())
}

pub fn load_config_with(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    validate_config_with(&text, overrides)
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig, HarnessError> {
    let seed = non_negative("seed", raw.seed.unwrap_or(0))?;
    let metric = raw.metric.unwrap_or(DistanceMetricKind::Tvd);

    let m = raw.model;
    let model_source = match m.source.as_deref().unwrap_or("synthesize") {
        "synthesize" => {
            only_for("model.target", m.target.is_some(), "load")?;
            only_for("model.drafter", m.drafter.is_some(), "load")?;
            let vocab = positive("model.vocab", m.vocab.unwrap_or(256))?;
            if vocab < 2 {
                return Err(range("model.vocab", "must be >= 2"));
            }
            let order = non_negative("model.order", m.order.unwrap_or(1))? as usize;
            if order > crate::models::MAX_ORDER {
                return Err(range("model.order", format!("must be <= {}", crate::models::MAX_ORDER)));
            }
            let concentration = m.concentration.unwrap_or(0.5);
            if !(concentration > 0.0 && concentration.is_finite()) {
                return Err(range("model.concentration", "must be finite and > 0"));
            }
            let drafter_noise = m.drafter_noise.unwrap_or(0.3);
            if !(0.0..=1.0).contains(&drafter_noise) {
                return Err(range("model.drafter_noise", "must lie in [0, 1]"));
            }
            let corruption = match m.corruption.as_deref().unwrap_or("uniform") {
                "uniform" => {
                    if m.radius.is_some() {
                        return Err(range("model.radius", "only valid with corruption = \"latent_local\""));
                    }
                    DrafterCorruption::Uniform
                }
                "latent_local" => DrafterCorruption::LatentLocal {
                    radius: positive("model.radius", m.radius.unwrap_or(8))?,
                },
                other => {
                    return Err(range(
                        "model.corruption",
                        format!("expected \"uniform\" or \"latent_local\", got {other:?}"),
                    ))
                }
            };
            let model_seed = non_negative("model.seed", m.seed.unwrap_or(seed as i64))?;
            ModelSource::Synthesize {
                vocab,
                order,
                profile: AmbiguityProfile {
                    concentration,
                    seed: model_seed,
                },
                drafter_noise,
                corruption,
            }
        }
        "load" => {
            for (field, present) in [
                ("model.vocab", m.vocab.is_some()),
                ("model.order", m.order.is_some()),
                ("model.concentration", m.concentration.is_some()),
                ("model.drafter_noise", m.drafter_noise.is_some()),
                ("model.seed", m.seed.is_some()),
                ("model.corruption", m.corruption.is_some()),
                ("model.radius", m.radius.is_some()),
            ] {
                only_for(field, present, "synthesize")?;
            }
            ModelSource::Load {
                target: m.target.ok_or_else(|| range("model.target", "required with source = \"load\""))?,
                drafter: m.drafter.ok_or_else(|| range("model.drafter", "required with source = \"load\""))?,
            }
        }
        other => {
            return Err(range(
                "model.source",
                format!("expected \"synthesize\" or \"load\", got {other:?}"),
            ))
        }
    };

    let c = raw.codebook;
    let codebook_source = match c.source.as_deref().unwrap_or("synthesize") {
        "synthesize" => {
            only_for("codebook.path", c.path.is_some(), "load")?;
            CodebookSource::Synthesize {
                dim: positive("codebook.dim", c.dim.unwrap_or(8))?,
                seed: non_negative("codebook.seed", c.seed.unwrap_or(seed as i64))?,
                correlated: c.correlated.unwrap_or(true),
            }
        }
        "load" => {
            only_for("codebook.dim", c.dim.is_some(), "synthesize")?;
            only_for("codebook.seed", c.seed.is_some(), "synthesize")?;
            only_for("codebook.correlated", c.correlated.is_some(), "synthesize")?;
            CodebookSource::Load {
                path: c.path.ok_or_else(|| range("codebook.path", "required with source = \"load\""))?,
            }
        }
        other => {
            return Err(range(
                "codebook.source",
                format!("expected \"synthesize\" or \"load\", got {other:?}"),
            ))
        }
    };

    let p = raw.proximity;
    let proximity = match p.kind.as_deref().unwrap_or("l2") {
        "l2" | "cosine" if p.seed.is_some() => {
            return Err(range("proximity.seed", "only valid with kind = \"random\""));
        }
        "l2" => ProximityMeasureKind::L2,
        "cosine" => ProximityMeasureKind::Cosine,
        "random" => ProximityMeasureKind::Random {
            seed: non_negative("proximity.seed", p.seed.unwrap_or(seed as i64))?,
        },
        other => {
            return Err(range(
                "proximity.kind",
                format!("expected \"l2\", \"cosine\" or \"random\", got {other:?}"),
            ))
        }
    };

    let s = raw.sweep;
    let k = match s.k {
        None => None,
        Some(ks) => Some(
            non_empty("sweep.k", ks)?
                .into_iter()
                .map(|v| positive("sweep.k", v))
                .collect::<Result<Vec<_>, _>>()?,
        ),
    };
    let delta = non_empty("sweep.delta", s.delta.unwrap_or_else(|| DEFAULT_DELTA_GRID.to_vec()))?;
    for &d in &delta {
        if !(d > 0.0 && d <= metric.max_value()) {
            return Err(range(
                "sweep.delta",
                format!("{d} outside (0, {}] for metric {}", metric.max_value(), metric.as_str()),
            ));
        }
    }
    let tau = non_empty("sweep.tau", s.tau.unwrap_or_else(|| vec![1.0]))?;
    if let Some(&t) = tau.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(range("sweep.tau", format!("must be finite and >= 0, got {t}")));
    }
    let gamma = non_empty("sweep.gamma", s.gamma.unwrap_or_else(|| vec![4]))?
        .into_iter()
        .map(|v| positive("sweep.gamma", v))
        .collect::<Result<Vec<_>, _>>()?;

    let top_k = raw.sampling.top_k.map(|v| positive("sampling.top_k", v)).transpose()?;
    let top_p = raw.sampling.top_p.unwrap_or(1.0);
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(range("sampling.top_p", format!("must lie in (0, 1], got {top_p}")));
    }

    Ok(ExperimentConfig {
        model_source,
        codebook_source,
        sweep: Sweep { k, delta, tau, gamma },
        metric,
        proximity,
        mode: raw.mode.unwrap_or(DecodeMode::Lantern),
        trials: positive("trials", raw.trials.unwrap_or(100))?,
        min_target_len: positive("min_target_len", raw.min_target_len.unwrap_or(32))?,
        prompt_len: non_negative("prompt_len", raw.prompt_len.unwrap_or(1))? as usize,
        top_k,
        top_p,
        out_dir: raw.out_dir.unwrap_or_else(|| PathBuf::from("out")),
        seed,
        write_traces: raw.write_traces.unwrap_or(false),
    })
}

/// Default k grid, scaled down proportionally when the vocabulary is
/// smaller than 1000.
pub fn default_k_grid(vocab: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = DEFAULT_K_GRID
        .iter()
        .map(|&k| {
            if vocab < 1000 {
                ((k * vocab) as f64 / 1000.0).round().max(1.0) as usize
            } else {
                k
            }
        })
        .map(|k| k.min(vocab))
        .collect();
    ks.dedup();
    ks
}

impl ExperimentConfig {
    /// Fixes every vocabulary-dependent default and checks ranges that need V.
    pub fn with_vocab(&self, vocab: usize) -> Result<ExperimentConfig, HarnessError> {
        let mut out = self.clone();
        let ks = self.sweep.k.clone().unwrap_or_else(|| default_k_grid(vocab));
        if let Some(&k) = ks.iter().find(|&&k| k > vocab) {
            return Err(range("sweep.k", format!("{k} exceeds the vocabulary size {vocab}")));
        }
        out.sweep.k = Some(ks);
        let top_k = self.top_k.unwrap_or(vocab);
        if top_k > vocab {
            return Err(range("sampling.top_k", format!("{top_k} exceeds the vocabulary size {vocab}")));
        }
        out.top_k = Some(top_k);
        Ok(out)
    }

    fn to_raw(&self) -> RawConfig {
        let i = |v: usize| v as i64;
        let model = match &self.model_source {
            ModelSource::Synthesize {
                vocab,
                order,
                profile,
                drafter_noise,
                corruption,
            } => RawModel {
                source: Some("synthesize".into()),
                vocab: Some(i(*vocab)),
                order: Some(i(*order)),
                concentration: Some(profile.concentration),
                drafter_noise: Some(*drafter_noise),
                seed: Some(profile.seed as i64),
                corruption: Some(
                    match corruption {
                        DrafterCorruption::Uniform => "uniform",
                        DrafterCorruption::LatentLocal { .. } => "latent_local",
                    }
                    .into(),
                ),
                radius: match corruption {
                    DrafterCorruption::Uniform => None,
                    DrafterCorruption::LatentLocal { radius } => Some(i(*radius)),
                },
                ..RawModel::default()
            },
            ModelSource::Load { target, drafter } => RawModel {
                source: Some("load".into()),
                target: Some(target.clone()),
                drafter: Some(drafter.clone()),
                ..RawModel::default()
            },
        };
        let codebook = match &self.codebook_source {
            CodebookSource::Synthesize { dim, seed, correlated } => RawCodebook {
                source: Some("synthesize".into()),
                dim: Some(i(*dim)),
                seed: Some(*seed as i64),
                correlated: Some(*correlated),
                path: None,
            },
            CodebookSource::Load { path } => RawCodebook {
                source: Some("load".into()),
                path: Some(path.clone()),
                ..RawCodebook::default()
            },
        };
        let proximity = match self.proximity {
            ProximityMeasureKind::L2 => RawProximity {
                kind: Some("l2".into()),
                seed: None,
            },
            ProximityMeasureKind::Cosine => RawProximity {
                kind: Some("cosine".into()),
                seed: None,
            },
            ProximityMeasureKind::Random { seed } => RawProximity {
                kind: Some("random".into()),
                seed: Some(seed as i64),
            },
        };
        RawConfig {
            seed: Some(self.seed as i64),
            mode: Some(self.mode),
            trials: Some(i(self.trials)),
            min_target_len: Some(i(self.min_target_len)),
            prompt_len: Some(i(self.prompt_len)),
            out_dir: Some(self.out_dir.clone()),
            metric: Some(self.metric),
            write_traces: Some(self.write_traces),
            model,
            codebook,
            proximity,
            sweep: RawSweep {
                k: self.sweep.k.as_ref().map(|ks| ks.iter().map(|&k| i(k)).collect()),
                delta: Some(self.sweep.delta.clone()),
                tau: Some(self.sweep.tau.clone()),
                gamma: Some(self.sweep.gamma.iter().map(|&g| i(g)).collect()),
            },
            sampling: RawSampling {
                top_k: self.top_k.map(i),
                top_p: Some(self.top_p),
            },
        }
    }

    /// The config as a document that `validate_config` reads back unchanged.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_raw()).expect("config serializes")
    }
}

// ---- running ----

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub k: usize,
    pub delta: f64,
    pub tau: f64,
    pub gamma: usize,
}

pub const CELL_COLUMNS: [&str; 7] = ["k", "delta", "tau", "gamma", "mode", "metric", "proximity"];

/// Cells in `k`, `delta`, `tau`, `gamma` nesting order.
pub fn cells(cfg: &ExperimentConfig, vocab: usize) -> Vec<Cell> {
    let ks = cfg.sweep.k.clone().unwrap_or_else(|| default_k_grid(vocab));
    let mut out = Vec::new();
    for &k in &ks {
        for &delta in &cfg.sweep.delta {
            for &tau in &cfg.sweep.tau {
                for &gamma in &cfg.sweep.gamma {
                    out.push(Cell { k, delta, tau, gamma });
                }
            }
        }
    }
    out
}

/// Models and codebook an experiment runs against.
pub struct Workload {
    pub target: TableModel,
    pub drafter: TableModel,
    pub codebook: Option<Codebook>,
}

pub fn load_workload(cfg: &ExperimentConfig) -> Result<Workload, HarnessError> {
    let (target, drafter) = match &cfg.model_source {
        ModelSource::Synthesize {
            vocab,
            order,
            profile,
            drafter_noise,
            corruption,
        } => synthesize_pair(*vocab, *order, *profile, *drafter_noise, *corruption)?,
        ModelSource::Load { target, drafter } => (TableModel::load(target)?, TableModel::load(drafter)?),
    };
    if target.vocab_size() != drafter.vocab_size() {
        return Err(range(
            "model.drafter",
            format!(
                "vocabulary {} differs from the target's {}",
                drafter.vocab_size(),
                target.vocab_size()
            ),
        ));
    }
    let vocab = target.vocab_size();
    let codebook = if cfg.mode == DecodeMode::Lantern {
        let cb = match &cfg.codebook_source {
            CodebookSource::Synthesize { dim, seed, correlated } => synthesize_codebook(vocab, *dim, *seed, *correlated),
            CodebookSource::Load { path } => Codebook::load(path)?,
        };
        if cb.vocab_size() != vocab {
            return Err(range(
                "codebook",
                format!("codebook has {} rows, the models have V = {vocab}", cb.vocab_size()),
            ));
        }
        Some(cb)
    } else {
        None
    };
    Ok(Workload {
        target,
        drafter,
        codebook,
    })
}

/// Decodes `trials` sequences for one cell. Trial `i` uses seed `seed + i`.
pub fn run_cell<M, D>(
    target: &M,
    drafter: &D,
    dcfg: &DecodeConfig,
    idx: Option<&NeighborIndex>,
    trials: usize,
    prompt_len: usize,
    seed: u64,
) -> Result<Vec<DecodeTrace>, DecodeError>
where
    M: AutoregressiveModel + ?Sized,
    D: AutoregressiveModel + ?Sized,
{
    let vocab = target.vocab_size();
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            let s = seed.wrapping_add(trial as u64);
            let mut rng = rng_from_seed(s);
            let prompt: Vec<TokenId> = (0..prompt_len).map(|_| TokenId::from(rng.random_range(0..vocab))).collect();
            decode_with_rng(target, drafter, &prompt, dcfg, idx, s, &mut rng)
        })
        .collect()
}

#[derive(Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub report: StatsReport,
    pub traces: Vec<DecodeTrace>,
}

/// Runs every cell in memory. Indices are built once per `k`.
pub fn evaluate(cfg: &ExperimentConfig, work: &Workload) -> Result<Vec<CellResult>, HarnessError> {
    let vocab = work.target.vocab_size();
    let cfg = cfg.with_vocab(vocab)?;
    let mut indices: BTreeMap<usize, NeighborIndex> = BTreeMap::new();
    let mut out = Vec::new();
    for cell in cells(&cfg, vocab) {
        let idx = match &work.codebook {
            Some(cb) if cfg.mode == DecodeMode::Lantern => {
                if let std::collections::btree_map::Entry::Vacant(e) = indices.entry(cell.k) {
                    e.insert(build_neighbor_index(cb, cell.k, cfg.proximity)?);
                }
                indices.get(&cell.k)
            }
            _ => None,
        };
        let bound = DivergenceBound::new(cell.delta, cfg.metric).map_err(|e| range("sweep.delta", e.to_string()))?;
        let dcfg = DecodeConfig {
            gamma: cell.gamma,
            k: cell.k,
            bound,
            tau: cell.tau,
            top_k: cfg.top_k.expect("filled by with_vocab"),
            top_p: cfg.top_p,
            mode: cfg.mode,
            min_target_len: cfg.min_target_len,
        };
        let traces = run_cell(
            &work.target,
            &work.drafter,
            &dcfg,
            idx,
            cfg.trials,
            cfg.prompt_len,
            cfg.seed,
        )?;
        let report = build_report(&work.target, &work.drafter, &traces, cell.gamma)?;
        out.push(CellResult { cell, report, traces });
    }
    Ok(out)
}

fn cell_record(cfg: &ExperimentConfig, cell: &Cell) -> Vec<String> {
    vec![
        cell.k.to_string(),
        cell.delta.to_string(),
        cell.tau.to_string(),
        cell.gamma.to_string(),
        cfg.mode.as_str().to_string(),
        cfg.metric.as_str().to_string(),
        cfg.proximity.label(),
    ]
}

/// Writes `stats.csv` rows in cell order.
pub fn write_stats<W: io::Write>(cfg: &ExperimentConfig, results: &[CellResult], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = CELL_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(StatsReport::csv_header());
    wr.write_record(&header)?;
    for r in results {
        let mut row = cell_record(cfg, &r.cell);
        row.extend(r.report.csv_record());
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub resolved: ExperimentConfig,
    pub rows: Vec<(Cell, StatsReport)>,
}

/// Runs the sweep and writes `config.resolved`, `stats.csv` and, when asked,
/// `traces/NNN.txt` (one JSON trace per line, one file per cell).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    let work = load_workload(cfg)?;
    let resolved = cfg.with_vocab(work.target.vocab_size())?;
    let out_dir = resolved.out_dir.clone();
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let resolved_path = out_dir.join("config.resolved");
    fs::write(&resolved_path, resolved.to_toml()).map_err(io_err(&resolved_path))?;

    let results = evaluate(&resolved, &work)?;

    let stats_path = out_dir.join("stats.csv");
    let file = fs::File::create(&stats_path).map_err(io_err(&stats_path))?;
    write_stats(&resolved, &results, io::BufWriter::new(file))?;

    if resolved.write_traces {
        let dir = out_dir.join("traces");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (i, r) in results.iter().enumerate() {
            let path = dir.join(format!("{i:03}.txt"));
            let mut text = String::new();
            for t in &r.traces {
                text.push_str(&serde_json::to_string(t).expect("traces serialize"));
                text.push('\n');
            }
            fs::write(&path, text).map_err(io_err(&path))?;
        }
    }
    Ok(RunSummary {
        out_dir,
        resolved,
        rows: results.into_iter().map(|r| (r.cell, r.report)).collect(),
    })
}

// ---- replacement demo ----

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplacementReport {
    pub original: Vec<TokenId>,
    pub replaced: Vec<TokenId>,
    /// TVD between the model's next-token laws after each prefix pair.
    pub per_position_tvd: Vec<f64>,
    pub mean_tvd: f64,
    pub changed_fraction: f64,
}

/// Samples `len` tokens from `model`, swaps each for a uniform member of its
/// neighbour list, and compares the model's next-token laws along both
/// sequences.
pub fn replace_demo<M>(model: &M, idx: &NeighborIndex, prompt: &[TokenId], len: usize, seed: u64) -> ReplacementReport
where
    M: AutoregressiveModel + ?Sized,
{
    let mut rng = rng_from_seed(seed);
    let mut orig = prompt.to_vec();
    let mut repl = prompt.to_vec();
    let mut per_position_tvd = Vec::with_capacity(len);
    for _ in 0..len {
        let x = sample(&model.next_dist(&orig), &mut rng);
        orig.push(x);
        repl.push(replace_with_uniform_neighbor(x, idx, &mut rng));
        let d = tvd(&model.next_dist(&orig), &model.next_dist(&repl)).expect("same vocabulary");
        per_position_tvd.push(d);
    }
    let original = orig[prompt.len()..].to_vec();
    let replaced = repl[prompt.len()..].to_vec();
    let changed = original.iter().zip(&replaced).filter(|(a, b)| a != b).count();
    let n = len.max(1) as f64;
    ReplacementReport {
        mean_tvd: per_position_tvd.iter().sum::<f64>() / n,
        changed_fraction: changed as f64 / n,
        original,
        replaced,
        per_position_tvd,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gets_defaults() {
        let cfg = validate_config("").unwrap();
        assert_eq!(cfg.sweep.tau, vec![1.0]);
        assert_eq!(cfg.top_k, None);
        assert_eq!(cfg.top_p, 1.0);
        assert_eq!(cfg.metric, DistanceMetricKind::Tvd);
        assert_eq!(cfg.proximity, ProximityMeasureKind::L2);
        assert_eq!(cfg.sweep.delta, DEFAULT_DELTA_GRID.to_vec());
        let full = cfg.with_vocab(256).unwrap();
        assert_eq!(full.top_k, Some(256));
        assert_eq!(full.sweep.k, Some(vec![26, 77, 256]));
    }

    #[test]
    fn default_grid_scaling() {
        assert_eq!(default_k_grid(1000), vec![100, 300, 1000]);
        assert_eq!(default_k_grid(4096), vec![100, 300, 1000]);
        assert_eq!(default_k_grid(512), vec![51, 154, 512]);
        assert_eq!(default_k_grid(5), vec![1, 2, 5]);
        assert_eq!(default_k_grid(2), vec![1, 2]);
    }

    #[test]
    fn range_errors_name_the_field() {
        let field = |text: &str| match validate_config(text) {
            Err(HarnessError::Range { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field("[sweep]\ndelta = [1.5]"), "sweep.delta");
        assert_eq!(field("trials = -3"), "trials");
        assert_eq!(field("metric = \"jsd\"\n[sweep]\ndelta = [0.7]"), "sweep.delta");
        assert_eq!(field("[sweep]\nk = []"), "sweep.k");
        assert_eq!(field("[model]\nsource = \"load\"\ntarget = \"a\""), "model.drafter");
        assert_eq!(field("[proximity]\nkind = \"l2\"\nseed = 3"), "proximity.seed");
        assert_eq!(field("[sampling]\ntop_p = 0"), "sampling.top_p");
        let cfg = validate_config("[sweep]\nk = [300]").unwrap();
        assert!(matches!(cfg.with_vocab(100), Err(HarnessError::Range { .. })));
    }

    #[test]
    fn parse_errors_carry_position() {
        match validate_config("seed = 1\n[sweep]\nbogus = 2\n") {
            Err(HarnessError::Parse { line, column, .. }) => assert_eq!((line, column), (3, 1)),
            other => panic!("{other:?}"),
        }
        match validate_config("seed = = 1") {
            Err(HarnessError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resolved_document_round_trips() {
        let text = "seed = 4\nmode = \"lantern\"\n[model]\nvocab = 32\ncorruption = \"latent_local\"\nradius = 3\n[proximity]\nkind = \"random\"\n";
        let cfg = validate_config(text).unwrap().with_vocab(32).unwrap();
        let again = validate_config(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.proximity, ProximityMeasureKind::Random { seed: 4 });
    }

    #[test]
    fn overrides_shadow_the_document() {
        let o = Overrides {
            seed: Some(9),
            out_dir: Some(PathBuf::from("elsewhere")),
            mode: Some(DecodeMode::Vanilla),
        };
        let cfg = validate_config_with("seed = 1\nout_dir = \"x\"\nmode = \"lantern\"\n", &o).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.mode, DecodeMode::Vanilla);
        match cfg.model_source {
            ModelSource::Synthesize { profile, .. } => assert_eq!(profile.seed, 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(validate_config("trials = 0").unwrap_err().exit_code(), 2);
        let e = load_config(Path::new("/nonexistent/cfg.toml")).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn cell_order_and_index_reuse() {
        let text = "trials = 4\nmin_target_len = 6\n[model]\nvocab = 16\n[sweep]\nk = [2, 4]\ndelta = [0.1, 0.3]\n";
        let cfg = validate_config(text).unwrap();
        let work = load_workload(&cfg).unwrap();
        let res = evaluate(&cfg, &work).unwrap();
        let got: Vec<(usize, f64)> = res.iter().map(|r| (r.cell.k, r.cell.delta)).collect();
        assert_eq!(got, vec![(2, 0.1), (2, 0.3), (4, 0.1), (4, 0.3)]);
        // per-trial index rebuild gives the same traces
        let cb = work.codebook.as_ref().unwrap();
        let r = &res[3];
        for (trial, tr) in r.traces.iter().enumerate() {
            let idx = build_neighbor_index(cb, 4, ProximityMeasureKind::L2).unwrap();
            let dcfg = DecodeConfig {
                gamma: 4,
                k: 4,
                bound: DivergenceBound::tvd(0.3).unwrap(),
                tau: 1.0,
                top_k: 16,
                top_p: 1.0,
                mode: DecodeMode::Lantern,
                min_target_len: 6,
            };
            let one = run_cell(&work.target, &work.drafter, &dcfg, Some(&idx), 1, 1, trial as u64).unwrap();
            assert_eq!(&one[0], tr);
        }
    }

    #[test]
    fn replace_demo_with_identity_index_changes_nothing() {
        let (q, _) = synthesize_pair(
            8,
            1,
            AmbiguityProfile {
                concentration: 1.0,
                seed: 1,
            },
            0.0,
            DrafterCorruption::Uniform,
        )
        .unwrap();
        let r = replace_demo(&q, &NeighborIndex::identity(8), &[TokenId(0)], 20, 3);
        assert_eq!(r.original, r.replaced);
        assert_eq!(r.mean_tvd, 0.0);
        let cb = synthesize_codebook(8, 2, 1, true);
        let idx = build_neighbor_index(&cb, 4, ProximityMeasureKind::L2).unwrap();
        let r = replace_demo(&q, &idx, &[TokenId(0)], 200, 3);
        assert!(r.changed_fraction > 0.5 && r.mean_tvd > 0.0);
    }
}
