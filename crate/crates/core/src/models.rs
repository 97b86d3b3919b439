//! Table-driven autoregressive models standing in for the target and the
//! drafter, plus a synthesizer with a knob for how flat the target's rows are.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prob::{rng_from_seed, sample, ProbDist, TokenId};

/// Largest context order a table model may use.
pub const MAX_ORDER: usize = 3;
/// Upper bound on stored probabilities when synthesizing full tables.
pub const MAX_SYNTH_ENTRIES: usize = 1 << 26;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("order {0} exceeds the supported maximum of {MAX_ORDER}")]
    OrderTooLarge(usize),
    #[error("vocabulary must hold at least 2 tokens, got {0}")]
    VocabTooSmall(usize),
    #[error("concentration must be positive and finite, got {0}")]
    BadConcentration(f64),
    #[error("drafter noise must lie in [0, 1], got {0}")]
    BadNoise(f64),
    #[error("a full table of V^(m+1) = {0} entries is too large to synthesize")]
    TooLarge(u128),
    #[error("malformed model: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Anything that yields a next-token distribution for a context.
pub trait AutoregressiveModel: Sync {
    fn vocab_size(&self) -> usize;

    fn next_dist(&self, ctx: &[TokenId]) -> Cow<'_, ProbDist>;

    fn greedy_token(&self, ctx: &[TokenId]) -> TokenId {
        self.next_dist(ctx).argmax()
    }
}

/// Order-`m` Markov model: the last `min(m, len)` tokens select a row;
/// unseen suffixes fall back to a shared row.
#[derive(Debug, Clone, PartialEq)]
pub struct TableModel {
    order: usize,
    vocab: usize,
    tables: BTreeMap<Vec<TokenId>, ProbDist>,
    fallback: ProbDist,
}

impl TableModel {
    pub fn new(
        order: usize,
        tables: BTreeMap<Vec<TokenId>, ProbDist>,
        fallback: ProbDist,
    ) -> Result<Self, ModelError> {
        if order > MAX_ORDER {
            return Err(ModelError::OrderTooLarge(order));
        }
        let vocab = fallback.vocab_size();
        for (suffix, row) in &tables {
            if suffix.len() > order {
                return Err(ModelError::Format(format!(
                    "suffix of length {} exceeds order {order}",
                    suffix.len()
                )));
            }
            if row.vocab_size() != vocab {
                return Err(ModelError::Format(format!(
                    "row for {suffix:?} has {} entries, expected {vocab}",
                    row.vocab_size()
                )));
            }
            if let Some(t) = suffix.iter().find(|t| t.index() >= vocab) {
                return Err(ModelError::Format(format!("suffix token {t} out of range")));
            }
        }
        Ok(TableModel {
            order,
            vocab,
            tables,
            fallback,
        })
    }

    /// A model that ignores context.
    pub fn context_free(dist: ProbDist) -> Self {
        TableModel {
            order: 0,
            vocab: dist.vocab_size(),
            tables: BTreeMap::new(),
            fallback: dist,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn fallback(&self) -> &ProbDist {
        &self.fallback
    }

    pub fn tables(&self) -> &BTreeMap<Vec<TokenId>, ProbDist> {
        &self.tables
    }

    pub fn lookup(&self, ctx: &[TokenId]) -> &ProbDist {
        let take = self.order.min(ctx.len());
        let suffix = &ctx[ctx.len() - take..];
        self.tables.get(suffix).unwrap_or(&self.fallback)
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        let doc = ModelDoc {
            order: self.order,
            vocab_size: self.vocab,
            tables: self
                .tables
                .iter()
                .map(|(suffix, row)| TableEntry {
                    suffix: suffix.clone(),
                    mass: row.mass().to_vec(),
                })
                .collect(),
            fallback: self.fallback.mass().to_vec(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        let to_dist = |mass: Vec<f64>, what: &str| {
            ProbDist::from_normalized(mass).map_err(|e| ModelError::Format(format!("{what}: {e}")))
        };
        let fallback = to_dist(doc.fallback, "fallback")?;
        if fallback.vocab_size() != doc.vocab_size {
            return Err(ModelError::Format(format!(
                "fallback has {} entries, vocab_size says {}",
                fallback.vocab_size(),
                doc.vocab_size
            )));
        }
        let mut tables = BTreeMap::new();
        for entry in doc.tables {
            let what = format!("row {:?}", entry.suffix);
            let row = to_dist(entry.mass, &what)?;
            if tables.insert(entry.suffix, row).is_some() {
                return Err(ModelError::Format(format!("duplicate {what}")));
            }
        }
        TableModel::new(doc.order, tables, fallback)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        TableModel::from_json(&fs::read_to_string(path)?)
    }
}

impl AutoregressiveModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_dist(&self, ctx: &[TokenId]) -> Cow<'_, ProbDist> {
        Cow::Borrowed(self.lookup(ctx))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    order: usize,
    vocab_size: usize,
    tables: Vec<TableEntry>,
    fallback: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableEntry {
    suffix: Vec<TokenId>,
    mass: Vec<f64>,
}

/// How sharp synthesized target rows are. Small concentration gives flat,
/// ambiguous rows; large concentration gives spiky ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityProfile {
    pub concentration: f64,
    pub seed: u64,
}

/// How the drafter's rows deviate from the target's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DrafterCorruption {
    /// Mix each target row with the uniform distribution.
    Uniform,
    /// Mix each target row with a point mass on a near miss: a token drawn
    /// from the row, shifted by 1..=radius ids.
    LatentLocal { radius: usize },
}

const BUMPS: usize = 3;
const BUMP_FLOOR: f64 = 0.05;

fn envelope<R: Rng + ?Sized>(vocab: usize, rng: &mut R) -> Vec<f64> {
    let width = (vocab as f64 / 25.0).max(1.0);
    let centers: Vec<f64> = (0..BUMPS)
        .map(|_| rng.random_range(0..vocab) as f64)
        .collect();
    (0..vocab)
        .map(|i| {
            let x = i as f64;
            BUMP_FLOOR
                + centers
                    .iter()
                    .map(|c| (-0.5 * ((x - c) / width).powi(2)).exp())
                    .sum::<f64>()
        })
        .collect()
}

fn target_row<R: Rng + ?Sized>(vocab: usize, gamma: &Gamma<f64>, rng: &mut R) -> ProbDist {
    let env = envelope(vocab, rng);
    let raw: Vec<f64> = env.iter().map(|e| e * rng.sample(gamma)).collect();
    // tiny shapes can underflow every gamma draw to zero
    ProbDist::new(raw).unwrap_or_else(|_| ProbDist::new(env).expect("envelope is positive"))
}

fn drafter_row<R: Rng + ?Sized>(
    q: &ProbDist,
    noise: f64,
    corruption: DrafterCorruption,
    rng: &mut R,
) -> ProbDist {
    let v = q.vocab_size();
    let keep = 1.0 - noise;
    let mass: Vec<f64> = match corruption {
        DrafterCorruption::Uniform => {
            let u = 1.0 / v as f64;
            q.mass().iter().map(|&m| keep * m + noise * u).collect()
        }
        DrafterCorruption::LatentLocal { radius } => {
            let hit = sample(q, rng).index() as i64;
            let shift = if radius == 0 {
                0
            } else {
                let step = rng.random_range(1..=radius as i64);
                if rng.random::<bool>() {
                    step
                } else {
                    -step
                }
            };
            let miss = (hit + shift).clamp(0, v as i64 - 1) as usize;
            let mut mass: Vec<f64> = q.mass().iter().map(|&m| keep * m).collect();
            mass[miss] += noise;
            mass
        }
    };
    ProbDist::from_normalized(mass).expect("mixture of normalized rows is normalized")
}

fn all_suffixes(vocab: usize, order: usize) -> Vec<Vec<TokenId>> {
    let mut out: Vec<Vec<TokenId>> = vec![Vec::new()];
    for _ in 0..order {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..vocab).map(move |t| {
                    let mut s = prefix.clone();
                    s.push(TokenId::from(t));
                    s
                })
            })
            .collect();
    }
    out
}

/// Synthesizes a target and a drafter sharing the same context keys. Rows
/// are generated in lexicographic suffix order, so a seed fixes every bit.
pub fn synthesize_pair(
    vocab: usize,
    order: usize,
    profile: AmbiguityProfile,
    drafter_noise: f64,
    corruption: DrafterCorruption,
) -> Result<(TableModel, TableModel), ModelError> {
    if vocab < 2 {
        return Err(ModelError::VocabTooSmall(vocab));
    }
    if order > MAX_ORDER {
        return Err(ModelError::OrderTooLarge(order));
    }
    if !(profile.concentration > 0.0 && profile.concentration.is_finite()) {
        return Err(ModelError::BadConcentration(profile.concentration));
    }
    if !(0.0..=1.0).contains(&drafter_noise) {
        return Err(ModelError::BadNoise(drafter_noise));
    }
    let entries = (vocab as u128).pow(order as u32 + 1);
    if entries > MAX_SYNTH_ENTRIES as u128 {
        return Err(ModelError::TooLarge(entries));
    }
    let gamma = Gamma::new(1.0 / profile.concentration, 1.0)
        .map_err(|_| ModelError::BadConcentration(profile.concentration))?;
    let mut target_rng = rng_from_seed(profile.seed);
    let mut drafter_rng = rng_from_seed(profile.seed ^ 0xD1A5_7E12_0000_0001);

    let fallback_q = target_row(vocab, &gamma, &mut target_rng);
    let fallback_p = drafter_row(&fallback_q, drafter_noise, corruption, &mut drafter_rng);
    let mut target_tables = BTreeMap::new();
    let mut drafter_tables = BTreeMap::new();
    if order > 0 {
        for suffix in all_suffixes(vocab, order) {
            let q = target_row(vocab, &gamma, &mut target_rng);
            let p = drafter_row(&q, drafter_noise, corruption, &mut drafter_rng);
            target_tables.insert(suffix.clone(), q);
            drafter_tables.insert(suffix, p);
        }
    }
    Ok((
        TableModel::new(order, target_tables, fallback_q)?,
        TableModel::new(order, drafter_tables, fallback_p)?,
    ))
}
