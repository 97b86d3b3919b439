//! Draft-and-verify decoding.
//!
//! Each step drafts `gamma` tokens from the drafter, then walks them in order
//! against the target. Vanilla verification accepts a draft with probability
//! `min(1, q(x̃)/p(x̃))` and resamples from `[q - p]+` on the first rejection,
//! which leaves the output law equal to the target's. Lantern verification
//! replaces `q(x̃)` by the mass of the draft's divergence-bounded proximity
//! set and resamples from `[q_A - p]+`, where `q_A` is the distorted target.
//! When every draft survives, a bonus token comes from the unmodified target.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::Rng;

use crate::codebook::NeighborIndex;
use crate::models::AutoregressiveModel;
use crate::prob::{
    adjust, residual_plus, rng_from_seed, sample, truncate_top_k_p, ProbDist, ProbError, TokenId,
};
use crate::proximity::{build_proximity_set, distort_target, DivergenceBound, ProximitySet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("vocabulary mismatch: target {target}, drafter {drafter}")]
    VocabMismatch { target: usize, drafter: usize },
    #[error("lantern mode needs a neighbour index")]
    MissingIndex,
    #[error("neighbour index has k = {index_k} and V = {index_vocab}, config wants k = {k} over V = {vocab}")]
    IndexMismatch {
        index_k: usize,
        index_vocab: usize,
        k: usize,
        vocab: usize,
    },
    #[error("prompt token {0} out of range")]
    PromptOutOfRange(TokenId),
    #[error(transparent)]
    Prob(#[from] ProbError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Vanilla,
    Lantern,
}

impl DecodeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Vanilla => "vanilla",
            DecodeMode::Lantern => "lantern",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Draft length per step.
    pub gamma: usize,
    /// Neighbourhood size the index was built with.
    pub k: usize,
    pub bound: DivergenceBound,
    /// Sampling temperature; 0 means greedy.
    pub tau: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub mode: DecodeMode,
    /// Stop once at least this many tokens have been generated.
    pub min_target_len: usize,
}

impl DecodeConfig {
    pub fn new(mode: DecodeMode, gamma: usize, k: usize, bound: DivergenceBound, vocab: usize) -> Self {
        DecodeConfig {
            gamma,
            k,
            bound,
            tau: 1.0,
            top_k: vocab,
            top_p: 1.0,
            mode,
            min_target_len: 1,
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<(), DecodeError> {
        let fail = |m: String| Err(DecodeError::Config(m));
        if self.gamma == 0 {
            return fail("gamma must be >= 1".into());
        }
        if self.k == 0 {
            return fail("k must be >= 1".into());
        }
        if self.min_target_len == 0 {
            return fail("min_target_len must be >= 1".into());
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be finite and >= 0, got {}", self.tau));
        }
        if self.top_k == 0 || self.top_k > vocab {
            return fail(format!("top_k must lie in [1, {vocab}], got {}", self.top_k));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return fail(format!("top_p must lie in (0, 1], got {}", self.top_p));
        }
        Ok(())
    }

    fn view(&self, d: &ProbDist) -> ProbDist {
        adjust(d, self.tau, self.top_k, self.top_p)
    }

    /// Target view used by the greedy relaxed rule: truncated but untempered.
    fn greedy_view(&self, d: &ProbDist) -> ProbDist {
        truncate_top_k_p(d, self.top_k, self.top_p)
    }
}

/// Drafted tokens with the (adjusted) drafter distribution each came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftChain {
    pub tokens: Vec<TokenId>,
    pub dists: Vec<ProbDist>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// Number of tokens generated before this step.
    pub position: usize,
    pub drafts: Vec<TokenId>,
    /// Acceptance probability of every draft that was examined.
    pub accept_probs: Vec<f64>,
    pub accepted_count: usize,
    pub resampled: Option<TokenId>,
    pub bonus: Option<TokenId>,
    /// One set per examined draft (lantern mode only).
    pub proximity_sets: Vec<ProximitySet>,
}

impl StepOutcome {
    /// Accepted drafts followed by the resampled or bonus token.
    pub fn emitted(&self) -> Vec<TokenId> {
        let mut out = self.drafts[..self.accepted_count].to_vec();
        out.extend(self.resampled.or(self.bonus));
        out
    }

    pub fn emitted_len(&self) -> usize {
        self.accepted_count + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub rng_seed: u64,
    pub prompt: Vec<TokenId>,
    /// Prompt followed by every generated token.
    pub output: Vec<TokenId>,
    pub steps: Vec<StepOutcome>,
}

impl DecodeTrace {
    pub fn generated(&self) -> &[TokenId] {
        &self.output[self.prompt.len()..]
    }
}

fn extend_ctx(ctx: &[TokenId], tail: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(ctx.len() + tail.len());
    out.extend_from_slice(ctx);
    out.extend_from_slice(tail);
    out
}

/// Samples `len` drafts autoregressively from the drafter.
pub fn draft_chain<M, R>(drafter: &M, ctx: &[TokenId], len: usize, cfg: &DecodeConfig, rng: &mut R) -> DraftChain
where
    M: AutoregressiveModel + ?Sized,
    R: Rng + ?Sized,
{
    let mut running = ctx.to_vec();
    let mut tokens = Vec::with_capacity(len);
    let mut dists = Vec::with_capacity(len);
    for _ in 0..len {
        let p = cfg.view(&drafter.next_dist(&running));
        let x = sample(&p, rng);
        running.push(x);
        tokens.push(x);
        dists.push(p);
    }
    DraftChain { tokens, dists }
}

fn ratio(num: f64, den: f64) -> f64 {
    // drafts are sampled from p, so den > 0 whenever the chain is genuine
    if den > 0.0 {
        (num / den).min(1.0)
    } else {
        1.0
    }
}

fn residual_or(q: &ProbDist, p: &ProbDist) -> Result<ProbDist, ProbError> {
    match residual_plus(q, p) {
        Ok(r) => Ok(r),
        Err(ProbError::DegenerateResidual) => Ok(q.clone()),
        Err(e) => Err(e),
    }
}

fn bonus_token<M, R>(target: &M, ctx: &[TokenId], chain: &DraftChain, cfg: &DecodeConfig, rng: &mut R) -> TokenId
where
    M: AutoregressiveModel + ?Sized,
    R: Rng + ?Sized,
{
    let q = cfg.view(&target.next_dist(&extend_ctx(ctx, &chain.tokens)));
    sample(&q, rng)
}

pub fn verify_vanilla<M, R>(
    target: &M,
    ctx: &[TokenId],
    chain: &DraftChain,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<StepOutcome, DecodeError>
where
    M: AutoregressiveModel + ?Sized,
    R: Rng + ?Sized,
{
    let mut accept_probs = Vec::with_capacity(chain.tokens.len());
    for (t, (&x, p)) in chain.tokens.iter().zip(&chain.dists).enumerate() {
        let q = cfg.view(&target.next_dist(&extend_ctx(ctx, &chain.tokens[..t])));
        let a = ratio(q.get(x), p.get(x));
        accept_probs.push(a);
        if rng.random::<f64>() >= a {
            let fix = sample(&residual_or(&q, p)?, rng);
            return Ok(StepOutcome {
                position: 0,
                drafts: chain.tokens.clone(),
                accept_probs,
                accepted_count: t,
                resampled: Some(fix),
                bonus: None,
                proximity_sets: Vec::new(),
            });
        }
    }
    Ok(StepOutcome {
        position: 0,
        drafts: chain.tokens.clone(),
        accept_probs,
        accepted_count: chain.tokens.len(),
        resampled: None,
        bonus: Some(bonus_token(target, ctx, chain, cfg, rng)),
        proximity_sets: Vec::new(),
    })
}

fn check_index(idx: &NeighborIndex, cfg: &DecodeConfig, vocab: usize) -> Result<(), DecodeError> {
    if idx.k() != cfg.k || idx.vocab_size() != vocab {
        return Err(DecodeError::IndexMismatch {
            index_k: idx.k(),
            index_vocab: idx.vocab_size(),
            k: cfg.k,
            vocab,
        });
    }
    Ok(())
}

pub fn verify_lantern<M, R>(
    target: &M,
    ctx: &[TokenId],
    chain: &DraftChain,
    idx: &NeighborIndex,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<StepOutcome, DecodeError>
where
    M: AutoregressiveModel + ?Sized,
    R: Rng + ?Sized,
{
    check_index(idx, cfg, target.vocab_size())?;
    let mut accept_probs = Vec::with_capacity(chain.tokens.len());
    let mut sets = Vec::with_capacity(chain.tokens.len());
    for (t, (&x, p)) in chain.tokens.iter().zip(&chain.dists).enumerate() {
        let q = cfg.view(&target.next_dist(&extend_ctx(ctx, &chain.tokens[..t])));
        let set = build_proximity_set(&q, x, idx, cfg.bound);
        let a = ratio(set.aggregated_mass, p.get(x));
        accept_probs.push(a);
        if rng.random::<f64>() >= a {
            let distorted = distort_target(&q, &set).expect("set was built from this q").dist;
            let fix = sample(&residual_or(&distorted, p)?, rng);
            sets.push(set);
            return Ok(StepOutcome {
                position: 0,
                drafts: chain.tokens.clone(),
                accept_probs,
                accepted_count: t,
                resampled: Some(fix),
                bonus: None,
                proximity_sets: sets,
            });
        }
        sets.push(set);
    }
    Ok(StepOutcome {
        position: 0,
        drafts: chain.tokens.clone(),
        accept_probs,
        accepted_count: chain.tokens.len(),
        resampled: None,
        bonus: Some(bonus_token(target, ctx, chain, cfg, rng)),
        proximity_sets: sets,
    })
}

/// Greedy relaxed rule: keep a draft iff it is the argmax of its own
/// distorted target. Sets are built from the untempered target view.
pub fn verify_lantern_greedy<M>(
    target: &M,
    ctx: &[TokenId],
    chain: &DraftChain,
    idx: &NeighborIndex,
    cfg: &DecodeConfig,
) -> Result<StepOutcome, DecodeError>
where
    M: AutoregressiveModel + ?Sized,
{
    check_index(idx, cfg, target.vocab_size())?;
    let mut accept_probs = Vec::with_capacity(chain.tokens.len());
    let mut sets = Vec::with_capacity(chain.tokens.len());
    for (t, &x) in chain.tokens.iter().enumerate() {
        let q = cfg.greedy_view(&target.next_dist(&extend_ctx(ctx, &chain.tokens[..t])));
        let set = build_proximity_set(&q, x, idx, cfg.bound);
        let best = distort_target(&q, &set).expect("set was built from this q").dist.argmax();
        sets.push(set);
        if best != x {
            accept_probs.push(0.0);
            return Ok(StepOutcome {
                position: 0,
                drafts: chain.tokens.clone(),
                accept_probs,
                accepted_count: t,
                resampled: Some(best),
                bonus: None,
                proximity_sets: sets,
            });
        }
        accept_probs.push(1.0);
    }
    let last = extend_ctx(ctx, &chain.tokens);
    Ok(StepOutcome {
        position: 0,
        drafts: chain.tokens.clone(),
        accept_probs,
        accepted_count: chain.tokens.len(),
        resampled: None,
        bonus: Some(target.next_dist(&last).argmax()),
        proximity_sets: sets,
    })
}

/// One draft-and-verify step from `ctx`, dispatching on mode and temperature.
pub fn decode_step<M, D, R>(
    target: &M,
    drafter: &D,
    ctx: &[TokenId],
    cfg: &DecodeConfig,
    idx: Option<&NeighborIndex>,
    rng: &mut R,
) -> Result<StepOutcome, DecodeError>
where
    M: AutoregressiveModel + ?Sized,
    D: AutoregressiveModel + ?Sized,
    R: Rng + ?Sized,
{
    let chain = draft_chain(drafter, ctx, cfg.gamma, cfg, rng);
    match cfg.mode {
        DecodeMode::Vanilla => verify_vanilla(target, ctx, &chain, cfg, rng),
        DecodeMode::Lantern => {
            let idx = idx.ok_or(DecodeError::MissingIndex)?;
            if cfg.tau == 0.0 {
                verify_lantern_greedy(target, ctx, &chain, idx, cfg)
            } else {
                verify_lantern(target, ctx, &chain, idx, cfg, rng)
            }
        }
    }
}

/// Checks that models, index and prompt agree before a decode starts.
pub fn check_inputs<M, D>(
    target: &M,
    drafter: &D,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    idx: Option<&NeighborIndex>,
) -> Result<(), DecodeError>
where
    M: AutoregressiveModel + ?Sized,
    D: AutoregressiveModel + ?Sized,
{
    let vocab = target.vocab_size();
    if drafter.vocab_size() != vocab {
        return Err(DecodeError::VocabMismatch {
            target: vocab,
            drafter: drafter.vocab_size(),
        });
    }
    cfg.validate(vocab)?;
    if let Some(&bad) = prompt.iter().find(|t| t.index() >= vocab) {
        return Err(DecodeError::PromptOutOfRange(bad));
    }
    if cfg.mode == DecodeMode::Lantern {
        check_index(idx.ok_or(DecodeError::MissingIndex)?, cfg, vocab)?;
    }
    Ok(())
}

/// Runs draft-and-verify steps until `min_target_len` tokens are generated.
pub fn decode<M, D>(
    target: &M,
    drafter: &D,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    idx: Option<&NeighborIndex>,
    rng_seed: u64,
) -> Result<DecodeTrace, DecodeError>
where
    M: AutoregressiveModel + ?Sized,
    D: AutoregressiveModel + ?Sized,
{
    let mut rng = rng_from_seed(rng_seed);
    decode_with_rng(target, drafter, prompt, cfg, idx, rng_seed, &mut rng)
}

/// Like [`decode`] but continues an existing generator stream.
pub fn decode_with_rng<M, D, R>(
    target: &M,
    drafter: &D,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    idx: Option<&NeighborIndex>,
    rng_seed: u64,
    rng: &mut R,
) -> Result<DecodeTrace, DecodeError>
where
    M: AutoregressiveModel + ?Sized,
    D: AutoregressiveModel + ?Sized,
    R: Rng + ?Sized,
{
    check_inputs(target, drafter, prompt, cfg, idx)?;
    let mut output = prompt.to_vec();
    let mut steps = Vec::new();
    let mut generated = 0;
    while generated < cfg.min_target_len {
        let mut step = decode_step(target, drafter, &output, cfg, idx, rng)?;
        step.position = generated;
        let emitted = step.emitted();
        generated += emitted.len();
        output.extend(emitted);
        steps.push(step);
    }
    Ok(DecodeTrace {
        rng_seed,
        prompt: prompt.to_vec(),
        output,
        steps,
    })
}
