//! Exact one-step output laws by enumeration over small vocabularies.
//!
//! The acceptance arithmetic here is written independently of the decoder so
//! that agreement between the two is a real cross-check.
//!
//! Two readings of "the law given the draft" are exposed:
//!
//! * `conditional_laws[x̃]` is what one verification step actually emits when
//!   the draft is `x̃`: keep `x̃` with probability `a`, otherwise resample from
//!   the residual. `law` mixes these by `p` and is the realized output law.
//! * `candidate_laws[x̃]` runs a full draft-and-verify step against the frozen
//!   distorted target `q_A(·|D=x̃)` for every draft. Rejection sampling makes
//!   this equal to `q_A(·|D=x̃)`, which lies within the bound of `q`.
//!   `candidate_mixture` mixes these by `p`.
//!
//! For vanilla steps both readings collapse and every law equals `q`.

use rand::Rng;
use thiserror::Error;

use crate::codebook::NeighborIndex;
use crate::prob::{rng_from_seed, ProbDist, ProbError, SpecRng, TokenId};
use crate::proximity::{build_proximity_set, DivergenceBound};

pub const DEFAULT_CAP: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("vocabulary {vocab} exceeds the enumeration cap {cap}")]
    CapExceeded { vocab: usize, cap: usize },
    #[error("trials must be >= 1")]
    NoTrials,
    #[error(transparent)]
    Prob(#[from] ProbError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLaw {
    /// Law of the first emitted token.
    pub law: ProbDist,
    /// Emitted law given the draft; `None` where the drafter has no mass.
    pub conditional_laws: Vec<Option<ProbDist>>,
    /// Law of a step verified against the candidate's frozen distorted target.
    pub candidate_laws: Vec<Option<ProbDist>>,
    pub candidate_mixture: ProbDist,
}

fn check(q: &ProbDist, p: &ProbDist, cap: usize) -> Result<usize, OracleError> {
    let v = q.vocab_size();
    if p.vocab_size() != v {
        return Err(ProbError::SizeMismatch(v, p.vocab_size()).into());
    }
    if v > cap {
        return Err(OracleError::CapExceeded { vocab: v, cap });
    }
    Ok(v)
}

/// `[t - p]+` renormalized, or `t` itself when that has no mass.
fn rejection_law(t: &[f64], p: &[f64]) -> Vec<f64> {
    let pos: Vec<f64> = t.iter().zip(p).map(|(a, b)| (a - b).max(0.0)).collect();
    let z: f64 = pos.iter().sum();
    if z > 0.0 {
        pos.into_iter().map(|x| x / z).collect()
    } else {
        t.to_vec()
    }
}

/// Law emitted when draft `y` is checked against target `t`.
fn single_draft(t: &[f64], p: &[f64], y: usize) -> Vec<f64> {
    let keep = if p[y] > 0.0 { (t[y] / p[y]).min(1.0) } else { 1.0 };
    let mut out: Vec<f64> = rejection_law(t, p).into_iter().map(|r| (1.0 - keep) * r).collect();
    out[y] += keep;
    out
}

/// Full draft-then-verify law against target `t`.
fn full_step(t: &[f64], p: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    for (y, &py) in p.iter().enumerate() {
        if py > 0.0 {
            for (o, c) in out.iter_mut().zip(single_draft(t, p, y)) {
                *o += py * c;
            }
        }
    }
    out
}

fn mix(p: &[f64], parts: &[Option<ProbDist>]) -> Result<ProbDist, ProbError> {
    let mut out = vec![0.0; p.len()];
    for (part, &w) in parts.iter().zip(p) {
        if let Some(d) = part {
            for (o, m) in out.iter_mut().zip(d.mass()) {
                *o += w * m;
            }
        }
    }
    ProbDist::from_normalized(out)
}

fn enumerate_with_targets(p: &ProbDist, targets: &[Vec<f64>]) -> Result<StepLaw, OracleError> {
    let pm = p.mass();
    let mut conditional_laws = Vec::with_capacity(pm.len());
    let mut candidate_laws = Vec::with_capacity(pm.len());
    for (x, t) in targets.iter().enumerate() {
        if pm[x] > 0.0 {
            conditional_laws.push(Some(ProbDist::from_normalized(single_draft(t, pm, x))?));
            candidate_laws.push(Some(ProbDist::from_normalized(full_step(t, pm))?));
        } else {
            conditional_laws.push(None);
            candidate_laws.push(None);
        }
    }
    Ok(StepLaw {
        law: mix(pm, &conditional_laws)?,
        candidate_mixture: mix(pm, &candidate_laws)?,
        conditional_laws,
        candidate_laws,
    })
}

pub fn enumerate_vanilla_step(q: &ProbDist, p: &ProbDist) -> Result<StepLaw, OracleError> {
    enumerate_vanilla_step_capped(q, p, DEFAULT_CAP)
}

pub fn enumerate_vanilla_step_capped(q: &ProbDist, p: &ProbDist, cap: usize) -> Result<StepLaw, OracleError> {
    let v = check(q, p, cap)?;
    let targets = vec![q.mass().to_vec(); v];
    enumerate_with_targets(p, &targets)
}

/// Distorted target for candidate `x`: the set's mass moved onto `x`.
pub fn distorted_mass(q: &ProbDist, x: TokenId, idx: &NeighborIndex, bound: DivergenceBound) -> Vec<f64> {
    let set = build_proximity_set(q, x, idx, bound);
    let mut t = q.mass().to_vec();
    let mut total = 0.0;
    for m in &set.members {
        total += t[m.index()];
        t[m.index()] = 0.0;
    }
    t[x.index()] = total;
    t
}

pub fn enumerate_lantern_step(
    q: &ProbDist,
    p: &ProbDist,
    idx: &NeighborIndex,
    bound: DivergenceBound,
) -> Result<StepLaw, OracleError> {
    enumerate_lantern_step_capped(q, p, idx, bound, DEFAULT_CAP)
}

pub fn enumerate_lantern_step_capped(
    q: &ProbDist,
    p: &ProbDist,
    idx: &NeighborIndex,
    bound: DivergenceBound,
    cap: usize,
) -> Result<StepLaw, OracleError> {
    let v = check(q, p, cap)?;
    if idx.vocab_size() != v {
        return Err(ProbError::SizeMismatch(v, idx.vocab_size()).into());
    }
    let targets: Vec<Vec<f64>> = (0..v)
        .map(|x| distorted_mass(q, TokenId::from(x), idx, bound))
        .collect();
    enumerate_with_targets(p, &targets)
}

/// Frequency of the token returned by `step` over `trials` runs sharing one
/// generator seeded with `rng_seed`.
pub fn empirical_step_law<F>(mut step: F, vocab: usize, trials: usize, rng_seed: u64) -> Result<ProbDist, OracleError>
where
    F: FnMut(&mut SpecRng) -> TokenId,
{
    if trials == 0 {
        return Err(OracleError::NoTrials);
    }
    let mut rng = rng_from_seed(rng_seed);
    let mut counts = vec![0u64; vocab];
    for _ in 0..trials {
        counts[step(&mut rng).index()] += 1;
    }
    Ok(ProbDist::new(counts.into_iter().map(|c| c as f64).collect())?)
}

/// Draws a skewed, strictly positive distribution.
pub fn random_dist<R: Rng + ?Sized>(vocab: usize, rng: &mut R) -> ProbDist {
    let raw: Vec<f64> = (0..vocab).map(|_| rng.random::<f64>().powi(3) + 1e-3).collect();
    ProbDist::new(raw).expect("strictly positive draws")
}

/// A random small instance for the relaxed rule.
#[derive(Debug, Clone)]
pub struct LanternInstance {
    pub q: ProbDist,
    pub p: ProbDist,
    pub idx: NeighborIndex,
    pub bound: DivergenceBound,
}

pub const CHECK_DELTAS: [f64; 4] = [0.05, 0.1, 0.2, 0.4];

/// V in `2..=max_vocab`, k in `1..=V`, δ from [`CHECK_DELTAS`], neighbours
/// from a random 2-d codebook under L2.
pub fn random_lantern_instance<R: Rng + ?Sized>(max_vocab: usize, rng: &mut R) -> LanternInstance {
    let v = rng.random_range(2..=max_vocab);
    let k = rng.random_range(1..=v);
    let delta = CHECK_DELTAS[rng.random_range(0..CHECK_DELTAS.len())];
    let cb = crate::codebook::synthesize_codebook(v, 2, rng.random(), false);
    let idx = crate::codebook::build_neighbor_index(&cb, k, crate::codebook::ProximityMeasureKind::L2)
        .expect("k <= V and L2 accepts any rows");
    LanternInstance {
        q: random_dist(v, rng),
        p: random_dist(v, rng),
        idx,
        bound: DivergenceBound::tvd(delta).expect("grid deltas are valid"),
    }
}

/// Worst-case deviations over a batch of enumerated instances.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub vanilla_instances: usize,
    pub lantern_instances: usize,
    /// max tvd(law, q) for vanilla steps.
    pub vanilla_max_tvd: f64,
    /// max |candidate law - distorted target| over all candidates.
    pub candidate_max_dev: f64,
    /// min of δ - tvd(candidate mixture, q); positive means inside the bound.
    pub mixture_min_slack: f64,
    /// Instances whose realized law sits at or beyond δ from q.
    pub realized_exceed: usize,
    /// max |lantern law at δ=1e-12 - vanilla law|.
    pub reduction_max_dev: f64,
    /// max |realized divergence - closed-form TVD| over every built set.
    pub closed_form_max_dev: f64,
    /// Every set's realized divergence was strictly below δ.
    pub all_strict: bool,
}

impl SuiteReport {
    pub fn passes(&self) -> bool {
        self.vanilla_max_tvd < 1e-9
            && self.candidate_max_dev < 1e-12
            && self.mixture_min_slack > 0.0
            && self.reduction_max_dev < 1e-12
            && self.closed_form_max_dev < 1e-12
            && self.all_strict
    }
}

fn max_abs_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Enumerates `vanilla` random pairs with V in 2..=8 and `lantern` random
/// instances with V up to 16.
pub fn run_suite(vanilla: usize, lantern: usize, seed: u64) -> Result<SuiteReport, OracleError> {
    let mut rng = rng_from_seed(seed);
    let mut vanilla_max_tvd: f64 = 0.0;
    for _ in 0..vanilla {
        let v = rng.random_range(2..=8);
        let q = random_dist(v, &mut rng);
        let p = random_dist(v, &mut rng);
        let law = enumerate_vanilla_step(&q, &p)?;
        vanilla_max_tvd = vanilla_max_tvd.max(crate::prob::tvd(&law.law, &q)?);
    }
    let mut report = SuiteReport {
        vanilla_instances: vanilla,
        lantern_instances: lantern,
        vanilla_max_tvd,
        candidate_max_dev: 0.0,
        mixture_min_slack: f64::INFINITY,
        realized_exceed: 0,
        reduction_max_dev: 0.0,
        closed_form_max_dev: 0.0,
        all_strict: true,
    };
    let tiny = DivergenceBound::tvd(1e-12).expect("valid");
    for _ in 0..lantern {
        let inst = random_lantern_instance(16, &mut rng);
        let delta = inst.bound.delta();
        let law = enumerate_lantern_step(&inst.q, &inst.p, &inst.idx, inst.bound)?;
        for x in 0..inst.q.vocab_size() {
            let x = TokenId::from(x);
            let set = build_proximity_set(&inst.q, x, &inst.idx, inst.bound);
            let closed: f64 = set.members.iter().filter(|&&m| m != x).map(|&m| inst.q.get(m)).sum();
            report.closed_form_max_dev = report.closed_form_max_dev.max((set.realized_divergence - closed).abs());
            report.all_strict &= set.realized_divergence < delta;
            let want = crate::proximity::distort_target(&inst.q, &set)
                .expect("set built from q")
                .dist;
            if let Some(c) = &law.candidate_laws[x.index()] {
                report.candidate_max_dev = report.candidate_max_dev.max(max_abs_dev(c.mass(), want.mass()));
            }
        }
        report.mixture_min_slack = report
            .mixture_min_slack
            .min(delta - crate::prob::tvd(&law.candidate_mixture, &inst.q)?);
        if crate::prob::tvd(&law.law, &inst.q)? >= delta {
            report.realized_exceed += 1;
        }
        let van = enumerate_vanilla_step(&inst.q, &inst.p)?;
        let red = enumerate_lantern_step(&inst.q, &inst.p, &inst.idx, tiny)?;
        report.reduction_max_dev = report.reduction_max_dev.max(max_abs_dev(van.law.mass(), red.law.mass()));
    }
    Ok(report)
}
