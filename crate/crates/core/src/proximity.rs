//! Divergence-bounded proximity sets and the distorted target they induce.
//!
//! For a drafted token `x̃` the set `A` is grown from `x̃`'s neighbour list in
//! distance order. A neighbour joins only while the distorted target (all of
//! `A`'s mass moved onto `x̃`) stays strictly within `delta` of the original;
//! the scan stops at the first neighbour that would break the bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::NeighborIndex;
use crate::prob::{jsd_term, DistanceMetricKind, ProbDist, TokenId, NORM_TOL};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProximityError {
    #[error("delta {delta} outside (0, {max}] for {metric:?}")]
    InvalidDelta {
        delta: f64,
        max: f64,
        metric: DistanceMetricKind,
    },
    #[error("set mass {recorded} disagrees with member mass {actual}")]
    InconsistentSet { recorded: f64, actual: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceBound {
    delta: f64,
    metric: DistanceMetricKind,
}

impl DivergenceBound {
    pub fn new(delta: f64, metric: DistanceMetricKind) -> Result<Self, ProximityError> {
        let max = metric.max_value();
        if !(delta > 0.0 && delta <= max) {
            return Err(ProximityError::InvalidDelta { delta, max, metric });
        }
        Ok(DivergenceBound { delta, metric })
    }

    pub fn tvd(delta: f64) -> Result<Self, ProximityError> {
        DivergenceBound::new(delta, DistanceMetricKind::Tvd)
    }

    #[inline]
    pub fn delta(&self) -> f64 {
        self.delta
    }

    #[inline]
    pub fn metric(&self) -> DistanceMetricKind {
        self.metric
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximitySet {
    pub candidate: TokenId,
    /// Candidate first, then admitted neighbours in distance order.
    pub members: Vec<TokenId>,
    /// Target mass of all members.
    pub aggregated_mass: f64,
    /// Divergence between the distorted and the original target.
    pub realized_divergence: f64,
}

impl ProximitySet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// `q` with the set's mass piled onto its candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortedTarget {
    pub dist: ProbDist,
    pub source_set: ProximitySet,
}

pub fn build_proximity_set(
    q: &ProbDist,
    candidate: TokenId,
    idx: &NeighborIndex,
    bound: DivergenceBound,
) -> ProximitySet {
    assert_eq!(q.vocab_size(), idx.vocab_size(), "index built for another vocabulary");
    let delta = bound.delta();
    let mut members = Vec::new();
    let mut aggregated_mass = 0.0;
    let mut divergence = 0.0;
    match bound.metric() {
        DistanceMetricKind::Tvd => {
            // moving q(x) onto x̃ shifts exactly q(x) of TVD; x̃ itself costs 0
            for &x in idx.neighbors(candidate) {
                let increment = if x == candidate { 0.0 } else { q.get(x) };
                if divergence + increment < delta {
                    members.push(x);
                    aggregated_mass += q.get(x);
                    divergence += increment;
                } else {
                    break;
                }
            }
        }
        DistanceMetricKind::Jsd => {
            // only the candidate and the moved token change, so update the sum in place
            let c = candidate.index();
            let qm = q.mass();
            let mut at_candidate = qm[c];
            let mut acc = 0.0;
            for &x in idx.neighbors(candidate) {
                if x == candidate {
                    members.push(x);
                    aggregated_mass += q.get(x);
                    continue;
                }
                let i = x.index();
                let merged = at_candidate + qm[i];
                let trial_acc = acc - jsd_term(at_candidate, qm[c]) + jsd_term(merged, qm[c])
                    + jsd_term(0.0, qm[i]);
                let trial = (0.5 * trial_acc).max(0.0);
                if trial < delta {
                    members.push(x);
                    aggregated_mass += q.get(x);
                    at_candidate = merged;
                    acc = trial_acc;
                    divergence = trial;
                } else {
                    break;
                }
            }
        }
    }
    ProximitySet {
        candidate,
        members,
        aggregated_mass,
        realized_divergence: divergence,
    }
}

pub fn distort_target(q: &ProbDist, set: &ProximitySet) -> Result<DistortedTarget, ProximityError> {
    let actual: f64 = set.members.iter().map(|&x| q.get(x)).sum();
    if (actual - set.aggregated_mass).abs() > NORM_TOL {
        return Err(ProximityError::InconsistentSet {
            recorded: set.aggregated_mass,
            actual,
        });
    }
    let mut mass = q.mass().to_vec();
    for &x in &set.members {
        mass[x.index()] = 0.0;
    }
    mass[set.candidate.index()] = set.aggregated_mass;
    let dist = ProbDist::from_normalized(mass).expect("mass is conserved up to rounding");
    Ok(DistortedTarget {
        dist,
        source_set: set.clone(),
    })
}
