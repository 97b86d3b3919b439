//! Dense probability vectors over a token vocabulary.
//!
//! Everything here is a pure function of its inputs. Random draws take an
//! explicit `&mut R: Rng` so that callers own the generator state.

use std::cmp::Ordering;
use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used for every "sums to one" check.
pub const NORM_TOL: f64 = 1e-9;

/// The generator used across the crate. ChaCha streams are portable, so a
/// seed fixes every output byte on every platform.
pub type SpecRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SpecRng {
    SpecRng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbError {
    #[error("every entry is zero")]
    AllZero,
    #[error("negative mass {value} at index {index}")]
    NegativeMass { index: usize, value: f64 },
    #[error("non-finite mass at index {0}")]
    NonFinite(usize),
    #[error("residual [q - p]+ has zero total mass")]
    DegenerateResidual,
    #[error("vocabulary size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("distribution sums to {0}, not 1")]
    NotNormalized(f64),
}

/// Index of a token in the active vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for TokenId {
    fn from(i: usize) -> Self {
        TokenId(i as u32)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which divergence bounds the distortion of a proximity set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetricKind {
    Tvd,
    Jsd,
}

impl DistanceMetricKind {
    /// Largest value the divergence can take.
    pub fn max_value(self) -> f64 {
        match self {
            DistanceMetricKind::Tvd => 1.0,
            DistanceMetricKind::Jsd => std::f64::consts::LN_2,
        }
    }

    pub fn eval(self, a: &ProbDist, b: &ProbDist) -> Result<f64, ProbError> {
        match self {
            DistanceMetricKind::Tvd => tvd(a, b),
            DistanceMetricKind::Jsd => jsd(a, b),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMetricKind::Tvd => "tvd",
            DistanceMetricKind::Jsd => "jsd",
        }
    }
}

/// A normalized, nonnegative mass vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbDist {
    mass: Vec<f64>,
}

impl<'de> Deserialize<'de> for ProbDist {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let mass = Vec::<f64>::deserialize(de)?;
        ProbDist::from_normalized(mass).map_err(serde::de::Error::custom)
    }
}

impl ProbDist {
    /// Renormalizes `raw` to sum to one.
    pub fn new(raw: Vec<f64>) -> Result<Self, ProbError> {
        let total = check_mass(&raw)?;
        if total == 0.0 {
            return Err(ProbError::AllZero);
        }
        let mass = if (total - 1.0).abs() == 0.0 {
            raw
        } else {
            raw.into_iter().map(|m| m / total).collect()
        };
        Ok(ProbDist { mass })
    }

    /// Accepts `mass` verbatim if it already sums to one within [`NORM_TOL`].
    /// Used by loaders so stored vectors round-trip bit-exactly.
    pub fn from_normalized(mass: Vec<f64>) -> Result<Self, ProbError> {
        let total = check_mass(&mass)?;
        if (total - 1.0).abs() > NORM_TOL {
            return Err(ProbError::NotNormalized(total));
        }
        Ok(ProbDist { mass })
    }

    pub fn uniform(vocab_size: usize) -> Self {
        assert!(vocab_size > 0, "empty vocabulary");
        ProbDist {
            mass: vec![1.0 / vocab_size as f64; vocab_size],
        }
    }

    pub fn one_hot(vocab_size: usize, token: TokenId) -> Self {
        let mut mass = vec![0.0; vocab_size];
        mass[token.index()] = 1.0;
        ProbDist { mass }
    }

    #[inline]
    pub fn vocab_size(&self) -> usize {
        self.mass.len()
    }

    #[inline]
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    #[inline]
    pub fn get(&self, token: TokenId) -> f64 {
        self.mass[token.index()]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.mass
    }

    /// Highest-mass token, ties to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &m) in self.mass.iter().enumerate().skip(1) {
            if m > self.mass[best] {
                best = i;
            }
        }
        TokenId::from(best)
    }

    /// Token ids ordered by descending mass, ties by ascending id.
    pub fn ranked(&self) -> Vec<TokenId> {
        let mut idx: Vec<usize> = (0..self.mass.len()).collect();
        idx.sort_by(|&a, &b| desc_mass(self.mass[a], self.mass[b]).then(a.cmp(&b)));
        idx.into_iter().map(TokenId::from).collect()
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }
}

fn desc_mass(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

fn check_mass(raw: &[f64]) -> Result<f64, ProbError> {
    let mut total = 0.0;
    for (index, &value) in raw.iter().enumerate() {
        if !value.is_finite() {
            return Err(ProbError::NonFinite(index));
        }
        if value < 0.0 {
            return Err(ProbError::NegativeMass { index, value });
        }
        total += value;
    }
    Ok(total)
}

/// Normalizes a raw nonnegative weight vector.
pub fn normalize(raw: &[f64]) -> Result<ProbDist, ProbError> {
    ProbDist::new(raw.to_vec())
}

fn same_size(a: &ProbDist, b: &ProbDist) -> Result<(), ProbError> {
    if a.vocab_size() != b.vocab_size() {
        return Err(ProbError::SizeMismatch(a.vocab_size(), b.vocab_size()));
    }
    Ok(())
}

/// `[q - p]+`: the positive part of `q - p`, renormalized.
pub fn residual_plus(q: &ProbDist, p: &ProbDist) -> Result<ProbDist, ProbError> {
    same_size(q, p)?;
    let raw: Vec<f64> = q
        .mass
        .iter()
        .zip(&p.mass)
        .map(|(&qm, &pm)| (qm - pm).max(0.0))
        .collect();
    match ProbDist::new(raw) {
        Err(ProbError::AllZero) => Err(ProbError::DegenerateResidual),
        other => other,
    }
}

/// Total variation distance, half the L1 distance.
pub fn tvd(a: &ProbDist, b: &ProbDist) -> Result<f64, ProbError> {
    same_size(a, b)?;
    let l1: f64 = a.mass.iter().zip(&b.mass).map(|(x, y)| (x - y).abs()).sum();
    Ok(0.5 * l1)
}

fn kl_term(a: f64, m: f64) -> f64 {
    if a > 0.0 {
        a * (a / m).ln()
    } else {
        0.0
    }
}

/// Jensen-Shannon divergence in nats.
pub fn jsd(a: &ProbDist, b: &ProbDist) -> Result<f64, ProbError> {
    same_size(a, b)?;
    Ok(jsd_mass(&a.mass, &b.mass))
}

/// One coordinate's contribution to twice the JSD.
#[inline]
pub(crate) fn jsd_term(x: f64, y: f64) -> f64 {
    let m = 0.5 * (x + y);
    kl_term(x, m) + kl_term(y, m)
}

pub(crate) fn jsd_mass(a: &[f64], b: &[f64]) -> f64 {
    let acc: f64 = a.iter().zip(b).map(|(&x, &y)| jsd_term(x, y)).sum();
    // rounding can push identical inputs a hair below zero
    (0.5 * acc).max(0.0)
}

/// Sharpens (τ < 1) or flattens (τ > 1) a distribution; τ = 0 is argmax.
pub fn apply_temperature(d: &ProbDist, tau: f64) -> ProbDist {
    assert!(tau >= 0.0 && tau.is_finite(), "temperature must be finite and >= 0");
    if tau == 0.0 {
        return ProbDist::one_hot(d.vocab_size(), d.argmax());
    }
    if tau == 1.0 {
        return d.clone();
    }
    // scale relative to the max in log space so small τ cannot underflow to all-zero
    let peak = d.get(d.argmax());
    let inv = 1.0 / tau;
    let raw: Vec<f64> = d
        .mass
        .iter()
        .map(|&m| if m > 0.0 { ((m / peak).ln() * inv).exp() } else { 0.0 })
        .collect();
    ProbDist::new(raw).expect("peak entry maps to 1")
}

/// Top-k then nucleus (top-p) truncation, renormalized after each cut.
pub fn truncate_top_k_p(d: &ProbDist, top_k: usize, top_p: f64) -> ProbDist {
    let v = d.vocab_size();
    assert!(top_k >= 1 && top_k <= v, "top_k must lie in [1, V]");
    assert!(top_p > 0.0 && top_p <= 1.0, "top_p must lie in (0, 1]");
    if top_k == v && top_p >= 1.0 {
        return d.clone();
    }
    let ranked = d.ranked();
    let kept = &ranked[..top_k];
    let kept_mass: f64 = kept.iter().map(|&t| d.get(t)).sum();
    let mut cum = 0.0;
    let mut keep_n = kept.len();
    for (n, &t) in kept.iter().enumerate() {
        cum += d.get(t) / kept_mass;
        if cum >= top_p - 1e-12 {
            keep_n = n + 1;
            break;
        }
    }
    let mut raw = vec![0.0; v];
    for &t in &kept[..keep_n] {
        raw[t.index()] = d.get(t);
    }
    ProbDist::new(raw).expect("top-ranked token has positive mass")
}

/// Draws one token by inverse CDF on a single uniform.
pub fn sample<R: Rng + ?Sized>(d: &ProbDist, rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &m) in d.mass.iter().enumerate() {
        if m > 0.0 {
            cum += m;
            last_positive = i;
            if u < cum {
                return TokenId::from(i);
            }
        }
    }
    // u landed in the rounding gap above the final cumulative sum
    TokenId::from(last_positive)
}

/// Applies temperature then truncation, the view both decoders sample from.
pub fn adjust(d: &ProbDist, tau: f64, top_k: usize, top_p: f64) -> ProbDist {
    let tempered = apply_temperature(d, tau);
    truncate_top_k_p(&tempered, top_k.min(d.vocab_size()), top_p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pd(v: &[f64]) -> ProbDist {
        normalize(v).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn normalize_examples() {
        assert_close(pd(&[2.0, 2.0, 0.0, 0.0]).mass(), &[0.5, 0.5, 0.0, 0.0], 1e-15);
        assert_close(pd(&[1.0, 0.0, 0.0]).mass(), &[1.0, 0.0, 0.0], 0.0);
        assert_close(pd(&[0.1, 0.3]).mass(), &[0.25, 0.75], 1e-15);
    }

    #[test]
    fn normalize_errors() {
        assert_eq!(normalize(&[0.0, 0.0]), Err(ProbError::AllZero));
        assert!(matches!(
            normalize(&[0.5, -0.1]),
            Err(ProbError::NegativeMass { index: 1, .. })
        ));
    }

    #[test]
    fn from_normalized_rejects_drift() {
        assert!(ProbDist::from_normalized(vec![0.5, 0.5]).is_ok());
        assert!(matches!(
            ProbDist::from_normalized(vec![0.5, 0.6]),
            Err(ProbError::NotNormalized(_))
        ));
    }

    #[test]
    fn residual_examples() {
        let r = residual_plus(&pd(&[0.6, 0.4]), &pd(&[0.4, 0.6])).unwrap();
        assert_close(r.mass(), &[1.0, 0.0], 1e-12);
        assert_eq!(
            residual_plus(&pd(&[0.5, 0.5]), &pd(&[0.5, 0.5])),
            Err(ProbError::DegenerateResidual)
        );
        let r = residual_plus(&pd(&[0.5, 0.3, 0.2]), &pd(&[0.2, 0.5, 0.3])).unwrap();
        assert_close(r.mass(), &[1.0, 0.0, 0.0], 1e-12);
    }

    #[test]
    fn tvd_examples() {
        assert_eq!(tvd(&pd(&[0.5, 0.5]), &pd(&[0.5, 0.5])).unwrap(), 0.0);
        assert_eq!(tvd(&pd(&[1.0, 0.0]), &pd(&[0.0, 1.0])).unwrap(), 1.0);
        assert!((tvd(&pd(&[0.7, 0.3]), &pd(&[0.4, 0.6])).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(
            tvd(&pd(&[1.0]), &pd(&[0.5, 0.5])),
            Err(ProbError::SizeMismatch(1, 2))
        );
    }

    #[test]
    fn jsd_examples() {
        assert_eq!(jsd(&pd(&[0.3, 0.7]), &pd(&[0.3, 0.7])).unwrap(), 0.0);
        let max = jsd(&pd(&[1.0, 0.0]), &pd(&[0.0, 1.0])).unwrap();
        assert!((max - std::f64::consts::LN_2).abs() < 1e-15);
        // mpmath, 30 digits: 0.0338220755686052300003735989209
        let v = jsd(&pd(&[0.5, 0.5]), &pd(&[0.25, 0.75])).unwrap();
        assert!((v - 0.033_822_075_568_605_23).abs() < 1e-15, "{v}");
    }

    #[test]
    fn temperature_examples() {
        let d = pd(&[0.2, 0.8]);
        assert_eq!(apply_temperature(&d, 1.0), d);
        assert_eq!(apply_temperature(&d, 0.0).mass(), &[0.0, 1.0]);
        assert_eq!(apply_temperature(&pd(&[0.5, 0.5]), 0.0).mass(), &[1.0, 0.0]);
        // 0.2^2 : 0.8^2 = 1 : 16
        assert_close(apply_temperature(&d, 0.5).mass(), &[1.0 / 17.0, 16.0 / 17.0], 1e-15);
    }

    #[test]
    fn tiny_temperature_does_not_underflow() {
        let t = apply_temperature(&pd(&[0.3, 0.3000001, 0.4]), 1e-6);
        assert_close(t.mass(), &[0.0, 0.0, 1.0], 1e-12);
    }

    #[test]
    fn truncation_examples() {
        let d = pd(&[0.5, 0.3, 0.2]);
        assert_eq!(truncate_top_k_p(&d, 3, 1.0), d);
        assert_close(truncate_top_k_p(&d, 2, 1.0).mass(), &[0.625, 0.375, 0.0], 1e-15);
        assert_close(truncate_top_k_p(&d, 3, 0.5).mass(), &[1.0, 0.0, 0.0], 0.0);
    }

    #[test]
    fn truncation_ties_keep_lowest_id() {
        let d = pd(&[0.25, 0.25, 0.25, 0.25]);
        assert_close(truncate_top_k_p(&d, 2, 1.0).mass(), &[0.5, 0.5, 0.0, 0.0], 0.0);
    }

    #[test]
    fn sample_examples() {
        let mut rng = rng_from_seed(0);
        for _ in 0..100 {
            assert_eq!(sample(&pd(&[1.0, 0.0, 0.0]), &mut rng), TokenId(0));
            assert_eq!(sample(&pd(&[0.0, 1.0]), &mut rng), TokenId(1));
        }
        let mut rng = rng_from_seed(0);
        let half = pd(&[0.5, 0.5]);
        let n = 100_000;
        let zeros = (0..n).filter(|_| sample(&half, &mut rng) == TokenId(0)).count();
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "{freq}");
    }

    #[test]
    fn argmax_and_ranking() {
        let d = pd(&[0.2, 0.4, 0.4]);
        assert_eq!(d.argmax(), TokenId(1));
        assert_eq!(d.ranked(), vec![TokenId(1), TokenId(2), TokenId(0)]);
    }
}
