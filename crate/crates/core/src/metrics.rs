//! Run statistics: accepted length, first-draft acceptance, ambiguity and
//! drafter diagnostics, and proximity-set sizes by position.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::DecodeTrace;
use crate::models::AutoregressiveModel;
use crate::prob::TokenId;

/// Drafter top-k accuracies reported in every row.
pub const ACCURACY_KS: [usize; 3] = [1, 3, 10];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no input to aggregate")]
    EmptyInput,
    #[error("traces carry no proximity sets")]
    NoSetsRecorded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub mean_accepted_length: f64,
    pub avg_accept_prob_first_draft: f64,
    pub top1_mass_mean: f64,
    pub top10_mass_mean: f64,
    pub drafter_topk_accuracy: BTreeMap<usize, f64>,
    pub avg_set_size_by_position: Vec<f64>,
    pub num_steps: usize,
    pub num_sequences: usize,
    /// Target verifications per generated token.
    pub target_forwards_per_token: f64,
    /// Drafter calls per generated token.
    pub drafter_forwards_per_token: f64,
}

fn steps(traces: &[DecodeTrace]) -> impl Iterator<Item = &crate::decoding::StepOutcome> {
    traces.iter().flat_map(|t| t.steps.iter())
}

pub fn mean_accepted_length(traces: &[DecodeTrace]) -> Result<f64, MetricsError> {
    let (n, total) = steps(traces).fold((0usize, 0usize), |(n, s), st| (n + 1, s + st.emitted_len()));
    if n == 0 {
        return Err(MetricsError::EmptyInput);
    }
    Ok(total as f64 / n as f64)
}

pub fn avg_accept_prob_first_draft(traces: &[DecodeTrace]) -> Result<f64, MetricsError> {
    let (n, total) = steps(traces)
        .filter_map(|s| s.accept_probs.first())
        .fold((0usize, 0.0), |(n, s), &a| (n + 1, s + a));
    if n == 0 {
        return Err(MetricsError::EmptyInput);
    }
    Ok(total / n as f64)
}

/// Mean top-1 mass and mean top-`top_n` mass of the model over `contexts`.
pub fn ambiguity_stats<M>(model: &M, contexts: &[Vec<TokenId>], top_n: usize) -> Result<(f64, f64), MetricsError>
where
    M: AutoregressiveModel + ?Sized,
{
    if contexts.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let (mut top1, mut top_n_sum) = (0.0, 0.0);
    for ctx in contexts {
        let d = model.next_dist(ctx);
        let mut m = d.mass().to_vec();
        m.sort_by(|a, b| b.total_cmp(a));
        top1 += m[0];
        top_n_sum += m.iter().take(top_n).sum::<f64>();
    }
    let n = contexts.len() as f64;
    Ok((top1 / n, top_n_sum / n))
}

/// Fraction of contexts where the target's greedy token is in the drafter's top-k.
pub fn drafter_accuracy<M, D>(
    target: &M,
    drafter: &D,
    contexts: &[Vec<TokenId>],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>, MetricsError>
where
    M: AutoregressiveModel + ?Sized,
    D: AutoregressiveModel + ?Sized,
{
    if contexts.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for ctx in contexts {
        let want = target.greedy_token(ctx);
        let rank = drafter
            .next_dist(ctx)
            .ranked()
            .iter()
            .position(|&t| t == want)
            .expect("ranking covers the vocabulary");
        for (&k, h) in hits.iter_mut() {
            if rank < k {
                *h += 1;
            }
        }
    }
    let n = contexts.len() as f64;
    Ok(hits.into_iter().map(|(k, h)| (k, h as f64 / n)).collect())
}

fn profile_from<F>(traces: &[DecodeTrace], size: F) -> Vec<f64>
where
    F: Fn(&crate::decoding::StepOutcome, usize) -> Option<usize>,
{
    let mut sum: Vec<f64> = Vec::new();
    let mut count: Vec<usize> = Vec::new();
    for s in steps(traces) {
        for t in 0..s.accept_probs.len() {
            let Some(n) = size(s, t) else { continue };
            let pos = s.position + t;
            if pos >= sum.len() {
                sum.resize(pos + 1, 0.0);
                count.resize(pos + 1, 0);
            }
            sum[pos] += n as f64;
            count[pos] += 1;
        }
    }
    sum.into_iter()
        .zip(count)
        .map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

/// Mean proximity-set size at each generated position.
pub fn set_size_profile(traces: &[DecodeTrace]) -> Result<Vec<f64>, MetricsError> {
    if !steps(traces).any(|s| !s.proximity_sets.is_empty()) {
        return Err(MetricsError::NoSetsRecorded);
    }
    Ok(profile_from(traces, |s, t| s.proximity_sets.get(t).map(|a| a.len())))
}

/// Set-size profile, counting every examined draft as a singleton when no
/// sets were recorded.
pub fn set_size_profile_or_ones(traces: &[DecodeTrace]) -> Vec<f64> {
    set_size_profile(traces).unwrap_or_else(|_| profile_from(traces, |_, _| Some(1)))
}

/// Contexts at which each step's first draft was verified.
pub fn step_contexts(traces: &[DecodeTrace]) -> Vec<Vec<TokenId>> {
    traces
        .iter()
        .flat_map(|tr| {
            tr.steps
                .iter()
                .map(move |s| tr.output[..tr.prompt.len() + s.position].to_vec())
        })
        .collect()
}

/// Aggregates traces into one report. Ambiguity and accuracy figures are
/// measured at the contexts the decoder actually visited.
pub fn build_report<M, D>(target: &M, drafter: &D, traces: &[DecodeTrace], gamma: usize) -> Result<StatsReport, MetricsError>
where
    M: AutoregressiveModel + ?Sized,
    D: AutoregressiveModel + ?Sized,
{
    let contexts = step_contexts(traces);
    let (top1, top10) = ambiguity_stats(target, &contexts, 10)?;
    let num_steps = contexts.len();
    let generated: usize = traces.iter().map(|t| t.generated().len()).sum();
    Ok(StatsReport {
        mean_accepted_length: mean_accepted_length(traces)?,
        avg_accept_prob_first_draft: avg_accept_prob_first_draft(traces)?,
        top1_mass_mean: top1,
        top10_mass_mean: top10,
        drafter_topk_accuracy: drafter_accuracy(target, drafter, &contexts, &ACCURACY_KS)?,
        avg_set_size_by_position: set_size_profile_or_ones(traces),
        num_steps,
        num_sequences: traces.len(),
        target_forwards_per_token: num_steps as f64 / generated as f64,
        drafter_forwards_per_token: (num_steps * gamma) as f64 / generated as f64,
    })
}

impl StatsReport {
    pub fn csv_header() -> Vec<String> {
        let mut h = vec![
            "mean_accepted_length".to_string(),
            "avg_accept_prob_first_draft".into(),
            "top1_mass_mean".into(),
            "top10_mass_mean".into(),
        ];
        h.extend(ACCURACY_KS.iter().map(|k| format!("drafter_top{k}_accuracy")));
        h.extend([
            "avg_set_size_by_position".to_string(),
            "num_steps".into(),
            "num_sequences".into(),
            "target_forwards_per_token".into(),
            "drafter_forwards_per_token".into(),
        ]);
        h
    }

    fn profile_text(&self) -> String {
        self.avg_set_size_by_position
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";")
    }

    fn accuracy(&self, k: usize) -> String {
        self.drafter_topk_accuracy
            .get(&k)
            .map_or_else(|| "nan".to_string(), |v| v.to_string())
    }

    /// Values in `csv_header` order.
    pub fn csv_record(&self) -> Vec<String> {
        let mut r = vec![
            self.mean_accepted_length.to_string(),
            self.avg_accept_prob_first_draft.to_string(),
            self.top1_mass_mean.to_string(),
            self.top10_mass_mean.to_string(),
        ];
        r.extend(ACCURACY_KS.iter().map(|&k| self.accuracy(k)));
        r.extend([
            self.profile_text(),
            self.num_steps.to_string(),
            self.num_sequences.to_string(),
            self.target_forwards_per_token.to_string(),
            self.drafter_forwards_per_token.to_string(),
        ]);
        r
    }

    /// `key = value` lines in `csv_header` order.
    pub fn to_key_value(&self) -> String {
        Self::csv_header()
            .into_iter()
            .zip(self.csv_record())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
