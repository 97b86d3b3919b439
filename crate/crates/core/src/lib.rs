//! Speculative decoding with a relaxed, latent-proximity acceptance rule.
//!
//! A cheap drafter proposes tokens and a target model verifies them. The
//! vanilla rule reproduces the target exactly. The relaxed rule also credits
//! a draft with the target mass of its nearest codebook neighbours, as long
//! as moving that mass keeps the target within a TVD or JSD budget.

pub mod codebook;
pub mod decoding;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod oracle;
pub mod prob;
pub mod proximity;

pub use codebook::{build_neighbor_index, Codebook, NeighborIndex, ProximityMeasureKind};
pub use decoding::{decode, DecodeConfig, DecodeMode, DecodeTrace, StepOutcome};
pub use harness::{run_experiment, validate_config, ExperimentConfig, HarnessError};
pub use metrics::StatsReport;
pub use models::{AutoregressiveModel, TableModel};
pub use prob::{DistanceMetricKind, ProbDist, TokenId};
pub use proximity::{build_proximity_set, distort_target, DivergenceBound, ProximitySet};
