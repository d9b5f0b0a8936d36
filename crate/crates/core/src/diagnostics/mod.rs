//! Exact and empirical training-dynamics diagnostics.
//!
//! Identity checks run on an enumerated response space or on a sampled group;
//! averaging over prompts is left to callers.

mod corollary;
mod entropy;
mod enumerate;
mod interference;
mod mass;
mod metrics;

pub use corollary::{
    corollary_check, sample_corollary_instance, CorollaryInstance, CorollaryVerdict, Hypothesis,
};
pub use entropy::{
    entropy_difference_quotient, entropy_of_log_probs, entropy_rate_from, entropy_report,
    exact_entropy, token_entropy_estimate, EntropyReport, EstimationMode,
};
pub use enumerate::{
    enumerate_distribution, enumerate_sequences, enumerate_with_tangent, EnumeratedDistribution,
    ENUMERATION_BOUND,
};
pub use interference::{
    gram, interference, kernel_relative_error, kernel_summary, orthogonal_pair,
    predicted_vs_observed_drift, token_pair_coefficients, DriftReport, InterferenceReport,
    KernelSummary, OrthogonalPair,
};
pub use mass::{format_mass, format_mass_from, FormatMassReport};
pub use metrics::{
    chunks, degeneracy_metrics, duplication_ratio, mean_pool, separation_score, spearman,
    DegeneracyReport, SeparationScore,
};
