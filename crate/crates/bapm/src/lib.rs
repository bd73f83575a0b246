//! Batch-adaptive pair matching for randomized experiments.
//!
//! This crate implements a two-batch adaptive stratification procedure:
//! pair the whole sample on covariate distance, randomize half the pairs
//! as a first batch, learn outcome models from the revealed outcomes, and
//! rematch every unit on accuracy-weighted predicted potential outcomes
//! before assigning the second batch. Analysis combines the matched-pair
//! t-test with a stratified cross-fit regression-adjusted estimator.
//!
//! Alongside the adaptive design sit the comparison designs of the
//! benchmark (within-batch pairing, pilot-OLS pairing, Mahalanobis
//! pairing, complete randomization with and without adjustment), exact
//! blossom matching, and a Monte Carlo harness that reproduces the
//! synthetic benchmark tables and drives user-supplied semi-synthetic
//! populations. See the README for the command-line interface.

pub mod design;
pub mod error;
pub mod harness;
pub mod inference;
pub mod linalg;
pub mod matching;
pub mod predict;
pub mod rng;
pub mod types;

pub use design::{
    assign_within_pairs, restratify_after_attrition, run_bapm, run_cr, run_mh, run_wbpm,
    run_wbpm_ols, Block, DesignConfig, DesignKind, DesignResult, Method, OutcomeOracle,
};
pub use error::{Error, Result};
pub use harness::{
    build_semisynthetic, draw_population, emit_report, run_scenario, MetricsRow, PopulationSource,
    ScenarioConfig, ScenarioOutput,
};
pub use inference::{
    brs_test, cr_plus_estimate, difference_in_means, eta_squared, mse_decomposition,
    neyman_variance_cr, stratified_adjusted_estimate, EstimateReport, MseDecomposition,
    VarianceKind,
};
pub use matching::{
    forbid_same_arm_batch1, mahalanobis_distances, min_weight_perfect_matching,
    order_pairs_for_inference, pairing_diagnostics, penalized_ols_distance, weighted_po_distances,
    DistanceMatrix, PairingDiagnostics,
};
pub use predict::{
    accuracy_weights, fit, loo_predictions_batch1, oracle_score, prediction_covariance,
    AccuracyWeights, FittedModel, LearnerConfig, LearnerKind, PotentialPredictions, PredCovariance,
    Provenance,
};
pub use rng::RngStream;
pub use types::{validate_paired_assignment, Assignment, Batch, PairedOrder, Pairing, Sample};
