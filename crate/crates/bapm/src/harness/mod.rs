//! Monte Carlo scenario runner, metrics, and report emission.

pub mod dgp;
pub mod semisynth;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::design::{
    run_design, Block, DesignConfig, DesignKind, DesignResult, Method,
};
use crate::error::{Error, Result};
use crate::inference::{
    brs_test, cr_plus_estimate, neyman_variance_cr, stratified_adjusted_estimate, EstimateReport,
};
use crate::predict::{oracle_score, LearnerConfig};
use crate::rng::{labels, RngStream};
use crate::types::Sample;

pub use dgp::{draw_population, true_tau_synthetic, DgpDraw};
pub use semisynth::{build_semisynthetic, load_experiment_csv, SemiSyntheticPopulation};

/// Where each iteration's population comes from.
#[derive(Debug, Clone)]
pub enum PopulationSource {
    Synthetic { n_rel: usize, n_irr: usize },
    SemiSynthetic(Arc<SemiSyntheticPopulation>),
}

/// A Monte Carlo scenario: a population source, a sample size, and the
/// methods to run each iteration.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub n: usize,
    pub iterations: u64,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Learner for the batch-1 outcome models that drive the designs.
    pub learner: LearnerConfig,
    /// Learner for the cross-fit regression adjustment; trained on much
    /// larger sets than the batch-1 models, so it keeps the leaf floor.
    pub adjust_learner: LearnerConfig,
    pub batch1_fraction: f64,
    /// Cross-fitting folds for the adjusted estimators.
    pub folds: usize,
    pub source: PopulationSource,
}

impl ScenarioConfig {
    pub fn synthetic(n: usize, n_rel: usize, n_irr: usize, iterations: u64, seed: u64) -> Self {
        ScenarioConfig {
            n,
            iterations,
            seed,
            methods: Method::CANONICAL.to_vec(),
            learner: LearnerConfig::boosted_batch1_default(),
            adjust_learner: LearnerConfig::boosted_default(),
            batch1_fraction: 0.5,
            folds: 5,
            source: PopulationSource::Synthetic { n_rel, n_irr },
        }
    }

    fn scenario_labels(&self) -> (Option<usize>, Option<usize>) {
        match &self.source {
            PopulationSource::Synthetic { n_rel, n_irr } => (Some(*n_rel), Some(*n_irr)),
            PopulationSource::SemiSynthetic(_) => (None, None),
        }
    }

    /// The truth the estimates are scored against.
    pub fn true_tau(&self) -> f64 {
        match &self.source {
            PopulationSource::Synthetic { .. } => true_tau_synthetic(),
            PopulationSource::SemiSynthetic(pop) => pop.true_tau(),
        }
    }
}

/// Aggregated metrics for one method in one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub n_rel: Option<usize>,
    pub n_irr: Option<usize>,
    pub method: Method,
    /// Mean point estimate.
    pub ate: f64,
    /// Mean reported standard error.
    pub se: f64,
    /// Mean confidence-interval length.
    pub ci_length: f64,
    /// Fraction of intervals covering the true effect.
    pub coverage: f64,
    /// Root mean squared error of the estimates about the truth.
    pub rmse: f64,
}

/// Scenario output: one row per method plus the scenario truth and
/// bookkeeping for failed iterations and the rematching-optimality check.
#[derive(Debug, Clone)]
pub struct ScenarioOutput {
    pub rows: Vec<MetricsRow>,
    pub true_tau: f64,
    pub failures: Vec<(u64, String)>,
    /// BAPM runs where the rematched pairing was worse than the stage-1
    /// pairing under the final metric; always zero for an exact solver.
    pub rematch_violations: usize,
    pub bapm_runs: usize,
}

struct MethodOutcome {
    estimate: f64,
    se: f64,
    ci_length: f64,
    covered: bool,
}

struct IterationOutcome {
    outcomes: Vec<MethodOutcome>,
    rematch_violation: bool,
    ran_bapm: bool,
}

fn subsample_population(
    pop: &SemiSyntheticPopulation,
    n: usize,
    stream: &RngStream,
) -> Result<(Sample, Vec<f64>, Vec<f64>)> {
    if n > pop.n() {
        return Err(Error::Scenario(format!(
            "cannot sample {n} units from a population of {}",
            pop.n()
        )));
    }
    let mut idx: Vec<usize> = (0..pop.n()).collect();
    idx.shuffle(&mut stream.rng());
    idx.truncate(n);
    idx.sort_unstable();
    let covs = nalgebra::DMatrix::from_fn(n, pop.covariates.ncols(), |r, c| {
        pop.covariates[(idx[r], c)]
    });
    let y1: Vec<f64> = idx.iter().map(|&i| pop.y1(i)).collect();
    let y0: Vec<f64> = idx.iter().map(|&i| pop.y0(i)).collect();
    Ok((Sample::new(covs)?, y1, y0))
}

fn run_iteration(config: &ScenarioConfig, iteration: u64) -> Result<IterationOutcome> {
    let iter_stream = RngStream::new(config.seed).child(iteration);
    let (sample, y1, y0) = match &config.source {
        PopulationSource::Synthetic { n_rel, n_irr } => {
            let draw = draw_population(
                config.n,
                *n_rel,
                *n_irr,
                &iter_stream.child(labels::POPULATION),
            )?;
            (Sample::new(draw.observed)?, draw.y1, draw.y0)
        }
        PopulationSource::SemiSynthetic(pop) => {
            subsample_population(pop, config.n, &iter_stream.child(labels::POPULATION))?
        }
    };
    let true_tau = config.true_tau();
    let oracle = |unit: usize, z: u8| if z == 1 { y1[unit] } else { y0[unit] };
    let scores = oracle_score(&y1, &y0);

    // One design run per distinct design, shared between a method and its
    // regression-adjusted variant; substreams are labeled by design so the
    // configured method set cannot change any draw.
    let kinds: BTreeSet<DesignKind> = config.methods.iter().map(|m| m.design_kind()).collect();
    let mut designs: Vec<(DesignKind, DesignResult)> = Vec::with_capacity(kinds.len());
    let mut rematch_violation = false;
    let mut ran_bapm = false;
    for kind in kinds {
        let design_config = DesignConfig {
            method: Method::Bapm,
            learner: config.learner.clone(),
            batch1_fraction: config.batch1_fraction,
        };
        let stream = iter_stream.child(labels::DESIGN_BASE + kind.stream_index());
        let result = run_design(kind, &sample, &design_config, &stream, &oracle, Some(&scores))?;
        if kind == DesignKind::Bapm {
            ran_bapm = true;
            if let (Some(rematch), Some(stage1)) = (result.rematch_total, result.stage1_total) {
                if rematch > stage1 + 1e-9 * (1.0 + stage1.abs()) {
                    rematch_violation = true;
                }
            }
        }
        designs.push((kind, result));
    }
    let design_of = |kind: DesignKind| -> &DesignResult {
        &designs.iter().find(|(k, _)| *k == kind).expect("design was run").1
    };

    let mut outcomes = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let design = design_of(method.design_kind());
        let y: Vec<f64> = design
            .assignment
            .z()
            .iter()
            .enumerate()
            .map(|(i, &zi)| if zi == 1 { y1[i] } else { y0[i] })
            .collect();
        let stream = iter_stream.child(labels::INFERENCE_BASE + method.stream_index());
        let report: EstimateReport = match method {
            Method::Cr => neyman_variance_cr(&y, &design.assignment)?,
            Method::CrPlus => cr_plus_estimate(
                &y,
                &design.assignment,
                sample.covariates(),
                &config.adjust_learner,
                config.folds,
                &stream,
            )?,
            Method::BapmPlus => {
                let blocks: &[Block] = design
                    .blocks
                    .as_ref()
                    .ok_or_else(|| Error::Scenario("adjusted estimator needs blocks".into()))?;
                // The stratified estimator reuses the outcome-learner
                // configuration that produced the design's predictions.
                stratified_adjusted_estimate(
                    blocks,
                    &y,
                    &design.assignment,
                    sample.covariates(),
                    &config.learner,
                    config.folds,
                    &stream,
                )?
            }
            _ => {
                let ordered = design
                    .ordered
                    .as_ref()
                    .ok_or_else(|| Error::Scenario("paired test needs an ordering".into()))?;
                brs_test(ordered, &y, &design.assignment)?
            }
        };
        outcomes.push(MethodOutcome {
            estimate: report.tau_hat,
            se: report.se,
            ci_length: report.ci_length(),
            covered: report.covers(true_tau),
        });
    }
    Ok(IterationOutcome { outcomes, rematch_violation, ran_bapm })
}

/// Run a scenario: every iteration draws its own population from a
/// substream indexed by iteration number, runs each configured method's
/// design and matched inference, and scores against the scenario truth.
/// Iterations run in parallel; aggregation is by iteration index, so the
/// output is identical for any worker count.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioOutput> {
    if config.iterations == 0 {
        return Err(Error::Scenario("iterations must be at least 1".into()));
    }
    if config.methods.is_empty() {
        return Err(Error::Scenario("no methods configured".into()));
    }
    let results: Vec<std::result::Result<IterationOutcome, (u64, String)>> = (0..config
        .iterations)
        .into_par_iter()
        .map(|it| run_iteration(config, it).map_err(|e| (it, e.to_string())))
        .collect();

    let mut failures = Vec::new();
    let mut rematch_violations = 0usize;
    let mut bapm_runs = 0usize;
    struct Acc {
        sum_est: f64,
        sum_se: f64,
        sum_ci: f64,
        covered: usize,
        sum_sq_err: f64,
        count: usize,
    }
    let true_tau = config.true_tau();
    let mut acc: Vec<Acc> = config
        .methods
        .iter()
        .map(|_| Acc { sum_est: 0.0, sum_se: 0.0, sum_ci: 0.0, covered: 0, sum_sq_err: 0.0, count: 0 })
        .collect();
    for result in results {
        match result {
            Err(failure) => failures.push(failure),
            Ok(iteration) => {
                if iteration.ran_bapm {
                    bapm_runs += 1;
                    if iteration.rematch_violation {
                        rematch_violations += 1;
                    }
                }
                for (slot, outcome) in iteration.outcomes.iter().enumerate() {
                    let a = &mut acc[slot];
                    a.sum_est += outcome.estimate;
                    a.sum_se += outcome.se;
                    a.sum_ci += outcome.ci_length;
                    a.covered += outcome.covered as usize;
                    let err = outcome.estimate - true_tau;
                    a.sum_sq_err += err * err;
                    a.count += 1;
                }
            }
        }
    }
    if failures.len() * 100 > config.iterations as usize {
        return Err(Error::Scenario(format!(
            "{} of {} iterations failed (more than 1%); first failure at iteration {}: {}",
            failures.len(),
            config.iterations,
            failures[0].0,
            failures[0].1
        )));
    }

    let (n_rel, n_irr) = config.scenario_labels();
    let mut rows: Vec<MetricsRow> = config
        .methods
        .iter()
        .zip(&acc)
        .map(|(&method, a)| {
            let c = a.count.max(1) as f64;
            MetricsRow {
                n_rel,
                n_irr,
                method,
                ate: a.sum_est / c,
                se: a.sum_se / c,
                ci_length: a.sum_ci / c,
                coverage: a.covered as f64 / c,
                rmse: (a.sum_sq_err / c).sqrt(),
            }
        })
        .collect();
    rows.sort_by_key(|r| r.method.stream_index());
    Ok(ScenarioOutput { rows, true_tau, failures, rematch_violations, bapm_runs })
}

/// CSV header, exactly as written.
pub const CSV_HEADER: &str = "n_rel,n_irr,method,ate,se,ci_length,coverage,rmse";

fn opt_field(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Render the rows as CSV (shortest round-trip float formatting, so
/// re-reading reproduces every value exactly).
pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.n_rel, r.n_irr, r.method.stream_index()));
    for r in sorted {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            opt_field(r.n_rel),
            opt_field(r.n_irr),
            r.method.label(),
            r.ate,
            r.se,
            r.ci_length,
            r.coverage,
            r.rmse
        ));
    }
    out
}

/// Write the CSV report and return the aligned text table for stdout.
pub fn emit_report(rows: &[MetricsRow], path: &Path) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no rows to report".into()));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(render_csv(rows).as_bytes())?;
    Ok(render_table(rows))
}

/// An aligned plain-text table of the metrics.
pub fn render_table(rows: &[MetricsRow]) -> String {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.n_rel, r.n_irr, r.method.stream_index()));
    let mut out = String::new();
    out.push_str(&format!(
        "{:>5} {:>5} {:<8} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "n_rel", "n_irr", "method", "ate", "se", "ci_len", "coverage", "rmse"
    ));
    for r in sorted {
        out.push_str(&format!(
            "{:>5} {:>5} {:<8} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
            opt_field(r.n_rel),
            opt_field(r.n_irr),
            r.method.label(),
            r.ate,
            r.se,
            r.ci_length,
            r.coverage,
            r.rmse
        ));
    }
    out
}

/// Parse a CSV produced by [`render_csv`] back into rows.
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::InvalidInput("empty CSV".into()))?;
    if header != CSV_HEADER {
        return Err(Error::InvalidInput(format!("unexpected header '{header}'")));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::InvalidInput(format!("bad row '{line}'")));
        }
        let opt = |s: &str| -> Result<Option<usize>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::InvalidInput(format!("bad count '{s}'")))
            }
        };
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::InvalidInput(format!("bad number '{s}'")))
        };
        rows.push(MetricsRow {
            n_rel: opt(fields[0])?,
            n_irr: opt(fields[1])?,
            method: Method::parse(fields[2])?,
            ate: num(fields[3])?,
            se: num(fields[4])?,
            ci_length: num(fields[5])?,
            coverage: num(fields[6])?,
            rmse: num(fields[7])?,
        });
    }
    Ok(rows)
}
