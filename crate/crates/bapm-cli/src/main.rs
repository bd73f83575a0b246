//! Command-line simulator for batch-adaptive pair matching designs.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use bapm::design::{DesignConfig, DesignKind, Method};
use bapm::harness::{
    build_semisynthetic, emit_report, load_experiment_csv, run_scenario, PopulationSource,
    ScenarioConfig,
};
use bapm::inference::mse_decomposition;
use bapm::linalg;
use bapm::predict::LearnerConfig;
use bapm::rng::{labels, RngStream};
use bapm::types::Sample;

#[derive(Parser)]
#[command(
    name = "bapm",
    about = "Batch-adaptive pair matching: simulate benchmark scenarios, build \
             semi-synthetic populations, and inspect design diagnostics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a synthetic Monte Carlo scenario and write a metrics CSV.
    Simulate(SimulateArgs),
    /// Build a semi-synthetic population from an experiment CSV and run
    /// the Monte Carlo benchmark on it.
    Semisynth(SemisynthArgs),
    /// Run a reduced scenario and print pairing and adjustment-error
    /// diagnostics instead of the metrics table.
    Diagnose(DiagnoseArgs),
}

/// Flags shared by the scenario-driving subcommands. Every flag can also
/// be supplied through `--config` as a flat `key = value` file using the
/// long flag names; command-line flags win.
#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Flat key = value config file mirroring the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample size per iteration (even).
    #[arg(long)]
    n: Option<usize>,
    /// Monte Carlo iterations.
    #[arg(long)]
    iterations: Option<u64>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated methods: bapm+,bapm,wbpm,wbpm-ols,mh,cr,cr+ (and
    /// `oracle` for the benchmarking design).
    #[arg(long)]
    methods: Option<String>,
    /// Outcome learner: boosted, ols, or ridge.
    #[arg(long)]
    learner: Option<String>,
    /// Ridge penalty when --learner ridge.
    #[arg(long)]
    ridge_penalty: Option<f64>,
    /// Boosting stages when --learner boosted.
    #[arg(long)]
    trees: Option<usize>,
    /// Tree depth when --learner boosted.
    #[arg(long)]
    max_depth: Option<usize>,
    /// Shrinkage when --learner boosted.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Minimum observations per leaf when --learner boosted.
    #[arg(long)]
    min_leaf: Option<usize>,
    /// Leaf floor for the adjustment learner (defaults to the standard
    /// learner's floor of 5).
    #[arg(long)]
    adjust_min_leaf: Option<usize>,
    /// Fraction of the sample in batch 1.
    #[arg(long)]
    batch1_fraction: Option<f64>,
    /// Cross-fitting folds for the adjusted estimators.
    #[arg(long)]
    folds: Option<usize>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of outcome-relevant covariates (0, 5, or more).
    #[arg(long)]
    n_rel: Option<usize>,
    /// Number of irrelevant noise covariates.
    #[arg(long)]
    n_irr: Option<usize>,
}

#[derive(Args)]
struct SemisynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input experiment CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Name of the outcome column.
    #[arg(long)]
    outcome: Option<String>,
    /// Name of the 0/1 treatment column.
    #[arg(long)]
    treatment: Option<String>,
    /// Ensemble size for counterfactual imputation.
    #[arg(long)]
    ensemble: Option<usize>,
    /// Row-subsampling rate for ensemble diversity.
    #[arg(long)]
    subsample: Option<f64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    n_rel: Option<usize>,
    #[arg(long)]
    n_irr: Option<usize>,
}

/// A flat `key = value` file; `#` starts a comment.
fn load_config_file(path: &PathBuf) -> Result<HashMap<String, String>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key = value", path.display(), lineno + 1))?;
        map.insert(key.trim().replace('_', "-"), value.trim().to_string());
    }
    Ok(map)
}

struct Settings {
    file: HashMap<String, String>,
}

impl Settings {
    fn new(config: &Option<PathBuf>) -> Result<Self, String> {
        let file = match config {
            Some(path) => load_config_file(path)?,
            None => HashMap::new(),
        };
        Ok(Settings { file })
    }

    fn get<T: std::str::FromStr>(
        &self,
        cli: Option<T>,
        key: &str,
        default: Option<T>,
    ) -> Result<T, String> {
        if let Some(v) = cli {
            return Ok(v);
        }
        if let Some(raw) = self.file.get(key) {
            return raw.parse().map_err(|_| format!("config {key} = '{raw}' is invalid"));
        }
        default.ok_or_else(|| format!("missing required option --{key}"))
    }
}

fn parse_methods(raw: &str) -> Result<Vec<Method>, String> {
    let mut methods = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        methods.push(Method::parse(part).map_err(|e| e.to_string())?);
    }
    if methods.is_empty() {
        return Err("no methods given".into());
    }
    Ok(methods)
}

fn build_learners(
    settings: &Settings,
    common: &CommonArgs,
) -> Result<(LearnerConfig, LearnerConfig), String> {
    let kind: String = settings.get(common.learner.clone(), "learner", Some("boosted".into()))?;
    let mut learner = match kind.as_str() {
        "boosted" | "boosted_trees" => LearnerConfig::boosted_batch1_default(),
        "ols" => LearnerConfig::ols(),
        "ridge" => LearnerConfig::ridge(1.0),
        other => return Err(format!("unknown learner '{other}'")),
    };
    if let Ok(p) = settings.get(common.ridge_penalty, "ridge-penalty", Some(learner.ridge_penalty))
    {
        learner.ridge_penalty = p;
    }
    if let Ok(t) = settings.get(common.trees, "trees", Some(learner.trees)) {
        learner.trees = t;
    }
    if let Ok(d) = settings.get(common.max_depth, "max-depth", Some(learner.max_depth)) {
        learner.max_depth = d;
    }
    if let Ok(r) = settings.get(common.learning_rate, "learning-rate", Some(learner.learning_rate))
    {
        learner.learning_rate = r;
    }
    if let Ok(m) = settings.get(common.min_leaf, "min-leaf", Some(learner.min_leaf)) {
        learner.min_leaf = m;
    }
    let mut adjust = learner.clone();
    adjust.min_leaf = settings.get(
        common.adjust_min_leaf,
        "adjust-min-leaf",
        Some(LearnerConfig::boosted_default().min_leaf),
    )?;
    Ok((learner, adjust))
}

fn build_scenario(
    settings: &Settings,
    common: &CommonArgs,
    source: PopulationSource,
) -> Result<(ScenarioConfig, PathBuf), String> {
    let methods_raw: String = settings.get(
        common.methods.clone(),
        "methods",
        Some("bapm+,bapm,wbpm,wbpm-ols,mh,cr,cr+".into()),
    )?;
    let (learner, adjust_learner) = build_learners(settings, common)?;
    let config = ScenarioConfig {
        n: settings.get(common.n, "n", Some(96))?,
        iterations: settings.get(common.iterations, "iterations", Some(2000))?,
        seed: settings.get(common.seed, "seed", Some(7))?,
        methods: parse_methods(&methods_raw)?,
        learner,
        adjust_learner,
        batch1_fraction: settings.get(common.batch1_fraction, "batch1-fraction", Some(0.5))?,
        folds: settings.get(common.folds, "folds", Some(5))?,
        source,
    };
    let out: PathBuf = settings.get(common.out.clone(), "out", Some(PathBuf::from("results.csv")))?;
    Ok((config, out))
}

fn init_threads(settings: &Settings, common: &CommonArgs) -> Result<(), String> {
    if let Ok(threads) = settings.get(common.threads, "threads", None) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<(), String> {
    let settings = Settings::new(&args.common.config)?;
    init_threads(&settings, &args.common)?;
    let n_rel = settings.get(args.n_rel, "n-rel", Some(10))?;
    let n_irr = settings.get(args.n_irr, "n-irr", Some(10))?;
    let (config, out) =
        build_scenario(&settings, &args.common, PopulationSource::Synthetic { n_rel, n_irr })?;
    eprintln!(
        "simulating (n_rel={n_rel}, n_irr={n_irr}), n={}, {} iterations, seed {}",
        config.n, config.iterations, config.seed
    );
    let output = run_scenario(&config).map_err(|e| e.to_string())?;
    report(&output, &out)
}

fn semisynth(args: &SemisynthArgs) -> Result<(), String> {
    let settings = Settings::new(&args.common.config)?;
    init_threads(&settings, &args.common)?;
    let data: PathBuf = settings.get(args.data.clone(), "data", None)?;
    let outcome: String = settings.get(args.outcome.clone(), "outcome", None)?;
    let treatment: String = settings.get(args.treatment.clone(), "treatment", None)?;
    let ensemble: usize = settings.get(args.ensemble, "ensemble", Some(25))?;
    let subsample: f64 = settings.get(args.subsample, "subsample", Some(0.8))?;

    let dataset = load_experiment_csv(&data, &outcome, &treatment).map_err(|e| e.to_string())?;
    eprintln!(
        "loaded {} rows ({} dropped), {} covariate columns",
        dataset.outcome.len(),
        dataset.dropped_rows,
        dataset.covariates.ncols()
    );
    let seed: u64 = settings.get(args.common.seed, "seed", Some(7))?;
    let mut imputer = LearnerConfig::boosted_default();
    imputer.subsample = if subsample < 1.0 { Some(subsample) } else { None };
    let population = build_semisynthetic(
        dataset.covariates,
        dataset.outcome,
        dataset.treatment,
        ensemble,
        &imputer,
        &RngStream::new(seed).child(labels::POPULATION),
    )
    .map_err(|e| e.to_string())?;
    eprintln!(
        "population of {} units; true tau = {:.4}",
        population.n(),
        population.true_tau()
    );
    let (config, out) = build_scenario(
        &settings,
        &args.common,
        PopulationSource::SemiSynthetic(Arc::new(population)),
    )?;
    let output = run_scenario(&config).map_err(|e| e.to_string())?;
    report(&output, &out)
}

fn report(output: &bapm::harness::ScenarioOutput, out: &PathBuf) -> Result<(), String> {
    let table = emit_report(&output.rows, out).map_err(|e| e.to_string())?;
    print!("{table}");
    println!("true tau: {:.6}", output.true_tau);
    if output.bapm_runs > 0 {
        println!(
            "rematching optimality: {}/{} runs improved on the stage-1 pairing",
            output.bapm_runs - output.rematch_violations,
            output.bapm_runs
        );
    }
    if !output.failures.is_empty() {
        println!("failed iterations ({}): ", output.failures.len());
        for (it, msg) in &output.failures {
            println!("  iteration {it}: {msg}");
        }
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn diagnose(args: &DiagnoseArgs) -> Result<(), String> {
    let settings = Settings::new(&args.common.config)?;
    init_threads(&settings, &args.common)?;
    let n_rel = settings.get(args.n_rel, "n-rel", Some(10))?;
    let n_irr = settings.get(args.n_irr, "n-irr", Some(10))?;
    let (mut config, _) =
        build_scenario(&settings, &args.common, PopulationSource::Synthetic { n_rel, n_irr })?;
    if args.common.iterations.is_none() && !settings.file.contains_key("iterations") {
        config.iterations = 200;
    }
    eprintln!(
        "diagnosing (n_rel={n_rel}, n_irr={n_irr}), n={}, {} iterations, seed {}",
        config.n, config.iterations, config.seed
    );

    // Reference coefficients from a large oracle draw.
    let oracle_draw = bapm::harness::draw_population(
        100_000,
        n_rel,
        n_irr,
        &RngStream::new(config.seed).child(900),
    )
    .map_err(|e| e.to_string())?;
    let beta_star = |y: &[f64]| -> Result<Vec<f64>, String> {
        let model = linalg::linear_fit(&oracle_draw.observed, y, 0.0).map_err(|e| e.to_string())?;
        Ok(model.slopes.iter().copied().collect())
    };
    let beta1_star = beta_star(&oracle_draw.y1)?;
    let beta0_star = beta_star(&oracle_draw.y0)?;

    let paired: Vec<Method> = config
        .methods
        .iter()
        .copied()
        .filter(|m| m.design_kind() != DesignKind::Cr)
        .collect();
    let mut within_l1: HashMap<Method, f64> = HashMap::new();
    let mut within_l2: HashMap<Method, f64> = HashMap::new();
    let mut cross_l2: HashMap<Method, f64> = HashMap::new();
    let mut psi_bar_sum = 0.0;
    let mut cross_term_sum = 0.0;
    let mut cross_term_sq = 0.0;
    let mut quad_sum = 0.0;
    let mut imbalance_norm_sum = 0.0;
    let mut eta_sum = 0.0;
    let mut eta_count = 0usize;

    let iterations = config.iterations;
    for it in 0..iterations {
        let iter_stream = RngStream::new(config.seed).child(it);
        let draw = bapm::harness::draw_population(
            config.n,
            n_rel,
            n_irr,
            &iter_stream.child(labels::POPULATION),
        )
        .map_err(|e| e.to_string())?;
        let sample = Sample::new(draw.observed.clone()).map_err(|e| e.to_string())?;
        let oracle = |unit: usize, z: u8| if z == 1 { draw.y1[unit] } else { draw.y0[unit] };
        let scores = bapm::predict::oracle_score(&draw.y1, &draw.y0);

        for &method in &paired {
            let kind = method.design_kind();
            let design_config = DesignConfig {
                method,
                learner: config.learner.clone(),
                batch1_fraction: config.batch1_fraction,
            };
            let stream = iter_stream.child(labels::DESIGN_BASE + kind.stream_index());
            let result = bapm::design::run_design(
                kind,
                &sample,
                &design_config,
                &stream,
                &oracle,
                Some(&scores),
            )
            .map_err(|e| e.to_string())?;
            if let Some(ordered) = &result.ordered {
                let diag = bapm::matching::pairing_diagnostics(&sample, ordered);
                *within_l1.entry(method).or_default() += diag.within_pair_l1;
                *within_l2.entry(method).or_default() += diag.within_pair_l2sq;
                *cross_l2.entry(method).or_default() +=
                    diag.cross_pair_l2sq.iter().sum::<f64>() / 4.0;
            }
        }

        // Adjustment-error decomposition under complete randomization with
        // per-arm OLS coefficients fitted on an independent draw.
        let aux = bapm::harness::draw_population(
            config.n,
            n_rel,
            n_irr,
            &iter_stream.child(901),
        )
        .map_err(|e| e.to_string())?;
        let cr = bapm::design::run_cr(&sample, &iter_stream.child(902));
        let fit_arm = |want: u8| -> Result<Vec<f64>, String> {
            let idx: Vec<usize> = (0..config.n).filter(|&i| i % 2 == want as usize).collect();
            let rows = nalgebra::DMatrix::from_fn(idx.len(), aux.observed.ncols(), |r, c| {
                aux.observed[(idx[r], c)]
            });
            let y: Vec<f64> = idx
                .iter()
                .map(|&i| if want == 1 { aux.y1[i] } else { aux.y0[i] })
                .collect();
            let model = linalg::linear_fit(&rows, &y, 1e-8).map_err(|e| e.to_string())?;
            Ok(model.slopes.iter().copied().collect())
        };
        let beta1_hat = fit_arm(1)?;
        let beta0_hat = fit_arm(0)?;
        let y: Vec<f64> = cr
            .assignment
            .z()
            .iter()
            .enumerate()
            .map(|(i, &z)| if z == 1 { draw.y1[i] } else { draw.y0[i] })
            .collect();
        let decomposition = mse_decomposition(
            &y,
            &cr.assignment,
            sample.covariates(),
            &beta1_hat,
            &beta0_hat,
            &beta1_star,
            &beta0_star,
            0.5,
            bapm::harness::true_tau_synthetic(),
        )
        .map_err(|e| e.to_string())?;
        psi_bar_sum += decomposition.psi_bar;
        cross_term_sum += decomposition.cross_term;
        cross_term_sq += decomposition.cross_term * decomposition.cross_term;
        quad_sum += decomposition.quad_term;
        imbalance_norm_sum +=
            decomposition.imbalance.iter().map(|v| v * v).sum::<f64>().sqrt();

        // Share of the reference contrast captured by the learned span.
        let k = sample.k();
        let basis = nalgebra::DMatrix::from_fn(k, 2, |r, c| {
            if c == 0 {
                beta1_hat[r]
            } else {
                beta0_hat[r]
            }
        });
        let sigma = {
            let x = sample.covariates();
            let mut m = x.transpose() * x;
            m /= config.n as f64;
            m
        };
        if let Ok(eta) = bapm::inference::eta_squared(&basis, &beta1_star, &beta0_star, &sigma) {
            eta_sum += eta;
            eta_count += 1;
        }
    }

    let c = iterations as f64;
    println!("pairing diagnostics (mean over {iterations} iterations):");
    println!(
        "{:<10} {:>14} {:>14} {:>16}",
        "method", "within_L1", "within_L2sq", "cross_pair_L2sq"
    );
    for &method in &paired {
        println!(
            "{:<10} {:>14.4} {:>14.4} {:>16.4}",
            method.label(),
            within_l1.get(&method).unwrap_or(&0.0) / c,
            within_l2.get(&method).unwrap_or(&0.0) / c,
            cross_l2.get(&method).unwrap_or(&0.0) / c,
        );
    }
    println!();
    println!("adjustment-error decomposition under CR (cross-fit linear adjustment):");
    println!("  mean psi_bar        = {:+.6}", psi_bar_sum / c);
    let cross_mean = cross_term_sum / c;
    let cross_se = ((cross_term_sq / c - cross_mean * cross_mean) / c).max(0.0).sqrt();
    println!("  mean cross_term     = {cross_mean:+.3e} (MC se {cross_se:.3e})");
    println!("  mean quad_term      = {:.6}", quad_sum / c);
    println!("  mean |imbalance|    = {:.6}", imbalance_norm_sum / c);
    if eta_count > 0 {
        println!("  mean eta^2 (learned span vs reference contrast) = {:.4}", eta_sum / eta_count as f64);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Semisynth(args) => semisynth(args),
        Command::Diagnose(args) => diagnose(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
