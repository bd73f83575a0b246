//! Design drivers: complete randomization, Mahalanobis pairing, and the
//! batch-adaptive designs that rematch or pair on predicted potential
//! outcomes.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::matching::{
    self, forbid_same_arm_batch1, mahalanobis_whitened, min_weight_perfect_matching,
    weighted_po_whitened, DistanceMatrix,
};
use crate::predict::{
    accuracy_weights_from_loo, fit_batch1_models, prediction_covariance, LearnerConfig,
    PotentialPredictions, Provenance,
};
use crate::rng::{labels, RngStream};
use crate::types::{validate_paired_assignment, Assignment, Batch, PairedOrder, Pairing, Sample};

/// The methods of the simulation study. The paired prediction-based
/// designs differ in where pairing happens (across or within batches) and
/// in what drives the distance; the `Plus` variants add cross-fit
/// regression adjustment at the analysis stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    BapmPlus,
    Bapm,
    Wbpm,
    WbpmOls,
    Mh,
    Cr,
    CrPlus,
    /// Benchmarking-only: pairs on the true potential-outcome sum, the
    /// infeasible target the adaptive designs approximate.
    Oracle,
}

impl Method {
    /// The seven methods of the study in their canonical reporting order.
    pub const CANONICAL: [Method; 7] = [
        Method::BapmPlus,
        Method::Bapm,
        Method::Wbpm,
        Method::WbpmOls,
        Method::Mh,
        Method::Cr,
        Method::CrPlus,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::BapmPlus => "BAPM+",
            Method::Bapm => "BAPM",
            Method::Wbpm => "WBPM",
            Method::WbpmOls => "WBPM-OLS",
            Method::Mh => "MH",
            Method::Cr => "CR",
            Method::CrPlus => "CR+",
            Method::Oracle => "ORACLE",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().as_str() {
            "bapm+" => Ok(Method::BapmPlus),
            "bapm" => Ok(Method::Bapm),
            "wbpm" => Ok(Method::Wbpm),
            "wbpm-ols" | "wbpm_ols" => Ok(Method::WbpmOls),
            "mh" => Ok(Method::Mh),
            "cr" => Ok(Method::Cr),
            "cr+" => Ok(Method::CrPlus),
            "oracle" => Ok(Method::Oracle),
            other => Err(Error::InvalidInput(format!("unknown method '{other}'"))),
        }
    }

    /// Which design drives this method; the `Plus` variants share their
    /// base design and differ only in the analysis stage.
    pub fn design_kind(&self) -> DesignKind {
        match self {
            Method::BapmPlus | Method::Bapm => DesignKind::Bapm,
            Method::Wbpm => DesignKind::Wbpm,
            Method::WbpmOls => DesignKind::WbpmOls,
            Method::Mh => DesignKind::Mh,
            Method::Cr | Method::CrPlus => DesignKind::Cr,
            Method::Oracle => DesignKind::Oracle,
        }
    }

    /// Stable index used to derive per-method random substreams.
    pub fn stream_index(&self) -> u64 {
        match self {
            Method::BapmPlus => 0,
            Method::Bapm => 1,
            Method::Wbpm => 2,
            Method::WbpmOls => 3,
            Method::Mh => 4,
            Method::Cr => 5,
            Method::CrPlus => 6,
            Method::Oracle => 7,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DesignKind {
    Cr,
    Mh,
    Bapm,
    Wbpm,
    WbpmOls,
    Oracle,
}

impl DesignKind {
    pub fn stream_index(&self) -> u64 {
        match self {
            DesignKind::Cr => 0,
            DesignKind::Mh => 1,
            DesignKind::Bapm => 2,
            DesignKind::Wbpm => 3,
            DesignKind::WbpmOls => 4,
            DesignKind::Oracle => 5,
        }
    }
}

/// Configuration shared by the design drivers.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignConfig {
    pub method: Method,
    pub learner: LearnerConfig,
    /// Fraction of the sample assigned to batch 1; must yield an even
    /// batch-1 size.
    pub batch1_fraction: f64,
}

impl DesignConfig {
    pub fn new(method: Method) -> Self {
        DesignConfig { method, learner: LearnerConfig::boosted_default(), batch1_fraction: 0.5 }
    }

    fn batch1_units(&self, n: usize) -> Result<usize> {
        if !(self.batch1_fraction > 0.0 && self.batch1_fraction < 1.0) {
            return Err(Error::InvalidInput("batch1_fraction must be in (0, 1)".into()));
        }
        let n1 = (self.batch1_fraction * n as f64).round() as usize;
        if n1 % 2 != 0 || n1 == 0 || n1 >= n || (n - n1) % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "batch1_fraction {} of n = {n} gives batch sizes {n1} and {}; both must be even and nonzero",
                self.batch1_fraction,
                n - n1
            )));
        }
        Ok(n1)
    }
}

/// The observed-outcome callback: given a unit index and its assigned arm,
/// return the realized outcome. Batch-adaptive drivers query it only for
/// batch-1 units; batch-2 outcomes are never read before assignment.
pub trait OutcomeOracle {
    fn observe(&self, unit: usize, z: u8) -> f64;
}

impl<F: Fn(usize, u8) -> f64> OutcomeOracle for F {
    fn observe(&self, unit: usize, z: u8) -> f64 {
        self(unit, z)
    }
}

/// A stratum used by the adjusted estimator: the union of two consecutive
/// ordered pairs before attrition, possibly larger after restratification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub members: Vec<usize>,
}

impl Block {
    pub fn n_b(&self) -> usize {
        self.members.len()
    }

    /// Realized treated fraction in the block.
    pub fn pi_b(&self, z: &Assignment) -> f64 {
        let treated = self.members.iter().filter(|&&i| z.treated(i)).count();
        treated as f64 / self.members.len() as f64
    }
}

/// Everything a design run produces: the assignment plus the structures
/// inference needs, and the draw provenance tests rely on.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignResult {
    pub assignment: Assignment,
    /// Final pairing (absent for complete randomization).
    pub pairing: Option<Pairing>,
    /// Pairs in inference order, treated-first.
    pub ordered: Option<PairedOrder>,
    /// Blocks of four formed from consecutive ordered pairs.
    pub blocks: Option<Vec<Block>>,
    /// Predicted potential outcomes (prediction-based designs).
    pub predictions: Option<PotentialPredictions>,
    /// The stage-1 Mahalanobis pairing of the batch-adaptive design.
    pub stage1_pairing: Option<Pairing>,
    /// Batch membership (batched designs).
    pub batch: Option<Vec<Batch>>,
    /// Total weighted-prediction distance of the final pairing.
    pub rematch_total: Option<f64>,
    /// Total weighted-prediction distance of the stage-1 pairing under the
    /// same metric; at least `rematch_total` by optimality.
    pub stage1_total: Option<f64>,
    pub warnings: Vec<String>,
}

impl DesignResult {
    fn unpaired(assignment: Assignment) -> Self {
        DesignResult {
            assignment,
            pairing: None,
            ordered: None,
            blocks: None,
            predictions: None,
            stage1_pairing: None,
            batch: None,
            rematch_total: None,
            stage1_total: None,
            warnings: Vec::new(),
        }
    }
}

/// Blocks of four from consecutive ordered pairs; an odd trailing pair
/// becomes its own block of two (its variance is pooled downstream).
pub fn blocks_from_ordered(ordered: &PairedOrder) -> Vec<Block> {
    let pairs = ordered.pairs();
    let mut blocks = Vec::with_capacity(pairs.len().div_ceil(2));
    let mut m = 0;
    while m + 1 < pairs.len() {
        let (t1, c1) = pairs[m];
        let (t2, c2) = pairs[m + 1];
        blocks.push(Block { members: vec![t1, c1, t2, c2] });
        m += 2;
    }
    if m < pairs.len() {
        let (t, c) = pairs[m];
        blocks.push(Block { members: vec![t, c] });
    }
    blocks
}

/// Independent fair coin per pair; the partner gets the complement.
pub fn assign_within_pairs(pairing: &Pairing, stream: &RngStream) -> Assignment {
    let mut rng = stream.rng();
    let mut z = vec![0u8; pairing.n_units()];
    for &(a, b) in pairing.pairs() {
        if rng.random::<bool>() {
            z[a] = 1;
        } else {
            z[b] = 1;
        }
    }
    Assignment::new(z).expect("coin assignment is 0/1")
}

fn pair_scores(pairing: &Pairing, unit_scores: &[f64]) -> Vec<f64> {
    pairing
        .pairs()
        .iter()
        .map(|&(a, b)| 0.5 * (unit_scores[a] + unit_scores[b]))
        .collect()
}

fn finish_paired(
    pairing: Pairing,
    z: Assignment,
    unit_scores: &[f64],
) -> Result<(PairedOrder, Vec<Block>)> {
    let scores = pair_scores(&pairing, unit_scores);
    let ordered = matching::order_pairs_for_inference(&pairing, &scores, &z)?;
    let blocks = blocks_from_ordered(&ordered);
    Ok((ordered, blocks))
}

/// Complete randomization: exactly n/2 treated, uniform over balanced
/// assignments.
pub fn run_cr(sample: &Sample, stream: &RngStream) -> DesignResult {
    let n = sample.n();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream.rng());
    let mut z = vec![0u8; n];
    for &i in idx.iter().take(n / 2) {
        z[i] = 1;
    }
    DesignResult::unpaired(Assignment::new(z).expect("0/1 assignment"))
}

/// Mahalanobis pair matching over the whole sample, with pairwise
/// randomization.
pub fn run_mh(sample: &Sample, stream: &RngStream) -> Result<DesignResult> {
    let whitened = mahalanobis_whitened(sample.covariates())?;
    let d = distances_from_whitened(&whitened);
    let pairing = min_weight_perfect_matching(&d)?;
    let z = assign_within_pairs(&pairing, &stream.child(labels::STAGE1_COINS));
    let unit_scores: Vec<f64> = (0..sample.n()).map(|i| whitened.row(i).sum()).collect();
    let (ordered, blocks) = finish_paired(pairing.clone(), z.clone(), &unit_scores)?;
    debug_assert!(validate_paired_assignment(&pairing, &z).unwrap());
    Ok(DesignResult {
        assignment: z,
        pairing: Some(pairing),
        ordered: Some(ordered),
        blocks: Some(blocks),
        predictions: None,
        stage1_pairing: None,
        batch: None,
        rematch_total: None,
        stage1_total: None,
        warnings: Vec::new(),
    })
}

fn distances_from_whitened(u: &DMatrix<f64>) -> DistanceMatrix {
    let n = u.nrows();
    DistanceMatrix::from_fn(n, |i, j| {
        (0..u.ncols())
            .map(|c| {
                let diff = u[(i, c)] - u[(j, c)];
                diff * diff
            })
            .sum::<f64>()
            .sqrt()
    })
    .expect("whitened distances are valid")
}

/// Benchmarking design: sort units on the supplied oracle score (the true
/// potential-outcome sum) and pair adjacent units.
pub fn run_oracle_sum(sample: &Sample, score: &[f64], stream: &RngStream) -> Result<DesignResult> {
    let n = sample.n();
    if score.len() != n {
        return Err(Error::DimensionMismatch("one oracle score per unit".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[a].partial_cmp(&score[b]).unwrap().then(a.cmp(&b)));
    let pairs: Vec<(usize, usize)> = order.chunks(2).map(|c| (c[0], c[1])).collect();
    let pairing = Pairing::new(pairs, n)?;
    let z = assign_within_pairs(&pairing, &stream.child(labels::STAGE1_COINS));
    let (ordered, blocks) = finish_paired(pairing.clone(), z.clone(), score)?;
    Ok(DesignResult {
        assignment: z,
        pairing: Some(pairing),
        ordered: Some(ordered),
        blocks: Some(blocks),
        predictions: None,
        stage1_pairing: None,
        batch: None,
        rematch_total: None,
        stage1_total: None,
        warnings: Vec::new(),
    })
}

struct BatchSplit {
    batch: Vec<Batch>,
    batch1_units: Vec<usize>,
    batch2_units: Vec<usize>,
}

fn split_pairs_into_batches(
    pairing: &Pairing,
    n1_units: usize,
    n: usize,
    stream: &RngStream,
) -> BatchSplit {
    let n1_pairs = n1_units / 2;
    let mut pair_idx: Vec<usize> = (0..pairing.n_pairs()).collect();
    pair_idx.shuffle(&mut stream.rng());
    let mut batch = vec![Batch::Second; n];
    for &m in pair_idx.iter().take(n1_pairs) {
        let (a, b) = pairing.pairs()[m];
        batch[a] = Batch::First;
        batch[b] = Batch::First;
    }
    let batch1_units: Vec<usize> = (0..n).filter(|&i| batch[i] == Batch::First).collect();
    let batch2_units: Vec<usize> = (0..n).filter(|&i| batch[i] == Batch::Second).collect();
    BatchSplit { batch, batch1_units, batch2_units }
}

fn split_units_into_batches(n: usize, n1_units: usize, stream: &RngStream) -> BatchSplit {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream.rng());
    let mut batch = vec![Batch::Second; n];
    for &i in idx.iter().take(n1_units) {
        batch[i] = Batch::First;
    }
    let batch1_units: Vec<usize> = (0..n).filter(|&i| batch[i] == Batch::First).collect();
    let batch2_units: Vec<usize> = (0..n).filter(|&i| batch[i] == Batch::Second).collect();
    BatchSplit { batch, batch1_units, batch2_units }
}

fn rows_of(covariates: &DMatrix<f64>, units: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(units.len(), covariates.ncols(), |r, c| covariates[(units[r], c)])
}

struct Batch1Experiment {
    /// Full-length assignment with batch-1 entries filled.
    z: Assignment,
    /// Observed batch-1 outcomes, indexed like `batch1_units`.
    y_local: Vec<f64>,
    /// Local assignment over `batch1_units`.
    z_local: Assignment,
}

fn run_batch1_experiment(
    pairing_b1: &Pairing,
    batch1_units: &[usize],
    n: usize,
    oracle: &dyn OutcomeOracle,
    stream: &RngStream,
) -> Batch1Experiment {
    // pairing_b1 is over local indices 0..batch1_units.len()
    let z_local = assign_within_pairs(pairing_b1, stream);
    let mut z = vec![0u8; n];
    for (local, &global) in batch1_units.iter().enumerate() {
        z[global] = z_local.z()[local];
    }
    let y_local: Vec<f64> = batch1_units
        .iter()
        .enumerate()
        .map(|(local, &global)| oracle.observe(global, z_local.z()[local]))
        .collect();
    Batch1Experiment {
        z: Assignment::new(z).expect("0/1 assignment"),
        y_local,
        z_local,
    }
}

/// The batch-adaptive pair-matching design.
///
/// Stage 1 pairs the whole sample on Mahalanobis distance and randomizes
/// an intact random half of the pairs as batch 1. After batch-1 outcomes
/// arrive, both arms' outcome models produce predicted potential outcomes
/// for every unit (leave-one-out within batch 1), and all units are
/// rematched under the accuracy-weighted prediction metric, with same-arm
/// batch-1 pairs forbidden. Batch-2 units inherit the complement of a
/// batch-1 partner or get a fresh coin when paired within batch 2; batch-1
/// assignments are never altered.
pub fn run_bapm(
    sample: &Sample,
    config: &DesignConfig,
    stream: &RngStream,
    oracle: &dyn OutcomeOracle,
) -> Result<DesignResult> {
    let n = sample.n();
    let n1_units = config.batch1_units(n)?;
    if n1_units < 4 {
        return Err(Error::InvalidInput("batch 1 needs at least two pairs".into()));
    }

    // Stage 1: Mahalanobis pairing of the entire sample.
    let whitened_x = mahalanobis_whitened(sample.covariates())?;
    let stage1 = min_weight_perfect_matching(&distances_from_whitened(&whitened_x))?;

    // Split intact stage-1 pairs into batches.
    let split = split_pairs_into_batches(&stage1, n1_units, n, &stream.child(labels::BATCH_SPLIT));
    let sample_batched = sample.clone().with_batches(split.batch.clone())?;

    // Pairwise-randomize batch 1 and collect its outcomes.
    let global_of_local: Vec<usize> = split.batch1_units.clone();
    let local_of_global: std::collections::HashMap<usize, usize> =
        global_of_local.iter().enumerate().map(|(l, &g)| (g, l)).collect();
    let b1_pairs_local: Vec<(usize, usize)> = stage1
        .pairs()
        .iter()
        .filter(|&&(a, b)| split.batch[a] == Batch::First && split.batch[b] == Batch::First)
        .map(|&(a, b)| (local_of_global[&a], local_of_global[&b]))
        .collect();
    let pairing_b1 = Pairing::new(b1_pairs_local, global_of_local.len())?;
    let experiment = run_batch1_experiment(
        &pairing_b1,
        &global_of_local,
        n,
        oracle,
        &stream.child(labels::STAGE1_COINS),
    );

    // Fit outcome models on batch 1 and predict both potential outcomes
    // for every unit.
    let b1_covs = rows_of(sample.covariates(), &global_of_local);
    let fit = fit_batch1_models(
        &b1_covs,
        &experiment.z_local,
        &experiment.y_local,
        &config.learner,
        &stream.child(labels::LEARNER),
    )?;
    let weights = accuracy_weights_from_loo(&fit.predictions, &experiment.z_local, &experiment.y_local)?;

    let mut yhat1 = vec![0.0; n];
    let mut yhat0 = vec![0.0; n];
    let mut prov1 = vec![Provenance::OutOfBatch; n];
    let mut prov0 = vec![Provenance::OutOfBatch; n];
    for (local, &global) in global_of_local.iter().enumerate() {
        yhat1[global] = fit.predictions.yhat1[local];
        yhat0[global] = fit.predictions.yhat0[local];
        prov1[global] = fit.predictions.prov1[local];
        prov0[global] = fit.predictions.prov0[local];
    }
    for &global in &split.batch2_units {
        let x: Vec<f64> = sample.covariates().row(global).iter().copied().collect();
        yhat1[global] = fit.model1.predict(&x);
        yhat0[global] = fit.model0.predict(&x);
    }
    let predictions = PotentialPredictions::new(yhat1, yhat0, prov1, prov0)?;

    // Rematch all units under the weighted prediction metric.
    let s = prediction_covariance(&predictions)?;
    let w = weights.w();
    let v = weighted_po_whitened(&predictions, w, &s)?;
    let d = distances_from_whitened(&v);
    let d_constrained = forbid_same_arm_batch1(&d, &sample_batched, &experiment.z)?;
    let rematched = min_weight_perfect_matching(&d_constrained)?;
    for &(a, b) in rematched.pairs() {
        if d_constrained.is_forbidden(a, b) {
            return Err(Error::Degenerate(format!(
                "rematching used a forbidden pair ({a}, {b}) despite balanced batch-1 arms"
            )));
        }
    }
    let rematch_total = rematched.total_weight(|a, b| d.get(a, b));
    let stage1_total = stage1.total_weight(|a, b| d.get(a, b));

    // Assign batch 2: inherit the complement across batches, fresh coins
    // within batch 2. Batch-1 assignments stay untouched.
    let mut z = experiment.z.z().to_vec();
    let mut coin_rng = stream.child(labels::STAGE2_COINS).rng();
    for &(a, b) in rematched.pairs() {
        match (split.batch[a], split.batch[b]) {
            (Batch::First, Batch::First) => {}
            (Batch::First, Batch::Second) => z[b] = 1 - z[a],
            (Batch::Second, Batch::First) => z[a] = 1 - z[b],
            (Batch::Second, Batch::Second) => {
                if coin_rng.random::<bool>() {
                    z[a] = 1;
                    z[b] = 0;
                } else {
                    z[a] = 0;
                    z[b] = 1;
                }
            }
        }
    }
    let z = Assignment::new(z)?;
    debug_assert!(validate_paired_assignment(&rematched, &z).unwrap());

    let unit_scores: Vec<f64> = (0..n).map(|i| v.row(i).sum()).collect();
    let (ordered, blocks) = finish_paired(rematched.clone(), z.clone(), &unit_scores)?;

    Ok(DesignResult {
        assignment: z,
        pairing: Some(rematched),
        ordered: Some(ordered),
        blocks: Some(blocks),
        predictions: Some(predictions),
        stage1_pairing: Some(stage1),
        batch: Some(split.batch),
        rematch_total: Some(rematch_total),
        stage1_total: Some(stage1_total),
        warnings: Vec::new(),
    })
}

/// Within-batch pair matching: Mahalanobis pairs in batch 1, prediction
/// pairs (unweighted `S⁻¹` metric) within batch 2. No pair straddles the
/// batch boundary.
pub fn run_wbpm(
    sample: &Sample,
    config: &DesignConfig,
    stream: &RngStream,
    oracle: &dyn OutcomeOracle,
) -> Result<DesignResult> {
    let n = sample.n();
    let n1_units = config.batch1_units(n)?;
    if n1_units < 4 {
        return Err(Error::InvalidInput("batch 1 needs at least two pairs".into()));
    }
    let split = split_units_into_batches(n, n1_units, &stream.child(labels::BATCH_SPLIT));

    // Batch 1: Mahalanobis pairing within the batch.
    let b1_covs = rows_of(sample.covariates(), &split.batch1_units);
    let b1_whitened = mahalanobis_whitened(&b1_covs)?;
    let pairing_b1 = min_weight_perfect_matching(&distances_from_whitened(&b1_whitened))?;
    let experiment = run_batch1_experiment(
        &pairing_b1,
        &split.batch1_units,
        n,
        oracle,
        &stream.child(labels::STAGE1_COINS),
    );

    // Fit on batch 1, predict everywhere with the full models.
    let fit = fit_batch1_models(
        &b1_covs,
        &experiment.z_local,
        &experiment.y_local,
        &config.learner,
        &stream.child(labels::LEARNER),
    )?;
    let mut yhat1 = vec![0.0; n];
    let mut yhat0 = vec![0.0; n];
    let mut prov1 = vec![Provenance::OutOfBatch; n];
    let mut prov0 = vec![Provenance::OutOfBatch; n];
    for i in 0..n {
        let x: Vec<f64> = sample.covariates().row(i).iter().copied().collect();
        yhat1[i] = fit.model1.predict(&x);
        yhat0[i] = fit.model0.predict(&x);
    }
    for (local, &global) in split.batch1_units.iter().enumerate() {
        if experiment.z_local.treated(local) {
            prov1[global] = Provenance::InSample;
        } else {
            prov0[global] = Provenance::InSample;
        }
    }
    let predictions = PotentialPredictions::new(yhat1, yhat0, prov1, prov0)?;

    // Batch 2: pair on the unweighted prediction metric, covariance taken
    // over the units being matched.
    let preds_b2 = predictions.subset(&split.batch2_units);
    let s_b2 = prediction_covariance(&preds_b2)?;
    let v_b2 = weighted_po_whitened(&preds_b2, [1.0, 1.0], &s_b2)?;
    let pairing_b2_local = min_weight_perfect_matching(&distances_from_whitened(&v_b2))?;
    let z2_local = assign_within_pairs(&pairing_b2_local, &stream.child(labels::STAGE2_COINS));

    let mut z = experiment.z.z().to_vec();
    for (local, &global) in split.batch2_units.iter().enumerate() {
        z[global] = z2_local.z()[local];
    }
    let z = Assignment::new(z)?;

    let mut pairs: Vec<(usize, usize)> = pairing_b1
        .pairs()
        .iter()
        .map(|&(a, b)| (split.batch1_units[a], split.batch1_units[b]))
        .collect();
    pairs.extend(
        pairing_b2_local
            .pairs()
            .iter()
            .map(|&(a, b)| (split.batch2_units[a], split.batch2_units[b])),
    );
    let pairing = Pairing::new(pairs, n)?;
    debug_assert!(validate_paired_assignment(&pairing, &z).unwrap());

    // Pooled ordering: whitened prediction-sum scores over all units.
    let s_all = prediction_covariance(&predictions)?;
    let v_all = weighted_po_whitened(&predictions, [1.0, 1.0], &s_all)?;
    let unit_scores: Vec<f64> = (0..n).map(|i| v_all.row(i).sum()).collect();
    let (ordered, blocks) = finish_paired(pairing.clone(), z.clone(), &unit_scores)?;

    Ok(DesignResult {
        assignment: z,
        pairing: Some(pairing),
        ordered: Some(ordered),
        blocks: Some(blocks),
        predictions: Some(predictions),
        stage1_pairing: None,
        batch: Some(split.batch),
        rematch_total: None,
        stage1_total: None,
        warnings: Vec::new(),
    })
}

/// Within-batch pair matching with the pilot OLS distance: Mahalanobis
/// pairs in batch 1, penalized fitted-value distance within batch 2.
pub fn run_wbpm_ols(
    sample: &Sample,
    config: &DesignConfig,
    stream: &RngStream,
    oracle: &dyn OutcomeOracle,
) -> Result<DesignResult> {
    let n = sample.n();
    let k = sample.k();
    let n1_units = config.batch1_units(n)?;
    if n1_units < 4 {
        return Err(Error::InvalidInput("batch 1 needs at least two pairs".into()));
    }
    let split = split_units_into_batches(n, n1_units, &stream.child(labels::BATCH_SPLIT));

    let b1_covs = rows_of(sample.covariates(), &split.batch1_units);
    let b1_whitened = mahalanobis_whitened(&b1_covs)?;
    let pairing_b1 = min_weight_perfect_matching(&distances_from_whitened(&b1_whitened))?;
    let experiment = run_batch1_experiment(
        &pairing_b1,
        &split.batch1_units,
        n,
        oracle,
        &stream.child(labels::STAGE1_COINS),
    );

    // Pooled OLS of the observed batch-1 outcomes on the covariates, with
    // its homoskedastic slope covariance. Falls back to a ridge fit when
    // the design matrix is singular or batch 1 is too small for OLS.
    let mut warnings = Vec::new();
    let (model, beta_cov) = match linalg::ols_with_covariance(&b1_covs, &experiment.y_local) {
        Ok(pair) => pair,
        Err(_) => {
            warnings.push("singular batch-1 design matrix; ridge fallback for the pilot model".into());
            let gram = b1_covs.transpose() * &b1_covs;
            let ridge = 1e-6 * (gram.trace() / k as f64).max(1e-12);
            let model = linalg::linear_fit(&b1_covs, &experiment.y_local, ridge)?;
            (model, DMatrix::zeros(k, k))
        }
    };
    let beta: Vec<f64> = model.slopes.iter().copied().collect();

    // Batch 2: penalized OLS distance on raw covariates.
    let b2 = &split.batch2_units;
    let d_b2 = DistanceMatrix::from_fn(b2.len(), |i, j| {
        let xi: Vec<f64> = sample.covariates().row(b2[i]).iter().copied().collect();
        let xj: Vec<f64> = sample.covariates().row(b2[j]).iter().copied().collect();
        penalized_ols(&xi, &xj, &beta, &beta_cov)
    })?;
    let pairing_b2_local = min_weight_perfect_matching(&d_b2)?;
    let z2_local = assign_within_pairs(&pairing_b2_local, &stream.child(labels::STAGE2_COINS));

    let mut z = experiment.z.z().to_vec();
    for (local, &global) in split.batch2_units.iter().enumerate() {
        z[global] = z2_local.z()[local];
    }
    let z = Assignment::new(z)?;

    let mut pairs: Vec<(usize, usize)> = pairing_b1
        .pairs()
        .iter()
        .map(|&(a, b)| (split.batch1_units[a], split.batch1_units[b]))
        .collect();
    pairs.extend(
        pairing_b2_local
            .pairs()
            .iter()
            .map(|&(a, b)| (split.batch2_units[a], split.batch2_units[b])),
    );
    let pairing = Pairing::new(pairs, n)?;
    debug_assert!(validate_paired_assignment(&pairing, &z).unwrap());

    // Order pooled pairs by fitted value.
    let unit_scores: Vec<f64> = (0..n)
        .map(|i| {
            let x: Vec<f64> = sample.covariates().row(i).iter().copied().collect();
            model.predict(&x)
        })
        .collect();
    let (ordered, blocks) = finish_paired(pairing.clone(), z.clone(), &unit_scores)?;

    Ok(DesignResult {
        assignment: z,
        pairing: Some(pairing),
        ordered: Some(ordered),
        blocks: Some(blocks),
        predictions: None,
        stage1_pairing: None,
        batch: Some(split.batch),
        rematch_total: None,
        stage1_total: None,
        warnings,
    })
}

fn penalized_ols(x1: &[f64], x2: &[f64], beta: &[f64], beta_cov: &DMatrix<f64>) -> f64 {
    matching::penalized_ols_distance(x1, x2, beta, beta_cov)
        .expect("dimensions fixed by construction")
}

/// Restratify survivors into blocks of four by two rounds of matching on
/// predicted-outcome distance: units into pairs, then pairs into blocks.
/// Odd leftovers (one unit and/or one pair) attach to the nearest block.
pub fn restratify_after_attrition(
    survivors: &[usize],
    predictions: &PotentialPredictions,
) -> Result<Vec<Block>> {
    if survivors.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "restratification needs at least 4 survivors, got {}",
            survivors.len()
        )));
    }
    let preds = predictions.subset(survivors);
    let s = prediction_covariance(&preds)?;
    let v = weighted_po_whitened(&preds, [1.0, 1.0], &s)?;
    let dist = |a: usize, b: usize| -> f64 {
        (0..v.ncols())
            .map(|c| {
                let diff = v[(a, c)] - v[(b, c)];
                diff * diff
            })
            .sum::<f64>()
            .sqrt()
    };

    // If the survivor count is odd, set aside the most isolated unit.
    let m = survivors.len();
    let mut active: Vec<usize> = (0..m).collect();
    let mut leftover_unit: Option<usize> = None;
    if m % 2 != 0 {
        let isolated = active
            .iter()
            .copied()
            .max_by(|&a, &b| {
                let near = |u: usize| {
                    active
                        .iter()
                        .filter(|&&o| o != u)
                        .map(|&o| dist(u, o))
                        .fold(f64::INFINITY, f64::min)
                };
                near(a).partial_cmp(&near(b)).unwrap().then(a.cmp(&b))
            })
            .unwrap();
        active.retain(|&u| u != isolated);
        leftover_unit = Some(isolated);
    }

    // Units into pairs.
    let local_d = DistanceMatrix::from_fn(active.len(), |i, j| dist(active[i], active[j]))?;
    let unit_pairing = min_weight_perfect_matching(&local_d)?;
    let pairs: Vec<(usize, usize)> = unit_pairing
        .pairs()
        .iter()
        .map(|&(a, b)| (active[a], active[b]))
        .collect();

    // Pairs into blocks, matching on centroid distance.
    let centroid = |&(a, b): &(usize, usize)| -> Vec<f64> {
        (0..v.ncols()).map(|c| 0.5 * (v[(a, c)] + v[(b, c)])).collect()
    };
    let centroids: Vec<Vec<f64>> = pairs.iter().map(centroid).collect();
    let pair_dist = |i: usize, j: usize| -> f64 {
        centroids[i]
            .iter()
            .zip(&centroids[j])
            .map(|(a, b)| {
                let diff = a - b;
                diff * diff
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut pair_active: Vec<usize> = (0..pairs.len()).collect();
    let mut leftover_pair: Option<usize> = None;
    if pairs.len() % 2 != 0 {
        if pairs.len() == 1 {
            // A single pair plus a possible leftover forms one block.
            let mut members: Vec<usize> = vec![survivors[pairs[0].0], survivors[pairs[0].1]];
            if let Some(u) = leftover_unit {
                members.push(survivors[u]);
            }
            members.sort_unstable();
            return Ok(vec![Block { members }]);
        }
        let isolated = pair_active
            .iter()
            .copied()
            .max_by(|&a, &b| {
                let near = |p: usize| {
                    pair_active
                        .iter()
                        .filter(|&&o| o != p)
                        .map(|&o| pair_dist(p, o))
                        .fold(f64::INFINITY, f64::min)
                };
                near(a).partial_cmp(&near(b)).unwrap().then(a.cmp(&b))
            })
            .unwrap();
        pair_active.retain(|&p| p != isolated);
        leftover_pair = Some(isolated);
    }
    let block_d = DistanceMatrix::from_fn(pair_active.len(), |i, j| {
        pair_dist(pair_active[i], pair_active[j])
    })?;
    let block_pairing = min_weight_perfect_matching(&block_d)?;
    let mut blocks: Vec<Block> = block_pairing
        .pairs()
        .iter()
        .map(|&(i, j)| {
            let (a1, a2) = pairs[pair_active[i]];
            let (b1, b2) = pairs[pair_active[j]];
            let mut members =
                vec![survivors[a1], survivors[a2], survivors[b1], survivors[b2]];
            members.sort_unstable();
            Block { members }
        })
        .collect();

    // Attach leftovers to the nearest block by centroid distance.
    let block_centroid = |b: &Block| -> Vec<f64> {
        let locals: Vec<usize> = b
            .members
            .iter()
            .map(|g| survivors.iter().position(|s| s == g).unwrap())
            .collect();
        (0..v.ncols())
            .map(|c| locals.iter().map(|&l| v[(l, c)]).sum::<f64>() / locals.len() as f64)
            .collect()
    };
    let attach = |point: Vec<f64>, members: Vec<usize>, blocks: &mut Vec<Block>| {
        let nearest = (0..blocks.len())
            .min_by(|&a, &b| {
                let d = |idx: usize| -> f64 {
                    block_centroid(&blocks[idx])
                        .iter()
                        .zip(&point)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum()
                };
                d(a).partial_cmp(&d(b)).unwrap().then(a.cmp(&b))
            })
            .expect("at least one block");
        blocks[nearest].members.extend(members);
        blocks[nearest].members.sort_unstable();
    };
    if let Some(p) = leftover_pair {
        let (a, b) = pairs[p];
        attach(centroids[p].clone(), vec![survivors[a], survivors[b]], &mut blocks);
    }
    if let Some(u) = leftover_unit {
        let point: Vec<f64> = (0..v.ncols()).map(|c| v[(u, c)]).collect();
        attach(point, vec![survivors[u]], &mut blocks);
    }
    blocks.sort_by_key(|b| b.members[0]);
    Ok(blocks)
}

/// Run the design behind a method.
///
/// `oracle_scores` supplies the true potential-outcome sums and is only
/// consulted by the benchmarking oracle design.
pub fn run_design(
    kind: DesignKind,
    sample: &Sample,
    config: &DesignConfig,
    stream: &RngStream,
    oracle: &dyn OutcomeOracle,
    oracle_scores: Option<&[f64]>,
) -> Result<DesignResult> {
    match kind {
        DesignKind::Cr => Ok(run_cr(sample, stream)),
        DesignKind::Mh => run_mh(sample, stream),
        DesignKind::Bapm => run_bapm(sample, config, stream, oracle),
        DesignKind::Wbpm => run_wbpm(sample, config, stream, oracle),
        DesignKind::WbpmOls => run_wbpm_ols(sample, config, stream, oracle),
        DesignKind::Oracle => {
            let scores = oracle_scores.ok_or_else(|| {
                Error::InvalidInput("oracle design needs true potential-outcome sums".into())
            })?;
            run_oracle_sum(sample, scores, stream)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predict::oracle_score;

    fn sample_1d(values: &[f64]) -> Sample {
        Sample::new(DMatrix::from_fn(values.len(), 1, |i, _| values[i])).unwrap()
    }

    fn flat_oracle() -> impl OutcomeOracle {
        |unit: usize, z: u8| unit as f64 * 0.1 + z as f64
    }

    #[test]
    fn cr_is_exactly_balanced() {
        let s = sample_1d(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        for seed in 0..50 {
            let r = run_cr(&s, &RngStream::new(seed));
            assert_eq!(r.assignment.n_treated(), 3);
        }
    }

    #[test]
    fn cr_marginal_probability_is_one_half() {
        let s = sample_1d(&[0.0, 1.0, 2.0, 3.0]);
        let stream = RngStream::new(7);
        let mut hits = vec![0usize; 4];
        let reps = 10_000;
        for rep in 0..reps {
            let r = run_cr(&s, &stream.child(rep));
            for i in 0..4 {
                hits[i] += r.assignment.z()[i] as usize;
            }
        }
        for h in hits {
            let freq = h as f64 / reps as f64;
            assert!((freq - 0.5).abs() < 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn mh_pairs_close_units() {
        let s = sample_1d(&[0.0, 0.1, 5.0, 5.1]);
        let r = run_mh(&s, &RngStream::new(1)).unwrap();
        assert_eq!(r.pairing.unwrap().pairs(), &[(0, 1), (2, 3)]);
    }

    #[test]
    fn mh_is_deterministic_under_ties() {
        let s = sample_1d(&[2.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
        let r1 = run_mh(&s, &RngStream::new(2)).unwrap();
        let r2 = run_mh(&s, &RngStream::new(2)).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.pairing.unwrap().pairs(), &[(0, 1), (2, 3), (4, 5)]);
    }

    #[test]
    fn paired_designs_have_one_treated_per_pair() {
        let s = sample_1d(&[0.0, 0.3, 1.0, 1.3, 2.0, 2.3, 3.0, 3.3]);
        let r = run_mh(&s, &RngStream::new(3)).unwrap();
        assert!(validate_paired_assignment(r.pairing.as_ref().unwrap(), &r.assignment).unwrap());
    }

    #[test]
    fn coins_are_fair_and_independent_across_pairs() {
        let pairing = Pairing::new(vec![(0, 1), (2, 3)], 4).unwrap();
        let stream = RngStream::new(11);
        let reps = 10_000;
        let mut first_treated = 0usize;
        let mut both = 0usize;
        let mut p1 = 0usize;
        let mut p2 = 0usize;
        for rep in 0..reps {
            let z = assign_within_pairs(&pairing, &stream.child(rep));
            assert_eq!(z.z()[0] + z.z()[1], 1);
            assert_eq!(z.z()[2] + z.z()[3], 1);
            first_treated += z.z()[0] as usize;
            p1 += z.z()[0] as usize;
            p2 += z.z()[2] as usize;
            both += (z.z()[0] == 1 && z.z()[2] == 1) as usize;
        }
        let f = first_treated as f64 / reps as f64;
        assert!((f - 0.5).abs() < 0.02);
        // Empirical correlation of the two pairs' coins.
        let (m1, m2) = (p1 as f64 / reps as f64, p2 as f64 / reps as f64);
        let cov = both as f64 / reps as f64 - m1 * m2;
        let corr = cov / (m1 * (1.0 - m1) * m2 * (1.0 - m2)).sqrt();
        assert!(corr.abs() < 0.03, "correlation {corr}");
    }

    fn small_sample() -> Sample {
        let stream = RngStream::new(42);
        let mut rng = stream.rng();
        Sample::new(DMatrix::from_fn(16, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0)).unwrap()
    }

    fn cheap_config(method: Method) -> DesignConfig {
        DesignConfig { method, learner: LearnerConfig::ridge(1.0), batch1_fraction: 0.5 }
    }

    #[test]
    fn bapm_never_reassigns_batch1() {
        let s = small_sample();
        let config = cheap_config(Method::Bapm);
        for seed in 0..20 {
            let stream = RngStream::new(seed);
            let r = run_bapm(&s, &config, &stream, &flat_oracle()).unwrap();
            let batch = r.batch.as_ref().unwrap();
            // Replay the batch-1 coins: they depend only on the stage-1
            // pairing and the coin stream, both fixed by the seed.
            let stage1 = r.stage1_pairing.as_ref().unwrap();
            let b1_units: Vec<usize> = (0..s.n()).filter(|&i| batch[i] == Batch::First).collect();
            let local: std::collections::HashMap<usize, usize> =
                b1_units.iter().enumerate().map(|(l, &g)| (g, l)).collect();
            let b1_pairs: Vec<(usize, usize)> = stage1
                .pairs()
                .iter()
                .filter(|&&(a, b)| batch[a] == Batch::First && batch[b] == Batch::First)
                .map(|&(a, b)| (local[&a], local[&b]))
                .collect();
            let pairing_b1 = Pairing::new(b1_pairs, b1_units.len()).unwrap();
            let z_local = assign_within_pairs(&pairing_b1, &stream.child(labels::STAGE1_COINS));
            for (l, &g) in b1_units.iter().enumerate() {
                assert_eq!(r.assignment.z()[g], z_local.z()[l], "batch-1 unit {g} reassigned");
            }
        }
    }

    #[test]
    fn bapm_cross_batch_pairs_inherit_the_complement() {
        let s = small_sample();
        let config = cheap_config(Method::Bapm);
        for seed in 0..20 {
            let r = run_bapm(&s, &config, &RngStream::new(seed), &flat_oracle()).unwrap();
            let batch = r.batch.as_ref().unwrap();
            for &(a, b) in r.pairing.as_ref().unwrap().pairs() {
                assert_eq!(r.assignment.z()[a] + r.assignment.z()[b], 1);
                if batch[a] != batch[b] {
                    let (b1, b2) = if batch[a] == Batch::First { (a, b) } else { (b, a) };
                    assert_eq!(r.assignment.z()[b2], 1 - r.assignment.z()[b1]);
                }
            }
        }
    }

    #[test]
    fn bapm_rematch_total_is_optimal_against_stage1() {
        let s = small_sample();
        let config = cheap_config(Method::Bapm);
        for seed in 0..20 {
            let r = run_bapm(&s, &config, &RngStream::new(seed), &flat_oracle()).unwrap();
            let slack = 1e-9 * (1.0 + r.stage1_total.unwrap().abs());
            assert!(
                r.rematch_total.unwrap() <= r.stage1_total.unwrap() + slack,
                "seed {seed}: rematch {} > stage1 {}",
                r.rematch_total.unwrap(),
                r.stage1_total.unwrap()
            );
        }
    }

    #[test]
    fn bapm_ignores_batch2_outcomes() {
        let s = small_sample();
        let config = cheap_config(Method::Bapm);
        let stream = RngStream::new(17);
        let truthful = run_bapm(&s, &config, &stream, &flat_oracle()).unwrap();
        let batch = truthful.batch.clone().unwrap();
        // An oracle that agrees on batch 1 but is garbage on batch 2.
        let corrupted = move |unit: usize, z: u8| {
            if batch[unit] == Batch::First {
                unit as f64 * 0.1 + z as f64
            } else {
                -1e9 + unit as f64
            }
        };
        let alt = run_bapm(&s, &config, &stream, &corrupted).unwrap();
        assert_eq!(truthful, alt);
    }

    #[test]
    fn wbpm_never_pairs_across_batches() {
        let s = small_sample();
        let config = cheap_config(Method::Wbpm);
        for seed in 0..20 {
            let r = run_wbpm(&s, &config, &RngStream::new(seed), &flat_oracle()).unwrap();
            let batch = r.batch.as_ref().unwrap();
            for &(a, b) in r.pairing.as_ref().unwrap().pairs() {
                assert_eq!(batch[a], batch[b], "pair ({a},{b}) straddles the batch boundary");
                assert_eq!(r.assignment.z()[a] + r.assignment.z()[b], 1);
            }
        }
    }

    #[test]
    fn wbpm_batch2_matching_follows_prediction_sums() {
        // Four batch-2 units with prediction sums (1, 1.1, 9, 9.2) and a
        // diagonal covariance must pair (0,1) and (2,3); checked at the
        // matching layer the driver delegates to.
        let sums = [1.0, 1.1, 9.0, 9.2];
        let preds = PotentialPredictions::new(
            sums.iter().map(|v| v / 2.0).collect(),
            sums.iter().map(|v| v / 2.0).collect(),
            vec![Provenance::OutOfBatch; 4],
            vec![Provenance::OutOfBatch; 4],
        )
        .unwrap();
        let s = crate::predict::PredCovariance::from_matrix(DMatrix::from_row_slice(
            2,
            2,
            &[1.0, 0.0, 0.0, 1.0],
        ))
        .unwrap();
        let d = crate::matching::weighted_po_distances(&preds, [1.0, 1.0], &s).unwrap();
        let pairing = min_weight_perfect_matching(&d).unwrap();
        assert_eq!(pairing.pairs(), &[(0, 1), (2, 3)]);
    }

    #[test]
    fn wbpm_ols_batch2_pairs_adjacent_fitted_values() {
        // beta = 1 on 1-D covariates (0, 1, 2, 3) with zero coefficient
        // covariance pairs adjacent units.
        let d = DistanceMatrix::from_fn(4, |i, j| {
            let cov = DMatrix::zeros(1, 1);
            penalized_ols(&[i as f64], &[j as f64], &[1.0], &cov)
        })
        .unwrap();
        let pairing = min_weight_perfect_matching(&d).unwrap();
        assert_eq!(pairing.pairs(), &[(0, 1), (2, 3)]);
    }

    #[test]
    fn wbpm_ols_driver_runs_and_validates() {
        let s = small_sample();
        let config = cheap_config(Method::WbpmOls);
        let r = run_wbpm_ols(&s, &config, &RngStream::new(5), &flat_oracle()).unwrap();
        assert!(validate_paired_assignment(r.pairing.as_ref().unwrap(), &r.assignment).unwrap());
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn wbpm_ols_falls_back_to_ridge_on_collinear_covariates() {
        // Two identical covariate columns make OLS singular.
        let stream = RngStream::new(9);
        let mut rng = stream.rng();
        let base = DMatrix::from_fn(12, 1, |_, _| rng.random::<f64>());
        let x = DMatrix::from_fn(12, 2, |i, j| base[(i, if j > 0 { 0 } else { j })]);
        let s = Sample::new(x).unwrap();
        let config = cheap_config(Method::WbpmOls);
        let r = run_wbpm_ols(&s, &config, &RngStream::new(5), &flat_oracle()).unwrap();
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn blocks_have_balanced_arms() {
        let s = small_sample();
        let r = run_mh(&s, &RngStream::new(8)).unwrap();
        for block in r.blocks.as_ref().unwrap() {
            assert_eq!(block.n_b(), 4);
            assert_eq!(block.pi_b(&r.assignment), 0.5);
        }
    }

    #[test]
    fn odd_pair_counts_leave_a_trailing_block_of_two() {
        let s = sample_1d(&[0.0, 0.1, 1.0, 1.1, 2.0, 2.1]);
        let r = run_mh(&s, &RngStream::new(1)).unwrap();
        let blocks = r.blocks.as_ref().unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].n_b(), 4);
        assert_eq!(blocks[1].n_b(), 2);
    }

    #[test]
    fn oracle_design_pairs_adjacent_scores() {
        let s = sample_1d(&[0.0, 1.0, 2.0, 3.0]);
        let g = oracle_score(&[5.0, 1.0, 1.2, 5.1], &[0.0; 4]);
        let r = run_oracle_sum(&s, &g, &RngStream::new(0)).unwrap();
        assert_eq!(r.pairing.unwrap().pairs(), &[(0, 3), (1, 2)]);
    }

    fn preds_from_sums(sums: &[f64]) -> PotentialPredictions {
        PotentialPredictions::new(
            sums.iter().map(|v| v / 2.0).collect(),
            sums.iter().map(|v| v / 2.0).collect(),
            vec![Provenance::OutOfBatch; sums.len()],
            vec![Provenance::OutOfBatch; sums.len()],
        )
        .unwrap()
    }

    #[test]
    fn restratify_clusters_eight_survivors() {
        let preds = preds_from_sums(&[1.0, 1.02, 0.98, 1.01, 9.0, 9.03, 8.97, 9.01]);
        let blocks = restratify_after_attrition(&[0, 1, 2, 3, 4, 5, 6, 7], &preds).unwrap();
        assert_eq!(blocks.len(), 2);
        let mut low: Vec<usize> = blocks[0].members.clone();
        low.sort_unstable();
        assert_eq!(low, vec![0, 1, 2, 3]);
        let mut high: Vec<usize> = blocks[1].members.clone();
        high.sort_unstable();
        assert_eq!(high, vec![4, 5, 6, 7]);
    }

    #[test]
    fn restratify_attaches_a_fifth_survivor() {
        let preds = preds_from_sums(&[1.0, 1.1, 0.9, 1.05, 1.2]);
        let blocks = restratify_after_attrition(&[0, 1, 2, 3, 4], &preds).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].n_b(), 5);
    }

    #[test]
    fn restratify_needs_four_survivors() {
        let preds = preds_from_sums(&[1.0, 2.0, 3.0]);
        assert!(restratify_after_attrition(&[0, 1, 2], &preds).is_err());
    }

    #[test]
    fn restratify_without_attrition_keeps_the_unit_multiset() {
        let preds = preds_from_sums(&[3.0, 1.0, 4.0, 1.5, 9.0, 2.6, 5.0, 3.5]);
        let survivors: Vec<usize> = (0..8).collect();
        let blocks = restratify_after_attrition(&survivors, &preds).unwrap();
        let mut units: Vec<usize> = blocks.iter().flat_map(|b| b.members.clone()).collect();
        units.sort_unstable();
        assert_eq!(units, survivors);
    }
}
