//! Outcome-model fitting, leave-one-out prediction for the first batch,
//! accuracy weights, and the covariance of predicted potential outcomes.

mod tree;

use nalgebra::DMatrix;

pub use tree::{fit_boosted, BoostParams, BoostedTrees, EarlyStop};

use crate::error::{Error, Result};
use crate::linalg::{self, LinearModel};
use crate::rng::RngStream;
use crate::types::Assignment;

/// Weight floor for the accuracy weights; keeps a useless model from
/// collapsing the matching metric entirely.
pub const WEIGHT_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerKind {
    BoostedTrees,
    Ols,
    Ridge,
}

/// Configuration of an outcome learner.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    /// Number of boosting stages (boosted trees only).
    pub trees: usize,
    /// Number of split levels per tree.
    pub max_depth: usize,
    /// Shrinkage in (0, 1].
    pub learning_rate: f64,
    /// Slope penalty (ridge only).
    pub ridge_penalty: f64,
    /// Minimum observations per leaf.
    pub min_leaf: usize,
    /// Optional row-subsampling rate for ensemble diversity.
    pub subsample: Option<f64>,
    /// Optional holdout early stopping of the boosting stages.
    pub early_stop: Option<EarlyStop>,
}

impl LearnerConfig {
    /// Default flexible learner: depth-2 gradient boosting, 200 stages,
    /// learning rate 0.1, minimum leaf size 5.
    pub fn boosted_default() -> Self {
        LearnerConfig {
            kind: LearnerKind::BoostedTrees,
            trees: 200,
            max_depth: 2,
            learning_rate: 0.1,
            ridge_penalty: 0.0,
            min_leaf: 5,
            subsample: None,
        }
    }

    /// Learner for the batch-1 outcome models: as [`Self::boosted_default`]
    /// but without a leaf floor, since the leave-one-out refits train on
    /// arms of only a couple dozen rows.
    pub fn boosted_batch1_default() -> Self {
        LearnerConfig { min_leaf: 1, ..Self::boosted_default() }
    }

    pub fn ols() -> Self {
        LearnerConfig { kind: LearnerKind::Ols, ridge_penalty: 0.0, ..Self::boosted_default() }
    }

    pub fn ridge(penalty: f64) -> Self {
        LearnerConfig { kind: LearnerKind::Ridge, ridge_penalty: penalty, ..Self::boosted_default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trees < 1 || self.max_depth < 1 || self.min_leaf < 1 {
            return Err(Error::InvalidInput(
                "trees, max_depth and min_leaf must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidInput("learning_rate must be in (0, 1]".into()));
        }
        if self.ridge_penalty < 0.0 {
            return Err(Error::InvalidInput("ridge_penalty must be nonnegative".into()));
        }
        if let Some(s) = self.subsample {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::InvalidInput("subsample must be in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// A fitted outcome model: a deterministic map from a covariate vector to a
/// real prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    predictor: Predictor,
    config: LearnerConfig,
    train_n: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Predictor {
    Linear(LinearModel),
    Boosted(BoostedTrees),
}

impl FittedModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match &self.predictor {
            Predictor::Linear(m) => m.predict(x),
            Predictor::Boosted(m) => m.predict(x),
        }
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn train_n(&self) -> usize {
        self.train_n
    }
}

/// Fit an outcome model to `(features, targets)`.
pub fn fit(
    features: &DMatrix<f64>,
    targets: &[f64],
    config: &LearnerConfig,
    stream: &RngStream,
) -> Result<FittedModel> {
    config.validate()?;
    let n = features.nrows();
    if n != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{n} feature rows but {} targets",
            targets.len()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 training rows".into()));
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite target".into()));
    }
    let predictor = match config.kind {
        LearnerKind::Ols => Predictor::Linear(linalg::linear_fit(features, targets, 0.0)?),
        LearnerKind::Ridge => {
            Predictor::Linear(linalg::linear_fit(features, targets, config.ridge_penalty)?)
        }
        LearnerKind::BoostedTrees => Predictor::Boosted(fit_boosted(
            features,
            targets,
            &BoostParams {
                trees: config.trees,
                max_depth: config.max_depth,
                learning_rate: config.learning_rate,
                min_leaf: config.min_leaf,
                subsample: config.subsample,
            },
            stream,
        )),
    };
    Ok(FittedModel { predictor, config: config.clone(), train_n: n })
}

/// How a predicted potential outcome was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Predicted by a model whose training data excluded the whole batch
    /// (or the unit's arm).
    OutOfBatch,
    /// Predicted by a leave-one-out refit excluding the unit itself.
    LeaveOneOut,
    /// Predicted by a model whose training data included the unit
    /// (within-batch designs only).
    InSample,
}

/// Predicted potential outcomes `(Ŷ(1), Ŷ(0))` per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialPredictions {
    pub yhat1: Vec<f64>,
    pub yhat0: Vec<f64>,
    pub prov1: Vec<Provenance>,
    pub prov0: Vec<Provenance>,
}

impl PotentialPredictions {
    pub fn new(
        yhat1: Vec<f64>,
        yhat0: Vec<f64>,
        prov1: Vec<Provenance>,
        prov0: Vec<Provenance>,
    ) -> Result<Self> {
        let n = yhat1.len();
        if yhat0.len() != n || prov1.len() != n || prov0.len() != n {
            return Err(Error::DimensionMismatch("prediction vectors differ in length".into()));
        }
        if yhat1.iter().chain(yhat0.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite prediction".into()));
        }
        Ok(PotentialPredictions { yhat1, yhat0, prov1, prov0 })
    }

    pub fn len(&self) -> usize {
        self.yhat1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.yhat1.is_empty()
    }

    /// Rows `(Ŷ(1), Ŷ(0))` as an `n x 2` matrix.
    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), 2, |i, j| {
            if j == 0 {
                self.yhat1[i]
            } else {
                self.yhat0[i]
            }
        })
    }

    /// Restrict to a subset of units, in the given order.
    pub fn subset(&self, units: &[usize]) -> PotentialPredictions {
        PotentialPredictions {
            yhat1: units.iter().map(|&u| self.yhat1[u]).collect(),
            yhat0: units.iter().map(|&u| self.yhat0[u]).collect(),
            prov1: units.iter().map(|&u| self.prov1[u]).collect(),
            prov0: units.iter().map(|&u| self.prov0[u]).collect(),
        }
    }
}

/// Accuracy weights for the two prediction models, floored at
/// [`WEIGHT_FLOOR`] and capped at 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyWeights {
    w: [f64; 2],
}

impl AccuracyWeights {
    pub fn new(w1: f64, w0: f64) -> Result<Self> {
        for w in [w1, w0] {
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::InvalidInput(format!("weight {w} outside (0, 1]")));
            }
        }
        Ok(AccuracyWeights { w: [w1, w0] })
    }

    /// `(w₁, w₀)` ordered like the prediction vector `(Ŷ(1), Ŷ(0))`.
    pub fn w(&self) -> [f64; 2] {
        self.w
    }
}

/// 2x2 sample covariance of the predicted potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct PredCovariance {
    s: DMatrix<f64>,
}

impl PredCovariance {
    /// Wrap an externally supplied 2x2 symmetric covariance.
    pub fn from_matrix(s: DMatrix<f64>) -> Result<Self> {
        if s.nrows() != 2 || s.ncols() != 2 {
            return Err(Error::DimensionMismatch("prediction covariance must be 2x2".into()));
        }
        if (s[(0, 1)] - s[(1, 0)]).abs() > 1e-9 * (1.0 + s[(0, 1)].abs()) {
            return Err(Error::InvalidInput("prediction covariance must be symmetric".into()));
        }
        Ok(PredCovariance { s })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.s
    }
}

/// Batch-1 models and predictions produced by the leave-one-out protocol.
pub struct Batch1Fit {
    /// Predictions for the batch-1 units, in their local row order.
    pub predictions: PotentialPredictions,
    /// Model for Y(1) fitted on all batch-1 treated units.
    pub model1: FittedModel,
    /// Model for Y(0) fitted on all batch-1 control units.
    pub model0: FittedModel,
}

/// Fit both arms' models on batch-1 data and predict both potential
/// outcomes for every batch-1 unit.
///
/// Opposite-arm predictions come from the full model of the other arm (the
/// unit never appears in that training set); own-arm predictions come from
/// a leave-one-out refit, so no unit's own outcome leaks into its score.
pub fn fit_batch1_models(
    covariates: &DMatrix<f64>,
    z: &Assignment,
    y: &[f64],
    config: &LearnerConfig,
    stream: &RngStream,
) -> Result<Batch1Fit> {
    let n = covariates.nrows();
    if z.len() != n || y.len() != n {
        return Err(Error::DimensionMismatch("covariates, z and y must agree".into()));
    }
    let treated: Vec<usize> = (0..n).filter(|&i| z.treated(i)).collect();
    let control: Vec<usize> = (0..n).filter(|&i| !z.treated(i)).collect();
    if treated.len() < 2 || control.len() < 2 {
        return Err(Error::Degenerate(format!(
            "each arm needs at least 2 units, got {} treated and {} control",
            treated.len(),
            control.len()
        )));
    }

    let rows = |idx: &[usize]| -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), covariates.ncols(), |r, c| covariates[(idx[r], c)])
    };
    let targets = |idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| y[i]).collect() };

    let model1 = fit(&rows(&treated), &targets(&treated), config, &stream.child(0))?;
    let model0 = fit(&rows(&control), &targets(&control), config, &stream.child(1))?;

    let mut yhat1 = vec![0.0; n];
    let mut yhat0 = vec![0.0; n];
    let mut prov1 = vec![Provenance::OutOfBatch; n];
    let mut prov0 = vec![Provenance::OutOfBatch; n];

    // Opposite-arm predictions from the full models.
    for &i in &treated {
        let x: Vec<f64> = covariates.row(i).iter().copied().collect();
        yhat0[i] = model0.predict(&x);
    }
    for &i in &control {
        let x: Vec<f64> = covariates.row(i).iter().copied().collect();
        yhat1[i] = model1.predict(&x);
    }

    // Own-arm predictions by leave-one-out refits. With a two-unit arm the
    // refit sees a single row and degenerates to that unit's outcome.
    let loo = |arm: &[usize], held_out: usize, label: u64| -> Result<f64> {
        let keep: Vec<usize> = arm.iter().copied().filter(|&i| i != held_out).collect();
        if keep.len() == 1 {
            return Ok(y[keep[0]]);
        }
        let model = fit(&rows(&keep), &targets(&keep), config, &stream.child(10 + label))?;
        let x: Vec<f64> = covariates.row(held_out).iter().copied().collect();
        Ok(model.predict(&x))
    };
    for &i in &treated {
        yhat1[i] = loo(&treated, i, i as u64)?;
        prov1[i] = Provenance::LeaveOneOut;
    }
    for &i in &control {
        yhat0[i] = loo(&control, i, i as u64)?;
        prov0[i] = Provenance::LeaveOneOut;
    }

    Ok(Batch1Fit {
        predictions: PotentialPredictions::new(yhat1, yhat0, prov1, prov0)?,
        model1,
        model0,
    })
}

/// Leave-one-out potential-outcome predictions for the batch-1 units.
pub fn loo_predictions_batch1(
    covariates: &DMatrix<f64>,
    z: &Assignment,
    y: &[f64],
    config: &LearnerConfig,
    stream: &RngStream,
) -> Result<PotentialPredictions> {
    Ok(fit_batch1_models(covariates, z, y, config, stream)?.predictions)
}

/// Out-of-sample R² of arm `z`'s leave-one-out predictions, clamped to
/// `[WEIGHT_FLOOR, 1]`. Zero outcome variance in an arm yields the floor.
pub fn accuracy_weights_from_loo(
    predictions: &PotentialPredictions,
    z: &Assignment,
    y: &[f64],
) -> Result<AccuracyWeights> {
    let n = predictions.len();
    if z.len() != n || y.len() != n {
        return Err(Error::DimensionMismatch("predictions, z and y must agree".into()));
    }
    let r2 = |arm: u8| -> f64 {
        let idx: Vec<usize> = (0..n).filter(|&i| z.z()[i] == arm).collect();
        let obs: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let fit: Vec<f64> = idx
            .iter()
            .map(|&i| if arm == 1 { predictions.yhat1[i] } else { predictions.yhat0[i] })
            .collect();
        let ybar = linalg::mean(&obs);
        let sst: f64 = obs.iter().map(|v| (v - ybar) * (v - ybar)).sum();
        if sst <= 0.0 {
            return WEIGHT_FLOOR;
        }
        let sse: f64 = obs.iter().zip(&fit).map(|(o, f)| (o - f) * (o - f)).sum();
        (1.0 - sse / sst).clamp(WEIGHT_FLOOR, 1.0)
    };
    AccuracyWeights::new(r2(1), r2(0))
}

/// Accuracy weights from scratch: run the leave-one-out protocol on the
/// batch-1 data and score each arm's predictions against its outcomes.
pub fn accuracy_weights(
    covariates: &DMatrix<f64>,
    z: &Assignment,
    y: &[f64],
    config: &LearnerConfig,
    stream: &RngStream,
) -> Result<AccuracyWeights> {
    let preds = loo_predictions_batch1(covariates, z, y, config, stream)?;
    accuracy_weights_from_loo(&preds, z, y)
}

/// Sample covariance of the `(Ŷ(1), Ŷ(0))` rows, ridge-regularized when
/// near-singular so it stays invertible downstream.
pub fn prediction_covariance(predictions: &PotentialPredictions) -> Result<PredCovariance> {
    let n = predictions.len();
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 prediction rows".into()));
    }
    let s = linalg::sample_covariance(&predictions.as_matrix());
    let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
    let scale = (s.trace() / 2.0).max(0.0);
    let near_singular = det <= 1e-12 * scale * scale || scale == 0.0;
    let s = if near_singular { crate::linalg::regularize(&s) } else { s };
    Ok(PredCovariance { s })
}

/// The infeasible oracle pairing score `Y(1) + Y(0)` per unit; available
/// only in simulation, used for benchmarking the design against its target.
pub fn oracle_score(y1: &[f64], y0: &[f64]) -> Vec<f64> {
    debug_assert_eq!(y1.len(), y0.len());
    y1.iter().zip(y0).map(|(a, b)| a + b).collect()
}
