//! Distance functions, exact minimum-weight perfect matching, pair
//! ordering for inference, and pairing-quality diagnostics.

mod blossom;

use nalgebra::DMatrix;

pub use blossom::max_weight_matching;

use crate::error::{Error, Result};
use crate::linalg::{self, Whitener};
use crate::predict::{PotentialPredictions, PredCovariance};
use crate::types::{Assignment, Batch, PairedOrder, Pairing, Sample};

/// A symmetric nonnegative pairwise distance matrix with a finite sentinel
/// weight marking forbidden pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
    forbidden: f64,
}

impl DistanceMatrix {
    /// Build from a symmetric matrix with zero diagonal and finite,
    /// nonnegative entries. The forbidden-pair sentinel is fixed at
    /// construction as `1e6 * (max entry + 1)`.
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n {
            return Err(Error::DimensionMismatch("distance matrix must be square".into()));
        }
        let mut d = vec![0.0; n * n];
        let mut max = 0.0_f64;
        for i in 0..n {
            if m[(i, i)] != 0.0 {
                return Err(Error::InvalidInput(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = m[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "distance ({i}, {j}) = {v} is not finite and nonnegative"
                    )));
                }
                if (v - m[(j, i)]).abs() > 1e-9 * (1.0 + v.abs()) {
                    return Err(Error::InvalidInput(format!("asymmetry at ({i}, {j})")));
                }
                d[i * n + j] = v;
                max = max.max(v);
            }
        }
        Ok(DistanceMatrix { n, d, forbidden: 1e6 * (max + 1.0) })
    }

    pub fn from_fn<F: FnMut(usize, usize) -> f64>(n: usize, mut f: F) -> Result<Self> {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self::new(&m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    /// The finite sentinel weight carried by forbidden pairs.
    pub fn forbidden_value(&self) -> f64 {
        self.forbidden
    }

    pub fn is_forbidden(&self, i: usize, j: usize) -> bool {
        self.get(i, j) == self.forbidden
    }

    fn forbid(&mut self, i: usize, j: usize) {
        let v = self.forbidden;
        self.d[i * self.n + j] = v;
        self.d[j * self.n + i] = v;
    }
}

/// Whitened covariate coordinates under the Mahalanobis metric: rows `u_i`
/// with `‖u_i − u_j‖ = sqrt((x_i − x_j)ᵀ Σ⁻¹ (x_i − x_j))`, where `Σ` is
/// the ridge-regularized sample covariance of the covariates.
pub fn mahalanobis_whitened(covariates: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cov = linalg::regularize(&linalg::sample_covariance(covariates));
    let whitener = Whitener::new(&cov)?;
    Ok(whitener.whiten_rows(covariates))
}

fn distances_from_rows(u: &DMatrix<f64>) -> DistanceMatrix {
    let n = u.nrows();
    let k = u.ncols();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for c in 0..k {
                let diff = u[(i, c)] - u[(j, c)];
                s += diff * diff;
            }
            let d = s.sqrt();
            m[(i, j)] = d;
            m[(j, i)] = d;
        }
    }
    DistanceMatrix::new(&m).expect("whitened distances are valid")
}

/// Pairwise Mahalanobis distances over the sample covariates.
pub fn mahalanobis_distances(sample: &Sample) -> Result<DistanceMatrix> {
    Ok(distances_from_rows(&mahalanobis_whitened(sample.covariates())?))
}

/// Per-unit scalar matching score under the Mahalanobis metric: the
/// coordinate sum of the whitened covariate vector. Used to order pairs so
/// that adjacent pairs are close.
pub fn mahalanobis_scores(sample: &Sample) -> Result<Vec<f64>> {
    let u = mahalanobis_whitened(sample.covariates())?;
    Ok((0..u.nrows()).map(|i| u.row(i).sum()).collect())
}

/// Whitened prediction coordinates under the accuracy-weighted metric
/// `W S⁻¹ W`: rows `v_i = L⁻¹ W ŷ_i` with `S = L Lᵀ` after ridge
/// regularization.
pub fn weighted_po_whitened(
    predictions: &PotentialPredictions,
    w: [f64; 2],
    s: &PredCovariance,
) -> Result<DMatrix<f64>> {
    for v in w {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidInput(format!("accuracy weight {v} outside [0, 1]")));
        }
    }
    let cov = linalg::regularize(s.matrix());
    let whitener = Whitener::new(&cov)?;
    let mut weighted = predictions.as_matrix();
    for i in 0..weighted.nrows() {
        weighted[(i, 0)] *= w[0];
        weighted[(i, 1)] *= w[1];
    }
    Ok(whitener.whiten_rows(&weighted))
}

/// Pairwise accuracy-weighted prediction distances
/// `sqrt((ŷ_i − ŷ_j)ᵀ W S⁻¹ W (ŷ_i − ŷ_j))`.
pub fn weighted_po_distances(
    predictions: &PotentialPredictions,
    w: [f64; 2],
    s: &PredCovariance,
) -> Result<DistanceMatrix> {
    Ok(distances_from_rows(&weighted_po_whitened(predictions, w, s)?))
}

/// Per-unit scalar matching score under the weighted prediction metric:
/// the coordinate sum of the whitened prediction vector.
pub fn weighted_po_scores(
    predictions: &PotentialPredictions,
    w: [f64; 2],
    s: &PredCovariance,
) -> Result<Vec<f64>> {
    let v = weighted_po_whitened(predictions, w, s)?;
    Ok((0..v.nrows()).map(|i| v.row(i).sum()).collect())
}

/// Pilot-model distance of Bai (2022):
/// `(x₁ᵀβ̂ − x₂ᵀβ̂)² + (x₁ − x₂)ᵀ Σ̂ (x₁ − x₂)`,
/// where `Σ̂` is the covariance of the OLS coefficients. The second term
/// penalizes pairing units far apart in directions the pilot model is
/// uncertain about.
pub fn penalized_ols_distance(
    x1: &[f64],
    x2: &[f64],
    beta: &[f64],
    beta_cov: &DMatrix<f64>,
) -> Result<f64> {
    let k = x1.len();
    if x2.len() != k || beta.len() != k || beta_cov.nrows() != k || beta_cov.ncols() != k {
        return Err(Error::DimensionMismatch(format!(
            "x1 ({}), x2 ({}), beta ({}), beta_cov ({}x{}) must all agree",
            x1.len(),
            x2.len(),
            beta.len(),
            beta_cov.nrows(),
            beta_cov.ncols()
        )));
    }
    let diff: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| a - b).collect();
    let fitted_gap: f64 = diff.iter().zip(beta).map(|(d, b)| d * b).sum();
    let mut quad = 0.0;
    for i in 0..k {
        for j in 0..k {
            quad += diff[i] * beta_cov[(i, j)] * diff[j];
        }
    }
    Ok((fitted_gap * fitted_gap + quad).max(0.0))
}

/// Exact minimum-weight perfect matching.
///
/// Ties are broken deterministically toward the lexicographically smallest
/// sorted pair list by subtracting index-based perturbations that are
/// infinitesimal next to the smallest nonzero weight gap; beyond the
/// resolution of f64 the solver's deterministic scan order decides.
pub fn min_weight_perfect_matching(d: &DistanceMatrix) -> Result<Pairing> {
    let n = d.n();
    if n % 2 != 0 {
        return Err(Error::InvalidInput(format!("perfect matching needs even n, got {n}")));
    }
    if n == 0 {
        return Pairing::new(vec![], 0);
    }
    // Perturbation base: below half the smallest gap between distinct
    // weights and below 1e-12 of the weight scale.
    let mut values: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            values.push(d.get(i, j));
        }
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut min_gap = f64::INFINITY;
    for w in values.windows(2) {
        let gap = w[1] - w[0];
        if gap > 0.0 {
            min_gap = min_gap.min(gap);
        }
    }
    let scale = values.last().copied().unwrap_or(0.0).max(1.0);
    let base = (1e-12 * scale).min(if min_gap.is_finite() { min_gap / 2.0 } else { f64::INFINITY });

    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    let mut rank = 0u32;
    for i in 0..n {
        for j in (i + 1)..n {
            let tie = base * 2.0_f64.powi(-(rank.min(900) as i32));
            // Maximize the negated weight; the tie bonus prefers low-index
            // pairs among equal-weight optima.
            edges.push((i, j, -d.get(i, j) + tie));
            rank += 1;
        }
    }
    let mate = max_weight_matching(n, &edges, true);
    let mut pairs = Vec::with_capacity(n / 2);
    for (v, m) in mate.iter().enumerate() {
        match m {
            Some(w) if *w > v => pairs.push((v, *w)),
            Some(_) => {}
            None => {
                return Err(Error::Degenerate(format!(
                    "solver left unit {v} unmatched on a complete graph"
                )))
            }
        }
    }
    Pairing::new(pairs, n)
}

/// Replace the distance for same-arm batch-1 pairs with the forbidden
/// sentinel, enforcing that rematching keeps batch-1 pairs mixed.
pub fn forbid_same_arm_batch1(
    d: &DistanceMatrix,
    sample: &Sample,
    z: &Assignment,
) -> Result<DistanceMatrix> {
    let batch = sample
        .batch()
        .ok_or_else(|| Error::InvalidInput("sample has no batch labels".into()))?;
    if z.len() != sample.n() || d.n() != sample.n() {
        return Err(Error::DimensionMismatch(
            "distance matrix, sample and assignment must agree".into(),
        ));
    }
    let mut out = d.clone();
    for i in 0..sample.n() {
        for j in (i + 1)..sample.n() {
            if batch[i] == Batch::First
                && batch[j] == Batch::First
                && z.z()[i] + z.z()[j] != 1
            {
                out.forbid(i, j);
            }
        }
    }
    Ok(out)
}

/// Arrange pairs for inference: ascending by pair score, ties broken by
/// smallest member index, each pair internally ordered treated-first.
pub fn order_pairs_for_inference(
    pairing: &Pairing,
    pair_scores: &[f64],
    z: &Assignment,
) -> Result<PairedOrder> {
    if pair_scores.len() != pairing.n_pairs() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} pairs",
            pair_scores.len(),
            pairing.n_pairs()
        )));
    }
    let mut order: Vec<usize> = (0..pairing.n_pairs()).collect();
    order.sort_by(|&a, &b| {
        pair_scores[a]
            .partial_cmp(&pair_scores[b])
            .unwrap()
            .then(pairing.pairs()[a].0.cmp(&pairing.pairs()[b].0))
    });
    let pairs_in_order: Vec<(usize, usize)> = order.iter().map(|&m| pairing.pairs()[m]).collect();
    PairedOrder::new(pairs_in_order, z)
}

/// Within-pair and cross-pair covariate closeness of an ordered pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct PairingDiagnostics {
    /// Mean entrywise L1 distance within pairs.
    pub within_pair_l1: f64,
    /// Mean squared L2 distance within pairs.
    pub within_pair_l2sq: f64,
    /// Mean squared L2 distances between the four unit combinations of
    /// consecutive "pairs of pairs".
    pub cross_pair_l2sq: [f64; 4],
}

/// Compute pairing-quality diagnostics: small values mean paired units
/// (and adjacent pairs) are close in covariate space.
pub fn pairing_diagnostics(sample: &Sample, ordered: &PairedOrder) -> PairingDiagnostics {
    let x = sample.covariates();
    let k = x.ncols();
    let pairs = ordered.pairs();
    let n_pairs = pairs.len();
    let l1 = |a: usize, b: usize| -> f64 {
        (0..k).map(|c| (x[(a, c)] - x[(b, c)]).abs()).sum()
    };
    let l2sq = |a: usize, b: usize| -> f64 {
        (0..k)
            .map(|c| {
                let diff = x[(a, c)] - x[(b, c)];
                diff * diff
            })
            .sum()
    };
    let within_pair_l1 = pairs.iter().map(|&(t, c)| l1(t, c)).sum::<f64>() / n_pairs as f64;
    let within_pair_l2sq = pairs.iter().map(|&(t, c)| l2sq(t, c)).sum::<f64>() / n_pairs as f64;
    let mut cross = [0.0; 4];
    for m in 0..(n_pairs / 2) {
        let (a1, a2) = pairs[2 * m];
        let (b1, b2) = pairs[2 * m + 1];
        // All unit combinations across the two pairs of a "pair of pairs".
        cross[0] += l2sq(a1, b1);
        cross[1] += l2sq(a1, b2);
        cross[2] += l2sq(a2, b1);
        cross[3] += l2sq(a2, b2);
    }
    for c in &mut cross {
        *c /= n_pairs as f64;
    }
    PairingDiagnostics { within_pair_l1, within_pair_l2sq, cross_pair_l2sq: cross }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predict::Provenance;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn sample_1d(values: &[f64]) -> Sample {
        Sample::new(DMatrix::from_fn(values.len(), 1, |i, _| values[i])).unwrap()
    }

    fn preds(rows: &[(f64, f64)]) -> PotentialPredictions {
        PotentialPredictions::new(
            rows.iter().map(|r| r.0).collect(),
            rows.iter().map(|r| r.1).collect(),
            vec![Provenance::OutOfBatch; rows.len()],
            vec![Provenance::OutOfBatch; rows.len()],
        )
        .unwrap()
    }

    fn diag_cov(a: f64, b: f64) -> PredCovariance {
        PredCovariance::from_matrix(DMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, b])).unwrap()
    }

    #[test]
    fn one_dimensional_mahalanobis_matches_hand_value() {
        let s = sample_1d(&[0.0, 2.0, 0.0, 2.0]);
        let d = mahalanobis_distances(&s).unwrap();
        // variance of (0,2,0,2) is 4/3; |0-2|/sqrt(4/3) = sqrt(3)
        assert_relative_eq!(d.get(0, 1), 3.0_f64.sqrt(), max_relative = 1e-6);
        assert_relative_eq!(d.get(0, 2), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn two_unit_mahalanobis_is_gap_over_sd() {
        // Two units with values {0, 2}: sample variance 2, d = sqrt(2).
        let m = DMatrix::from_row_slice(2, 1, &[0.0, 2.0]);
        let u = mahalanobis_whitened(&m).unwrap();
        let d = ((u[(0, 0)] - u[(1, 0)]) as f64).abs();
        assert_relative_eq!(d, 2.0_f64.sqrt(), max_relative = 1e-6);
    }

    #[test]
    fn standardized_covariates_reduce_to_euclidean() {
        // Whiten data first so its sample covariance is the identity; the
        // Mahalanobis distance must then equal the Euclidean distance.
        let stream = crate::rng::RngStream::new(17);
        let mut rng = stream.rng();
        let raw = DMatrix::from_fn(30, 3, |_, _| rng.random::<f64>() * 3.0);
        let standardized = mahalanobis_whitened(&raw).unwrap();
        let s = Sample::new(standardized.clone()).unwrap();
        let d = mahalanobis_distances(&s).unwrap();
        for _ in 0..20 {
            let i = rng.random_range(0..30);
            let mut j = rng.random_range(0..30);
            if i == j {
                j = (j + 1) % 30;
            }
            let eu: f64 = (0..3)
                .map(|c| {
                    let diff = standardized[(i, c)] - standardized[(j, c)];
                    diff * diff
                })
                .sum::<f64>()
                .sqrt();
            assert_relative_eq!(d.get(i, j), eu, max_relative = 1e-5);
        }
    }

    #[test]
    fn identity_weights_reduce_to_plain_mahalanobis() {
        let stream = crate::rng::RngStream::new(3);
        let mut rng = stream.rng();
        let rows: Vec<(f64, f64)> =
            (0..24).map(|_| (rng.random::<f64>() * 4.0, rng.random::<f64>() * 2.0 - 1.0)).collect();
        let p = preds(&rows);
        let s = crate::predict::prediction_covariance(&p).unwrap();
        let dw = weighted_po_distances(&p, [1.0, 1.0], &s).unwrap();
        let plain = mahalanobis_distances(&Sample::new(p.as_matrix()).unwrap()).unwrap();
        for _ in 0..20 {
            let i = rng.random_range(0..24);
            let mut j = rng.random_range(0..24);
            if i == j {
                j = (j + 1) % 24;
            }
            assert_relative_eq!(dw.get(i, j), plain.get(i, j), max_relative = 1e-6);
        }
    }

    #[test]
    fn zero_weight_suppresses_a_coordinate() {
        let p = preds(&[(3.0, 9.0), (1.0, -4.0), (0.0, 0.0), (4.0, 1.0)]);
        let s = diag_cov(1.0, 1.0);
        let d = weighted_po_distances(&p, [1.0, 0.0], &s).unwrap();
        assert_relative_eq!(d.get(0, 1), 2.0, max_relative = 1e-4);
    }

    #[test]
    fn identical_predictions_have_zero_distance() {
        let p = preds(&[(1.0, 2.0), (1.0, 2.0), (0.0, 1.0), (5.0, -1.0)]);
        let s = crate::predict::prediction_covariance(&p).unwrap();
        let d = weighted_po_distances(&p, [0.7, 0.3], &s).unwrap();
        assert_eq!(d.get(0, 1), 0.0);
    }

    #[test]
    fn negative_weight_is_rejected() {
        let p = preds(&[(1.0, 2.0), (0.0, 1.0)]);
        let s = crate::predict::prediction_covariance(&p).unwrap();
        assert!(weighted_po_distances(&p, [-0.1, 1.0], &s).is_err());
    }

    #[test]
    fn penalized_ols_distance_hand_values() {
        let id = DMatrix::identity(2, 2);
        assert_eq!(penalized_ols_distance(&[1.0, 2.0], &[1.0, 2.0], &[3.0, 4.0], &id).unwrap(), 0.0);
        // beta = 0 leaves the squared Euclidean term.
        assert_relative_eq!(
            penalized_ols_distance(&[1.0, 2.0], &[4.0, 6.0], &[0.0, 0.0], &id).unwrap(),
            25.0,
            epsilon = 1e-12
        );
        // k = 1: (2*3 - 0)^2 + 4 * 0.5 = 38
        let cov = DMatrix::from_element(1, 1, 0.5);
        assert_relative_eq!(
            penalized_ols_distance(&[2.0], &[0.0], &[3.0], &cov).unwrap(),
            38.0,
            epsilon = 1e-12
        );
        assert!(penalized_ols_distance(&[1.0], &[1.0, 2.0], &[0.0], &id).is_err());
    }

    #[test]
    fn four_unit_matching_matches_enumeration() {
        let d = DistanceMatrix::from_fn(4, |i, j| {
            if (i, j) == (0, 1) || (i, j) == (2, 3) {
                1.0
            } else {
                10.0
            }
        })
        .unwrap();
        let p = min_weight_perfect_matching(&d).unwrap();
        assert_eq!(p.pairs(), &[(0, 1), (2, 3)]);
        assert_relative_eq!(p.total_weight(|a, b| d.get(a, b)), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn two_units_form_the_only_pair() {
        let d = DistanceMatrix::from_fn(2, |_, _| 7.3).unwrap();
        let p = min_weight_perfect_matching(&d).unwrap();
        assert_eq!(p.pairs(), &[(0, 1)]);
    }

    #[test]
    fn odd_n_is_an_error() {
        let d = DistanceMatrix::from_fn(3, |_, _| 1.0).unwrap();
        assert!(min_weight_perfect_matching(&d).is_err());
    }

    #[test]
    fn all_ties_resolve_to_the_lexicographically_smallest_pair_list() {
        let d = DistanceMatrix::from_fn(8, |_, _| 0.0).unwrap();
        let p = min_weight_perfect_matching(&d).unwrap();
        assert_eq!(p.pairs(), &[(0, 1), (2, 3), (4, 5), (6, 7)]);
        let d = DistanceMatrix::from_fn(6, |_, _| 4.2).unwrap();
        let p = min_weight_perfect_matching(&d).unwrap();
        assert_eq!(p.pairs(), &[(0, 1), (2, 3), (4, 5)]);
    }

    fn brute_force_minimum(d: &DistanceMatrix) -> f64 {
        fn go(units: &mut Vec<usize>, d: &DistanceMatrix) -> f64 {
            if units.is_empty() {
                return 0.0;
            }
            let a = units[0];
            let mut best = f64::INFINITY;
            for pos in 1..units.len() {
                let b = units[pos];
                let mut rest: Vec<usize> =
                    units.iter().copied().filter(|&u| u != a && u != b).collect();
                let v = d.get(a, b) + go(&mut rest, d);
                best = best.min(v);
            }
            best
        }
        let mut units: Vec<usize> = (0..d.n()).collect();
        go(&mut units, d)
    }

    #[test]
    fn random_instances_match_brute_force() {
        let stream = crate::rng::RngStream::new(99);
        for n in [6usize, 8, 10] {
            for rep in 0..60 {
                let mut rng = stream.child(n as u64).child(rep).rng();
                let d = DistanceMatrix::from_fn(n, |_, _| rng.random::<f64>()).unwrap();
                let p = min_weight_perfect_matching(&d).unwrap();
                let total = p.total_weight(|a, b| d.get(a, b));
                let best = brute_force_minimum(&d);
                assert!(
                    (total - best).abs() <= 1e-9 * (1.0 + best.abs()),
                    "n={n} rep={rep}: solver {total} vs brute force {best}"
                );
            }
        }
    }

    #[test]
    fn solver_never_beats_nor_loses_to_a_supplied_feasible_pairing() {
        // Optimality against arbitrary alternatives, the inequality the
        // rematching step relies on.
        let stream = crate::rng::RngStream::new(5);
        for rep in 0..40 {
            let mut rng = stream.child(rep).rng();
            let n = 12;
            let d = DistanceMatrix::from_fn(n, |_, _| rng.random::<f64>()).unwrap();
            let opt = min_weight_perfect_matching(&d).unwrap();
            let mut idx: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut rng);
            let alt =
                Pairing::new(idx.chunks(2).map(|c| (c[0], c[1])).collect(), n).unwrap();
            let w_opt = opt.total_weight(|a, b| d.get(a, b));
            let w_alt = alt.total_weight(|a, b| d.get(a, b));
            assert!(w_opt <= w_alt + 1e-9);
        }
    }

    #[test]
    fn forbidden_entries_take_the_sentinel_and_others_stay() {
        let x = DMatrix::from_fn(4, 1, |i, _| i as f64);
        let sample = Sample::new(x)
            .unwrap()
            .with_batches(vec![Batch::First, Batch::First, Batch::Second, Batch::Second])
            .unwrap();
        let d = mahalanobis_distances(&sample).unwrap();
        let z = Assignment::new(vec![1, 1, 0, 0]).unwrap();
        let f = forbid_same_arm_batch1(&d, &sample, &z).unwrap();
        assert!(f.is_forbidden(0, 1));
        assert_eq!(f.get(2, 3), d.get(2, 3));
        let z2 = Assignment::new(vec![1, 0, 0, 0]).unwrap();
        let f2 = forbid_same_arm_batch1(&d, &sample, &z2).unwrap();
        assert!(!f2.is_forbidden(0, 1));
        assert_eq!(f2.get(0, 1), d.get(0, 1));
    }

    #[test]
    fn sentinel_free_matchings_avoid_sentinels() {
        // Balanced batch-1 arms guarantee a feasible matching; the solver
        // must never pay for a sentinel edge.
        let stream = crate::rng::RngStream::new(31);
        for rep in 0..200 {
            let mut rng = stream.child(rep).rng();
            let n = 8;
            let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
            let batch: Vec<Batch> = (0..n)
                .map(|i| if i < 4 { Batch::First } else { Batch::Second })
                .collect();
            let sample = Sample::new(x).unwrap().with_batches(batch).unwrap();
            let z = Assignment::new(vec![1, 1, 0, 0, 0, 0, 0, 0]).unwrap();
            let d = mahalanobis_distances(&sample).unwrap();
            let f = forbid_same_arm_batch1(&d, &sample, &z).unwrap();
            let p = min_weight_perfect_matching(&f).unwrap();
            for &(a, b) in p.pairs() {
                assert!(!f.is_forbidden(a, b), "rep {rep} used a forbidden edge ({a},{b})");
            }
        }
    }

    #[test]
    fn pair_order_sorts_by_score_with_index_ties() {
        let pairing = Pairing::new(vec![(0, 1), (2, 3), (4, 5)], 6).unwrap();
        let z = Assignment::new(vec![1, 0, 0, 1, 1, 0]).unwrap();
        let ordered = order_pairs_for_inference(&pairing, &[5.0, 1.0, 3.0], &z).unwrap();
        assert_eq!(ordered.pairs(), &[(3, 2), (4, 5), (0, 1)]);
        let tied = order_pairs_for_inference(&pairing, &[2.0, 2.0, 2.0], &z).unwrap();
        assert_eq!(tied.pairs(), &[(0, 1), (3, 2), (4, 5)]);
        assert!(order_pairs_for_inference(&pairing, &[1.0], &z).is_err());
    }

    #[test]
    fn pair_order_is_invariant_to_input_permutation() {
        let stream = crate::rng::RngStream::new(8);
        let mut rng = stream.rng();
        let scores: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
        let z = Assignment::new(vec![1, 0, 1, 0, 1, 0, 1, 0, 1, 0]).unwrap();
        let fwd: Vec<(usize, usize)> = (0..5).map(|m| (2 * m, 2 * m + 1)).collect();
        let rev: Vec<(usize, usize)> = fwd.iter().rev().copied().collect();
        let p1 = Pairing::new(fwd, 10).unwrap();
        let p2 = Pairing::new(rev, 10).unwrap();
        // Canonical storage makes the score vector line up either way.
        let o1 = order_pairs_for_inference(&p1, &scores, &z).unwrap();
        let o2 = order_pairs_for_inference(&p2, &scores, &z).unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn diagnostics_zero_for_identical_covariates() {
        let s = sample_1d(&[1.0, 1.0, 1.0, 1.0]);
        let z = Assignment::new(vec![1, 0, 1, 0]).unwrap();
        let ordered = PairedOrder::new(vec![(0, 1), (2, 3)], &z).unwrap();
        let diag = pairing_diagnostics(&s, &ordered);
        assert_eq!(diag.within_pair_l1, 0.0);
        assert_eq!(diag.within_pair_l2sq, 0.0);
        assert_eq!(diag.cross_pair_l2sq, [0.0; 4]);
    }

    #[test]
    fn diagnostics_hand_value_for_four_units() {
        let s = sample_1d(&[0.0, 0.1, 1.0, 1.1]);
        let z = Assignment::new(vec![1, 0, 1, 0]).unwrap();
        let ordered = PairedOrder::new(vec![(0, 1), (2, 3)], &z).unwrap();
        let diag = pairing_diagnostics(&s, &ordered);
        assert_relative_eq!(diag.within_pair_l1, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn optimal_matching_beats_random_pairing_on_diagnostics() {
        let stream = crate::rng::RngStream::new(40);
        for rep in 0..100 {
            let mut rng = stream.child(rep).rng();
            let n = 12;
            let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
            let sample = sample_1d(&values);
            let d = mahalanobis_distances(&sample).unwrap();
            let opt = min_weight_perfect_matching(&d).unwrap();
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let rnd = Pairing::new(idx.chunks(2).map(|c| (c[0], c[1])).collect(), n).unwrap();
            let z_for = |p: &Pairing| {
                let mut z = vec![0u8; n];
                for &(a, _) in p.pairs() {
                    z[a] = 1;
                }
                Assignment::new(z).unwrap()
            };
            let scores = mahalanobis_scores(&sample).unwrap();
            let pair_scores = |p: &Pairing| -> Vec<f64> {
                p.pairs().iter().map(|&(a, b)| (scores[a] + scores[b]) / 2.0).collect()
            };
            let zo = z_for(&opt);
            let zr = z_for(&rnd);
            let o1 = order_pairs_for_inference(&opt, &pair_scores(&opt), &zo).unwrap();
            let o2 = order_pairs_for_inference(&rnd, &pair_scores(&rnd), &zr).unwrap();
            let d1 = pairing_diagnostics(&sample, &o1);
            let d2 = pairing_diagnostics(&sample, &o2);
            assert!(d1.within_pair_l1 <= d2.within_pair_l1 + 1e-12, "rep {rep}");
        }
    }

    #[test]
    fn scaling_the_weights_leaves_the_chosen_pairing_unchanged() {
        // W enters the metric multiplicatively, so rescaling both weights
        // rescales every distance and cannot move the argmin.
        let stream = crate::rng::RngStream::new(61);
        for rep in 0..20 {
            let mut rng = stream.child(rep).rng();
            let rows: Vec<(f64, f64)> =
                (0..10).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
            let p = preds(&rows);
            let s = crate::predict::prediction_covariance(&p).unwrap();
            let d1 = weighted_po_distances(&p, [0.8, 0.4], &s).unwrap();
            let d2 = weighted_po_distances(&p, [0.4, 0.2], &s).unwrap();
            let m1 = min_weight_perfect_matching(&d1).unwrap();
            let m2 = min_weight_perfect_matching(&d2).unwrap();
            assert_eq!(m1, m2, "rep {rep}");
        }
    }
}
