//! Shared domain types for paired experimental designs.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Batch membership of a unit in a two-batch design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Batch {
    First,
    Second,
}

/// A study sample: covariates for an even number of units, optionally
/// carrying batch labels once the sample has been split.
///
/// Units are identified by 0-based contiguous indices; any external
/// identifiers live in the ingestion layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    covariates: DMatrix<f64>,
    batch: Option<Vec<Batch>>,
}

impl Sample {
    /// Build a sample from an `n x k` covariate matrix.
    pub fn new(covariates: DMatrix<f64>) -> Result<Self> {
        let n = covariates.nrows();
        let k = covariates.ncols();
        if n < 4 || n % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "sample size must be even and at least 4, got {n}"
            )));
        }
        if k == 0 {
            return Err(Error::InvalidInput("at least one covariate required".into()));
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite covariate entry".into()));
        }
        Ok(Sample { covariates, batch: None })
    }

    /// Attach batch labels. Both batches must be nonempty with even sizes.
    pub fn with_batches(mut self, batch: Vec<Batch>) -> Result<Self> {
        if batch.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "{} batch labels for {} units",
                batch.len(),
                self.n()
            )));
        }
        let n1 = batch.iter().filter(|b| **b == Batch::First).count();
        let n2 = batch.len() - n1;
        if n1 == 0 || n2 == 0 || n1 % 2 != 0 || n2 % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "batches must be nonempty with even sizes, got {n1} and {n2}"
            )));
        }
        self.batch = Some(batch);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn k(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_row(&self, i: usize) -> Vec<f64> {
        self.covariates.row(i).iter().copied().collect()
    }

    pub fn batch(&self) -> Option<&[Batch]> {
        self.batch.as_deref()
    }
}

/// A treatment assignment: one indicator in `{0, 1}` per unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    z: Vec<u8>,
}

impl Assignment {
    pub fn new(z: Vec<u8>) -> Result<Self> {
        if z.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("assignment entries must be 0 or 1".into()));
        }
        Ok(Assignment { z })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn z(&self) -> &[u8] {
        &self.z
    }

    pub fn treated(&self, i: usize) -> bool {
        self.z[i] == 1
    }

    pub fn n_treated(&self) -> usize {
        self.z.iter().filter(|&&v| v == 1).count()
    }
}

/// A perfect matching of unit indices into unordered pairs.
///
/// Stored canonically: each pair as `(min, max)`, pairs sorted by first
/// member, so equal matchings compare equal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    pairs: Vec<(usize, usize)>,
}

impl Pairing {
    /// Build a pairing over `n` units; every index in `0..n` must appear
    /// exactly once.
    pub fn new(pairs: Vec<(usize, usize)>, n: usize) -> Result<Self> {
        if pairs.len() * 2 != n {
            return Err(Error::DimensionMismatch(format!(
                "{} pairs cannot cover {} units",
                pairs.len(),
                n
            )));
        }
        let mut seen = vec![false; n];
        let mut canonical = Vec::with_capacity(pairs.len());
        for (a, b) in pairs {
            if a >= n || b >= n || a == b {
                return Err(Error::InvalidInput(format!("invalid pair ({a}, {b})")));
            }
            if seen[a] || seen[b] {
                return Err(Error::InvalidInput(format!(
                    "unit appears in more than one pair: ({a}, {b})"
                )));
            }
            seen[a] = true;
            seen[b] = true;
            canonical.push((a.min(b), a.max(b)));
        }
        canonical.sort_unstable();
        Ok(Pairing { pairs: canonical })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn n_units(&self) -> usize {
        self.pairs.len() * 2
    }

    /// Partner of unit `i`.
    pub fn partner(&self, i: usize) -> usize {
        for &(a, b) in &self.pairs {
            if a == i {
                return b;
            }
            if b == i {
                return a;
            }
        }
        panic!("unit {i} not in pairing");
    }

    /// Total weight of this pairing under a pairwise distance lookup.
    pub fn total_weight<F: Fn(usize, usize) -> f64>(&self, d: F) -> f64 {
        self.pairs.iter().map(|&(a, b)| d(a, b)).sum()
    }
}

/// Pairs arranged for inference: a permutation of a [`Pairing`], each pair
/// internally ordered treated-first. Consecutive pairs `(2m-1, 2m)` form the
/// "pairs of pairs" used by the variance estimator and the blocks of four.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedOrder {
    /// `(treated, control)` per pair, in inference order.
    ordered: Vec<(usize, usize)>,
}

impl PairedOrder {
    /// Build from a pairing and an assignment, in the given pair order.
    /// Every pair must contain exactly one treated unit.
    pub fn new(pairs_in_order: Vec<(usize, usize)>, z: &Assignment) -> Result<Self> {
        let mut ordered = Vec::with_capacity(pairs_in_order.len());
        for (a, b) in pairs_in_order {
            match (z.treated(a), z.treated(b)) {
                (true, false) => ordered.push((a, b)),
                (false, true) => ordered.push((b, a)),
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "pair ({a}, {b}) does not have exactly one treated unit"
                    )))
                }
            }
        }
        Ok(PairedOrder { ordered })
    }

    /// `(treated, control)` pairs in inference order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.ordered
    }

    pub fn n_pairs(&self) -> usize {
        self.ordered.len()
    }

    /// The underlying unordered pairing.
    pub fn pairing(&self) -> Pairing {
        Pairing::new(self.ordered.clone(), self.ordered.len() * 2)
            .expect("ordered pairs form a valid pairing")
    }
}

/// True iff every pair in `pairing` has exactly one treated unit under `z`.
pub fn validate_paired_assignment(pairing: &Pairing, z: &Assignment) -> Result<bool> {
    if z.len() != pairing.n_units() {
        return Err(Error::DimensionMismatch(format!(
            "assignment length {} does not match {} paired units",
            z.len(),
            pairing.n_units()
        )));
    }
    Ok(pairing
        .pairs()
        .iter()
        .all(|&(a, b)| z.z()[a] + z.z()[b] == 1))
}
