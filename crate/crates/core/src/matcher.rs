//! Nearest-neighbour matching on global features and the evaluation
//! metrics built on it.

use alloc::vec::Vec;

use crate::detector::GroundTruth;
use crate::error::{contract_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
    /// Set by [`MatchSet::annotate`].
    pub correct: Option<bool>,
}

/// Candidate correspondences, at most one per query index `i`, in `i` order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Marks each match correct iff it is a ground-truth pair.
    pub fn annotate(&mut self, gt: &GroundTruth) {
        for m in &mut self.matches {
            m.correct = Some(gt.is_correct(m.i, m.j));
        }
    }

    pub fn correct_count(&self) -> usize {
        self.matches.iter().filter(|m| m.correct == Some(true)).count()
    }

    /// Matches with `distance < threshold`.
    pub fn below(&self, threshold: f64) -> MatchSet {
        MatchSet { matches: self.matches.iter().filter(|m| m.distance < threshold).copied().collect() }
    }

    /// Matches ordered by ascending distance (stable in `i`).
    pub fn sorted_by_distance(&self) -> Vec<Match> {
        let mut v = self.matches.clone();
        v.sort_by(|a, b| a.distance.total_cmp(&b.distance));
        v
    }
}

fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Each row of `desc_a` matched to its Euclidean nearest row of `desc_b`;
/// ties go to the smaller index.
pub fn match_nn<T: Scalar>(desc_a: &Tensor<T>, desc_b: &Tensor<T>) -> Result<MatchSet> {
    let (na, da) = desc_a.dims2()?;
    let (nb, db) = desc_b.dims2()?;
    if na == 0 || nb == 0 {
        return Err(contract_err!("cannot match empty descriptor lists ({na} x {nb})"));
    }
    if da != db {
        return Err(contract_err!("descriptor widths differ: {da} vs {db}"));
    }
    let matches = (0..na)
        .map(|i| {
            let a = desc_a.row(i);
            let (mut best_j, mut best) = (0, f64::INFINITY);
            for j in 0..nb {
                let d = squared_distance(a, desc_b.row(j));
                if d < best {
                    best = d;
                    best_j = j;
                }
            }
            Match { i, j: best_j, distance: libm::sqrt(best), correct: None }
        })
        .collect();
    Ok(MatchSet { matches })
}

/// Nearest-neighbour matches with distance strictly below `threshold`.
pub fn match_nnt<T: Scalar>(desc_a: &Tensor<T>, desc_b: &Tensor<T>, threshold: f64) -> Result<MatchSet> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(contract_err!("threshold must be non-negative, got {threshold}"));
    }
    Ok(match_nn(desc_a, desc_b)?.below(threshold))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub retrieved: usize,
    pub correct: usize,
    pub ground_truth: usize,
    /// `None` when nothing was retrieved.
    pub precision: Option<f64>,
    /// `None` when there is no ground-truth correspondence.
    pub recall: Option<f64>,
}

impl PrecisionRecall {
    pub fn one_minus_precision(&self) -> Option<f64> {
        self.precision.map(|p| 1.0 - p)
    }
}

pub fn precision_recall(matches: &MatchSet, gt: &GroundTruth) -> PrecisionRecall {
    let retrieved = matches.len();
    let correct = matches.matches.iter().filter(|m| gt.is_correct(m.i, m.j)).count();
    let total = gt.total();
    PrecisionRecall {
        retrieved,
        correct,
        ground_truth: total,
        precision: (retrieved > 0).then(|| correct as f64 / retrieved as f64),
        recall: (total > 0).then(|| correct as f64 / total as f64),
    }
}

/// Correct matches divided by the smaller detection count.
pub fn matching_score(matches: &MatchSet, n_detected_a: usize, n_detected_b: usize) -> Result<f64> {
    let denom = n_detected_a.min(n_detected_b);
    if denom == 0 {
        return Err(contract_err!("matching score needs detections in both images"));
    }
    if matches.matches.iter().any(|m| m.correct.is_none()) {
        return Err(contract_err!("matching score needs annotated matches"));
    }
    Ok(matches.correct_count() as f64 / denom as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub threshold: f64,
    pub recall: Option<f64>,
    pub one_minus_precision: Option<f64>,
}

/// One NNT evaluation per threshold.
pub fn curve_sweep<T: Scalar>(
    desc_a: &Tensor<T>,
    desc_b: &Tensor<T>,
    gt: &GroundTruth,
    thresholds: &[f64],
) -> Result<Vec<CurveRow>> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(contract_err!("thresholds must be sorted ascending"));
    }
    let nn = match_nn(desc_a, desc_b)?;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let pr = precision_recall(&nn.below(t), gt);
            CurveRow { threshold: t, recall: pr.recall, one_minus_precision: pr.one_minus_precision() }
        })
        .collect())
}
