//! Step-up detection of degraded regions with false discovery rate control.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::conformal::{aggregate_region_pvalue, region_pvalues, PValue, RegionPValues};
use crate::error::{precondition, Result};
use crate::regions::RegionFamily;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Rejected region ids, ordered by p-value (ties by id).
    pub rejected: Vec<usize>,
    pub k_max: usize,
    pub alpha: f64,
    /// Whether the harmonic-sum dependence correction was applied.
    pub corrected: bool,
    /// Number of hypotheses entering the step-up.
    pub tested: usize,
    /// Regions without calibration points; excluded from the count.
    #[serde(default)]
    pub unevaluable: Vec<usize>,
    /// Regions without test points; skipped.
    #[serde(default)]
    pub empty: Vec<usize>,
}

/// `H_N = sum_{i=1}^N 1/i`, summed from the small terms up.
pub fn harmonic(n: usize) -> f64 {
    (1..=n).rev().map(|i| 1.0 / i as f64).sum()
}

/// Step-up threshold for the `l`-th smallest of `n` p-values.
pub fn step_up_threshold(l: usize, n: usize, alpha: f64, corrected: bool) -> f64 {
    let scale = if corrected { n as f64 * harmonic(n) } else { n as f64 };
    l as f64 * alpha / scale
}

/// Benjamini-Hochberg step-up on disjoint regions; Benjamini-Yekutieli
/// (harmonic correction) otherwise.
pub fn bhy_detect(region_pvals: &[(usize, PValue)], alpha: f64, disjoint: bool) -> Result<DetectionResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return precondition(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    if region_pvals.is_empty() {
        return precondition("no region p-values to test");
    }
    let mut sorted = region_pvals.to_vec();
    sorted.sort_by(|a, b| a.1.get().total_cmp(&b.1.get()).then(a.0.cmp(&b.0)));
    let n = sorted.len();
    let corrected = !disjoint;
    let scale = if corrected { n as f64 * harmonic(n) } else { n as f64 };
    let k_max = (1..=n).rev().find(|&l| sorted[l - 1].1.get() <= l as f64 * alpha / scale).unwrap_or(0);
    Ok(DetectionResult {
        rejected: sorted[..k_max].iter().map(|r| r.0).collect(),
        k_max,
        alpha,
        corrected,
        tested: n,
        unevaluable: Vec::new(),
        empty: Vec::new(),
    })
}

/// `|rejected \ truth| / max(|rejected|, 1)`.
pub fn estimate_fdr(rejected: &[usize], truth_non_null: &[usize]) -> f64 {
    let truth: HashSet<usize> = truth_non_null.iter().copied().collect();
    let rejected: HashSet<usize> = rejected.iter().copied().collect();
    let false_discoveries = rejected.difference(&truth).count();
    false_discoveries as f64 / rejected.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionStatus {
    Evaluated,
    /// No calibration point in the region.
    Unevaluable,
    /// No test point in the region.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPValueRow {
    pub id: usize,
    pub n_calib: usize,
    pub n_test: usize,
    pub status: RegionStatus,
    pub pvalue: Option<PValue>,
}

/// Aggregated p-value of every region, ranking each region's test scores
/// against its own calibration scores.
pub fn region_pvalue_table(family: &RegionFamily, calib_scores: &[f64], test_scores: &[f64], seed: u64) -> Result<Vec<RegionPValueRow>> {
    family
        .regions
        .iter()
        .map(|r| {
            if r.members.bound() > test_scores.len() || r.calib.last().is_some_and(|&i| i >= calib_scores.len()) {
                return precondition(format!("region {} indexes past the supplied scores", r.id));
            }
            let calib: Vec<f64> = r.calib.iter().map(|&i| calib_scores[i]).collect();
            let test: Vec<(usize, f64)> = r.members.iter().map(|j| (j, test_scores[j])).collect();
            let (status, pvalue) = if test.is_empty() {
                (RegionStatus::Empty, None)
            } else {
                match region_pvalues(&calib, &test, seed)? {
                    RegionPValues::Unevaluable => (RegionStatus::Unevaluable, None),
                    RegionPValues::Values(v) => (RegionStatus::Evaluated, Some(aggregate_region_pvalue(&v)?)),
                }
            };
            Ok(RegionPValueRow { id: r.id, n_calib: calib.len(), n_test: test.len(), status, pvalue })
        })
        .collect()
}

/// Full detection pipeline: region p-values, then the step-up.
pub fn detect_regions(
    family: &RegionFamily,
    calib_scores: &[f64],
    test_scores: &[f64],
    alpha: f64,
    disjoint: bool,
    seed: u64,
) -> Result<(DetectionResult, Vec<RegionPValueRow>)> {
    let table = region_pvalue_table(family, calib_scores, test_scores, seed)?;
    let evaluated: Vec<(usize, PValue)> = table.iter().filter_map(|r| r.pvalue.map(|p| (r.id, p))).collect();
    let mut result = bhy_detect(&evaluated, alpha, disjoint)?;
    result.unevaluable = table.iter().filter(|r| r.status == RegionStatus::Unevaluable).map(|r| r.id).collect();
    result.empty = table.iter().filter(|r| r.status == RegionStatus::Empty).map(|r| r.id).collect();
    Ok((result, table))
}
