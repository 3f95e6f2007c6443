//! Penalized multi-scale scan for the single most anomalous region.
//!
//! Each region scores `Z_R = sum_{i in R} z_i / sqrt(|R|)` and the scan
//! returns the maximizer of `Z_R - C * sigma * sqrt(d * ln(e * n / max(|R|, d)))`.
//! Ties go to the smaller region, then to the smaller id.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::regions::{prefix_sums, Region, RegionFamily};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub penalty_c: f64,
    /// Noise level of the z-scores.
    pub sigma: f64,
    pub vc_dim: usize,
    /// Drop regions with more members than this before scanning.
    pub max_card: Option<usize>,
    pub penalized: bool,
}

impl ScanConfig {
    /// Penalized scan with `C = 1` and the family's declared VC-dimension.
    pub fn for_family(family: &RegionFamily, sigma: f64) -> Self {
        ScanConfig { penalty_c: 1.0, sigma, vc_dim: family.vc_dim, max_card: None, penalized: true }
    }

    fn check(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return precondition(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.vc_dim == 0 {
            return precondition("vc_dim must be at least 1");
        }
        if self.penalized && !(self.penalty_c >= 0.0 && self.penalty_c.is_finite()) {
            return precondition(format!("penalty constant must be nonnegative, got {}", self.penalty_c));
        }
        Ok(())
    }

    fn penalty(&self, n: usize, card: usize) -> f64 {
        if self.penalized {
            scan_penalty(n, self.vc_dim, card, self.penalty_c, self.sigma)
        } else {
            0.0
        }
    }
}

/// `C * sigma * sqrt(d * ln(e * n / max(card, d)))`, floored at zero when
/// `max(card, d)` exceeds `e * n`.
pub fn scan_penalty(n: usize, d: usize, card: usize, c: f64, sigma: f64) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    let log_term = (std::f64::consts::E * n as f64 / card.max(d) as f64).ln();
    c * sigma * (d as f64 * log_term.max(0.0)).sqrt()
}

/// `sum_{i in R} z_i / sqrt(|R|)`; `+inf` if any member's z-score is `+inf`.
pub fn region_zscore(z: &[f64], region: &Region) -> Result<f64> {
    if region.is_empty() {
        return precondition(format!("region {} is empty", region.id));
    }
    if region.members.bound() > z.len() {
        return precondition(format!("region {} indexes past the {} z-scores", region.id, z.len()));
    }
    let sum: f64 = region.members.iter().map(|i| z[i]).sum();
    if sum.is_nan() {
        return Err(Error::Numeric(format!("region {} has a NaN or mixed-sign infinite z-score", region.id)));
    }
    Ok(sum / (region.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionObjective {
    pub id: usize,
    pub card: usize,
    pub z_r: f64,
    pub penalty: f64,
    pub objective: f64,
}

/// Total order used by the scan: larger objective, then smaller card, then
/// smaller id. `Greater` means `a` wins.
fn rank(a: &RegionObjective, b: &RegionObjective) -> Ordering {
    a.objective
        .total_cmp(&b.objective)
        .then(b.card.cmp(&a.card))
        .then(b.id.cmp(&a.id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub region: Region,
    /// `z_r - penalty` at the winner.
    pub objective: f64,
    pub z_r: f64,
    pub penalty: f64,
    /// Winner's objective minus the best other objective; 0 with one candidate.
    pub runner_up_gap: f64,
    pub candidates: usize,
    /// The winner contains a point whose z-score is `+inf` (p-value 1).
    pub infinite: bool,
    /// `sigma * sqrt(d * ln(n / |R|) / |R|)` at the winner's size: the signal
    /// scale below which recovery is information-theoretically hopeless.
    pub min_detectable_mu: f64,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

/// Objective of every nonempty candidate, in family order.
pub fn scan_table(z: &[f64], family: &RegionFamily, cfg: &ScanConfig) -> Result<Vec<RegionObjective>> {
    let objective = objective_fn(z, cfg)?;
    family
        .regions
        .par_iter()
        .filter(|r| !r.is_empty() && cfg.max_card.is_none_or(|cap| r.len() <= cap))
        .map(objective)
        .collect()
}

/// Per-region objective with penalty and normalization cached by
/// cardinality.
fn objective_fn<'a>(z: &'a [f64], cfg: &ScanConfig) -> Result<impl Fn(&Region) -> Result<RegionObjective> + Sync + 'a> {
    cfg.check()?;
    if let Some(bad) = z.iter().find(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("z-score {bad}")));
    }
    let n = z.len();
    let prefix = prefix_sums(z);
    let by_card: Vec<(f64, f64)> = (0..=n).map(|c| ((c as f64).sqrt(), if c == 0 { 0.0 } else { cfg.penalty(n, c) })).collect();
    Ok(move |r: &Region| {
        if r.members.bound() > n {
            return precondition(format!("region {} indexes past the {n} z-scores", r.id));
        }
        let card = r.len();
        // Prefix sums over infinite entries yield NaN; fall back to a direct sum.
        let mut sum = r.members.sum(z, &prefix);
        if sum.is_nan() {
            sum = r.members.iter().map(|i| z[i]).sum();
        }
        let (root, penalty) = by_card[card];
        let z_r = sum / root;
        Ok(RegionObjective { id: r.id, card, z_r, penalty, objective: z_r - penalty })
    })
}

/// Best and second-best candidates under `rank`, plus the candidate count.
#[derive(Default)]
struct TopTwo {
    best: Option<RegionObjective>,
    second: Option<RegionObjective>,
    count: usize,
}

impl TopTwo {
    fn insert(&mut self, row: RegionObjective) {
        match &self.best {
            Some(b) if rank(&row, b) != Ordering::Greater => {
                if self.second.as_ref().is_none_or(|s| rank(&row, s) == Ordering::Greater) {
                    self.second = Some(row);
                }
            }
            _ => {
                self.second = self.best.take();
                self.best = Some(row);
            }
        }
    }

    fn merge(mut self, other: TopTwo) -> TopTwo {
        self.count += other.count;
        for row in [other.best, other.second].into_iter().flatten() {
            self.insert(row);
        }
        self
    }
}

pub fn scan(z: &[f64], family: &RegionFamily, cfg: &ScanConfig) -> Result<ScanResult> {
    let objective = objective_fn(z, cfg)?;
    // `rank` is a total order, so the parallel reduction is deterministic.
    let top = family
        .regions
        .par_iter()
        .filter(|r| !r.is_empty() && cfg.max_card.is_none_or(|cap| r.len() <= cap))
        .try_fold(TopTwo::default, |mut acc, r| {
            acc.insert(objective(r)?);
            acc.count += 1;
            Ok::<_, Error>(acc)
        })
        .try_reduce(TopTwo::default, |a, b| Ok(a.merge(b)))?;
    let TopTwo { best, second, count } = top;
    let Some(best) = best else {
        let cap = cfg.max_card.map_or("none".to_string(), |c| c.to_string());
        return Err(Error::EmptyFamily { cap });
    };
    let region = family.get(best.id).expect("winner comes from the family").clone();
    let runner_up_gap = match &second {
        None => 0.0,
        Some(s) => {
            let gap = best.objective - s.objective;
            if gap.is_nan() { 0.0 } else { gap }
        }
    };
    let infinite = best.z_r.is_infinite();
    let mut diagnostics = Vec::new();
    if infinite {
        diagnostics.push(
            "winning region contains a test point ranked above every calibration score (p = 1); \
             increase the calibration set size"
                .to_string(),
        );
    }
    let n = z.len() as f64;
    let k = best.card as f64;
    let min_detectable_mu = cfg.sigma * (cfg.vc_dim as f64 * (n / k).ln().max(0.0) / k).sqrt();
    Ok(ScanResult {
        region,
        objective: best.objective,
        z_r: best.z_r,
        penalty: best.penalty,
        runner_up_gap,
        candidates: count,
        infinite,
        min_detectable_mu,
        diagnostics,
    })
}

/// Median absolute deviation of `z` about zero, scaled by 1.4826.
///
/// A convenience noise estimate; the scan's guarantees assume `sigma` is
/// known.
pub fn estimate_sigma_mad(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return precondition("no z-scores");
    }
    let mut abs: Vec<f64> = z.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let m = abs.len();
    let median = if m % 2 == 1 { abs[m / 2] } else { 0.5 * (abs[m / 2 - 1] + abs[m / 2]) };
    Ok(1.4826 * median)
}

/// `|R_hat symmetric-difference R_star| / |R_star|`.
pub fn recovery_error(r_hat: &Region, r_star: &Region) -> Result<f64> {
    if r_star.is_empty() {
        return precondition("true region is empty");
    }
    Ok(r_hat.members.symmetric_difference_len(&r_star.members) as f64 / r_star.len() as f64)
}
