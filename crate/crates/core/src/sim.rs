//! Gaussian-sequence instances, the recovery lower-bound threshold, and
//! seeded Monte Carlo sweeps over the estimators.
//!
//! Noise is drawn as `Phi^{-1}(U)` with `U` taken from a ChaCha8 stream, so
//! every instance is a pure function of its seed on every platform.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{aggregate_region_pvalue, PValue};
use crate::detect::{bhy_detect, estimate_fdr};
use crate::error::{precondition, Error, Result};
use crate::identify::{recovery_error, scan, ScanConfig};
use crate::normal;
use crate::refit::{refit_two_step, squared_error, sure_mle, DfModel};
use crate::regions::{interval_family, Descriptor, Members, Region, RegionFamily, FamilyKind};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianInstance {
    pub n: usize,
    pub k: usize,
    pub mu: f64,
    pub sigma: f64,
    pub r_star: Region,
    /// `mu * 1{i in R*} + sigma * xi_i`.
    pub z: Vec<f64>,
    pub seed: u64,
}

impl GaussianInstance {
    /// The true mean vector `mu * 1_{R*}`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n];
        for i in self.r_star.members.iter() {
            m[i] = self.mu;
        }
        m
    }
}

/// Draw `R*` uniformly among the family's size-`k` regions and add
/// Gaussian noise. `sigma = 0` gives the noiseless signal.
pub fn gen_instance(n: usize, k: usize, mu: f64, sigma: f64, family: &RegionFamily, seed: u64) -> Result<GaussianInstance> {
    if !(sigma >= 0.0 && sigma.is_finite()) || !mu.is_finite() {
        return precondition(format!("need finite mu and sigma >= 0, got mu = {mu}, sigma = {sigma}"));
    }
    let candidates: Vec<&Region> = family.regions.iter().filter(|r| r.len() == k).collect();
    if candidates.is_empty() {
        return Err(Error::NoRegionOfSize(k));
    }
    let r_star = candidates[rng::index(&mut rng::stream(seed, 0), candidates.len())].clone();
    if r_star.members.bound() > n {
        return precondition(format!("region {} indexes past n = {n}", r_star.id));
    }
    let mut noise = rng::stream(seed, 1);
    let mut z: Vec<f64> = (0..n).map(|_| sigma * rng::std_normal(&mut noise)).collect();
    for i in r_star.members.iter() {
        z[i] += mu;
    }
    Ok(GaussianInstance { n, k, mu, sigma, r_star, z, seed })
}

fn check_threshold_args(n: usize, k: usize, d: usize, mu: f64, sigma: f64, c: f64) -> Result<()> {
    if !(1 <= d && d <= k && 2 * k <= n) {
        return precondition(format!("need 1 <= d <= k <= n/2, got n = {n}, k = {k}, d = {d}"));
    }
    if !(c > 0.0 && sigma > 0.0 && mu >= 0.0) {
        return precondition(format!("need c > 0, sigma > 0, mu >= 0, got c = {c}, sigma = {sigma}, mu = {mu}"));
    }
    Ok(())
}

/// Largest `t` in `1..=k` with `t <= (c sigma^2 / mu^2) min(d, t) ln((n - k + t) / t)`,
/// or 0 if none qualifies. Found by checking every `t`.
pub fn threshold_t(n: usize, k: usize, d: usize, mu: f64, sigma: f64, c: f64) -> Result<usize> {
    check_threshold_args(n, k, d, mu, sigma, c)?;
    if mu == 0.0 {
        return Ok(k);
    }
    let scale = c * sigma * sigma / (mu * mu);
    Ok((1..=k)
        .rev()
        .find(|&t| {
            let tf = t as f64;
            tf <= scale * d.min(t) as f64 * (((n - k + t) as f64) / tf).ln()
        })
        .unwrap_or(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnrRegime {
    Low,
    Moderate,
    SlightlyHigh,
}

/// Closed-form lower bound on [`threshold_t`] for the SNR regime that
/// `(mu, sigma)` falls in, or `None` above `c ln(n - k + 1)`.
///
/// * low: `mu^2/sigma^2 <= c d ln(n/k) / k` gives `k`;
/// * moderate: up to `c ln((n - k + d)/d)` gives
///   `max(d, floor(c/2 * D ln((n - k)/(c D))))` with `D = d sigma^2/mu^2`;
/// * slightly high: up to `c ln(n - k + 1)` gives
///   `floor((n - k) exp(-mu^2 / (c sigma^2)))`.
pub fn threshold_regime_bound(n: usize, k: usize, d: usize, mu: f64, sigma: f64, c: f64) -> Result<Option<(SnrRegime, usize)>> {
    check_threshold_args(n, k, d, mu, sigma, c)?;
    let snr2 = (mu / sigma).powi(2);
    let (nf, kf, df) = (n as f64, k as f64, d as f64);
    if snr2 <= c * df * (nf / kf).ln() / kf {
        return Ok(Some((SnrRegime::Low, k)));
    }
    if snr2 <= c * ((nf - kf + df) / df).ln() {
        let d_snr = df / snr2;
        let inner = (c / 2.0 * d_snr * ((nf - kf) / (c * d_snr)).ln()).floor();
        let bound = if inner.is_finite() && inner > df { inner as usize } else { d };
        return Ok(Some((SnrRegime::Moderate, bound)));
    }
    if snr2 <= c * (nf - kf + 1.0).ln() {
        let bound = ((nf - kf) * (-snr2 / c).exp()).floor();
        return Ok(Some((SnrRegime::SlightlyHigh, bound.max(0.0) as usize)));
    }
    Ok(None)
}

/// `sqrt(1 - |R1 cap R2| / sqrt(|R1| |R2|))`.
pub fn correlation_distance(r1: &Region, r2: &Region) -> Result<f64> {
    if r1.is_empty() || r2.is_empty() {
        return precondition("correlation distance needs nonempty regions");
    }
    let overlap = r1.members.intersection_len(&r2.members) as f64;
    let ratio = overlap / ((r1.len() as f64) * (r2.len() as f64)).sqrt();
    Ok((1.0 - ratio).max(0.0).sqrt())
}

/// Hamming distance between member sets.
pub fn hamming_distance(r1: &Region, r2: &Region) -> usize {
    r1.members.symmetric_difference_len(&r2.members)
}

/// Region family used by a sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum FamilySpec {
    /// All windows with lengths in `min_size..=max_size` (defaults `1..=n`).
    Intervals {
        #[serde(default)]
        min_size: Option<usize>,
        #[serde(default)]
        max_size: Option<usize>,
    },
    /// Every singleton plus the full index set.
    SingletonsAndFull,
    /// Disjoint consecutive blocks of size `k` (the remainder forms a last
    /// smaller block).
    Blocks,
}

impl FamilySpec {
    pub fn build(&self, n: usize, k: usize) -> Result<RegionFamily> {
        match self {
            FamilySpec::Intervals { min_size, max_size } => interval_family(n, min_size.unwrap_or(1), max_size.unwrap_or(n)),
            FamilySpec::SingletonsAndFull => {
                let mut regions: Vec<Region> = (0..n)
                    .map(|i| Region::new(i, Members::Range { start: i, end: i + 1 }, Descriptor::Interval { start: i, len: 1 }))
                    .collect();
                regions.push(Region::new(n, Members::Range { start: 0, end: n }, Descriptor::Interval { start: 0, len: n }));
                Ok(RegionFamily { kind: FamilyKind::Explicit, vc_dim: 2, disjoint: false, regions })
            }
            FamilySpec::Blocks => {
                if k == 0 {
                    return precondition("block size must be positive");
                }
                let regions = (0..n)
                    .step_by(k)
                    .enumerate()
                    .map(|(id, start)| {
                        let end = (start + k).min(n);
                        Region::new(id, Members::Range { start, end }, Descriptor::Interval { start, len: end - start })
                    })
                    .collect();
                Ok(RegionFamily { kind: FamilyKind::Partition, vc_dim: 1, disjoint: true, regions })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Penalized scan; records the recovery error.
    Scan,
    /// Scan then refit; records the squared error.
    TwoStep,
    SureConst,
    SureCard,
    /// The all-zero estimate; its squared error is `k mu^2`.
    Zero,
    /// Step-up detection on region p-values `2 mean(1 - Phi(z_i / sigma))`.
    Detect,
}

fn default_sigma() -> f64 {
    1.0
}
fn default_one() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    0.2
}

/// Grid over `n x k x d x snr`, in that nesting order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub n: Vec<usize>,
    pub k: Vec<usize>,
    /// Declared VC-dimension fed to the scan penalty.
    pub d: Vec<usize>,
    /// Signal-to-noise ratios `mu / sigma`.
    pub snr: Vec<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    pub trials: usize,
    pub family: FamilySpec,
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_one")]
    pub penalty_c: f64,
    #[serde(default)]
    pub unpenalized: bool,
    /// Numerical constant in the threshold `T`.
    #[serde(default = "default_one")]
    pub threshold_c: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl SweepConfig {
    fn validate(&self) -> Result<()> {
        if self.n.is_empty() || self.k.is_empty() || self.d.is_empty() || self.snr.is_empty() {
            return precondition("every grid axis needs at least one value");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return precondition("sigma must be positive");
        }
        if self.snr.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return precondition("snr values must be finite and nonnegative");
        }
        if self.d.contains(&0) {
            return precondition("d must be at least 1");
        }
        if self.estimators.is_empty() {
            return precondition("no estimators requested");
        }
        if self.estimators.contains(&Estimator::Detect) && !(self.alpha > 0.0 && self.alpha < 1.0) {
            return precondition("alpha must lie in (0, 1)");
        }
        Ok(())
    }

    /// Cells in grid order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &n in &self.n {
            for &k in &self.k {
                for &d in &self.d {
                    for &snr in &self.snr {
                        out.push(Cell { index: out.len(), n, k, d, snr });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub mu_over_sigma: f64,
    pub trial: usize,
    pub seed: u64,
    pub recovery_error: Option<f64>,
    pub refit_l2_error: Option<f64>,
    pub sure_const_l2_error: Option<f64>,
    pub sure_card_l2_error: Option<f64>,
    pub zero_l2_error: Option<f64>,
    pub fdr: Option<f64>,
    pub threshold_t: Option<usize>,
    pub error: Option<String>,
    /// Wall-clock seconds; excluded from the CSV so reports stay
    /// byte-reproducible.
    #[serde(skip)]
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub mean: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.5), quantile_sorted(&v, 0.75));
    Some(Summary { count: v.len(), median, q1, q3, iqr: q3 - q1, mean: v.iter().sum::<f64>() / v.len() as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub threshold_t: Option<usize>,
    pub failures: usize,
    pub recovery_error: Option<Summary>,
    pub refit_l2_error: Option<Summary>,
    pub sure_const_l2_error: Option<Summary>,
    pub sure_card_l2_error: Option<Summary>,
    pub zero_l2_error: Option<Summary>,
    pub fdr: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<CellSummary>,
}

impl SweepReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record([
                "cell", "n", "k", "d", "mu_over_sigma", "trial", "seed", "recovery_error", "refit_l2_error",
                "sure_const_l2_error", "sure_card_l2_error", "zero_l2_error", "fdr", "threshold_t", "error",
            ])?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("cell,trial,runtime_secs\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.cell, r.trial, r.runtime_secs));
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({ "seed": self.seed, "cells": self.cells })
    }

    pub fn cell_rows(&self, cell: usize) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.cell == cell)
    }
}

/// Seed of one `(cell, trial)` pair.
pub fn trial_seed(seed: u64, cell: usize, trial: usize) -> u64 {
    rng::mix(rng::mix(seed, cell as u64), trial as u64)
}

fn run_trial(cfg: &SweepConfig, cell: &Cell, family: &RegionFamily, trial: usize, seed: u64) -> SweepRow {
    let start = Instant::now();
    let mut row = SweepRow {
        cell: cell.index,
        n: cell.n,
        k: cell.k,
        d: cell.d,
        mu_over_sigma: cell.snr,
        trial,
        seed,
        recovery_error: None,
        refit_l2_error: None,
        sure_const_l2_error: None,
        sure_card_l2_error: None,
        zero_l2_error: None,
        fdr: None,
        threshold_t: threshold_t(cell.n, cell.k, cell.d, cell.snr * cfg.sigma, cfg.sigma, cfg.threshold_c).ok(),
        error: None,
        runtime_secs: 0.0,
    };
    if let Err(e) = fill_trial(cfg, cell, family, seed, &mut row) {
        row.error = Some(e.to_string());
    }
    row.runtime_secs = start.elapsed().as_secs_f64();
    row
}

fn fill_trial(cfg: &SweepConfig, cell: &Cell, family: &RegionFamily, seed: u64, row: &mut SweepRow) -> Result<()> {
    let inst = gen_instance(cell.n, cell.k, cell.snr * cfg.sigma, cfg.sigma, family, seed)?;
    let truth = inst.mean();
    let scan_cfg = ScanConfig {
        penalty_c: cfg.penalty_c,
        sigma: cfg.sigma,
        vc_dim: cell.d,
        max_card: None,
        penalized: !cfg.unpenalized,
    };
    for est in &cfg.estimators {
        match est {
            Estimator::Scan => {
                let res = scan(&inst.z, family, &scan_cfg)?;
                row.recovery_error = Some(recovery_error(&res.region, &inst.r_star)?);
            }
            Estimator::TwoStep => {
                let fit = refit_two_step(&inst.z, family, &scan_cfg)?;
                row.refit_l2_error = Some(squared_error(&fit.fitted(), &truth));
            }
            Estimator::SureConst => {
                let (_, fit) = sure_mle(&inst.z, family, cfg.sigma, DfModel::ConstantOne)?;
                row.sure_const_l2_error = Some(squared_error(&fit, &truth));
            }
            Estimator::SureCard => {
                let (_, fit) = sure_mle(&inst.z, family, cfg.sigma, DfModel::Cardinality)?;
                row.sure_card_l2_error = Some(squared_error(&fit, &truth));
            }
            Estimator::Zero => row.zero_l2_error = Some(squared_error(&vec![0.0; cell.n], &truth)),
            Estimator::Detect => {
                let mut pvals = Vec::new();
                let mut non_null = Vec::new();
                for r in family.regions.iter().filter(|r| !r.is_empty()) {
                    let point_p = r
                        .members
                        .iter()
                        .map(|i| PValue::new(normal::cdf(inst.z[i] / cfg.sigma).max(f64::MIN_POSITIVE)))
                        .collect::<Result<Vec<_>>>()?;
                    pvals.push((r.id, aggregate_region_pvalue(&point_p)?));
                    if r.members.intersection_len(&inst.r_star.members) > 0 {
                        non_null.push(r.id);
                    }
                }
                let det = bhy_detect(&pvals, cfg.alpha, family.disjoint)?;
                row.fdr = Some(estimate_fdr(&det.rejected, &non_null));
            }
        }
    }
    Ok(())
}

/// Run every `(cell, trial)` pair in parallel; rows come back in
/// `(cell, trial)` order regardless of scheduling.
pub fn run_sweep(cfg: &SweepConfig, seed: u64) -> Result<SweepReport> {
    cfg.validate()?;
    let cells = cfg.cells();
    let mut rows = Vec::with_capacity(cells.len() * cfg.trials);
    let mut summaries = Vec::with_capacity(cells.len());
    for cell in &cells {
        let family = match cfg.family.build(cell.n, cell.k) {
            Ok(f) => Some(f),
            Err(e) => {
                rows.extend((0..cfg.trials).map(|trial| SweepRow {
                    cell: cell.index,
                    n: cell.n,
                    k: cell.k,
                    d: cell.d,
                    mu_over_sigma: cell.snr,
                    trial,
                    seed: trial_seed(seed, cell.index, trial),
                    recovery_error: None,
                    refit_l2_error: None,
                    sure_const_l2_error: None,
                    sure_card_l2_error: None,
                    zero_l2_error: None,
                    fdr: None,
                    threshold_t: None,
                    error: Some(e.to_string()),
                    runtime_secs: 0.0,
                }));
                None
            }
        };
        if let Some(family) = family {
            let cell_rows: Vec<SweepRow> = (0..cfg.trials)
                .into_par_iter()
                .map(|trial| run_trial(cfg, cell, &family, trial, trial_seed(seed, cell.index, trial)))
                .collect();
            rows.extend(cell_rows);
        }
        let these: Vec<&SweepRow> = rows.iter().filter(|r| r.cell == cell.index).collect();
        let collect = |f: fn(&SweepRow) -> Option<f64>| summarize(&these.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
        summaries.push(CellSummary {
            cell: *cell,
            threshold_t: threshold_t(cell.n, cell.k, cell.d, cell.snr * cfg.sigma, cfg.sigma, cfg.threshold_c).ok(),
            failures: these.iter().filter(|r| r.error.is_some()).count(),
            recovery_error: collect(|r| r.recovery_error),
            refit_l2_error: collect(|r| r.refit_l2_error),
            sure_const_l2_error: collect(|r| r.sure_const_l2_error),
            sure_card_l2_error: collect(|r| r.sure_card_l2_error),
            zero_l2_error: collect(|r| r.zero_l2_error),
            fdr: collect(|r| r.fdr),
        });
    }
    Ok(SweepReport { seed, rows, cells: summaries })
}
