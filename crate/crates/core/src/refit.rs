//! Refitting on an identified region, SURE-tuned baselines, and
//! aggregation of local models.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::identify::{scan, ScanConfig, ScanResult};
use crate::regions::{prefix_sums, Region, RegionFamily};

/// Piecewise-constant estimate: `level` on `support`, zero elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefitEstimate {
    pub support: Region,
    pub level: f64,
    pub n: usize,
    pub scan: ScanResult,
}

impl RefitEstimate {
    pub fn fitted(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for i in self.support.members.iter() {
            out[i] = self.level;
        }
        out
    }
}

fn mean_over(y: &[f64], region: &Region) -> f64 {
    region.members.iter().map(|i| y[i]).sum::<f64>() / region.len() as f64
}

/// Scan `y` as if it were z-scores, then average `y` over the winner.
pub fn refit_two_step(y: &[f64], family: &RegionFamily, cfg: &ScanConfig) -> Result<RefitEstimate> {
    let scan = scan(y, family, cfg)?;
    let level = mean_over(y, &scan.region);
    Ok(RefitEstimate { support: scan.region.clone(), level, n: y.len(), scan })
}

/// Degrees of freedom charged per candidate support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DfModel {
    /// On-support average; one degree of freedom.
    ConstantOne,
    /// Identity on the support; `|R|` degrees of freedom (Mallows' Cp).
    Cardinality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SureSelection {
    /// `None` is the empty support.
    pub region: Option<Region>,
    /// `||y - fit||^2 + 2 sigma^2 df` at the selection.
    pub criterion_value: f64,
    pub df: f64,
    pub df_model: DfModel,
}

/// Minimize the SURE criterion over the family plus the empty support.
///
/// Residual sums of squares come from prefix sums of `y` and `y^2`, so each
/// candidate costs O(1) for interval regions.
pub fn sure_mle(y: &[f64], family: &RegionFamily, sigma: f64, df_model: DfModel) -> Result<(SureSelection, Vec<f64>)> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return precondition(format!("sigma must be positive, got {sigma}"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite observation".into()));
    }
    let n = y.len();
    let squares: Vec<f64> = y.iter().map(|v| v * v).collect();
    let (p1, p2) = (prefix_sums(y), prefix_sums(&squares));
    let total_sq = p2[n];
    let two_var = 2.0 * sigma * sigma;

    // (criterion, df, id); the empty support sorts first among equal criteria.
    let candidates: Vec<(f64, f64, usize)> = family
        .regions
        .par_iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            if r.members.bound() > n {
                return precondition(format!("region {} indexes past the {n} observations", r.id));
            }
            let k = r.len() as f64;
            let (rss, df) = match df_model {
                DfModel::ConstantOne => {
                    let s = r.members.sum(y, &p1);
                    (total_sq - s * s / k, 1.0)
                }
                DfModel::Cardinality => (total_sq - r.members.sum(&squares, &p2), k),
            };
            Ok((rss.max(0.0) + two_var * df, df, r.id))
        })
        .collect::<Result<_>>()?;

    let mut best: (f64, f64, Option<usize>) = (total_sq, 0.0, None);
    for &(crit, df, id) in &candidates {
        let order = crit
            .total_cmp(&best.0)
            .then(df.total_cmp(&best.1))
            .then_with(|| best.2.map_or(Ordering::Greater, |b| id.cmp(&b)));
        if order == Ordering::Less {
            best = (crit, df, Some(id));
        }
    }

    let region = best.2.map(|id| family.get(id).expect("candidate from family").clone());
    let mut fit = vec![0.0; n];
    if let Some(r) = &region {
        match df_model {
            DfModel::ConstantOne => {
                let level = mean_over(y, r);
                r.members.iter().for_each(|i| fit[i] = level);
            }
            DfModel::Cardinality => r.members.iter().for_each(|i| fit[i] = y[i]),
        }
    }
    Ok((SureSelection { region, criterion_value: best.0, df: best.1, df_model }, fit))
}

/// Squared Euclidean distance between two vectors of equal length.
pub fn squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackWeights {
    /// One nonnegative weight per local model, summing to one.
    pub w: Vec<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
}

const MAX_ITER: usize = 10_000;
const OBJ_TOL: f64 = 1e-10;

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Gram matrix `U^T U` and `U^T y` for the given column subset.
#[allow(clippy::needless_range_loop)]
fn normal_equations(u: &[Vec<f64>], y: &[f64], cols: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let s = cols.len();
    let mut q = vec![vec![0.0; s]; s];
    let mut b = vec![0.0; s];
    for (row, &target) in u.iter().zip(y) {
        for a in 0..s {
            let ua = row[cols[a]];
            b[a] += ua * target;
            for c in a..s {
                q[a][c] += ua * row[cols[c]];
            }
        }
    }
    for a in 0..s {
        for c in 0..a {
            q[a][c] = q[c][a];
        }
    }
    (q, b)
}

fn mat_vec(q: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    q.iter().map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum()).collect()
}

fn quad_objective(q: &[Vec<f64>], b: &[f64], w: &[f64]) -> f64 {
    let qw = mat_vec(q, w);
    0.5 * w.iter().zip(&qw).map(|(a, c)| a * c).sum::<f64>() - w.iter().zip(b).map(|(a, c)| a * c).sum::<f64>()
}

/// Projected-gradient fixed-point residual `||w - P(w - grad)||_inf`.
fn fixed_point_residual(q: &[Vec<f64>], b: &[f64], w: &[f64]) -> f64 {
    let g: Vec<f64> = mat_vec(q, w).iter().zip(b).map(|(a, c)| a - c).collect();
    let step: Vec<f64> = w.iter().zip(&g).map(|(a, c)| a - c).collect();
    project_simplex(&step).iter().zip(w).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max)
}

/// Solve the dense system `a x = r` by Gaussian elimination with partial
/// pivoting; `None` when numerically singular.
#[allow(clippy::needless_range_loop)]
fn solve_dense(mut a: Vec<Vec<f64>>, mut r: Vec<f64>) -> Option<Vec<f64>> {
    let n = r.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                r[row] -= f * r[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (r[i] - s) / a[i][i];
    }
    Some(x)
}

/// Minimizer of the quadratic restricted to `support` with weights summing
/// to one (zero off the support), from the KKT system.
fn equality_solution(q: &[Vec<f64>], b: &[f64], support: &[usize]) -> Option<Vec<f64>> {
    let k = support.len();
    let mut a = vec![vec![0.0; k + 1]; k + 1];
    let mut r = vec![0.0; k + 1];
    for (i, &si) in support.iter().enumerate() {
        for (j, &sj) in support.iter().enumerate() {
            a[i][j] = q[si][sj];
        }
        a[i][k] = 1.0;
        a[k][i] = 1.0;
        r[i] = b[si];
    }
    r[k] = 1.0;
    let x = solve_dense(a, r)?;
    let mut w = vec![0.0; q.len()];
    for (i, &si) in support.iter().enumerate() {
        w[si] = x[i];
    }
    Some(w)
}

/// Accelerated projected gradient (FISTA with adaptive restart), then an
/// exact re-solve on the detected support when that improves the residual.
fn simplex_least_squares(q: &[Vec<f64>], b: &[f64]) -> (Vec<f64>, usize) {
    let s = b.len();
    // Gershgorin bound on the largest eigenvalue of the Gram matrix.
    let lipschitz = q.iter().map(|row| row.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut w = vec![1.0 / s as f64; s];
    if lipschitz == 0.0 {
        return (w, 0);
    }
    let mut momentum_point = w.clone();
    let mut t = 1.0f64;
    let mut obj = quad_objective(q, b, &w);
    let mut iterations = 0;
    for it in 1..=MAX_ITER {
        iterations = it;
        let g: Vec<f64> = mat_vec(q, &momentum_point).iter().zip(b).map(|(a, c)| a - c).collect();
        let step: Vec<f64> = momentum_point.iter().zip(&g).map(|(a, c)| a - c / lipschitz).collect();
        let next = project_simplex(&step);
        let next_obj = quad_objective(q, b, &next);
        if next_obj > obj {
            // Restart momentum.
            momentum_point = w.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        momentum_point = next.iter().zip(&w).map(|(a, c)| a + (t - 1.0) / t_next * (a - c)).collect();
        let decrease = obj - next_obj;
        w = next;
        obj = next_obj;
        t = t_next;
        if decrease <= OBJ_TOL * obj.abs().max(1.0) && fixed_point_residual(q, b, &w) <= 1e-10 {
            break;
        }
    }

    let support: Vec<usize> = (0..s).filter(|&i| w[i] > 1e-9).collect();
    if let Some(exact) = equality_solution(q, b, &support) {
        if exact.iter().all(|&v| v >= 0.0) {
            let exact = project_simplex(&exact);
            if fixed_point_residual(q, b, &exact) <= fixed_point_residual(q, b, &w) {
                w = exact;
            }
        }
    }
    (w, iterations)
}

/// Stacking weights: `argmin ||y - U w||^2` over the probability simplex.
///
/// `u` holds one row per validation point and one column per local model.
/// Bit-identical columns are merged before solving and their weight goes to
/// the lowest column index.
pub fn stack_weights(u: &[Vec<f64>], y: &[f64]) -> Result<StackWeights> {
    if u.is_empty() || u.len() != y.len() {
        return precondition(format!("need one prediction row per target, got {} rows and {} targets", u.len(), y.len()));
    }
    let s = u[0].len();
    if s == 0 || u.iter().any(|r| r.len() != s) {
        return precondition("prediction rows must share a nonzero number of models");
    }
    if u.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite prediction or target".into()));
    }

    let column = |j: usize| u.iter().map(move |r| r[j].to_bits());
    let mut representatives: Vec<usize> = Vec::new();
    for j in 0..s {
        if !representatives.iter().any(|&r| column(r).eq(column(j))) {
            representatives.push(j);
        }
    }

    let (q, b) = normal_equations(u, y, &representatives);
    let (reduced, iterations) = simplex_least_squares(&q, &b);
    let mut w = vec![0.0; s];
    for (p, &j) in representatives.iter().enumerate() {
        w[j] = reduced[p];
    }
    let (q_full, b_full) = normal_equations(u, y, &(0..s).collect::<Vec<_>>());
    let kkt_residual = fixed_point_residual(&q_full, &b_full, &w);
    Ok(StackWeights { w, iterations, kkt_residual })
}

/// `U w`, the stacked prediction per row.
pub fn stacked_predictions(u: &[Vec<f64>], w: &StackWeights) -> Vec<f64> {
    u.iter().map(|r| r.iter().zip(&w.w).map(|(a, b)| a * b).sum()).collect()
}

/// Row means of an `n x s` prediction matrix.
pub fn average_predictions(preds: &[Vec<f64>]) -> Result<Vec<f64>> {
    preds
        .iter()
        .map(|r| {
            if r.is_empty() {
                return precondition("prediction row has no models");
            }
            Ok(r.iter().sum::<f64>() / r.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeDeviation {
    pub value: f64,
    pub used: usize,
    /// Pairs with `y_next == y_prev`.
    pub dropped: usize,
}

/// Median over pairs of `|y_next - pred| / |y_next - y_prev|`.
pub fn median_relative_abs_dev(pred: &[f64], y_next: &[f64], y_prev: &[f64]) -> Result<RelativeDeviation> {
    if pred.len() != y_next.len() || pred.len() != y_prev.len() {
        return precondition("prediction and response vectors differ in length");
    }
    let mut ratios: Vec<f64> = pred
        .iter()
        .zip(y_next)
        .zip(y_prev)
        .filter(|((_, next), prev)| (*next - *prev).abs() > 0.0)
        .map(|((p, next), prev)| (next - p).abs() / (next - prev).abs())
        .collect();
    let dropped = pred.len() - ratios.len();
    if ratios.is_empty() {
        return Err(Error::Undefined("every pair has y_next == y_prev".into()));
    }
    if ratios.iter().any(|r| r.is_nan()) {
        return Err(Error::Numeric("NaN in relative deviations".into()));
    }
    ratios.sort_by(f64::total_cmp);
    let m = ratios.len();
    let value = if m % 2 == 1 { ratios[m / 2] } else { 0.5 * (ratios[m / 2 - 1] + ratios[m / 2]) };
    Ok(RelativeDeviation { value, used: m, dropped })
}

/// The fitted region nearest to `x` by point-to-set Euclidean distance,
/// ties to the smaller id. Regions without points are skipped.
pub fn nearest_region(x: &[f64], supports: &[(usize, Vec<Vec<f64>>)]) -> Option<usize> {
    supports
        .iter()
        .filter(|(_, pts)| !pts.is_empty())
        .map(|(id, pts)| {
            let d = pts
                .iter()
                .map(|p| p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            (d, *id)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
}
