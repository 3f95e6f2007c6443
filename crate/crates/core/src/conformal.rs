//! Split-conformal p-values, their randomized versions, region-restricted
//! p-values, twice-the-mean aggregation and Z-scores.
//!
//! A test score's discrete p-value is its normalized rank among the
//! calibration scores, `(#{i : S_i <= s} + 1) / (m + 1)`. Randomization
//! subtracts `u / (m + 1)` with `u` uniform on `[0, 1)`, which turns the
//! discrete uniform on `{1/(m+1), ..., 1}` into a continuous uniform and
//! breaks ties at random. The uniform for test point `j` comes from stream
//! `j` of the table seed, so every p-value is reproducible from
//! `(seed, j)` alone.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{precondition, Error, Result};
use crate::{normal, rng};

/// A p-value in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PValue(f64);

impl PValue {
    pub fn new(v: f64) -> Result<Self> {
        if v > 0.0 && v <= 1.0 {
            Ok(PValue(v))
        } else {
            Err(Error::Numeric(format!("p-value {v} outside (0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for PValue {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        PValue::new(v)
    }
}

impl From<PValue> for f64 {
    fn from(p: PValue) -> f64 {
        p.0
    }
}

/// Inverse-normal transform of a p-value. `+inf` when the p-value is exactly 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZScore(pub f64);

impl ZScore {
    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

/// Calibration scores sorted once for repeated rank queries.
#[derive(Debug, Clone)]
pub struct Calibration {
    sorted: Vec<f64>,
}

impl Calibration {
    pub fn new(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return precondition("calibration set is empty");
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite calibration score {bad}")));
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Calibration { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// `#{i : S_i <= score} + 1`, an integer in `1..=m+1`.
    pub fn rank(&self, score: f64) -> usize {
        self.sorted.partition_point(|&c| c <= score) + 1
    }

    pub fn discrete(&self, score: f64) -> Result<PValue> {
        if !score.is_finite() {
            return Err(Error::Numeric(format!("non-finite test score {score}")));
        }
        PValue::new(self.rank(score) as f64 / (self.len() + 1) as f64)
    }

    /// Randomized p-value `(rank - u) / (m + 1)`.
    pub fn randomized(&self, score: f64, u: f64) -> Result<PValue> {
        if !score.is_finite() {
            return Err(Error::Numeric(format!("non-finite test score {score}")));
        }
        randomize_rank(self.rank(score), self.len(), u)
    }
}

fn randomize_rank(rank: usize, m: usize, u: f64) -> Result<PValue> {
    if !(0.0..1.0).contains(&u) {
        return precondition(format!("uniform draw {u} outside [0, 1)"));
    }
    // rank >= 1 and u < 1 keep the numerator strictly positive.
    PValue::new((rank as f64 - u) / (m + 1) as f64)
}

pub fn discrete_pvalue(test_score: f64, calib_scores: &[f64]) -> Result<PValue> {
    Calibration::new(calib_scores)?.discrete(test_score)
}

/// Randomize a discrete p-value on the grid `{1/(m+1), ..., 1}`.
pub fn randomized_pvalue(discrete: PValue, m: usize, u: f64) -> Result<PValue> {
    let scaled = discrete.get() * (m + 1) as f64;
    let rank = scaled.round();
    if (discrete.get() - rank / (m + 1) as f64).abs() > 1e-9 || rank < 1.0 || rank > (m + 1) as f64 {
        return precondition(format!("{} is not on the grid k/{}", discrete.get(), m + 1));
    }
    randomize_rank(rank as usize, m, u)
}

/// The randomization uniform for test point `index` under `seed`.
pub fn point_uniform(seed: u64, index: usize) -> f64 {
    rng::uniform(&mut rng::stream(seed, index as u64))
}

pub fn zscore(p: PValue) -> ZScore {
    ZScore(normal::quantile(p.get()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PValueRow {
    pub index: usize,
    pub discrete: PValue,
    pub randomized: PValue,
    pub zscore: ZScore,
}

/// Globally ranked p-values for a whole test set.
#[derive(Debug, Clone, PartialEq)]
pub struct PValueTable {
    pub rows: Vec<PValueRow>,
    pub seed: u64,
    pub calibration_size: usize,
}

impl PValueTable {
    pub fn build(calib_scores: &[f64], test_scores: &[f64], seed: u64) -> Result<Self> {
        let calib = Calibration::new(calib_scores)?;
        let rows = test_scores
            .iter()
            .enumerate()
            .map(|(index, &s)| {
                let discrete = calib.discrete(s)?;
                let randomized = calib.randomized(s, point_uniform(seed, index))?;
                Ok(PValueRow { index, discrete, randomized, zscore: zscore(randomized) })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PValueTable { rows, seed, calibration_size: calib.len() })
    }

    pub fn randomized(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.randomized.get()).collect()
    }

    pub fn zscores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.zscore.value()).collect()
    }

    pub fn infinite_count(&self) -> usize {
        self.rows.iter().filter(|r| r.zscore.is_infinite()).count()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "discrete", "randomized", "zscore", "seed"])?;
        for r in &self.rows {
            w.write_record([
                r.index.to_string(),
                r.discrete.get().to_string(),
                r.randomized.get().to_string(),
                zscore_text(r.zscore),
                self.seed.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// JSON rows; an infinite Z-score is written as the string `"inf"`.
    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<_> = self
            .rows
            .iter()
            .map(|r| {
                let z = if r.zscore.is_infinite() { json!(zscore_text(r.zscore)) } else { json!(r.zscore.value()) };
                json!({
                    "index": r.index,
                    "discrete": r.discrete.get(),
                    "randomized": r.randomized.get(),
                    "zscore": z,
                    "seed": self.seed,
                })
            })
            .collect();
        json!({ "seed": self.seed, "calibration_size": self.calibration_size, "rows": rows })
    }
}

fn zscore_text(z: ZScore) -> String {
    if z.is_infinite() {
        if z.value() > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        z.value().to_string()
    }
}

/// P-values of the test points inside one region, ranked against the
/// calibration points inside the same region.
#[derive(Debug, Clone, PartialEq)]
pub enum RegionPValues {
    /// The region holds no calibration point, so no rank exists.
    Unevaluable,
    Values(Vec<PValue>),
}

/// `test_in_region` pairs each test score with its global test index, which
/// selects the randomization stream.
pub fn region_pvalues(calib_in_region: &[f64], test_in_region: &[(usize, f64)], seed: u64) -> Result<RegionPValues> {
    if calib_in_region.is_empty() {
        return Ok(RegionPValues::Unevaluable);
    }
    let calib = Calibration::new(calib_in_region)?;
    let values = test_in_region
        .iter()
        .map(|&(j, s)| calib.randomized(s, point_uniform(seed, j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RegionPValues::Values(values))
}

/// Region-level p-value `min(1, 2 * mean_j (1 - pi_j))`.
///
/// The value is floored at the smallest positive double so the result stays
/// in `(0, 1]` even when every `pi_j` equals 1.
pub fn aggregate_region_pvalue(pvals: &[PValue]) -> Result<PValue> {
    if pvals.is_empty() {
        return precondition("cannot aggregate an empty list of p-values");
    }
    let mean = pvals.iter().map(|p| 1.0 - p.get()).sum::<f64>() / pvals.len() as f64;
    PValue::new((2.0 * mean).clamp(f64::MIN_POSITIVE, 1.0))
}
