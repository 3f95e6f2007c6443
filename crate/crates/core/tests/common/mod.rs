#![allow(dead_code)]

use std::time::Instant;

/// Two-sided one-sample Kolmogorov-Smirnov statistic against Uniform(0, 1).
pub fn ks_statistic_uniform(sample: &[f64]) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let above = (i + 1) as f64 / n - x;
            let below = x - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov p-value with Stephens' small-sample correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut sum = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) }
}

pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Prints one verdict line per acceptance criterion.
pub struct Criterion {
    id: u32,
    name: &'static str,
    start: Instant,
}

impl Criterion {
    pub fn start(id: u32, name: &'static str) -> Self {
        Criterion { id, name, start: Instant::now() }
    }

    /// Prints the verdict line and panics on failure or when the runtime
    /// budget is exceeded.
    pub fn finish(self, pass: bool, budget_secs: f64, detail: String) {
        let elapsed = self.start.elapsed().as_secs_f64();
        let within = elapsed < budget_secs;
        let verdict = if pass && within { "PASS" } else { "FAIL" };
        println!(
            "[{verdict}] criterion {}: {} ({detail}; {elapsed:.2}s of {budget_secs}s budget)",
            self.id, self.name
        );
        assert!(pass, "criterion {} failed: {detail}", self.id);
        assert!(within, "criterion {} exceeded its {budget_secs}s budget ({elapsed:.2}s)", self.id);
    }
}

#[test]
fn ks_helpers_behave() {
    let grid: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
    assert!(ks_statistic_uniform(&grid) <= 0.0051);
    assert!(ks_pvalue(0.005, 100) > 0.99);
    // The 1% critical value for large n is about 1.628 / sqrt(n).
    let p = ks_pvalue(1.628 / (10_000f64).sqrt(), 10_000);
    assert!((p - 0.01).abs() < 5e-4, "{p}");
}
