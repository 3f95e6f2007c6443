use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use subpop_core::conformal::PValueTable;
use subpop_core::data::{load_dataset, Dataset, Format, Label, Role};
use subpop_core::detect::{detect_regions, RegionStatus};
use subpop_core::identify::{estimate_sigma_mad, scan, scan_table, ScanConfig};
use subpop_core::refit::{average_predictions, median_relative_abs_dev, refit_two_step, stack_weights, stacked_predictions, sure_mle, DfModel};
use subpop_core::regions::{
    ball_family, bind_calibration, bind_calibration_groups, interval_family, partition_family, Descriptor, RegionFamily,
};
use subpop_core::sim::{run_sweep, SweepConfig};

use crate::args::{Disjoint, FamilyArg, Strategy};
use crate::manifest::{absolute, Job};

/// Files a job writes besides manifest.json.
pub struct Outputs {
    pub result: String,
    pub table: String,
    /// Additional files that are not covered by the replay guarantee.
    pub extra: Vec<(&'static str, String)>,
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn load(path: &Path, role: Role) -> Result<Dataset> {
    load_dataset(path, Format::from_path(path), role).with_context(|| format!("failed to load {}", path.display()))
}

fn scores(data: &Dataset, path: &Path) -> Result<Vec<f64>> {
    Ok(data
        .scores(None)
        .with_context(|| format!("cannot score {}", path.display()))?
        .into_iter()
        .map(|s| s.score)
        .collect())
}

fn strong_labels(data: &Dataset, path: &Path) -> Result<Vec<f64>> {
    data.points
        .iter()
        .enumerate()
        .map(|(i, p)| match &p.label {
            Some(Label::Strong(y)) => Ok(*y),
            _ => Err(anyhow!("{}: row {} needs a numeric `y`", path.display(), i + 1)),
        })
        .collect()
}

fn group_labels(data: &Dataset, path: &Path) -> Result<Vec<String>> {
    data.groups().ok_or_else(|| anyhow!("{}: a `group` value is needed on every row for a partition family", path.display()))
}

/// Canonicalizes input paths in place and lists them by role.
pub fn resolve(job: &mut Job) -> Result<Vec<(&'static str, PathBuf)>> {
    fn family_input(f: &mut FamilyArg, inputs: &mut Vec<(&'static str, PathBuf)>) -> Result<()> {
        if let FamilyArg::Manifest(p) = f {
            *p = absolute(p)?;
            inputs.push(("family", p.clone()));
        }
        Ok(())
    }
    let mut inputs = Vec::new();
    match job {
        Job::Pvalues(a) => {
            a.calib = absolute(&a.calib)?;
            a.test = absolute(&a.test)?;
            inputs.extend([("calib", a.calib.clone()), ("test", a.test.clone())]);
        }
        Job::Detect(a) => {
            a.calib = absolute(&a.calib)?;
            a.test = absolute(&a.test)?;
            inputs.extend([("calib", a.calib.clone()), ("test", a.test.clone())]);
            family_input(&mut a.family, &mut inputs)?;
        }
        Job::Identify(a) => {
            a.calib = absolute(&a.calib)?;
            a.test = absolute(&a.test)?;
            inputs.extend([("calib", a.calib.clone()), ("test", a.test.clone())]);
            family_input(&mut a.family, &mut inputs)?;
        }
        Job::Refit(a) => {
            if let Some(p) = &mut a.data {
                *p = absolute(p)?;
                inputs.push(("data", p.clone()));
            }
            if let Some(p) = &mut a.preds {
                *p = absolute(p)?;
                inputs.push(("preds", p.clone()));
            }
            if let Some(f) = &mut a.family {
                family_input(f, &mut inputs)?;
            }
        }
        Job::Simulate(a) => {
            a.config = absolute(&a.config)?;
            inputs.push(("config", a.config.clone()));
            if a.sweep.is_none() {
                a.sweep = Some(parse_sweep(&a.config)?);
            }
        }
    }
    Ok(inputs)
}

fn parse_sweep(path: &Path) -> Result<SweepConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(anyhow::Error::from)
    } else {
        toml::from_str(&text).map_err(anyhow::Error::from)
    };
    parsed.with_context(|| format!("invalid sweep config {}", path.display()))
}

/// Builds the family over `points`; binds calibration members when `calib`
/// is given.
fn build_family(arg: &FamilyArg, points: &Dataset, points_path: &Path, calib: Option<(&Dataset, &Path)>) -> Result<RegionFamily> {
    let family = match arg {
        FamilyArg::Partition => partition_family(&group_labels(points, points_path)?),
        FamilyArg::Balls(r) => ball_family(&points.features(), *r)?,
        FamilyArg::Intervals(lo, hi) => interval_family(points.len(), *lo, *hi)?,
        FamilyArg::Manifest(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            let family = RegionFamily::from_json(&text).with_context(|| format!("invalid family manifest {}", p.display()))?;
            let bound = family.regions.iter().any(|r| !r.calib.is_empty());
            if bound || calib.is_none() {
                return Ok(family);
            }
            family
        }
    };
    let Some((calib, calib_path)) = calib else { return Ok(family) };
    match family.regions.first().map(|r| &r.descriptor) {
        Some(Descriptor::Group { .. }) => Ok(bind_calibration_groups(&family, &group_labels(calib, calib_path)?)?),
        Some(Descriptor::Ball { .. }) => Ok(bind_calibration(&family, &calib.features())?),
        _ => bail!(
            "family `{arg}` has no geometry to place calibration points in; use `partition`, `balls:R`, or a manifest with calib_indices"
        ),
    }
}

pub fn execute(job: &Job) -> Result<Outputs> {
    match job {
        Job::Pvalues(a) => {
            let calib = scores(&load(&a.calib, Role::Calibration)?, &a.calib)?;
            let test = scores(&load(&a.test, Role::Test)?, &a.test)?;
            let table = PValueTable::build(&calib, &test, a.seed)?;
            if table.infinite_count() > 0 {
                eprintln!(
                    "warning: {} test points have p-value 1 (infinite z-score); a larger calibration set resolves this",
                    table.infinite_count()
                );
            }
            Ok(Outputs { result: pretty(&table.to_json())?, table: table.to_csv()?, extra: vec![] })
        }
        Job::Detect(a) => {
            let calib_data = load(&a.calib, Role::Calibration)?;
            let test_data = load(&a.test, Role::Test)?;
            let family = build_family(&a.family, &test_data, &a.test, Some((&calib_data, &a.calib)))?;
            let disjoint = match a.disjoint {
                Disjoint::Auto => family.disjoint,
                Disjoint::True => true,
                Disjoint::False => false,
            };
            let calib = scores(&calib_data, &a.calib)?;
            let test = scores(&test_data, &a.test)?;
            let (result, rows) = detect_regions(&family, &calib, &test, a.alpha, disjoint, a.seed)?;
            let mut table = String::from("id,n_calib,n_test,status,pvalue\n");
            for r in rows {
                let status = match r.status {
                    RegionStatus::Evaluated => "evaluated",
                    RegionStatus::Unevaluable => "unevaluable",
                    RegionStatus::Empty => "empty",
                };
                let p = r.pvalue.map(|p| p.get().to_string()).unwrap_or_default();
                writeln!(table, "{},{},{},{status},{p}", r.id, r.n_calib, r.n_test)?;
            }
            Ok(Outputs { result: pretty(&result)?, table, extra: vec![("family.json", family.to_json()? + "\n")] })
        }
        Job::Identify(a) => {
            let calib = scores(&load(&a.calib, Role::Calibration)?, &a.calib)?;
            let test_data = load(&a.test, Role::Test)?;
            let test = scores(&test_data, &a.test)?;
            let family = build_family(&a.family, &test_data, &a.test, None)?;
            let z = PValueTable::build(&calib, &test, a.seed)?.zscores();
            let cfg = ScanConfig {
                penalty_c: a.penalty_c,
                sigma: a.sigma,
                vc_dim: family.vc_dim,
                max_card: a.max_card,
                penalized: !a.unpenalized,
            };
            let result = scan(&z, &family, &cfg)?;
            for d in &result.diagnostics {
                eprintln!("note: {d}");
            }
            let mut table = String::from("id,card,z_r,penalty,objective\n");
            for r in scan_table(&z, &family, &cfg)? {
                writeln!(table, "{},{},{},{},{}", r.id, r.card, r.z_r, r.penalty, r.objective)?;
            }
            Ok(Outputs { result: pretty(&result)?, table, extra: vec![] })
        }
        Job::Refit(a) => refit(a),
        Job::Simulate(a) => {
            let sweep = a.sweep.as_ref().expect("resolved before execution");
            let report = run_sweep(sweep, a.seed)?;
            let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                eprintln!("warning: {failed} trials failed; see the `error` column");
            }
            Ok(Outputs {
                result: pretty(&report.summary_json())?,
                table: report.to_csv()?,
                extra: vec![("timing.csv", report.timing_csv())],
            })
        }
    }
}

fn fitted_table(y: &[f64], fitted: &[f64]) -> Result<String> {
    let mut table = String::from("index,y,fitted\n");
    for (i, (y, f)) in y.iter().zip(fitted).enumerate() {
        writeln!(table, "{i},{y},{f}")?;
    }
    Ok(table)
}

fn refit(a: &crate::args::RefitArgs) -> Result<Outputs> {
    match a.strategy {
        Strategy::TwoStep | Strategy::SureConst | Strategy::SureCard => {
            let (Some(path), Some(family_arg)) = (&a.data, &a.family) else {
                bail!("--data and --family are required for strategy {:?}", a.strategy)
            };
            let data = load(path, Role::Test)?;
            let y = strong_labels(&data, path)?;
            let family = build_family(family_arg, &data, path, None)?;
            let sigma = match a.sigma {
                Some(s) => s,
                None => estimate_sigma_mad(&y)?,
            };
            if a.strategy == Strategy::TwoStep {
                let cfg = ScanConfig {
                    penalty_c: a.penalty_c,
                    sigma,
                    vc_dim: family.vc_dim,
                    max_card: a.max_card,
                    penalized: !a.unpenalized,
                };
                let estimate = refit_two_step(&y, &family, &cfg)?;
                let table = fitted_table(&y, &estimate.fitted())?;
                let result = json!({ "strategy": "two-step", "sigma": sigma, "estimate": estimate });
                Ok(Outputs { result: pretty(&result)?, table, extra: vec![] })
            } else {
                let model = if a.strategy == Strategy::SureConst { DfModel::ConstantOne } else { DfModel::Cardinality };
                let family = match a.max_card {
                    Some(cap) => family.with_max_card(cap),
                    None => family,
                };
                let (selection, fitted) = sure_mle(&y, &family, sigma, model)?;
                let table = fitted_table(&y, &fitted)?;
                let result = json!({ "strategy": a.strategy, "sigma": sigma, "selection": selection });
                Ok(Outputs { result: pretty(&result)?, table, extra: vec![] })
            }
        }
        Strategy::Average | Strategy::Stack => {
            let Some(path) = &a.preds else { bail!("--preds is required for strategy {:?}", a.strategy) };
            let data = load(path, Role::Test)?;
            let y = strong_labels(&data, path)?;
            let prev_col = data.feature_names.iter().position(|n| n == "y_prev");
            let models: Vec<String> = data.feature_names.iter().filter(|n| *n != "y_prev").cloned().collect();
            let rows: Vec<Vec<f64>> = data
                .points
                .iter()
                .map(|p| p.x.iter().enumerate().filter(|(j, _)| Some(*j) != prev_col).map(|(_, v)| *v).collect())
                .collect();
            if models.is_empty() {
                bail!("{}: no prediction columns besides `y`", path.display());
            }
            let (weights, combined, extra) = if a.strategy == Strategy::Average {
                let s = models.len();
                (vec![1.0 / s as f64; s], average_predictions(&rows)?, json!(null))
            } else {
                let w = stack_weights(&rows, &y)?;
                let combined = stacked_predictions(&rows, &w);
                let info = json!({ "iterations": w.iterations, "kkt_residual": w.kkt_residual });
                (w.w, combined, info)
            };
            let deviation = match prev_col {
                Some(j) => {
                    let prev: Vec<f64> = data.points.iter().map(|p| p.x[j]).collect();
                    Some(median_relative_abs_dev(&combined, &y, &prev)?)
                }
                None => None,
            };
            let result = json!({
                "strategy": a.strategy,
                "models": models,
                "weights": weights,
                "solver": extra,
                "median_relative_abs_dev": deviation,
            });
            Ok(Outputs { result: pretty(&result)?, table: fitted_table(&y, &combined)?, extra: vec![] })
        }
    }
}
