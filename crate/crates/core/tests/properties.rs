mod common;

use common::{ks_pvalue, ks_statistic_uniform, mean_and_se};
use subpop_core::conformal::{randomized_pvalue, zscore, Calibration, PValue, PValueTable};
use subpop_core::data::{parse_dataset, Format, Role};
use subpop_core::detect::detect_regions;
use subpop_core::regions::{bind_calibration_groups, partition_family};
use subpop_core::rng;

#[test]
fn zscores_of_uniform_pvalues_are_standard_normal() {
    let n = 100_000;
    let mut r = rng::stream(31, 0);
    let m = 499;
    let z: Vec<f64> = (0..n)
        .map(|_| {
            // A uniform rank on the (m+1)-point grid plus the randomization.
            let rank = 1 + rng::index(&mut r, m + 1);
            let discrete = PValue::new(rank as f64 / (m + 1) as f64).unwrap();
            zscore(randomized_pvalue(discrete, m, rng::uniform(&mut r)).unwrap()).value()
        })
        .collect();
    let (mean, _) = mean_and_se(&z);
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() <= 4.0 / (n as f64).sqrt(), "mean {mean}");
    assert!((0.9..=1.1).contains(&var), "variance {var}");
}

#[test]
fn pooled_pvalues_are_uniform_across_calibration_draws() {
    // One test point per calibration draw, so the pooled values are i.i.d.
    let draws = 2000;
    let p: Vec<f64> = (0..draws)
        .map(|t| {
            let mut r = rng::stream(t, 0);
            let calib: Vec<f64> = (0..50).map(|_| rng::std_normal(&mut r)).collect();
            let test = rng::std_normal(&mut r);
            let cal = Calibration::new(&calib).unwrap();
            cal.randomized(test, rng::uniform(&mut r)).unwrap().get()
        })
        .collect();
    let d = ks_statistic_uniform(&p);
    assert!(ks_pvalue(d, draws as usize) > 0.001, "D = {d}");
}

#[test]
fn heavy_ties_stay_valid() {
    // Integer scores with many ties. The jitter only spans one grid cell, so
    // tied calibration scores make the p-values conservative rather than
    // exactly uniform: P(p <= t) <= t.
    let mut pooled = Vec::new();
    for t in 0..400u64 {
        let mut r = rng::stream(t, 7);
        let calib: Vec<f64> = (0..30).map(|_| rng::index(&mut r, 4) as f64).collect();
        let test = vec![rng::index(&mut r, 4) as f64];
        pooled.extend(PValueTable::build(&calib, &test, t).unwrap().randomized());
    }
    let n = pooled.len() as f64;
    for t in [0.05, 0.1, 0.25, 0.5, 0.75, 0.9] {
        let frac = pooled.iter().filter(|&&p| p <= t).count() as f64 / n;
        assert!(frac <= t + 3.0 * (t * (1.0 - t) / n).sqrt(), "P(p <= {t}) = {frac}");
    }
}

#[test]
fn csv_pipeline_flags_a_shifted_group() {
    let mut calib = String::from("x1,score,group\n");
    let mut test = String::from("x1,score,group\n");
    let mut r = rng::stream(41, 0);
    for i in 0..600 {
        let g = ["north", "south", "east"][i % 3];
        writeln(&mut calib, i, rng::std_normal(&mut r), g);
        let shift = if g == "south" { 5.0 } else { 0.0 };
        writeln(&mut test, i, rng::std_normal(&mut r) + shift, g);
    }
    let calib = parse_dataset(&calib, Format::Csv, Role::Calibration).unwrap();
    let test = parse_dataset(&test, Format::Csv, Role::Test).unwrap();
    let groups = test.groups().unwrap();
    let family = bind_calibration_groups(&partition_family(&groups), &calib.groups().unwrap()).unwrap();
    let cs: Vec<f64> = calib.scores(None).unwrap().iter().map(|s| s.score).collect();
    let ts: Vec<f64> = test.scores(None).unwrap().iter().map(|s| s.score).collect();
    let (det, _) = detect_regions(&family, &cs, &ts, 0.1, true, 3).unwrap();
    let south = family.regions.iter().find(|r| matches!(&r.descriptor, subpop_core::regions::Descriptor::Group { label } if label == "south")).unwrap();
    assert_eq!(det.rejected, vec![south.id]);
}

fn writeln(buf: &mut String, i: usize, score: f64, group: &str) {
    use std::fmt::Write as _;
    std::writeln!(buf, "{i},{score},{group}").unwrap();
}
