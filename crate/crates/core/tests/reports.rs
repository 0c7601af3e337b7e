mod common;

use std::sync::OnceLock;

use posture_ik::eval::{
    per_joint_variance, run_accuracy, run_diversity, run_index_study, run_radius_sweep, run_timing, EvalReport,
    ReportFormat,
};
use posture_ik::kinematics::clamp_angles;
use posture_ik::solver::{solve, Artifacts, DlsParams, Goal, Selector, SolveOptions};
use proptest::prelude::*;

fn planar() -> &'static Artifacts {
    static A: OnceLock<Artifacts> = OnceLock::new();
    A.get_or_init(common::planar)
}

fn bytes(report: &EvalReport, format: ReportFormat) -> Vec<u8> {
    let mut out = Vec::new();
    report.emit(format, &mut out).unwrap();
    out
}

#[test]
fn json_csv_roundtrip_is_exact() {
    let a = planar();
    let opts = SolveOptions::default();
    let mut reports = vec![
        run_accuracy(a, 20, 3, &opts).unwrap(),
        run_diversity(a, 4, 0.5, 1, &DlsParams::default(), &opts).unwrap(),
        run_timing(a, 5, 2, &opts).unwrap(),
    ];
    let goal = Goal::position(nalgebra::Vector3::new(0.4, 0.3, 0.0));
    reports.push(run_index_study(a, 1, &[-1.0, 0.0, 1.0], &goal).unwrap().report);
    for report in reports {
        let json = bytes(&report, ReportFormat::Json);
        let from_json = EvalReport::load(ReportFormat::Json, json.as_slice()).unwrap();
        assert_eq!(from_json, report);
        let csv = bytes(&from_json, ReportFormat::Csv);
        let from_csv = EvalReport::load(ReportFormat::Csv, csv.as_slice()).unwrap();
        assert_eq!(from_csv, report);
        assert_eq!(bytes(&from_csv, ReportFormat::Csv), csv);
    }
}

#[test]
fn empty_report_has_null_aggregates() {
    let report = EvalReport::new("accuracy", planar()).finish();
    for format in [ReportFormat::Json, ReportFormat::Csv] {
        let out = bytes(&report, format);
        let back = EvalReport::load(format, out.as_slice()).unwrap();
        assert!(back.rows.is_empty());
        let agg = back.aggregate("all", "distance_error_cm").unwrap();
        assert_eq!((agg.count, agg.mean, agg.max, agg.p95), (0, None, None, None));
    }
    let json = String::from_utf8(bytes(&report, ReportFormat::Json)).unwrap();
    assert!(json.contains("\"mean\": null"));
}

#[test]
fn tampered_aggregates_are_rejected() {
    let mut report = run_accuracy(planar(), 5, 0, &SolveOptions::default()).unwrap();
    report.rows[0].distance_error_cm += 1.0;
    for format in [ReportFormat::Json, ReportFormat::Csv] {
        let out = bytes(&report, format);
        assert!(EvalReport::load(format, out.as_slice()).is_err());
    }
}

#[test]
fn runners_are_seeded() {
    let a = planar();
    let opts = SolveOptions { selector: Selector::Nth(0), ..SolveOptions::default() };
    for run in [
        |a: &Artifacts, o: &SolveOptions| run_accuracy(a, 10, 9, o).unwrap(),
        |a: &Artifacts, o: &SolveOptions| run_radius_sweep(a, &[0.3, 0.8], 5, None, 9, o).unwrap(),
        |a: &Artifacts, o: &SolveOptions| run_diversity(a, 5, 0.5, 9, &DlsParams::default(), o).unwrap(),
    ] {
        let x = bytes(&run(a, &opts), ReportFormat::Json);
        let y = bytes(&run(a, &opts), ReportFormat::Json);
        assert_eq!(x, y);
    }
    let other = bytes(&run_accuracy(a, 10, 10, &opts).unwrap(), ReportFormat::Json);
    assert_ne!(other, bytes(&run_accuracy(a, 10, 9, &opts).unwrap(), ReportFormat::Json));
}

#[test]
fn single_sample_passes_through_solve() {
    let a = planar();
    let opts = SolveOptions::default();
    let report = run_accuracy(a, 1, 4, &opts).unwrap();
    assert_eq!(report.rows.len(), 1);
    let row = &report.rows[0];
    let goal = Goal::position(row.goal.into());
    let out = solve(a, &goal, &opts).unwrap();
    assert_eq!(row.distance_error_cm, 100.0 * out.results[0].distance_error);
    assert_eq!(report.mean("all", "distance_error_cm"), Some(row.distance_error_cm));
}

#[test]
fn timing_rows_split_the_total() {
    let report = run_timing(planar(), 30, 0, &SolveOptions::default()).unwrap();
    for r in &report.rows {
        let parts = r.lookup_s.unwrap() + r.decode_s.unwrap() + r.verify_s.unwrap();
        assert!(parts <= r.total_s.unwrap() * 1.05 + 1e-9);
    }
    assert_eq!(report.aggregate("all", "total_s").unwrap().count, 30);
}

#[test]
fn index_study_snapshots() {
    let a = planar();
    let goal = Goal::position(nalgebra::Vector3::new(0.5, -0.4, 0.0));
    let study = run_index_study(a, 0, &[-2.0, 0.0, 2.0], &goal).unwrap();
    assert_eq!(study.snapshots.len(), 3);
    let mut csv = Vec::new();
    study.write_snapshots_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("value,q1_deg,q2_deg,q3_deg,distance_error_cm\n"));
    assert_eq!(csv.lines().count(), 4);
    let mut obj = Vec::new();
    study.write_scene_obj(&mut obj).unwrap();
    let obj = String::from_utf8(obj).unwrap();
    // three joint origins plus the tool point per posture
    assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 12);
    assert!(obj.contains("l 9 10 11 12"));
    assert!(run_index_study(a, 3, &[0.0], &goal).is_err());
}

proptest! {
    #[test]
    fn variance_ignores_order(
        rows in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 2..12),
        rot in 0usize..12,
    ) {
        let limits = vec![(-3.0, 3.0); 3];
        let sols: Vec<_> = rows.iter().map(|r| clamp_angles(&limits, r).unwrap().0).collect();
        let mut shuffled = sols.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let a = per_joint_variance(&sols).unwrap();
        let b = per_joint_variance(&shuffled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            prop_assert!(*x >= 0.0);
        }
    }
}
