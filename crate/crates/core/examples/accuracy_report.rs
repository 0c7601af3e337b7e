//! Accuracy and timing reports for a briefly trained planar model, written
//! as JSON and CSV and read back.
//!
//! cargo run --release --example accuracy_report -- [epochs] [out_dir]

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use posture_ik::dataset::collect;
use posture_ik::eval::{run_accuracy, run_radius_sweep, run_timing, EvalReport, ReportFormat};
use posture_ik::kinematics::KinematicChain;
use posture_ik::model::{train_sik, Architecture};
use posture_ik::neuralnet::TrainConfig;
use posture_ik::solver::{Artifacts, GoalMode, SolveOptions};
use posture_ik::spatial::build_dictionary;

fn main() -> posture_ik::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(60, |s| s.parse().expect("epochs"));
    let dir = PathBuf::from(args.next().unwrap_or_else(|| ".".into()));

    let chain = KinematicChain::planar3();
    let dataset = collect(&chain, 15.0)?;
    let arch = Architecture { index_dim: 3, ..Architecture::default() };
    let config = TrainConfig { epochs, lr_decay_every: (epochs / 3).max(1), ..TrainConfig::default() };
    let (mut model, _) = train_sik(&dataset, &chain, GoalMode::Position, &arch, &config)?;
    let (dict, tree) = build_dictionary(&model, &dataset, 0.01, None, 0)?;
    model.lambda = Some(dict.lambda);
    let artifacts = Artifacts::with_tree(chain, model, dict, tree, Some(dataset))?;
    let options = SolveOptions::default();

    let accuracy = run_accuracy(&artifacts, 100, 0, &options)?;
    let radius = run_radius_sweep(&artifacts, &[0.3, 0.6, 0.9, 1.1], 12, None, 0, &options)?;
    let timing = run_timing(&artifacts, 100, 0, &options)?;
    for (report, format) in [(&accuracy, ReportFormat::Json), (&radius, ReportFormat::Csv), (&timing, ReportFormat::Csv)] {
        let ext = if format == ReportFormat::Json { "json" } else { "csv" };
        let path = dir.join(format!("{}.{ext}", report.experiment));
        report.emit(format, BufWriter::new(File::create(&path)?))?;
        let back = EvalReport::load(format, BufReader::new(File::open(&path)?))?;
        assert_eq!(&back, report);
        println!("wrote {}", path.display());
    }

    for (name, agg) in &accuracy.aggregates {
        println!("accuracy {name}: {agg:?}");
    }
    if let Some(mean) = timing.mean("sik", "total_s") {
        println!("mean solve {:.3} ms", mean * 1e3);
    }
    Ok(())
}
