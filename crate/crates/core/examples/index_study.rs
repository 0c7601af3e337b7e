//! Sweeps one posture-index element for a fixed goal and writes the
//! resulting arm polylines as an OBJ scene plus a CSV of joint angles.
//!
//! cargo run --release --example index_study -- [epochs] [element]

use std::fs::File;
use std::io::BufWriter;

use posture_ik::dataset::collect;
use posture_ik::eval::run_index_study;
use posture_ik::kinematics::KinematicChain;
use posture_ik::model::{train_sik, Architecture};
use posture_ik::neuralnet::TrainConfig;
use posture_ik::solver::{Artifacts, Goal, GoalMode};
use posture_ik::spatial::build_dictionary;

fn main() -> posture_ik::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(60, |s| s.parse().expect("epochs"));
    let element: usize = args.next().map_or(0, |s| s.parse().expect("element"));

    let chain = KinematicChain::planar3();
    let dataset = collect(&chain, 15.0)?;
    let arch = Architecture { index_dim: 3, ..Architecture::default() };
    let config = TrainConfig { epochs, lr_decay_every: (epochs / 3).max(1), ..TrainConfig::default() };
    let (mut model, _) = train_sik(&dataset, &chain, GoalMode::Position, &arch, &config)?;
    let (dict, tree) = build_dictionary(&model, &dataset, 0.01, None, 0)?;
    model.lambda = Some(dict.lambda);
    let artifacts = Artifacts::with_tree(chain, model, dict, tree, None)?;

    let goal = Goal::parse("0.5,0.4,0")?;
    let sweep: Vec<f64> = (-4..=4).map(|i| i as f64 * 0.5).collect();
    let study = run_index_study(&artifacts, element, &sweep, &goal)?;
    for s in &study.snapshots {
        println!(
            "{:+.1}: q {:7.1?} deg  error {:.2} cm",
            s.value,
            s.result.q.degrees(),
            s.result.distance_error * 100.0
        );
    }
    study.write_snapshots_csv(BufWriter::new(File::create("index_study.csv")?))?;
    study.write_scene_obj(BufWriter::new(File::create("index_study.obj")?))?;
    println!("wrote index_study.csv and index_study.obj");
    Ok(())
}
