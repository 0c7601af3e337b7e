//! Position-plus-approach goals on the four-joint spatial arm, trained on a
//! dense window of joint space.
//!
//! cargo run --release --example orientation_goals -- [epochs]

use posture_ik::eval::{dense_artifacts, run_accuracy, DenseWindow};
use posture_ik::kinematics::{forward_kinematics, KinematicChain};
use posture_ik::model::{Architecture, ModelMode, ModelSpec};
use posture_ik::neuralnet::TrainConfig;
use posture_ik::solver::{solve, Goal, GoalMode, SolveOptions};

fn main() -> posture_ik::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(100, |s| s.parse().expect("epochs"));
    let chain = KinematicChain::spatial4();
    let spec = ModelSpec {
        mode: ModelMode::Deterministic,
        goal_mode: GoalMode::PositionApproach,
        arch: Architecture { index_dim: 3, ..Architecture::default() },
    };
    let window = DenseWindow::around(&[0.0, 20.0, 60.0, -40.0], 20.0, 2.0);
    let config = TrainConfig { epochs, lr_decay_every: (epochs / 3).max(1), ..TrainConfig::default() };
    let artifacts = dense_artifacts(&chain, &spec, &window, &config, 0.01)?;

    let q: Vec<f64> = [5.0f64, 22.0, 55.0, -35.0].iter().map(|d| d.to_radians()).collect();
    let pose = forward_kinematics(&artifacts.chain, &q)?;
    let goal = Goal::with_approach(pose.position, pose.approach)?;
    let best = &solve(&artifacts, &goal, &SolveOptions::default())?.results[0];
    println!(
        "goal from q {:?} deg: solved {:.1?} deg, error {:.2} cm, cosine {:.4}",
        [5, 22, 55, -35],
        best.q.degrees(),
        best.distance_error * 100.0,
        best.orientation_similarity.unwrap_or(f64::NAN)
    );

    let report = run_accuracy(&artifacts, 50, 0, &SolveOptions::default())?;
    println!(
        "50 goals: mean error {:.2} cm, mean cosine {:.4}",
        report.mean("sik", "distance_error_cm").unwrap_or(f64::NAN),
        report.mean("sik", "orientation_similarity").unwrap_or(f64::NAN)
    );
    Ok(())
}
