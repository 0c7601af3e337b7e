//! Builds the posture dictionary for a freshly trained planar model and
//! solves one goal with each selector.
//!
//! cargo run --release --example solve_goal -- [epochs] [x,y,z]

use posture_ik::dataset::collect;
use posture_ik::kinematics::KinematicChain;
use posture_ik::model::{train_sik, Architecture};
use posture_ik::neuralnet::TrainConfig;
use posture_ik::solver::{solve, Artifacts, Goal, GoalMode, Selector, SolveOptions};
use posture_ik::spatial::build_dictionary;

fn main() -> posture_ik::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(60, |s| s.parse().expect("epochs"));
    let goal = Goal::parse(&args.next().unwrap_or_else(|| "0.6,0.5,0".into()))?;

    let chain = KinematicChain::planar3();
    let dataset = collect(&chain, 15.0)?;
    let arch = Architecture { index_dim: 3, ..Architecture::default() };
    let config = TrainConfig { epochs, lr_decay_every: (epochs / 3).max(1), ..TrainConfig::default() };
    let (mut model, _) = train_sik(&dataset, &chain, GoalMode::Position, &arch, &config)?;

    let (dict, tree) = build_dictionary(&model, &dataset, 0.01, None, 0)?;
    println!("{} cells, {} indices kept at λ = {:.4}", dict.len(), dict.total_indices(), dict.lambda);
    model.lambda = Some(dict.lambda);
    let artifacts = Artifacts::with_tree(chain, model, dict, tree, None)?;

    for selector in [Selector::All, Selector::Nth(0), Selector::Random(7)] {
        let out = solve(&artifacts, &goal, &SolveOptions { selector, ..SolveOptions::default() })?;
        println!(
            "{selector}: {} solutions, nearest cell {:.3} m away, {:.2} ms",
            out.results.len(),
            out.nn_distance,
            out.timing.total.as_secs_f64() * 1e3
        );
        for r in &out.results {
            let deg: Vec<String> = r.q.degrees().iter().map(|a| format!("{a:7.1}")).collect();
            println!("  q [{}] deg  error {:.2} cm", deg.join(" "), r.distance_error * 100.0);
        }
    }
    Ok(())
}
