//! Variational model: posterior variances kept in the dictionary and a
//! Gaussian kernel for aligning indices to the exact goal.
//!
//! cargo run --release --example variational_model -- [epochs]

use posture_ik::dataset::collect;
use posture_ik::kinematics::KinematicChain;
use posture_ik::model::{kl_to_standard_normal, train_psik, Architecture};
use posture_ik::neuralnet::TrainConfig;
use posture_ik::solver::{solve, Artifacts, Goal, GoalMode, KernelSpec, SolveOptions};
use posture_ik::spatial::build_dictionary;

fn main() -> posture_ik::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(60, |s| s.parse().expect("epochs"));
    let chain = KinematicChain::planar3();
    let dataset = collect(&chain, 15.0)?;
    let arch = Architecture { index_dim: 3, ..Architecture::default() };
    let config = TrainConfig { epochs, lr_decay_every: (epochs / 3).max(1), ..TrainConfig::default() };
    let (mut model, log) = train_psik(&dataset, &chain, GoalMode::Position, &arch, &config)?;
    if let Some(last) = log.epochs.last() {
        println!("final reconstruction {:.5}, kl {:.5}", last.reconstruction, last.kl);
    }

    let (dict, tree) = build_dictionary(&model, &dataset, 0.01, None, 0)?;
    model.lambda = Some(dict.lambda);
    let artifacts = Artifacts::with_tree(chain, model, dict, tree, None)?;

    let goal = Goal::parse("-0.3,0.8,0")?;
    let out = solve(&artifacts, &goal, &SolveOptions::default())?;
    let entry = artifacts.dictionary.entry(&out.nearest_key)?;
    if let Some(variances) = &entry.variances {
        for (mean, var) in entry.indices.iter().zip(variances) {
            println!("index {:+.3?} variance {:.3?} kl {:.3}", mean.0, var, kl_to_standard_normal(&mean.0, var)?);
        }
    }
    for kernel in [KernelSpec::Identity, KernelSpec::gaussian(0.05)?] {
        let out = solve(&artifacts, &goal, &SolveOptions { kernel, ..SolveOptions::default() })?;
        println!("{kernel}: best error {:.2} cm over {} solutions", out.results[0].distance_error * 100.0, out.results.len());
    }
    Ok(())
}
