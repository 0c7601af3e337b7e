#![allow(dead_code)]

pub mod oracle;

use posture_ik::dataset::collect;
use posture_ik::kinematics::KinematicChain;
use posture_ik::model::{train, Architecture, ModelMode, ModelSpec, NoiseSource};
use posture_ik::neuralnet::TrainConfig;
use posture_ik::solver::{Artifacts, GoalMode};
use posture_ik::spatial::build_dictionary;

pub fn small_arch(index_dim: usize) -> Architecture {
    Architecture { encoder_hidden: vec![32, 32], decoder_hidden: vec![32, 32], index_dim }
}

pub fn quick_config() -> TrainConfig {
    TrainConfig { epochs: 15, batch_size: 64, ..TrainConfig::default() }
}

/// Briefly trained artifacts; accuracy is poor but every contract holds.
pub fn artifacts(chain: KinematicChain, step: f64, mode: ModelMode, goal_mode: GoalMode) -> Artifacts {
    let dataset = collect(&chain, step).unwrap();
    let spec = ModelSpec { mode, goal_mode, arch: small_arch(3) };
    let (mut model, _) = train(&dataset, &chain, &spec, &quick_config(), NoiseSource::Gaussian).unwrap();
    let (dict, tree) = build_dictionary(&model, &dataset, 0.01, None, 0).unwrap();
    model.lambda = Some(dict.lambda);
    Artifacts::with_tree(chain, model, dict, tree, Some(dataset)).unwrap()
}

pub fn planar() -> Artifacts {
    artifacts(KinematicChain::planar3(), 30.0, ModelMode::Deterministic, GoalMode::Position)
}
