//! Trains a deterministic model on the planar 3-link arm and saves the
//! checkpoint and its training curve.
//!
//! cargo run --release --example train_planar -- [epochs] [model.bin]

use std::fs::File;
use std::io::BufWriter;
use std::time::Instant;

use posture_ik::dataset::collect;
use posture_ik::kinematics::KinematicChain;
use posture_ik::model::{train_sik, Architecture};
use posture_ik::neuralnet::TrainConfig;
use posture_ik::solver::GoalMode;

fn main() -> posture_ik::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(300, |s| s.parse().expect("epochs"));
    let out = args.next().unwrap_or_else(|| "planar3.model".into());

    let chain = KinematicChain::planar3();
    let dataset = collect(&chain, 15.0)?;
    let arch = Architecture { index_dim: 3, ..Architecture::default() };
    // three rate halvings over the run
    let config = TrainConfig { epochs, lr_decay_every: (epochs / 3).max(1), ..TrainConfig::default() };

    let started = Instant::now();
    let (model, log) = train_sik(&dataset, &chain, GoalMode::Position, &arch, &config)?;
    for e in log.epochs.iter().step_by((epochs / 10).max(1)) {
        println!("epoch {:4}  lr {:.2e}  loss {:.6}", e.epoch, e.learning_rate, e.loss);
    }
    println!("{} records, {epochs} epochs in {:.1} s", dataset.len(), started.elapsed().as_secs_f64());

    model.write_to(BufWriter::new(File::create(&out)?))?;
    log.write_csv(BufWriter::new(File::create(format!("{out}.curve.csv"))?))?;
    println!("wrote {out} (model hash {})", &model.model_hash()[..16]);
    Ok(())
}
