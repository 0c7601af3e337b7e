//! Grid-samples joint space, streams the records to a file and groups them
//! by quantized end-effector position.
//!
//! cargo run --release --example collect_dataset -- [step_deg] [out.bin]

use std::fs::File;
use std::io::BufWriter;

use posture_ik::dataset::{collect, collect_to_writer, file_size, grid_len, group_by_position, DEFAULT_RESOLUTION};
use posture_ik::kinematics::KinematicChain;

fn main() -> posture_ik::Result<()> {
    let mut args = std::env::args().skip(1);
    let step: f64 = args.next().map_or(15.0, |s| s.parse().expect("step in degrees"));
    let out = args.next().unwrap_or_else(|| "planar3.bin".into());

    let chain = KinematicChain::planar3();
    let n = grid_len(&chain, step)?;
    println!("{n} records, {} bytes on disk", file_size(chain.dof(), n));
    collect_to_writer(&chain, step, BufWriter::new(File::create(&out)?))?;
    println!("wrote {out}");

    let dataset = collect(&chain, step)?;
    let groups = group_by_position(&dataset, DEFAULT_RESOLUTION)?;
    let largest = groups.values().map(Vec::len).max().unwrap_or(0);
    println!(
        "{} cells at {} m, {:.2} postures per cell on average, at most {largest}",
        groups.len(),
        DEFAULT_RESOLUTION,
        dataset.len() as f64 / groups.len() as f64
    );
    println!("content hash {}", dataset.content_hash());
    Ok(())
}
