//! Exact nearest-cell queries over the quantized workspace of the planar arm.
//!
//! cargo run --release --example nearest_cells -- [x,y,z]

use nalgebra::Vector3;
use posture_ik::dataset::{collect, group_by_position, DEFAULT_RESOLUTION};
use posture_ik::kinematics::KinematicChain;
use posture_ik::spatial::KdTree;

fn main() -> posture_ik::Result<()> {
    let text = std::env::args().nth(1).unwrap_or_else(|| "0.3,-0.7,0".into());
    let coords: Vec<f64> = text.split(',').map(|s| s.trim().parse().expect("x,y,z")).collect();
    let query = Vector3::new(coords[0], coords[1], coords[2]);

    let dataset = collect(&KinematicChain::planar3(), 15.0)?;
    let groups = group_by_position(&dataset, DEFAULT_RESOLUTION)?;
    let items = groups
        .iter()
        .map(|(key, members)| {
            let n = members.len() as f64;
            let c = members.iter().fold(Vector3::zeros(), |acc, &i| acc + dataset.records[i].pose.position) / n;
            (*key, [c.x, c.y, c.z])
        })
        .collect();
    let tree = KdTree::build(items);
    println!("{} cells indexed", tree.len());

    let nearest = tree.nearest(&query)?;
    println!("nearest cell {:?} at {:.4} m", nearest.key, nearest.distance);
    for n in tree.k_nearest(&query, 5) {
        println!("  {:?} {:.4} m", n.key, n.distance);
    }
    println!("{} cells within 5 cm", tree.within_radius(&query, 0.05).len());
    Ok(())
}
