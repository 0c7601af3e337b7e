//! Forward kinematics and the geometric Jacobian on a chain described in
//! the plain-text chain format.
//!
//! cargo run --example forward_kinematics

use posture_ik::kinematics::{forward_kinematics, geometric_jacobian, KinematicChain};

const CHAIN: &str = "\
name two_link
joint shoulder axis=0,0,1 xyz=0,0,0 rpy=0,0,0 limits=-150,150deg
joint elbow axis=0,0,1 xyz=0.5,0,0 rpy=0,0,0 limits=-150,150deg
tool xyz=0.4,0,0 rpy=0,0,0
";

fn main() -> posture_ik::Result<()> {
    let chain = KinematicChain::parse(CHAIN)?;
    println!("{} joints, id {}", chain.dof(), chain.chain_id());

    let q = [30f64.to_radians(), 45f64.to_radians()];
    let pose = forward_kinematics(&chain, &q)?;
    println!("position {:.4?}", pose.position.as_slice());
    println!("approach {:.4?}", pose.approach.as_slice());

    let jac = geometric_jacobian(&chain, &q)?;
    println!("jacobian (linear rows, then angular):{jac:.4}");

    let panda = KinematicChain::panda();
    let home = forward_kinematics(&panda, &[0.0, 0.0, 0.0, -1.5708, 0.0, 1.5708, 0.7854])?;
    println!("panda home position {:.4?}", home.position.as_slice());
    Ok(())
}
