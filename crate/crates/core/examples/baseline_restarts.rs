//! Damped-least-squares baseline: one traced solve, then seeded restarts
//! around the same goal.
//!
//! cargo run --release --example baseline_restarts -- [x,y,z]

use posture_ik::eval::{max_pairwise_spread_deg, per_joint_variance};
use posture_ik::kinematics::KinematicChain;
use posture_ik::solver::{baseline_multi, baseline_solve, sample_start, DlsParams, Goal, MAX_START_DRAWS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> posture_ik::Result<()> {
    let goal = Goal::parse(&std::env::args().nth(1).unwrap_or_else(|| "-0.4,0.7,0".into()))?;
    let chain = KinematicChain::planar3();
    let params = DlsParams::default();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let start = sample_start(&chain, &goal, 0.5, MAX_START_DRAWS, &mut rng)?;
    let traced = baseline_solve(&chain, &goal, &start, &params)?;
    println!("single run: {} iterations, converged {}", traced.iterations, traced.converged);
    for (i, e) in traced.error_history.iter().enumerate().take(8) {
        println!("  step {i}: {:.2e} m", e);
    }

    let runs = baseline_multi(&chain, &goal, 10, 0.5, 1, &params)?;
    for r in &runs {
        println!("  q {:7.1?} deg  error {:.1e} m", r.q.degrees(), r.distance_error);
    }
    let qs: Vec<_> = runs.iter().map(|r| r.q.clone()).collect();
    println!("per-joint variance {:.1?} deg²", per_joint_variance(&qs)?);
    println!("largest pairwise spread {:.1} deg", max_pairwise_spread_deg(&qs));
    Ok(())
}
