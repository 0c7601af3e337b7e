use std::f64::consts::PI;

mod common;

use common::oracle::oracle;
use nalgebra::{UnitQuaternion, Vector3, Vector4};
use posture_ik::kinematics::{
    clamp_to_limits, forward_kinematics, geometric_jacobian, position_jacobian, JointSpec, KinematicChain,
};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct RandomChain {
    joints: Vec<JointSpec>,
    tool: ([f64; 3], [f64; 3]),
}

impl RandomChain {
    fn build(&self) -> KinematicChain {
        KinematicChain::new("random", self.joints.clone(), self.tool.0, self.tool.1).unwrap()
    }
}

fn triple(lo: f64, hi: f64) -> impl Strategy<Value = [f64; 3]> {
    [lo..hi, lo..hi, lo..hi]
}

fn joint() -> impl Strategy<Value = JointSpec> {
    (triple(-1.0, 1.0), triple(-0.5, 0.5), triple(-PI, PI), -3.0..0.0, 0.1..3.0)
        .prop_filter("axis needs a direction", |(a, ..)| Vector3::from(*a).norm() > 0.1)
        .prop_map(|(a, xyz, rpy, lo, width)| {
            let n = Vector3::from(a).normalize();
            JointSpec::new("j", [n.x, n.y, n.z], xyz, rpy, (lo, lo + width)).unwrap()
        })
}

fn chain() -> impl Strategy<Value = RandomChain> {
    (prop::collection::vec(joint(), 1..8), triple(-0.3, 0.3), triple(-PI, PI))
        .prop_map(|(joints, xyz, rpy)| RandomChain { joints, tool: (xyz, rpy) })
}

fn chain_and_q() -> impl Strategy<Value = (RandomChain, Vec<f64>)> {
    chain().prop_flat_map(|c| {
        let ranges: Vec<_> = c.joints.iter().map(|j| j.limit_min..=j.limit_max).collect();
        (Just(c), ranges)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fk_matches_matrix_product((c, q) in chain_and_q()) {
        let chain = c.build();
        let pose = forward_kinematics(&chain, &q).unwrap();
        let m = oracle(&c.joints, c.tool, &q);
        let p = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
        prop_assert!((pose.position - p).norm() < 1e-9);
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        prop_assert!((pose.orientation.to_rotation_matrix().into_inner() - r).norm() < 1e-9);
        let approach = r * Vector3::z();
        prop_assert!((pose.approach - approach).norm() < 1e-9);
    }

    #[test]
    fn jacobian_matches_finite_differences((c, q) in chain_and_q()) {
        let chain = c.build();
        let jac = position_jacobian(&chain, &q).unwrap();
        let full = geometric_jacobian(&chain, &q).unwrap();
        let h = 1e-6;
        for i in 0..q.len() {
            let (mut hi, mut lo) = (q.clone(), q.clone());
            hi[i] += h;
            lo[i] -= h;
            let d = (forward_kinematics(&chain, &hi).unwrap().position
                - forward_kinematics(&chain, &lo).unwrap().position) / (2.0 * h);
            let col = jac.column(i).into_owned();
            prop_assert!((col - d).norm() <= 1e-4 * d.norm().max(1e-3));
            prop_assert_eq!(full.fixed_view::<3, 1>(0, i).into_owned(), jac.column(i).into_owned());
            let axis_world = full.fixed_view::<3, 1>(3, i).into_owned();
            prop_assert!((axis_world.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn chain_text_roundtrip(c in chain()) {
        let chain = c.build();
        let parsed = KinematicChain::parse(&chain.to_chain_text()).unwrap();
        prop_assert_eq!(parsed.chain_id(), chain.chain_id());
        prop_assert_eq!(parsed.joints(), chain.joints());
    }

    #[test]
    fn first_joint_rotates_the_whole_arm(
        q in prop::collection::vec(-1.5f64..1.5, 3),
        delta in -1.0f64..1.0,
    ) {
        // base joint of the planar arm is about z through the origin
        let chain = KinematicChain::planar3();
        let a = forward_kinematics(&chain, &q).unwrap();
        let mut turned = q.clone();
        turned[0] += delta;
        let b = forward_kinematics(&chain, &turned).unwrap();
        let r = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), delta);
        prop_assert!((r * a.position - b.position).norm() < 1e-12);
        prop_assert!((r * a.approach - b.approach).norm() < 1e-12);
    }

    #[test]
    fn clamping_is_idempotent_and_in_limits(raw in prop::collection::vec(-10.0f64..10.0, 7)) {
        let chain = KinematicChain::panda();
        let (q, clamped) = clamp_to_limits(&chain, &raw).unwrap();
        for (v, j) in q.iter().zip(chain.joints()) {
            prop_assert!(*v >= j.limit_min && *v <= j.limit_max);
        }
        prop_assert_eq!(clamped, q.as_ref() != raw.as_slice());
        let (again, changed) = clamp_to_limits(&chain, &q).unwrap();
        prop_assert_eq!(again, q);
        prop_assert!(!changed);
    }
}

#[test]
fn planar_reach_is_link_sum() {
    let chain = KinematicChain::planar3();
    let p = forward_kinematics(&chain, &[0.0, 0.0, 0.0]).unwrap().position;
    assert!((p - Vector3::new(1.2, 0.0, 0.0)).norm() < 1e-15);
    let h = Vector4::new(p.x, p.y, p.z, 1.0);
    assert_eq!(h.w, 1.0);
}
