use nalgebra::{Matrix3, Matrix4, Vector3};
use posture_ik::kinematics::JointSpec;

// Homogeneous-matrix product built from scratch: Rz(yaw)·Ry(pitch)·Rx(roll)
// for fixed offsets, Rodrigues' formula for joint rotations.

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn rodrigues(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = Matrix3::new(0.0, -axis.z, axis.y, axis.z, 0.0, -axis.x, -axis.y, axis.x, 0.0);
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

pub fn homogeneous(r: Matrix3<f64>, t: [f64; 3]) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m[(0, 3)] = t[0];
    m[(1, 3)] = t[1];
    m[(2, 3)] = t[2];
    m
}

pub fn oracle(joints: &[JointSpec], tool: ([f64; 3], [f64; 3]), q: &[f64]) -> Matrix4<f64> {
    let fixed = |xyz: [f64; 3], rpy: [f64; 3]| homogeneous(rot_z(rpy[2]) * rot_y(rpy[1]) * rot_x(rpy[0]), xyz);
    let mut t = Matrix4::<f64>::identity();
    for (j, &a) in joints.iter().zip(q) {
        t = t * fixed(j.xyz, j.rpy) * homogeneous(rodrigues(j.axis.as_ref(), a), [0.0; 3]);
    }
    t * fixed(tool.0, tool.1)
}
