//! Serial kinematic chains of revolute joints.
//!
//! A chain is described URDF-style: every joint carries a fixed transform
//! from the previous joint frame and a rotation axis expressed in its own
//! frame. The tool transform follows the last joint; the approach direction
//! of the end effector is the tool frame's +z axis.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::Deref;

use nalgebra::{
    Isometry3, Matrix3xX, Matrix6xX, Translation3, Unit, UnitQuaternion, Vector3,
};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};

const UNIT_TOLERANCE: f64 = 1e-9;

/// The bundled Franka Emika Panda chain (published geometry and joint limits).
pub const PANDA_CHAIN: &str = include_str!("../chains/panda.chain");
/// Three-link planar arm, links 0.5/0.4/0.3 m, limits ±170°.
pub const PLANAR3_CHAIN: &str = include_str!("../chains/planar3.chain");
/// Four-joint spatial arm (yaw + three pitch joints).
pub const SPATIAL4_CHAIN: &str = include_str!("../chains/spatial4.chain");

#[derive(Clone, Debug, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub axis: Unit<Vector3<f64>>,
    pub xyz: [f64; 3],
    pub rpy: [f64; 3],
    pub limit_min: f64,
    pub limit_max: f64,
}

impl JointSpec {
    pub fn new(
        name: impl Into<String>,
        axis: [f64; 3],
        xyz: [f64; 3],
        rpy: [f64; 3],
        limits: (f64, f64),
    ) -> Result<Self> {
        let name = name.into();
        let v = Vector3::from(axis);
        if (v.norm() - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidChain(format!(
                "joint {name}: axis norm {} is not 1",
                v.norm()
            )));
        }
        if !(limits.0 < limits.1) {
            return Err(Error::InvalidChain(format!(
                "joint {name}: limit_min {} must be below limit_max {}",
                limits.0, limits.1
            )));
        }
        Ok(JointSpec {
            name,
            axis: Unit::new_unchecked(v),
            xyz,
            rpy,
            limit_min: limits.0,
            limit_max: limits.1,
        })
    }

    pub fn origin(&self) -> Isometry3<f64> {
        rigid(self.xyz, self.rpy)
    }

    pub fn range(&self) -> f64 {
        self.limit_max - self.limit_min
    }
}

fn rigid(xyz: [f64; 3], rpy: [f64; 3]) -> Isometry3<f64> {
    Isometry3::from_parts(
        Translation3::new(xyz[0], xyz[1], xyz[2]),
        UnitQuaternion::from_euler_angles(rpy[0], rpy[1], rpy[2]),
    )
}

/// An ordered chain of revolute joints followed by a tool transform.
#[derive(Clone, Debug)]
pub struct KinematicChain {
    name: String,
    joints: Vec<JointSpec>,
    tool_xyz: [f64; 3],
    tool_rpy: [f64; 3],
    origins: Vec<Isometry3<f64>>,
    tool: Isometry3<f64>,
}

impl KinematicChain {
    pub fn new(
        name: impl Into<String>,
        joints: Vec<JointSpec>,
        tool_xyz: [f64; 3],
        tool_rpy: [f64; 3],
    ) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::InvalidChain("chain has no joints".into()));
        }
        let origins = joints.iter().map(JointSpec::origin).collect();
        Ok(KinematicChain {
            name: name.into(),
            joints,
            tool_xyz,
            tool_rpy,
            origins,
            tool: rigid(tool_xyz, tool_rpy),
        })
    }

    /// Planar arm in the base xy-plane: all axes +z, links along +x.
    pub fn planar(name: &str, link_lengths: &[f64], limits: (f64, f64)) -> Result<Self> {
        let mut joints = Vec::with_capacity(link_lengths.len());
        let mut offset = 0.0;
        for (i, &len) in link_lengths.iter().enumerate() {
            joints.push(JointSpec::new(
                format!("j{}", i + 1),
                [0.0, 0.0, 1.0],
                [offset, 0.0, 0.0],
                [0.0; 3],
                limits,
            )?);
            offset = len;
        }
        Self::new(name, joints, [offset, 0.0, 0.0], [0.0; 3])
    }

    pub fn panda() -> Self {
        Self::parse(PANDA_CHAIN).expect("bundled panda chain parses")
    }

    pub fn planar3() -> Self {
        Self::parse(PLANAR3_CHAIN).expect("bundled planar chain parses")
    }

    pub fn spatial4() -> Self {
        Self::parse(SPATIAL4_CHAIN).expect("bundled spatial chain parses")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn limits(&self) -> Vec<(f64, f64)> {
        self.joints.iter().map(|j| (j.limit_min, j.limit_max)).collect()
    }

    /// Copy of this chain with every joint's limits replaced.
    pub fn with_limits(&self, limits: &[(f64, f64)]) -> Result<Self> {
        check_dim(self.dof(), limits.len())?;
        let joints = self
            .joints
            .iter()
            .zip(limits)
            .map(|(j, &lim)| JointSpec::new(j.name.clone(), j.axis.into_inner().into(), j.xyz, j.rpy, lim))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.name.clone(), joints, self.tool_xyz, self.tool_rpy)
    }

    /// Sum of the translation lengths along the chain; an upper bound on reach
    /// measured from the first joint.
    pub fn reach_bound(&self) -> f64 {
        self.joints
            .iter()
            .skip(1)
            .map(|j| Vector3::from(j.xyz).norm())
            .sum::<f64>()
            + Vector3::from(self.tool_xyz).norm()
    }

    /// Parse the line-oriented chain format.
    ///
    /// ```text
    /// name planar3
    /// joint j1 axis=0,0,1 xyz=0,0,0 rpy=0,0,0 limits=-170,170deg
    /// tool xyz=0.3,0,0 rpy=0,0,0
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut name = String::from("chain");
        let mut joints = Vec::new();
        let mut tool = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::ChainParse { line: lineno + 1, message };
            let mut words = line.split_whitespace();
            match words.next() {
                Some("name") => {
                    name = words.collect::<Vec<_>>().join(" ");
                }
                Some("joint") => {
                    if tool.is_some() {
                        return Err(err("joint after tool line".into()));
                    }
                    let jname = words.next().ok_or_else(|| err("missing joint name".into()))?;
                    let fields = parse_fields(words).map_err(&err)?;
                    let axis = triple(&fields, "axis").map_err(&err)?;
                    let xyz = triple(&fields, "xyz").map_err(&err)?;
                    let rpy = triple(&fields, "rpy").map_err(&err)?;
                    let limits = parse_limits(
                        fields
                            .iter()
                            .find(|(k, _)| *k == "limits")
                            .map(|(_, v)| *v)
                            .ok_or_else(|| err("missing limits".into()))?,
                    )
                    .map_err(&err)?;
                    let spec = JointSpec::new(jname, axis, xyz, rpy, limits)
                        .map_err(|e| err(e.to_string()))?;
                    joints.push(spec);
                }
                Some("tool") => {
                    let fields = parse_fields(words).map_err(&err)?;
                    tool = Some((
                        triple(&fields, "xyz").map_err(&err)?,
                        triple(&fields, "rpy").map_err(&err)?,
                    ));
                }
                Some(other) => return Err(err(format!("unknown directive {other:?}"))),
                None => unreachable!(),
            }
        }
        let (tool_xyz, tool_rpy) = tool.ok_or(Error::ChainParse {
            line: text.lines().count(),
            message: "missing tool line".into(),
        })?;
        Self::new(name, joints, tool_xyz, tool_rpy)
    }

    /// Canonical text form; limits are always written in radians.
    pub fn to_chain_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "name {}", self.name);
        for j in &self.joints {
            let a = j.axis.as_ref();
            let _ = writeln!(
                out,
                "joint {} axis={:?},{:?},{:?} xyz={:?},{:?},{:?} rpy={:?},{:?},{:?} limits={:?},{:?}rad",
                j.name, a.x, a.y, a.z, j.xyz[0], j.xyz[1], j.xyz[2], j.rpy[0], j.rpy[1], j.rpy[2],
                j.limit_min, j.limit_max
            );
        }
        let _ = writeln!(
            out,
            "tool xyz={:?},{:?},{:?} rpy={:?},{:?},{:?}",
            self.tool_xyz[0], self.tool_xyz[1], self.tool_xyz[2], self.tool_rpy[0], self.tool_rpy[1], self.tool_rpy[2]
        );
        out
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn chain_id(&self) -> String {
        hex::encode(Sha256::digest(self.to_chain_text().as_bytes()))
    }

    fn check(&self, q: &[f64]) -> Result<()> {
        check_dim(self.dof(), q.len())
    }

    /// Frames of every joint (after its fixed transform, before its rotation)
    /// and the end-effector transform.
    fn frames(&self, q: &[f64]) -> (Vec<Isometry3<f64>>, Isometry3<f64>) {
        let mut frames = Vec::with_capacity(q.len());
        let mut t = Isometry3::identity();
        for ((joint, origin), &angle) in self.joints.iter().zip(&self.origins).zip(q) {
            t *= origin;
            frames.push(t);
            t *= UnitQuaternion::from_axis_angle(&joint.axis, angle);
        }
        (frames, t * self.tool)
    }

    pub fn end_effector(&self, q: &[f64]) -> Result<Isometry3<f64>> {
        self.check(q)?;
        let mut t = Isometry3::identity();
        for ((joint, origin), &angle) in self.joints.iter().zip(&self.origins).zip(q) {
            t = t * origin * UnitQuaternion::from_axis_angle(&joint.axis, angle);
        }
        Ok(t * self.tool)
    }

    /// Origins of every joint frame followed by the end-effector position.
    pub fn joint_origins(&self, q: &[f64]) -> Result<Vec<Vector3<f64>>> {
        self.check(q)?;
        let (frames, ee) = self.frames(q);
        let mut pts: Vec<_> = frames.iter().map(|f| f.translation.vector).collect();
        pts.push(ee.translation.vector);
        Ok(pts)
    }
}

fn parse_fields<'a>(words: impl Iterator<Item = &'a str>) -> Result<Vec<(&'a str, &'a str)>, String> {
    words
        .map(|w| w.split_once('=').ok_or_else(|| format!("expected key=value, got {w:?}")))
        .collect()
}

fn parse_list(value: &str) -> Result<Vec<f64>, String> {
    value
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("bad number {s:?}: {e}")))
        .collect()
}

fn triple(fields: &[(&str, &str)], key: &str) -> Result<[f64; 3], String> {
    let value = fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| format!("missing {key}"))?;
    let v = parse_list(value)?;
    <[f64; 3]>::try_from(v.as_slice()).map_err(|_| format!("{key} needs three components"))
}

fn parse_limits(value: &str) -> Result<(f64, f64), String> {
    let (nums, scale) = if let Some(v) = value.strip_suffix("deg") {
        (v, PI / 180.0)
    } else if let Some(v) = value.strip_suffix("rad") {
        (v, 1.0)
    } else {
        return Err(format!("limits {value:?} need a deg or rad unit tag"));
    };
    match parse_list(nums)?.as_slice() {
        [lo, hi] => Ok((lo * scale, hi * scale)),
        _ => Err("limits need two values".into()),
    }
}

/// Joint angles in radians, guaranteed to lie within the chain's limits.
#[derive(Clone, Debug, PartialEq)]
pub struct JointVector(Vec<f64>);

impl JointVector {
    /// Wraps angles that are already known to be in limits.
    pub(crate) fn from_vec_unchecked(angles: Vec<f64>) -> Self {
        JointVector(angles)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.0.iter().map(|a| a.to_degrees()).collect()
    }
}

impl Deref for JointVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Clip raw angles into per-joint limit intervals (bounds inclusive).
/// The flag reports whether any angle had to move.
pub fn clamp_angles(limits: &[(f64, f64)], raw: &[f64]) -> Result<(JointVector, bool)> {
    check_dim(limits.len(), raw.len())?;
    let mut clamped = false;
    let angles = raw
        .iter()
        .zip(limits)
        .map(|(&a, &(lo, hi))| {
            let c = if a.is_nan() { lo } else { a.clamp(lo, hi) };
            clamped |= c != a;
            c
        })
        .collect();
    Ok((JointVector(angles), clamped))
}

pub fn clamp_to_limits(chain: &KinematicChain, raw: &[f64]) -> Result<(JointVector, bool)> {
    clamp_angles(&chain.limits(), raw)
}

/// End-effector pose: position, orientation and the tool approach direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub approach: Vector3<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        let approach = orientation * Vector3::z();
        Pose { position, orientation, approach }
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self::new(iso.translation.vector, iso.rotation)
    }
}

pub fn forward_kinematics(chain: &KinematicChain, q: &[f64]) -> Result<Pose> {
    Ok(Pose::from_isometry(&chain.end_effector(q)?))
}

/// Geometric Jacobian in the base frame. Rows 0..3 are linear velocity,
/// rows 3..6 angular velocity; column j is `(axis_j × (p_ee − p_j), axis_j)`.
pub fn geometric_jacobian(chain: &KinematicChain, q: &[f64]) -> Result<Matrix6xX<f64>> {
    chain.check(q)?;
    let (frames, ee) = chain.frames(q);
    let p_ee = ee.translation.vector;
    let mut jac = Matrix6xX::zeros(q.len());
    for (j, (frame, joint)) in frames.iter().zip(chain.joints()).enumerate() {
        let axis = frame.rotation * joint.axis.into_inner();
        let lin = axis.cross(&(p_ee - frame.translation.vector));
        jac.fixed_view_mut::<3, 1>(0, j).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, j).copy_from(&axis);
    }
    Ok(jac)
}

/// Linear (position) block of the geometric Jacobian.
pub fn position_jacobian(chain: &KinematicChain, q: &[f64]) -> Result<Matrix3xX<f64>> {
    Ok(geometric_jacobian(chain, q)?.fixed_rows::<3>(0).into_owned())
}
