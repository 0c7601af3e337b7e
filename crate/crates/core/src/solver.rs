//! Online solving: nearest dictionary entry, regional goal alignment of its
//! posture indices, decoding, and forward-kinematics verification. Also the
//! damped-least-squares baseline with random restarts.

use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{Dataset, PositionKey};
use crate::error::{Error, Result};
use crate::kinematics::{clamp_to_limits, forward_kinematics, position_jacobian, JointVector, KinematicChain, Pose};
use crate::model::{PostureIndex, SikModel};
use crate::spatial::{KdTree, PostureDictionary};

/// Default gap (meters) between a goal and its nearest dictionary entry
/// beyond which the goal is flagged as probably unreachable.
pub const DEFAULT_UNREACHABLE_THRESHOLD: f64 = 0.05;

/// Which goal features the models consume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoalMode {
    Position,
    PositionApproach,
}

impl GoalMode {
    pub fn feature_dim(self) -> usize {
        match self {
            GoalMode::Position => 3,
            GoalMode::PositionApproach => 6,
        }
    }
}

/// Target position with an optional approach direction for the tool axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Goal {
    pub position: Vector3<f64>,
    approach: Option<Vector3<f64>>,
}

impl Goal {
    pub fn position(position: Vector3<f64>) -> Self {
        Goal { position, approach: None }
    }

    /// The approach vector is normalized; a zero or non-finite vector is rejected.
    pub fn with_approach(position: Vector3<f64>, approach: Vector3<f64>) -> Result<Self> {
        let norm = approach.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Goal(format!("approach vector {approach:?} cannot be normalized")));
        }
        Ok(Goal { position, approach: Some(approach / norm) })
    }

    /// Goal matching an achieved pose in the given mode.
    pub fn from_pose(pose: &Pose, mode: GoalMode) -> Self {
        match mode {
            GoalMode::Position => Goal::position(pose.position),
            GoalMode::PositionApproach => Goal { position: pose.position, approach: Some(pose.approach) },
        }
    }

    pub fn approach(&self) -> Option<&Vector3<f64>> {
        self.approach.as_ref()
    }

    pub fn mode(&self) -> GoalMode {
        if self.approach.is_some() {
            GoalMode::PositionApproach
        } else {
            GoalMode::Position
        }
    }

    /// Parses `x,y,z` or `x,y,z,ax,ay,az`.
    pub fn parse(text: &str) -> Result<Self> {
        let vals = text
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Goal(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Goal(format!("non-finite component in {text:?}")));
        }
        match vals.as_slice() {
            [x, y, z] => Ok(Goal::position(Vector3::new(*x, *y, *z))),
            [x, y, z, ax, ay, az] => Goal::with_approach(Vector3::new(*x, *y, *z), Vector3::new(*ax, *ay, *az)),
            _ => Err(Error::Goal(format!("expected 3 or 6 components, got {}", vals.len()))),
        }
    }

    pub fn features(&self, mode: GoalMode) -> Result<Vec<f64>> {
        let p = &self.position;
        match (mode, &self.approach) {
            (GoalMode::Position, _) => Ok(vec![p.x, p.y, p.z]),
            (GoalMode::PositionApproach, Some(a)) => Ok(vec![p.x, p.y, p.z, a.x, a.y, a.z]),
            (GoalMode::PositionApproach, None) => {
                Err(Error::ModeMismatch("model expects an approach direction in the goal".into()))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    Identity,
    Gaussian { bandwidth: f64 },
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if bandwidth > 0.0 && bandwidth.is_finite() {
            Ok(KernelSpec::Gaussian { bandwidth })
        } else {
            Err(Error::InvalidArgument(format!("gaussian bandwidth must be positive, got {bandwidth}")))
        }
    }

    /// `identity` or `gaussian:<bandwidth>`.
    pub fn parse(text: &str) -> Result<Self> {
        match text.split_once(':') {
            None if text == "identity" => Ok(KernelSpec::Identity),
            Some(("gaussian", bw)) => Self::gaussian(
                bw.parse().map_err(|e| Error::InvalidArgument(format!("bandwidth {bw:?}: {e}")))?,
            ),
            _ => Err(Error::InvalidArgument(format!("unknown kernel {text:?}"))),
        }
    }
}

impl std::fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelSpec::Identity => write!(f, "identity"),
            KernelSpec::Gaussian { bandwidth } => write!(f, "gaussian:{bandwidth}"),
        }
    }
}

/// Adapts the nearest entry's indices to the given goal. The identity kernel
/// returns them untouched; the Gaussian kernel scales every index by
/// `exp(−‖given − nearest‖² / (2·bandwidth²))`.
pub fn rga_align(
    indices: &[PostureIndex],
    given: &Vector3<f64>,
    nearest: &Vector3<f64>,
    kernel: KernelSpec,
) -> Vec<PostureIndex> {
    match kernel {
        KernelSpec::Identity => indices.to_vec(),
        KernelSpec::Gaussian { bandwidth } => {
            let w = (-(given - nearest).norm_squared() / (2.0 * bandwidth * bandwidth)).exp();
            indices.iter().map(|i| PostureIndex(i.iter().map(|v| v * w).collect())).collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selector {
    All,
    Nth(usize),
    Random(u64),
}

impl Selector {
    /// `all`, `nth:<k>` or `random:<seed>`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown selector {text:?}"));
        match text.split_once(':') {
            None if text == "all" => Ok(Selector::All),
            Some(("nth", k)) => k.parse().map(Selector::Nth).map_err(|_| bad()),
            Some(("random", s)) => s.parse().map(Selector::Random).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Selector::All => write!(f, "all"),
            Selector::Nth(k) => write!(f, "nth:{k}"),
            Selector::Random(seed) => write!(f, "random:{seed}"),
        }
    }
}

/// One verified joint solution.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    pub q: JointVector,
    pub index_used: Option<PostureIndex>,
    pub achieved_pose: Pose,
    pub distance_error: f64,
    pub orientation_similarity: Option<f64>,
    pub clamped: bool,
    /// Gap between the goal and the dictionary entry that was used.
    pub nn_distance: Option<f64>,
    /// Iterations and convergence, for iterative solutions.
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
}

impl SolveResult {
    /// Builds a result whose pose and errors are recomputed from `q`.
    pub fn verify(chain: &KinematicChain, goal: &Goal, q: JointVector) -> Result<Self> {
        let achieved_pose = forward_kinematics(chain, &q)?;
        let distance_error = (goal.position - achieved_pose.position).norm();
        let orientation_similarity = goal.approach().map(|a| a.dot(&achieved_pose.approach));
        Ok(SolveResult {
            q,
            index_used: None,
            achieved_pose,
            distance_error,
            orientation_similarity,
            clamped: false,
            nn_distance: None,
            iterations: None,
            converged: None,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let p = &self.achieved_pose.position;
        let a = &self.achieved_pose.approach;
        json!({
            "q": self.q.to_vec(),
            "q_deg": self.q.degrees(),
            "index_used": self.index_used.as_ref().map(|i| i.0.clone()),
            "position": [p.x, p.y, p.z],
            "approach": [a.x, a.y, a.z],
            "distance_error": self.distance_error,
            "orientation_similarity": self.orientation_similarity,
            "clamped": self.clamped,
            "nn_distance": self.nn_distance,
            "iterations": self.iterations,
            "converged": self.converged,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolveTiming {
    /// Tree search plus dictionary lookup.
    pub lookup: Duration,
    /// Alignment and decoding.
    pub decode: Duration,
    /// Forward-kinematics verification and sorting.
    pub verify: Duration,
    pub total: Duration,
}

#[derive(Clone, Debug)]
pub struct SolveOutput {
    /// Sorted by distance error, ascending.
    pub results: Vec<SolveResult>,
    pub nearest_key: PositionKey,
    pub nn_distance: f64,
    /// Set when the goal is farther than the threshold from every entry.
    pub unreachable: bool,
    pub timing: SolveTiming,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveOptions {
    pub selector: Selector,
    pub kernel: KernelSpec,
    pub unreachable_threshold: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            selector: Selector::All,
            kernel: KernelSpec::Identity,
            unreachable_threshold: DEFAULT_UNREACHABLE_THRESHOLD,
        }
    }
}

/// Everything the online phase needs, checked for mutual consistency.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub chain: KinematicChain,
    pub model: SikModel,
    pub dictionary: PostureDictionary,
    pub tree: KdTree,
    /// Ground-truth records, used by experiment runners for goal sampling.
    pub dataset: Option<Dataset>,
}

impl Artifacts {
    pub fn new(
        chain: KinematicChain,
        model: SikModel,
        dictionary: PostureDictionary,
        dataset: Option<Dataset>,
    ) -> Result<Self> {
        let tree = dictionary.build_tree();
        Self::with_tree(chain, model, dictionary, tree, dataset)
    }

    pub fn with_tree(
        chain: KinematicChain,
        model: SikModel,
        dictionary: PostureDictionary,
        tree: KdTree,
        dataset: Option<Dataset>,
    ) -> Result<Self> {
        if model.chain_id != chain.chain_id() {
            return Err(Error::ArtifactMismatch("model was trained for a different chain".into()));
        }
        if dictionary.model_hash != model.model_hash() {
            return Err(Error::ArtifactMismatch("dictionary was built from a different model".into()));
        }
        if dictionary.index_dim != model.index_dim {
            return Err(Error::ArtifactMismatch("dictionary index dimension differs from the model".into()));
        }
        if tree.len() != dictionary.len() {
            return Err(Error::ArtifactMismatch("tree and dictionary sizes differ".into()));
        }
        if let Some(ds) = &dataset {
            if ds.chain_id != model.chain_id {
                return Err(Error::ArtifactMismatch("dataset belongs to a different chain".into()));
            }
        }
        Ok(Artifacts { chain, model, dictionary, tree, dataset })
    }
}

pub fn solve(artifacts: &Artifacts, goal: &Goal, options: &SolveOptions) -> Result<SolveOutput> {
    let start = Instant::now();
    let nearest = artifacts.tree.nearest(&goal.position)?;
    let entry = artifacts.dictionary.entry(&nearest.key)?;
    let looked_up = Instant::now();

    let aligned = rga_align(&entry.indices, &goal.position, &entry.representative, options.kernel);
    let selected: Vec<PostureIndex> = match options.selector {
        Selector::All => aligned,
        Selector::Nth(k) => {
            let available = aligned.len();
            vec![aligned
                .into_iter()
                .nth(k)
                .ok_or(Error::SelectorOutOfRange { index: k, available })?]
        }
        Selector::Random(seed) => {
            let k = ChaCha8Rng::seed_from_u64(seed).random_range(0..aligned.len());
            vec![aligned[k].clone()]
        }
    };
    let decoded = artifacts.model.decode_many(goal, &selected)?;
    let decoded_at = Instant::now();

    let mut results = decoded
        .into_iter()
        .zip(selected)
        .map(|(d, idx)| {
            let mut r = SolveResult::verify(&artifacts.chain, goal, d.q)?;
            r.index_used = Some(idx);
            r.clamped = d.clamped;
            r.nn_distance = Some(nearest.distance);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| a.distance_error.total_cmp(&b.distance_error));
    let end = Instant::now();

    Ok(SolveOutput {
        results,
        nearest_key: nearest.key,
        nn_distance: nearest.distance,
        unreachable: nearest.distance > options.unreachable_threshold,
        timing: SolveTiming {
            lookup: looked_up - start,
            decode: decoded_at - looked_up,
            verify: end - decoded_at,
            total: end - start,
        },
    })
}

/// Damped-least-squares parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DlsParams {
    pub damping: f64,
    /// Largest joint-space step norm per iteration, radians.
    pub step_cap: f64,
    /// Position tolerance, meters.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for DlsParams {
    fn default() -> Self {
        DlsParams { damping: 0.05, step_cap: 0.2, tol: 1e-4, max_iters: 500 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOutcome {
    pub q: JointVector,
    pub iterations: usize,
    pub converged: bool,
    pub error: f64,
    /// Position error after the start and after every accepted step.
    pub error_history: Vec<f64>,
}

const MAX_HALVINGS: usize = 40;

/// Position-only damped least squares:
/// `Δq = Jᵀ (J Jᵀ + damping² I)⁻¹ e`, step norm capped, clamped to limits.
/// Joints sitting on a limit whose step points outward drop out of the
/// Jacobian for that iteration.
/// A step that would increase the error is halved until it does not; when
/// no halving helps the solver stops without converging.
pub fn baseline_solve(
    chain: &KinematicChain,
    goal: &Goal,
    start: &JointVector,
    params: &DlsParams,
) -> Result<BaselineOutcome> {
    let (mut q, _) = clamp_to_limits(chain, start)?;
    let error_at = |q: &[f64]| -> Result<Vector3<f64>> { Ok(goal.position - forward_kinematics(chain, q)?.position) };
    let mut e = error_at(&q)?;
    let mut err = e.norm();
    let mut history = vec![err];
    let mut iterations = 0;
    let damping2 = params.damping * params.damping;
    while err > params.tol && iterations < params.max_iters {
        iterations += 1;
        let mut jac = position_jacobian(chain, &q)?;
        // Joints resting on a limit and pushed outward are frozen for this
        // iteration so the remaining joints absorb the correction.
        let mut step = loop {
            let jjt = &jac * jac.transpose() + Matrix3::identity() * damping2;
            let y = jjt
                .cholesky()
                .map(|c| c.solve(&e))
                .ok_or_else(|| Error::InvalidArgument("damped system is not positive definite".into()))?;
            let step = jac.transpose() * y;
            let blocked: Vec<usize> = chain
                .joints()
                .iter()
                .enumerate()
                .filter(|&(i, j)| {
                    jac.column(i).norm() > 0.0
                        && ((q[i] <= j.limit_min && step[i] < 0.0) || (q[i] >= j.limit_max && step[i] > 0.0))
                })
                .map(|(i, _)| i)
                .collect();
            if blocked.is_empty() {
                break step;
            }
            for i in blocked {
                jac.column_mut(i).fill(0.0);
            }
        };
        let norm = step.norm();
        if norm > params.step_cap {
            step *= params.step_cap / norm;
        }
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let raw: Vec<f64> = q.iter().zip(step.iter()).map(|(a, d)| a + d).collect();
            let (cand, _) = clamp_to_limits(chain, &raw)?;
            let ce = error_at(&cand)?;
            if ce.norm() < err {
                accepted = Some((cand, ce));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, ce)) => {
                q = cand;
                e = ce;
                err = e.norm();
                history.push(err);
            }
            None => break,
        }
    }
    Ok(BaselineOutcome { q, iterations, converged: err <= params.tol, error: err, error_history: history })
}

/// Rejection-sampled start: uniform in-limit joint vectors until one lands
/// within `radius` of the goal; after `max_draws` the closest draw is used.
pub fn sample_start<R: Rng + ?Sized>(
    chain: &KinematicChain,
    goal: &Goal,
    radius: f64,
    max_draws: usize,
    rng: &mut R,
) -> Result<JointVector> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..max_draws.max(1) {
        let q: Vec<f64> = chain
            .joints()
            .iter()
            .map(|j| rng.random_range(j.limit_min..=j.limit_max))
            .collect();
        let d = (forward_kinematics(chain, &q)?.position - goal.position).norm();
        if d <= radius {
            return Ok(clamp_to_limits(chain, &q)?.0);
        }
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, q));
        }
    }
    Ok(clamp_to_limits(chain, &best.expect("at least one draw").1)?.0)
}

pub const MAX_START_DRAWS: usize = 10_000;

/// `count` restarts of the baseline from seeded random starts near the goal.
/// Results keep restart order.
pub fn baseline_multi(
    chain: &KinematicChain,
    goal: &Goal,
    count: usize,
    radius: f64,
    seed: u64,
    params: &DlsParams,
) -> Result<Vec<SolveResult>> {
    if count == 0 {
        return Err(Error::InvalidArgument("restart count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = (0..count)
        .map(|_| sample_start(chain, goal, radius, MAX_START_DRAWS, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    starts
        .into_par_iter()
        .map(|start| {
            let out = baseline_solve(chain, goal, &start, params)?;
            let mut r = SolveResult::verify(chain, goal, out.q)?;
            r.iterations = Some(out.iterations);
            r.converged = Some(out.converged);
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn goal_parsing() {
        let g = Goal::parse("0.1, 0.2,0.3").unwrap();
        assert_eq!(g.mode(), GoalMode::Position);
        let g = Goal::parse("0,0,1,0,0,2").unwrap();
        assert_eq!(g.approach().unwrap(), &Vector3::new(0.0, 0.0, 1.0));
        assert!(Goal::parse("1,2").is_err());
        assert!(Goal::parse("a,b,c").is_err());
        assert!(Goal::parse("0,0,0,0,0,0").is_err());
        assert!(Goal::parse("1,nan,0").is_err());
    }

    #[test]
    fn selector_and_kernel_parsing() {
        assert_eq!(Selector::parse("all").unwrap(), Selector::All);
        assert_eq!(Selector::parse("nth:3").unwrap(), Selector::Nth(3));
        assert_eq!(Selector::parse("random:7").unwrap(), Selector::Random(7));
        assert!(Selector::parse("first").is_err());
        assert_eq!(KernelSpec::parse("identity").unwrap(), KernelSpec::Identity);
        assert_eq!(KernelSpec::parse("gaussian:0.1").unwrap(), KernelSpec::Gaussian { bandwidth: 0.1 });
        assert!(KernelSpec::parse("gaussian:0").is_err());
        assert!(KernelSpec::parse("cosine").is_err());
    }

    #[test]
    fn identity_alignment_is_exact() {
        let idx = vec![PostureIndex(vec![0.1, -3.0, 1e300]), PostureIndex(vec![f64::MIN_POSITIVE, 0.0, -0.0])];
        let out = rga_align(&idx, &Vector3::new(1.0, 2.0, 3.0), &Vector3::zeros(), KernelSpec::Identity);
        for (a, b) in out.iter().zip(&idx) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn gaussian_alignment() {
        let idx = vec![PostureIndex(vec![1.0, -2.0])];
        let p = Vector3::new(0.3, 0.1, 0.0);
        let same = rga_align(&idx, &p, &p, KernelSpec::Gaussian { bandwidth: 0.1 });
        assert_eq!(same, idx);
        let off = rga_align(&idx, &Vector3::new(0.4, 0.1, 0.0), &p, KernelSpec::Gaussian { bandwidth: 0.1 });
        let w = (-0.5f64).exp();
        assert!((off[0][0] - w).abs() < 1e-12);
        assert!((off[0][1] + 2.0 * w).abs() < 1e-12);
        assert!((w - 0.6065306597).abs() < 1e-9);
    }

    fn planar3() -> KinematicChain {
        KinematicChain::planar3()
    }

    #[test]
    fn baseline_at_solution_takes_no_steps() {
        let chain = planar3();
        let start = clamp_to_limits(&chain, &[0.3, -0.4, 0.5]).unwrap().0;
        let goal = Goal::position(forward_kinematics(&chain, &start).unwrap().position);
        let out = baseline_solve(&chain, &goal, &start, &DlsParams::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.q, start);
    }

    #[test]
    fn baseline_unreachable_goal_reports_deficit() {
        let chain = planar3();
        let goal = Goal::position(Vector3::new(2.0, 0.0, 0.0));
        let start = clamp_to_limits(&chain, &[0.5, 0.5, 0.5]).unwrap().0;
        let out = baseline_solve(&chain, &goal, &start, &DlsParams::default()).unwrap();
        assert!(!out.converged);
        assert!(out.iterations <= 500);
        // full reach is 1.2 m
        assert!((out.error - 0.8).abs() < 1e-3, "{}", out.error);
        for w in out.error_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn baseline_multi_is_deterministic() {
        let chain = planar3();
        let goal = Goal::position(Vector3::new(0.6, 0.3, 0.0));
        let a = baseline_multi(&chain, &goal, 4, 0.5, 17, &DlsParams::default()).unwrap();
        let b = baseline_multi(&chain, &goal, 4, 0.5, 17, &DlsParams::default()).unwrap();
        assert_eq!(a, b);
        let one = baseline_multi(&chain, &goal, 1, f64::INFINITY, 3, &DlsParams::default()).unwrap();
        assert_eq!(one.len(), 1);
        assert!(baseline_multi(&chain, &goal, 0, 0.5, 3, &DlsParams::default()).is_err());
        for r in &a {
            assert!(r.converged.unwrap());
            assert!(r.distance_error <= 1e-4);
        }
    }

    #[test]
    fn start_sampling_respects_radius() {
        let chain = planar3();
        let goal = Goal::position(Vector3::new(0.5, -0.5, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let q = sample_start(&chain, &goal, 0.5, MAX_START_DRAWS, &mut rng).unwrap();
            assert!((forward_kinematics(&chain, &q).unwrap().position - goal.position).norm() <= 0.5);
        }
        // nothing lands 10 m away; fall back to the closest draw
        let far = Goal::position(Vector3::new(10.0, 0.0, 0.0));
        let q = sample_start(&chain, &far, 0.01, 200, &mut rng).unwrap();
        assert_eq!(q.len(), 3);
    }
}
