//! Metrics, experiment runners and machine-readable reports.
//!
//! Units in reports are fixed: centimeters for distance errors, degrees²
//! for joint variances, seconds for wall times.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use nalgebra::Vector3;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{collect, group_by_position, quantize, Dataset};
use crate::error::{Error, Result};
use crate::kinematics::{JointVector, KinematicChain, Pose};
use crate::model::{train, ModelMode, ModelSpec, NoiseSource, PostureIndex};
use crate::neuralnet::TrainConfig;
use crate::solver::{
    baseline_multi, rga_align, solve, Artifacts, DlsParams, Goal, GoalMode, SolveOptions, SolveResult,
};
use crate::spatial::build_dictionary;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub fn distance_error_cm(goal: &Goal, achieved: &Pose) -> f64 {
    100.0 * (goal.position - achieved.position).norm()
}

/// Cosine between the goal's approach direction and the achieved one.
pub fn orientation_similarity(goal: &Goal, achieved: &Pose) -> Result<f64> {
    let a = goal
        .approach()
        .ok_or_else(|| Error::ModeMismatch("goal has no approach direction".into()))?;
    Ok(a.dot(&achieved.approach) / (a.norm() * achieved.approach.norm()))
}

/// Population variance of every joint across the solutions, in degrees².
pub fn per_joint_variance(solutions: &[JointVector]) -> Result<Vec<f64>> {
    if solutions.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least two solutions, got {}", solutions.len())));
    }
    let n = solutions[0].len();
    for s in solutions {
        crate::error::check_dim(n, s.len())?;
    }
    let count = solutions.len() as f64;
    Ok((0..n)
        .map(|j| {
            let deg: Vec<f64> = solutions.iter().map(|s| s[j].to_degrees()).collect();
            let mean = deg.iter().sum::<f64>() / count;
            deg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count
        })
        .collect())
}

/// Largest joint-space L∞ distance between any two solutions, in degrees.
pub fn max_pairwise_spread_deg(solutions: &[JointVector]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in solutions.iter().enumerate() {
        for b in &solutions[i + 1..] {
            let d = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            best = best.max(d);
        }
    }
    best.to_degrees()
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    crate::error::check_dim(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::InvalidArgument("need at least two pairs".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("constant input has no rank correlation".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub rho: f64,
    pub pairs: usize,
}

/// Rank correlation between index distance and joint-space distance over
/// every pair of records that share a quantization cell.
pub fn index_posture_correlation(
    model: &crate::model::SikModel,
    dataset: &Dataset,
    resolution: f64,
) -> Result<Correlation> {
    let groups = group_by_position(dataset, resolution)?;
    let mut index_d = Vec::new();
    let mut posture_d = Vec::new();
    for members in groups.values().filter(|m| m.len() > 1) {
        let records: Vec<_> = members.iter().map(|&i| &dataset.records[i]).collect();
        let (indices, _) = model.encode_records(&records)?;
        for a in 0..records.len() {
            for b in a + 1..records.len() {
                index_d.push(indices[a].distance(&indices[b]));
                let qd = records[a].q.iter().zip(records[b].q.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                posture_d.push(qd.sqrt());
            }
        }
    }
    let pairs = index_d.len();
    Ok(Correlation { rho: spearman(&index_d, &posture_d)?, pairs })
}

// -- reports ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Goal id; rows keep goal order.
    pub case: usize,
    pub method: String,
    pub goal: [f64; 3],
    pub approach: Option<[f64; 3]>,
    /// Experiment-specific parameter: radius, swept value.
    pub param: Option<f64>,
    pub distance_error_cm: f64,
    pub orientation_similarity: Option<f64>,
    pub joint_variance_deg2: Option<Vec<f64>>,
    pub spread_deg: Option<f64>,
    pub nn_distance_m: Option<f64>,
    pub lookup_s: Option<f64>,
    pub decode_s: Option<f64>,
    pub verify_s: Option<f64>,
    pub total_s: Option<f64>,
}

impl ReportRow {
    fn new(case: usize, method: &str, goal: &Goal) -> Self {
        let p = goal.position;
        ReportRow {
            case,
            method: method.to_string(),
            goal: [p.x, p.y, p.z],
            approach: goal.approach().map(|a| [a.x, a.y, a.z]),
            param: None,
            distance_error_cm: 0.0,
            orientation_similarity: None,
            joint_variance_deg2: None,
            spread_deg: None,
            nn_distance_m: None,
            lookup_s: None,
            decode_s: None,
            verify_s: None,
            total_s: None,
        }
    }

    fn from_result(case: usize, method: &str, goal: &Goal, r: &SolveResult) -> Self {
        let mut row = ReportRow::new(case, method, goal);
        row.distance_error_cm = distance_error_cm(goal, &r.achieved_pose);
        row.orientation_similarity = orientation_similarity(goal, &r.achieved_pose).ok();
        row.nn_distance_m = r.nn_distance;
        row
    }
}

/// Mean, max and nearest-rank 95th percentile; all `None` without values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean: Option<f64>,
    pub max: Option<f64>,
    pub p95: Option<f64>,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Aggregate { count: 0, mean: None, max: None, p95: None };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        Aggregate {
            count: values.len(),
            mean: Some(values.iter().sum::<f64>() / values.len() as f64),
            max: sorted.last().copied(),
            p95: Some(sorted[rank - 1]),
        }
    }
}

const AGGREGATED: [&str; 3] = ["distance_error_cm", "orientation_similarity", "total_s"];

fn metric(row: &ReportRow, name: &str) -> Option<f64> {
    match name {
        "distance_error_cm" => Some(row.distance_error_cm),
        "orientation_similarity" => row.orientation_similarity,
        "total_s" => row.total_s,
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub experiment: String,
    pub chain_id: String,
    pub model_hash: String,
    /// Everything needed to rerun the experiment, seeds included.
    pub config: BTreeMap<String, String>,
    pub rows: Vec<ReportRow>,
    /// Keyed `<method>/<metric>`, with `all` covering every row.
    pub aggregates: BTreeMap<String, Aggregate>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::InvalidArgument(format!("unknown report format {s:?}"))),
        }
    }
}

const CSV_COLUMNS: [&str; 18] = [
    "case",
    "method",
    "goal_x",
    "goal_y",
    "goal_z",
    "approach_x",
    "approach_y",
    "approach_z",
    "param",
    "distance_error_cm",
    "orientation_similarity",
    "joint_variance_deg2",
    "spread_deg",
    "nn_distance_m",
    "lookup_s",
    "decode_s",
    "verify_s",
    "total_s",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:?}"))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Format(format!("bad number {s:?} in report")))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(s).map(Some)
    }
}

impl EvalReport {
    pub fn new(experiment: &str, artifacts: &Artifacts) -> Self {
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            experiment: experiment.to_string(),
            chain_id: artifacts.chain.chain_id(),
            model_hash: artifacts.model.model_hash(),
            config: BTreeMap::new(),
            rows: Vec::new(),
            aggregates: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    pub fn compute_aggregates(&self) -> BTreeMap<String, Aggregate> {
        let mut methods: Vec<&str> = self.rows.iter().map(|r| r.method.as_str()).collect();
        methods.sort_unstable();
        methods.dedup();
        let mut out = BTreeMap::new();
        for group in std::iter::once("all").chain(methods) {
            for name in AGGREGATED {
                let values: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| group == "all" || r.method == group)
                    .filter_map(|r| metric(r, name))
                    .collect();
                out.insert(format!("{group}/{name}"), Aggregate::of(&values));
            }
        }
        out
    }

    pub fn finish(mut self) -> Self {
        self.aggregates = self.compute_aggregates();
        self
    }

    pub fn aggregate(&self, method: &str, name: &str) -> Option<&Aggregate> {
        self.aggregates.get(&format!("{method}/{name}"))
    }

    pub fn mean(&self, method: &str, name: &str) -> Option<f64> {
        self.aggregate(method, name).and_then(|a| a.mean)
    }

    fn check(self) -> Result<Self> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported report schema {}", self.schema_version)));
        }
        if self.aggregates != self.compute_aggregates() {
            return Err(Error::Format("stored aggregates differ from the rows".into()));
        }
        Ok(self)
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        let report: EvalReport = serde_json::from_reader(input)?;
        report.check()
    }

    /// Metadata and aggregates as `# key=value` lines, then a header row and
    /// one line per row. Joint variances are `;`-separated.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# schema_version={}", self.schema_version)?;
        writeln!(out, "# experiment={}", self.experiment)?;
        writeln!(out, "# chain_id={}", self.chain_id)?;
        writeln!(out, "# model_hash={}", self.model_hash)?;
        for (k, v) in &self.config {
            writeln!(out, "# config.{k}={v}")?;
        }
        for (k, a) in &self.aggregates {
            writeln!(out, "# aggregate.{k}={},{},{},{}", a.count, opt(a.mean), opt(a.max), opt(a.p95))?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for r in &self.rows {
            let approach = r.approach.map_or([None; 3], |a| a.map(Some));
            let variance = r
                .joint_variance_deg2
                .as_ref()
                .map_or_else(String::new, |v| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";"));
            w.write_record([
                r.case.to_string(),
                r.method.clone(),
                format!("{:?}", r.goal[0]),
                format!("{:?}", r.goal[1]),
                format!("{:?}", r.goal[2]),
                opt(approach[0]),
                opt(approach[1]),
                opt(approach[2]),
                opt(r.param),
                format!("{:?}", r.distance_error_cm),
                opt(r.orientation_similarity),
                variance,
                opt(r.spread_deg),
                opt(r.nn_distance_m),
                opt(r.lookup_s),
                opt(r.decode_s),
                opt(r.verify_s),
                opt(r.total_s),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut report = EvalReport {
            schema_version: 0,
            experiment: String::new(),
            chain_id: String::new(),
            model_hash: String::new(),
            config: BTreeMap::new(),
            rows: Vec::new(),
            aggregates: BTreeMap::new(),
        };
        let mut line = String::new();
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Format("report has no header row".into()));
            }
            let Some(meta) = line.trim_end_matches(['\n', '\r']).strip_prefix("# ") else {
                break;
            };
            let (key, value) =
                meta.split_once('=').ok_or_else(|| Error::Format(format!("bad metadata line {meta:?}")))?;
            match key {
                "schema_version" => {
                    report.schema_version =
                        value.parse().map_err(|_| Error::Format(format!("bad schema version {value:?}")))?
                }
                "experiment" => report.experiment = value.to_string(),
                "chain_id" => report.chain_id = value.to_string(),
                "model_hash" => report.model_hash = value.to_string(),
                _ => {
                    if let Some(k) = key.strip_prefix("config.") {
                        report.config.insert(k.to_string(), value.to_string());
                    } else if let Some(k) = key.strip_prefix("aggregate.") {
                        let parts: Vec<&str> = value.split(',').collect();
                        let [count, mean, max, p95] = parts[..] else {
                            return Err(Error::Format(format!("bad aggregate {value:?}")));
                        };
                        report.aggregates.insert(
                            k.to_string(),
                            Aggregate {
                                count: count.parse().map_err(|_| Error::Format(format!("bad count {count:?}")))?,
                                mean: parse_opt(mean)?,
                                max: parse_opt(max)?,
                                p95: parse_opt(p95)?,
                            },
                        );
                    } else {
                        return Err(Error::Format(format!("unknown metadata key {key:?}")));
                    }
                }
            }
        }
        let header: Vec<&str> = line.trim_end().split(',').collect();
        if header != CSV_COLUMNS {
            return Err(Error::Format("unexpected report columns".into()));
        }
        let mut rows = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        for record in rows.records() {
            let rec = record?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            if rec.len() != CSV_COLUMNS.len() {
                return Err(Error::Format(format!("row has {} fields", rec.len())));
            }
            let approach = match (parse_opt(f(5))?, parse_opt(f(6))?, parse_opt(f(7))?) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                (None, None, None) => None,
                _ => return Err(Error::Format("partial approach vector".into())),
            };
            let variance = if f(11).is_empty() {
                None
            } else {
                Some(f(11).split(';').map(parse_f64).collect::<Result<Vec<_>>>()?)
            };
            report.rows.push(ReportRow {
                case: f(0).parse().map_err(|_| Error::Format(format!("bad case {:?}", f(0))))?,
                method: f(1).to_string(),
                goal: [parse_f64(f(2))?, parse_f64(f(3))?, parse_f64(f(4))?],
                approach,
                param: parse_opt(f(8))?,
                distance_error_cm: parse_f64(f(9))?,
                orientation_similarity: parse_opt(f(10))?,
                joint_variance_deg2: variance,
                spread_deg: parse_opt(f(12))?,
                nn_distance_m: parse_opt(f(13))?,
                lookup_s: parse_opt(f(14))?,
                decode_s: parse_opt(f(15))?,
                verify_s: parse_opt(f(16))?,
                total_s: parse_opt(f(17))?,
            });
        }
        report.check()
    }

    pub fn emit<W: Write>(&self, format: ReportFormat, sink: W) -> Result<()> {
        match format {
            ReportFormat::Json => self.write_json(sink),
            ReportFormat::Csv => self.write_csv(sink),
        }
    }

    pub fn load<R: Read>(format: ReportFormat, input: R) -> Result<Self> {
        match format {
            ReportFormat::Json => Self::read_json(input),
            ReportFormat::Csv => Self::read_csv(input),
        }
    }
}

// -- goal sampling ---------------------------------------------------------

/// Random near-reachable goals: a dataset position moved uniformly within
/// its quantization cell. Axes along which the dataset has no spread (the
/// height of a planar arm) are left untouched.
pub struct GoalSampler<'a> {
    dataset: &'a Dataset,
    resolution: f64,
    mode: GoalMode,
    spread: [bool; 3],
}

impl<'a> GoalSampler<'a> {
    pub fn new(dataset: &'a Dataset, resolution: f64, mode: GoalMode) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if !(resolution > 0.0) {
            return Err(Error::InvalidArgument(format!("resolution must be positive, got {resolution}")));
        }
        let first = dataset.records[0].pose.position;
        let mut spread = [false; 3];
        for r in &dataset.records {
            for (axis, s) in spread.iter_mut().enumerate() {
                *s |= (r.pose.position[axis] - first[axis]).abs() > 1e-9;
            }
        }
        Ok(GoalSampler { dataset, resolution, mode, spread })
    }

    pub fn from_artifacts(artifacts: &'a Artifacts) -> Result<Self> {
        Self::new(require_dataset(artifacts)?, artifacts.dictionary.resolution, artifacts.model.goal_mode)
    }

    pub fn goal_near(&self, pose: &Pose, rng: &mut impl Rng) -> Goal {
        let p = pose.position;
        let cell = quantize(&p, self.resolution);
        let mut g = p;
        for axis in 0..3 {
            if self.spread[axis] {
                let lo = cell.cell[axis] as f64 * self.resolution;
                g[axis] = lo + rng.random::<f64>() * self.resolution;
            }
        }
        match self.mode {
            GoalMode::Position => Goal::position(g),
            GoalMode::PositionApproach => {
                Goal::with_approach(g, pose.approach).expect("pose approach is a unit vector")
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Goal {
        let r = self.dataset.records.choose(rng).expect("non-empty dataset");
        self.goal_near(&r.pose, rng)
    }

    pub fn sample_n(&self, count: usize, seed: u64) -> Vec<Goal> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample(&mut rng)).collect()
    }
}

fn require_dataset(artifacts: &Artifacts) -> Result<&Dataset> {
    artifacts
        .dataset
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("this experiment needs the ground-truth dataset".into()))
}

fn method_name(artifacts: &Artifacts) -> &'static str {
    match artifacts.model.mode {
        ModelMode::Deterministic => "sik",
        ModelMode::Variational => "psik",
    }
}

fn describe(report: &mut EvalReport, options: &SolveOptions, seed: u64) {
    report
        .set("seed", seed)
        .set("selector", options.selector)
        .set("kernel", options.kernel)
        .set("unreachable_threshold", options.unreachable_threshold);
}

// -- runners ---------------------------------------------------------------

fn solve_rows(artifacts: &Artifacts, goals: &[Goal], options: &SolveOptions) -> Result<Vec<ReportRow>> {
    let method = method_name(artifacts);
    goals
        .par_iter()
        .enumerate()
        .map(|(case, goal)| {
            let out = solve(artifacts, goal, options)?;
            Ok(ReportRow::from_result(case, method, goal, &out.results[0]))
        })
        .collect()
}

/// Best solution per random goal; goals come from [`GoalSampler`].
pub fn run_accuracy(artifacts: &Artifacts, samples: usize, seed: u64, options: &SolveOptions) -> Result<EvalReport> {
    let goals = GoalSampler::from_artifacts(artifacts)?.sample_n(samples, seed);
    let mut report = EvalReport::new("accuracy", artifacts);
    describe(&mut report, options, seed);
    report.set("samples", samples);
    report.rows = solve_rows(artifacts, &goals, options)?;
    Ok(report.finish())
}

/// One goal per quadrant of the horizontal plane, drawn from the middle
/// third of the dataset's height and horizontal reach and perturbed within
/// its cell.
pub fn quadrant_goals(artifacts: &Artifacts, seed: u64) -> Result<Vec<Goal>> {
    let dataset = require_dataset(artifacts)?;
    let sampler = GoalSampler::from_artifacts(artifacts)?;
    let horizontal = |p: &Vector3<f64>| p.x.hypot(p.y);
    let (mut zlo, mut zhi, mut rlo, mut rhi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in &dataset.records {
        let p = r.pose.position;
        zlo = zlo.min(p.z);
        zhi = zhi.max(p.z);
        rlo = rlo.min(horizontal(&p));
        rhi = rhi.max(horizontal(&p));
    }
    let middle = |v: f64, lo: f64, hi: f64| {
        let third = (hi - lo) / 3.0;
        v >= lo + third - 1e-12 && v <= hi - third + 1e-12
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
        .iter()
        .map(|&(sx, sy)| {
            let in_quadrant = |p: &Vector3<f64>| p.x * sx > 0.0 && p.y * sy > 0.0;
            let banded: Vec<_> = dataset
                .records
                .iter()
                .filter(|r| {
                    let p = r.pose.position;
                    in_quadrant(&p) && middle(p.z, zlo, zhi) && middle(horizontal(&p), rlo, rhi)
                })
                .collect();
            let pool = if banded.is_empty() {
                dataset.records.iter().filter(|r| in_quadrant(&r.pose.position)).collect()
            } else {
                banded
            };
            let r = pool
                .choose(&mut rng)
                .ok_or_else(|| Error::Goal(format!("no dataset position in quadrant ({sx}, {sy})")))?;
            Ok(sampler.goal_near(&r.pose, &mut rng))
        })
        .collect()
}

/// Up to `count` mutually λ-distinct indices for a goal, taken from the
/// nearest dictionary entries outward and aligned to the goal.
pub fn distinct_indices_near(artifacts: &Artifacts, goal: &Goal, count: usize, options: &SolveOptions) -> Vec<PostureIndex> {
    let lambda = artifacts.dictionary.lambda;
    let mut k = 8.min(artifacts.tree.len());
    loop {
        let mut kept: Vec<PostureIndex> = Vec::new();
        'entries: for n in artifacts.tree.k_nearest(&goal.position, k) {
            let entry = &artifacts.dictionary.entries[&n.key];
            for idx in rga_align(&entry.indices, &goal.position, &entry.representative, options.kernel) {
                if kept.iter().all(|o| o.distance(&idx) > lambda) {
                    kept.push(idx);
                    if kept.len() == count {
                        break 'entries;
                    }
                }
            }
        }
        if kept.len() == count || k >= artifacts.tree.len() {
            return kept;
        }
        k = (k * 2).min(artifacts.tree.len());
    }
}

/// Per-joint variance of `count` solutions for each quadrant goal, from the
/// learned model and from the restarted baseline.
pub fn run_diversity(
    artifacts: &Artifacts,
    count: usize,
    radius: f64,
    seed: u64,
    params: &DlsParams,
    options: &SolveOptions,
) -> Result<EvalReport> {
    let goals = quadrant_goals(artifacts, seed)?;
    let method = method_name(artifacts);
    let mut report = EvalReport::new("diversity", artifacts);
    describe(&mut report, options, seed);
    report.set("count", count).set("baseline_radius_m", radius).set("dls", format!("{params:?}"));
    let summarize = |case: usize, name: &str, goal: &Goal, results: &[SolveResult]| -> Result<ReportRow> {
        let qs: Vec<JointVector> = results.iter().map(|r| r.q.clone()).collect();
        let mut row = ReportRow::new(case, name, goal);
        row.param = Some(results.len() as f64);
        row.distance_error_cm =
            results.iter().map(|r| distance_error_cm(goal, &r.achieved_pose)).sum::<f64>() / results.len() as f64;
        let sims: Vec<f64> = results.iter().filter_map(|r| orientation_similarity(goal, &r.achieved_pose).ok()).collect();
        row.orientation_similarity = (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64);
        row.joint_variance_deg2 = per_joint_variance(&qs).ok();
        row.spread_deg = Some(max_pairwise_spread_deg(&qs));
        Ok(row)
    };
    for (case, goal) in goals.iter().enumerate() {
        let indices = distinct_indices_near(artifacts, goal, count, options);
        let ours = artifacts
            .model
            .decode_many(goal, &indices)?
            .into_iter()
            .map(|d| SolveResult::verify(&artifacts.chain, goal, d.q))
            .collect::<Result<Vec<_>>>()?;
        report.rows.push(summarize(case, method, goal, &ours)?);
        let base = baseline_multi(&artifacts.chain, goal, count, radius, seed.wrapping_add(case as u64), params)?;
        report.rows.push(summarize(case, "baseline", goal, &base)?);
    }
    Ok(report.finish())
}

/// Goals on horizontal circles around the base at height `z` (the middle
/// of the dataset's height range when `None`).
pub fn run_radius_sweep(
    artifacts: &Artifacts,
    radii: &[f64],
    samples_per_radius: usize,
    z: Option<f64>,
    seed: u64,
    options: &SolveOptions,
) -> Result<EvalReport> {
    let z = match z {
        Some(z) => z,
        None => {
            let ds = require_dataset(artifacts)?;
            let (lo, hi) = ds
                .records
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.pose.position.z), hi.max(r.pose.position.z)));
            0.5 * (lo + hi)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut goals = Vec::new();
    let mut params = Vec::new();
    for &r in radii {
        if !(r >= 0.0) {
            return Err(Error::InvalidArgument(format!("radius must be non-negative, got {r}")));
        }
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        for i in 0..samples_per_radius {
            let t = phase + std::f64::consts::TAU * i as f64 / samples_per_radius as f64;
            goals.push(Goal::position(Vector3::new(r * t.cos(), r * t.sin(), z)));
            params.push(r);
        }
    }
    let mut report = EvalReport::new("radius", artifacts);
    describe(&mut report, options, seed);
    report
        .set("radii", radii.iter().map(|r| format!("{r}")).collect::<Vec<_>>().join(";"))
        .set("samples_per_radius", samples_per_radius)
        .set("z", z);
    report.rows = solve_rows(artifacts, &goals, options)?;
    for (row, r) in report.rows.iter_mut().zip(params) {
        row.param = Some(r);
    }
    Ok(report.finish())
}

/// Narrowed workspace for [`run_dense_subspace`].
#[derive(Clone, Debug, PartialEq)]
pub struct DenseWindow {
    /// Per-joint (min, max) in degrees.
    pub window_deg: Vec<(f64, f64)>,
    pub fine_step_deg: f64,
}

impl DenseWindow {
    /// `width_deg` wide around `centre_deg` on every joint.
    pub fn around(centre_deg: &[f64], width_deg: f64, fine_step_deg: f64) -> Self {
        DenseWindow {
            window_deg: centre_deg.iter().map(|c| (c - width_deg / 2.0, c + width_deg / 2.0)).collect(),
            fine_step_deg,
        }
    }

    pub fn chain(&self, chain: &KinematicChain) -> Result<KinematicChain> {
        let limits: Vec<(f64, f64)> =
            self.window_deg.iter().map(|&(a, b)| (a.to_radians(), b.to_radians())).collect();
        for (j, &(lo, hi)) in chain.joints().iter().zip(&limits) {
            if lo < j.limit_min - 1e-12 || hi > j.limit_max + 1e-12 {
                return Err(Error::InvalidArgument(format!("window for {} leaves the joint limits", j.name)));
            }
        }
        chain.with_limits(&limits)
    }
}

/// Collects a dense dataset inside the window and trains a `spec` model on it.
pub fn dense_artifacts(
    chain: &KinematicChain,
    spec: &ModelSpec,
    window: &DenseWindow,
    config: &TrainConfig,
    resolution: f64,
) -> Result<Artifacts> {
    let chain = window.chain(chain)?;
    let dataset = collect(&chain, window.fine_step_deg)?;
    let (mut model, _) = train(&dataset, &chain, spec, config, NoiseSource::Gaussian)?;
    let (dict, tree) = build_dictionary(&model, &dataset, resolution, config.lambda_distinct, config.seed)?;
    model.lambda = Some(dict.lambda);
    Artifacts::with_tree(chain, model, dict, tree, Some(dataset))
}

/// Trains a model of the same kind and shape as `artifacts.model` inside
/// the window and measures accuracy on in-window goals. Returns the report
/// and the new artifacts.
pub fn run_dense_subspace(
    artifacts: &Artifacts,
    window: &DenseWindow,
    config: &TrainConfig,
    samples: usize,
    options: &SolveOptions,
) -> Result<(EvalReport, Artifacts)> {
    let spec = ModelSpec {
        mode: artifacts.model.mode,
        goal_mode: artifacts.model.goal_mode,
        arch: artifacts.model.architecture(),
    };
    let dense = dense_artifacts(&artifacts.chain, &spec, window, config, artifacts.dictionary.resolution)?;
    let mut report = run_accuracy(&dense, samples, config.seed, options)?;
    report.experiment = "dense".into();
    report
        .set("window_deg", window.window_deg.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(";"))
        .set("fine_step_deg", window.fine_step_deg)
        .set("epochs", config.epochs)
        .set("batch_size", config.batch_size)
        .set("learning_rate", config.learning_rate);
    Ok((report, dense))
}

/// Wall-clock cost of single-threaded solves, split by phase.
pub fn run_timing(artifacts: &Artifacts, samples: usize, seed: u64, options: &SolveOptions) -> Result<EvalReport> {
    let goals = GoalSampler::from_artifacts(artifacts)?.sample_n(samples, seed);
    let method = method_name(artifacts);
    let mut report = EvalReport::new("timing", artifacts);
    describe(&mut report, options, seed);
    report.set("samples", samples);
    for (case, goal) in goals.iter().enumerate() {
        let out = solve(artifacts, goal, options)?;
        let mut row = ReportRow::from_result(case, method, goal, &out.results[0]);
        row.lookup_s = Some(out.timing.lookup.as_secs_f64());
        row.decode_s = Some(out.timing.decode.as_secs_f64());
        row.verify_s = Some(out.timing.verify.as_secs_f64());
        row.total_s = Some(out.timing.total.as_secs_f64());
        report.rows.push(row);
    }
    Ok(report.finish())
}

/// Decoded posture for one swept index value.
#[derive(Clone, Debug, PartialEq)]
pub struct PostureSnapshot {
    pub value: f64,
    pub index: PostureIndex,
    pub result: SolveResult,
    /// Joint origins followed by the tool point, base first.
    pub polyline: Vec<Vector3<f64>>,
}

#[derive(Clone, Debug)]
pub struct IndexStudy {
    pub report: EvalReport,
    pub snapshots: Vec<PostureSnapshot>,
}

impl IndexStudy {
    /// One line per snapshot: swept value, then joint angles in degrees.
    pub fn write_snapshots_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.snapshots.first().map_or(0, |s| s.result.q.len());
        let cols: Vec<String> = (1..=n).map(|j| format!("q{j}_deg")).collect();
        writeln!(out, "value,{},distance_error_cm", cols.join(","))?;
        for (s, row) in self.snapshots.iter().zip(&self.report.rows) {
            let q: Vec<String> = s.result.q.degrees().iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{:?},{},{:?}", s.value, q.join(","), row.distance_error_cm)?;
        }
        Ok(())
    }

    /// Wavefront OBJ with one polyline per snapshot.
    pub fn write_scene_obj<W: Write>(&self, mut out: W) -> Result<()> {
        let mut next = 1;
        for s in &self.snapshots {
            writeln!(out, "o value_{:?}", s.value)?;
            for v in &s.polyline {
                writeln!(out, "v {:?} {:?} {:?}", v.x, v.y, v.z)?;
            }
            let ids: Vec<String> = (next..next + s.polyline.len()).map(|i| i.to_string()).collect();
            writeln!(out, "l {}", ids.join(" "))?;
            next += s.polyline.len();
        }
        Ok(())
    }
}

/// Takes the first index stored for the goal's nearest entry, sets one
/// element to each value of `sweep`, and decodes.
pub fn run_index_study(artifacts: &Artifacts, element: usize, sweep: &[f64], goal: &Goal) -> Result<IndexStudy> {
    if element >= artifacts.model.index_dim {
        return Err(Error::InvalidArgument(format!(
            "element {element} is outside the {}-dimensional index",
            artifacts.model.index_dim
        )));
    }
    let nearest = artifacts.tree.nearest(&goal.position)?;
    let base = artifacts.dictionary.lookup(&nearest.key)?[0].clone();
    let method = method_name(artifacts);
    let mut report = EvalReport::new("index-study", artifacts);
    report
        .set("element", element)
        .set("sweep", sweep.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(";"))
        .set("base_index", base.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(";"));
    let mut snapshots = Vec::new();
    for (case, &value) in sweep.iter().enumerate() {
        let mut index = base.clone();
        index.0[element] = value;
        let decoded = artifacts.model.decode(goal, &index)?;
        let mut result = SolveResult::verify(&artifacts.chain, goal, decoded.q)?;
        result.index_used = Some(index.clone());
        result.clamped = decoded.clamped;
        result.nn_distance = Some(nearest.distance);
        let mut row = ReportRow::from_result(case, method, goal, &result);
        row.param = Some(value);
        report.rows.push(row);
        let polyline = artifacts.chain.joint_origins(&result.q)?;
        snapshots.push(PostureSnapshot { value, index, result, polyline });
    }
    Ok(IndexStudy { report: report.finish(), snapshots })
}
