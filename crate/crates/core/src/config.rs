//! Run configuration: flat `key = value` files whose keys match the CLI
//! flag names, with flags taking precedence.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::eval::{DenseWindow, ReportFormat};
use crate::kinematics::KinematicChain;
use crate::model::{Architecture, ModelMode};
use crate::neuralnet::{Optimizer, TrainConfig};
use crate::solver::{GoalMode, KernelSpec, Selector, DEFAULT_UNREACHABLE_THRESHOLD};

/// Every recognised key.
pub const KEYS: &[&str] = &[
    "chain",
    "dataset",
    "model",
    "dict",
    "out",
    "curve",
    "snapshots",
    "scene",
    "step-deg",
    "resolution",
    "mode",
    "goal-mode",
    "index-dim",
    "encoder-hidden",
    "decoder-hidden",
    "epochs",
    "batch-size",
    "learning-rate",
    "lr-decay-every",
    "lr-decay-factor",
    "beta-kl",
    "optimizer",
    "lambda",
    "kernel",
    "selector",
    "seed",
    "jobs",
    "format",
    "unreachable-threshold",
    "samples",
    "radii",
    "z",
    "window",
    "fine-step-deg",
    "element",
    "sweep",
    "count",
    "radius",
    "goal",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Builtin chain name or path to a chain file.
    pub chain: String,
    pub dataset_path: PathBuf,
    pub model_path: PathBuf,
    pub dict_path: PathBuf,
    pub out_path: Option<PathBuf>,
    pub curve_path: Option<PathBuf>,
    pub snapshots_path: Option<PathBuf>,
    pub scene_path: Option<PathBuf>,
    pub step_degrees: f64,
    pub resolution: f64,
    pub mode: ModelMode,
    pub goal_mode: GoalMode,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub kernel: KernelSpec,
    pub selector: Selector,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub format: ReportFormat,
    pub unreachable_threshold: f64,
    pub samples: usize,
    pub radii: Vec<f64>,
    pub z: Option<f64>,
    pub window: Option<Vec<(f64, f64)>>,
    pub fine_step_degrees: f64,
    pub element: usize,
    pub sweep: Vec<f64>,
    pub count: usize,
    pub radius: f64,
    pub goal: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            chain: "planar3".into(),
            dataset_path: "dataset.bin".into(),
            model_path: "model.bin".into(),
            dict_path: "dict.bin".into(),
            out_path: None,
            curve_path: None,
            snapshots_path: None,
            scene_path: None,
            step_degrees: 15.0,
            resolution: crate::dataset::DEFAULT_RESOLUTION,
            mode: ModelMode::Deterministic,
            goal_mode: GoalMode::Position,
            arch: Architecture::default(),
            train: TrainConfig::default(),
            kernel: KernelSpec::Identity,
            selector: Selector::All,
            seed: 0,
            jobs: None,
            format: ReportFormat::Json,
            unreachable_threshold: DEFAULT_UNREACHABLE_THRESHOLD,
            samples: 100,
            radii: vec![0.3, 0.5, 0.7, 0.9],
            z: None,
            window: None,
            fine_step_degrees: 1.0,
            element: 0,
            sweep: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            count: 10,
            radius: 0.5,
            goal: None,
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let key = k.trim().replace('_', "-");
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("line {}: unknown key {key:?}", i + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
        }
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s)).collect()
}

/// `a:b,c:d,...` in degrees.
pub fn parse_window(v: &str) -> Result<Vec<(f64, f64)>> {
    v.split(',')
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("window: expected min:max, got {pair:?}")))?;
            Ok((num("window", a)?, num("window", b)?))
        })
        .collect()
}

pub fn parse_mode(v: &str) -> Result<ModelMode> {
    match v {
        "sik" => Ok(ModelMode::Deterministic),
        "psik" => Ok(ModelMode::Variational),
        _ => Err(Error::Config(format!("mode: expected sik or psik, got {v:?}"))),
    }
}

pub fn parse_goal_mode(v: &str) -> Result<GoalMode> {
    match v {
        "pos" | "position" => Ok(GoalMode::Position),
        "pos+ori" | "position+orientation" => Ok(GoalMode::PositionApproach),
        _ => Err(Error::Config(format!("goal-mode: expected pos or pos+ori, got {v:?}"))),
    }
}

impl RunConfig {
    /// Defaults overridden by `pairs`.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = RunConfig::default();
        for (key, v) in pairs {
            let v = v.as_str();
            match key.as_str() {
                "chain" => c.chain = v.to_string(),
                "dataset" => c.dataset_path = v.into(),
                "model" => c.model_path = v.into(),
                "dict" => c.dict_path = v.into(),
                "out" => c.out_path = Some(v.into()),
                "curve" => c.curve_path = Some(v.into()),
                "snapshots" => c.snapshots_path = Some(v.into()),
                "scene" => c.scene_path = Some(v.into()),
                "step-deg" => c.step_degrees = num(key, v)?,
                "resolution" => c.resolution = num(key, v)?,
                "mode" => c.mode = parse_mode(v)?,
                "goal-mode" => c.goal_mode = parse_goal_mode(v)?,
                "index-dim" => c.arch.index_dim = num(key, v)?,
                "encoder-hidden" => c.arch.encoder_hidden = list(key, v)?,
                "decoder-hidden" => c.arch.decoder_hidden = list(key, v)?,
                "epochs" => c.train.epochs = num(key, v)?,
                "batch-size" => c.train.batch_size = num(key, v)?,
                "learning-rate" => c.train.learning_rate = num(key, v)?,
                "lr-decay-every" => c.train.lr_decay_every = num(key, v)?,
                "lr-decay-factor" => c.train.lr_decay_factor = num(key, v)?,
                "beta-kl" => c.train.beta_kl = num(key, v)?,
                "optimizer" => {
                    c.train.optimizer = match v {
                        "adam" => Optimizer::Adam,
                        "sgd" => Optimizer::Sgd,
                        _ => return Err(Error::Config(format!("optimizer: expected adam or sgd, got {v:?}"))),
                    }
                }
                "lambda" => c.train.lambda_distinct = if v == "auto" { None } else { Some(num(key, v)?) },
                "kernel" => c.kernel = KernelSpec::parse(v)?,
                "selector" => c.selector = Selector::parse(v)?,
                "seed" => c.seed = num(key, v)?,
                "jobs" => c.jobs = Some(num(key, v)?),
                "format" => c.format = v.parse()?,
                "unreachable-threshold" => c.unreachable_threshold = num(key, v)?,
                "samples" => c.samples = num(key, v)?,
                "radii" => c.radii = list(key, v)?,
                "z" => c.z = Some(num(key, v)?),
                "window" => c.window = Some(parse_window(v)?),
                "fine-step-deg" => c.fine_step_degrees = num(key, v)?,
                "element" => c.element = num(key, v)?,
                "sweep" => c.sweep = list(key, v)?,
                "count" => c.count = num(key, v)?,
                "radius" => c.radius = num(key, v)?,
                "goal" => c.goal = Some(v.to_string()),
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
        }
        c.train.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let mut paths = vec![&self.dataset_path, &self.model_path, &self.dict_path];
        paths.extend([&self.out_path, &self.curve_path, &self.snapshots_path, &self.scene_path].into_iter().flatten());
        for (i, a) in paths.iter().enumerate() {
            if paths[i + 1..].contains(a) {
                return Err(Error::Config(format!("path {} is used for two artifacts", a.display())));
            }
        }
        if !(self.step_degrees > 0.0) || !(self.fine_step_degrees > 0.0) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        if !(self.resolution > 0.0) {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }

    /// Builtin chain by name, otherwise a chain file.
    pub fn load_chain(&self) -> Result<KinematicChain> {
        match self.chain.as_str() {
            "planar3" => Ok(KinematicChain::planar3()),
            "spatial4" => Ok(KinematicChain::spatial4()),
            "panda" => Ok(KinematicChain::panda()),
            path => KinematicChain::parse(&std::fs::read_to_string(path)?),
        }
    }

    pub fn dense_window(&self) -> Result<DenseWindow> {
        let window = self
            .window
            .clone()
            .ok_or_else(|| Error::Config("the dense experiment needs window = min:max,...".into()))?;
        Ok(DenseWindow { window_deg: window, fine_step_deg: self.fine_step_degrees })
    }

    /// Flat `key = value` text that parses back to this configuration.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let joinu = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("chain = {}", self.chain),
            format!("dataset = {}", self.dataset_path.display()),
            format!("model = {}", self.model_path.display()),
            format!("dict = {}", self.dict_path.display()),
        ];
        for (k, p) in [
            ("out", &self.out_path),
            ("curve", &self.curve_path),
            ("snapshots", &self.snapshots_path),
            ("scene", &self.scene_path),
        ] {
            if let Some(p) = p {
                lines.push(format!("{k} = {}", p.display()));
            }
        }
        let t = &self.train;
        lines.extend([
            format!("step-deg = {:?}", self.step_degrees),
            format!("resolution = {:?}", self.resolution),
            format!("mode = {}", if self.mode == ModelMode::Deterministic { "sik" } else { "psik" }),
            format!("goal-mode = {}", if self.goal_mode == GoalMode::Position { "pos" } else { "pos+ori" }),
            format!("index-dim = {}", self.arch.index_dim),
            format!("encoder-hidden = {}", joinu(&self.arch.encoder_hidden)),
            format!("decoder-hidden = {}", joinu(&self.arch.decoder_hidden)),
            format!("epochs = {}", t.epochs),
            format!("batch-size = {}", t.batch_size),
            format!("learning-rate = {:?}", t.learning_rate),
            format!("lr-decay-every = {}", t.lr_decay_every),
            format!("lr-decay-factor = {:?}", t.lr_decay_factor),
            format!("beta-kl = {:?}", t.beta_kl),
            format!("optimizer = {}", if t.optimizer == Optimizer::Adam { "adam" } else { "sgd" }),
            format!("lambda = {}", t.lambda_distinct.map_or("auto".to_string(), |l| format!("{l:?}"))),
            format!("kernel = {}", self.kernel),
            format!("selector = {}", self.selector),
            format!("seed = {}", self.seed),
            format!("format = {}", if self.format == ReportFormat::Json { "json" } else { "csv" }),
            format!("unreachable-threshold = {:?}", self.unreachable_threshold),
            format!("samples = {}", self.samples),
            format!("radii = {}", join(&self.radii)),
            format!("fine-step-deg = {:?}", self.fine_step_degrees),
            format!("element = {}", self.element),
            format!("sweep = {}", join(&self.sweep)),
            format!("count = {}", self.count),
            format!("radius = {:?}", self.radius),
        ]);
        if let Some(j) = self.jobs {
            lines.push(format!("jobs = {j}"));
        }
        if let Some(z) = self.z {
            lines.push(format!("z = {z:?}"));
        }
        if let Some(w) = &self.window {
            lines.push(format!(
                "window = {}",
                w.iter().map(|(a, b)| format!("{a:?}:{b:?}")).collect::<Vec<_>>().join(",")
            ));
        }
        if let Some(g) = &self.goal {
            lines.push(format!("goal = {g}"));
        }
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides_defaults() {
        let c = RunConfig::parse("# toy run\nstep-deg = 30\nmode = psik\ngoal_mode = pos+ori\nlambda = 0.2 # fixed\nradii = 0.1, 0.2\n")
            .unwrap();
        assert_eq!(c.step_degrees, 30.0);
        assert_eq!(c.mode, ModelMode::Variational);
        assert_eq!(c.goal_mode, GoalMode::PositionApproach);
        assert_eq!(c.train.lambda_distinct, Some(0.2));
        assert_eq!(c.radii, vec![0.1, 0.2]);
        assert_eq!(c.resolution, crate::dataset::DEFAULT_RESOLUTION);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("colour = red").is_err());
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("mode = fast").is_err());
        assert!(RunConfig::parse("dataset = a.bin\nmodel = a.bin").is_err());
        assert!(RunConfig::parse("window = 1-2").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let c = RunConfig::parse("window = -10:10,20:40\nz = 0.25\njobs = 2\ngoal = 0.1,0.2,0\nkernel = gaussian:0.05")
            .unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
    }
}
