//! Command-line front end: collect → train → build-index → solve / eval /
//! baseline. Every setting can come from a `--config` file or a flag of the
//! same name; flags win.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};
use serde_json::json;

use crate::config::{parse_pairs, RunConfig, KEYS};
use crate::dataset::{collect_to_writer, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    run_accuracy, run_dense_subspace, run_diversity, run_index_study, run_radius_sweep, run_timing, EvalReport,
};
use crate::kinematics::KinematicChain;
use crate::model::{train, ModelSpec, NoiseSource, SikModel};
use crate::solver::{baseline_multi, solve, Artifacts, DlsParams, Goal, SolveOptions, SolveResult};
use crate::spatial::{build_dictionary, PostureDictionary};

const EXPERIMENTS: [&str; 6] = ["accuracy", "diversity", "radius", "dense", "timing", "index-study"];

fn help(key: &str) -> &'static str {
    match key {
        "chain" => "builtin chain (planar3, spatial4, panda) or chain file",
        "dataset" => "dataset file",
        "model" => "model checkpoint",
        "dict" => "dictionary file",
        "out" => "report file (eval)",
        "curve" => "training-curve CSV (train; default <model>.curve.csv)",
        "snapshots" => "posture table CSV (index-study)",
        "scene" => "polyline OBJ scene (index-study)",
        "step-deg" => "grid step in degrees",
        "resolution" => "position quantization in meters",
        "mode" => "sik | psik",
        "goal-mode" => "pos | pos+ori",
        "index-dim" => "posture index dimension",
        "encoder-hidden" | "decoder-hidden" => "comma-separated hidden widths",
        "epochs" => "training epochs",
        "batch-size" => "records per minibatch",
        "learning-rate" => "initial learning rate",
        "lr-decay-every" => "epochs between learning-rate decays",
        "lr-decay-factor" => "learning-rate multiplier per decay",
        "beta-kl" => "KL weight (psik)",
        "optimizer" => "adam | sgd",
        "unreachable-threshold" => "nearest-cell distance in meters that flags a goal unreachable",
        "samples" => "goals per experiment",
        "z" => "circle height in meters (radius)",
        "fine-step-deg" => "grid step inside the window (dense)",
        "element" => "index element to sweep (index-study)",
        "lambda" => "auto | <value>",
        "kernel" => "identity | gaussian:<bandwidth>",
        "selector" => "all | nth:<k> | random:<seed>",
        "seed" => "seed for every stochastic choice",
        "jobs" => "worker thread cap",
        "format" => "json | csv",
        "goal" => "x,y,z[,ax,ay,az]; read from stdin when absent",
        "window" => "per-joint degree window min:max,... (dense)",
        "radii" => "comma-separated circle radii in meters (radius)",
        "sweep" => "comma-separated index values (index-study)",
        "count" => "solutions per goal (diversity, baseline)",
        "radius" => "restart sampling radius in meters (diversity, baseline)",
        _ => "",
    }
}

pub fn command() -> Command {
    let mut cmd = Command::new("posture-ik")
        .about("Posture-indexed inverse kinematics")
        .subcommand_required(true)
        .arg(Arg::new("config").long("config").global(true).value_name("FILE").help("key = value settings file"));
    for key in KEYS {
        cmd = cmd.arg(
            Arg::new(*key).long(*key).global(true).value_name("VALUE").allow_hyphen_values(true).help(help(key)),
        );
    }
    cmd.subcommand(Command::new("collect").about("Sample the joint grid into a dataset file"))
        .subcommand(Command::new("train").about("Train a model and write its checkpoint and training curve"))
        .subcommand(Command::new("build-index").about("Build the posture dictionary; records λ in the model"))
        .subcommand(Command::new("solve").about("Solve one goal; JSON results on stdout"))
        .subcommand(
            Command::new("eval")
                .about("Run an experiment and write its report")
                .arg(Arg::new("experiment").required(true).value_parser(EXPERIMENTS)),
        )
        .subcommand(Command::new("baseline").about("Damped-least-squares restarts for one goal; JSON on stdout"))
}

fn load_config(matches: &ArgMatches) -> Result<RunConfig> {
    let mut pairs = match matches.get_one::<String>("config") {
        Some(path) => parse_pairs(&std::fs::read_to_string(path)?)?,
        None => BTreeMap::new(),
    };
    for key in KEYS {
        if let Some(v) = matches.get_one::<String>(key) {
            pairs.insert(key.to_string(), v.clone());
        }
    }
    RunConfig::from_pairs(&pairs)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<&mut File>) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        write(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_dataset(c: &RunConfig) -> Result<Dataset> {
    Dataset::read_from(open(&c.dataset_path)?)
}

fn load_model(c: &RunConfig) -> Result<SikModel> {
    SikModel::read_from(open(&c.model_path)?)
}

fn load_artifacts(c: &RunConfig, chain: KinematicChain, with_dataset: bool) -> Result<Artifacts> {
    let model = load_model(c)?;
    let dict = PostureDictionary::read_from(open(&c.dict_path)?)?;
    let dataset = if with_dataset { Some(load_dataset(c)?) } else { None };
    if let Some(ds) = &dataset {
        if !model.dataset_hash.is_empty() && model.dataset_hash != ds.content_hash() {
            return Err(Error::ArtifactMismatch("model was trained on a different dataset".into()));
        }
    }
    Artifacts::new(chain, model, dict, dataset)
}

fn read_goal(c: &RunConfig, stdin: &mut dyn Read) -> Result<Goal> {
    match &c.goal {
        Some(g) => Goal::parse(g),
        None => {
            let mut text = String::new();
            stdin.read_to_string(&mut text)?;
            Goal::parse(text.trim())
        }
    }
}

fn solve_options(c: &RunConfig) -> SolveOptions {
    SolveOptions { selector: c.selector, kernel: c.kernel, unreachable_threshold: c.unreachable_threshold }
}

fn report_path(c: &RunConfig, experiment: &str) -> PathBuf {
    c.out_path.clone().unwrap_or_else(|| {
        let ext = match c.format {
            crate::eval::ReportFormat::Json => "json",
            crate::eval::ReportFormat::Csv => "csv",
        };
        PathBuf::from(format!("{experiment}.{ext}"))
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn results_json(results: &[SolveResult], unreachable: Option<bool>) -> serde_json::Value {
    serde_json::Value::Array(
        results
            .iter()
            .map(|r| {
                let mut v = r.to_json();
                if let Some(u) = unreachable {
                    v["unreachable"] = json!(u);
                }
                v
            })
            .collect(),
    )
}

fn execute(matches: &ArgMatches, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let c = load_config(sub)?;
    if let Some(jobs) = c.jobs {
        // Fails only when a pool already exists, e.g. a second in-process run.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let chain = c.load_chain()?;
    let status = |stderr: &mut dyn Write, v: serde_json::Value| -> Result<()> {
        writeln!(stderr, "{v}")?;
        Ok(())
    };
    match name {
        "collect" => {
            let mut count = 0;
            write_atomic(&c.dataset_path, |w| {
                count = collect_to_writer(&chain, c.step_degrees, w)?;
                Ok(())
            })?;
            status(stderr, json!({"records": count, "dataset": c.dataset_path}))?;
        }
        "train" => {
            for w in c.train.validate()?.into_iter().chain(c.arch.warnings()) {
                status(stderr, json!({ "warning": w }))?;
            }
            let dataset = load_dataset(&c)?;
            let spec = ModelSpec { mode: c.mode, goal_mode: c.goal_mode, arch: c.arch.clone() };
            let (model, log) = train(&dataset, &chain, &spec, &c.train, NoiseSource::Gaussian)?;
            write_atomic(&c.model_path, |w| model.write_to(w).map(drop))?;
            let curve = c.curve_path.clone().unwrap_or_else(|| with_suffix(&c.model_path, ".curve.csv"));
            write_atomic(&curve, |w| log.write_csv(w))?;
            status(
                stderr,
                json!({"model": c.model_path, "curve": curve, "final_loss": log.final_loss(), "model_hash": model.model_hash()}),
            )?;
        }
        "build-index" => {
            let dataset = load_dataset(&c)?;
            let mut model = load_model(&c)?;
            if model.chain_id != chain.chain_id() {
                return Err(Error::ArtifactMismatch("model was trained for a different chain".into()));
            }
            let (dict, _) = build_dictionary(&model, &dataset, c.resolution, c.train.lambda_distinct, c.seed)?;
            model.lambda = Some(dict.lambda);
            write_atomic(&c.dict_path, |w| dict.write_to(w).map(drop))?;
            write_atomic(&c.model_path, |w| model.write_to(w).map(drop))?;
            status(
                stderr,
                json!({"dict": c.dict_path, "entries": dict.len(), "indices": dict.total_indices(), "lambda": dict.lambda}),
            )?;
        }
        "solve" => {
            let goal = read_goal(&c, stdin)?;
            let artifacts = load_artifacts(&c, chain, false)?;
            let out = solve(&artifacts, &goal, &solve_options(&c))?;
            if out.unreachable {
                status(stderr, json!({"warning": "goal is far from every dictionary entry", "nn_distance": out.nn_distance}))?;
            }
            serde_json::to_writer_pretty(&mut *stdout, &results_json(&out.results, Some(out.unreachable)))?;
            writeln!(stdout)?;
        }
        "baseline" => {
            let goal = read_goal(&c, stdin)?;
            let results = baseline_multi(&chain, &goal, c.count, c.radius, c.seed, &DlsParams::default())?;
            serde_json::to_writer_pretty(&mut *stdout, &results_json(&results, None))?;
            writeln!(stdout)?;
        }
        "eval" => {
            let experiment = sub.get_one::<String>("experiment").expect("required").as_str();
            let needs_dataset = !matches!(experiment, "index-study") && !(experiment == "radius" && c.z.is_some());
            let artifacts = load_artifacts(&c, chain, needs_dataset)?;
            let opts = solve_options(&c);
            let mut report: EvalReport = match experiment {
                "accuracy" => run_accuracy(&artifacts, c.samples, c.seed, &opts)?,
                "diversity" => run_diversity(&artifacts, c.count, c.radius, c.seed, &DlsParams::default(), &opts)?,
                "radius" => run_radius_sweep(&artifacts, &c.radii, c.samples, c.z, c.seed, &opts)?,
                "dense" => run_dense_subspace(&artifacts, &c.dense_window()?, &c.train, c.samples, &opts)?.0,
                "timing" => run_timing(&artifacts, c.samples, c.seed, &opts)?,
                "index-study" => {
                    let goal = read_goal(&c, stdin)?;
                    let study = run_index_study(&artifacts, c.element, &c.sweep, &goal)?;
                    let base = report_path(&c, experiment);
                    let snaps = c.snapshots_path.clone().unwrap_or_else(|| with_suffix(&base, ".snapshots.csv"));
                    let scene = c.scene_path.clone().unwrap_or_else(|| with_suffix(&base, ".obj"));
                    write_atomic(&snaps, |w| study.write_snapshots_csv(w))?;
                    write_atomic(&scene, |w| study.write_scene_obj(w))?;
                    study.report
                }
                _ => unreachable!("clap restricts experiments"),
            };
            report.set("config", c.to_text().trim_end().replace('\n', "; "));
            let report = report.finish();
            let path = report_path(&c, experiment);
            write_atomic(&path, |w| report.emit(c.format, w))?;
            let mean = report.mean("all", "distance_error_cm");
            status(stderr, json!({"report": path, "rows": report.rows.len(), "mean_distance_error_cm": mean}))?;
        }
        _ => unreachable!("clap restricts subcommands"),
    }
    Ok(())
}

/// Runs the CLI and returns the process exit code. Failures print a JSON
/// error object to `stderr`.
pub fn run<I, T>(args: I, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e.render());
                return 0;
            }
            let _ = writeln!(stderr, "{}", json!({"error": {"kind": "usage", "message": e.render().to_string()}}));
            return 2;
        }
    };
    match execute(&matches, stdin, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "{}", json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
            1
        }
    }
}
