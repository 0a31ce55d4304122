//! End-to-end runs: configuration tree, per-run directories, manifests, and
//! the train / reconstruct / sweep / linear-analysis commands.
//!
//! Every command writes `manifest.json` next to its artifacts. The manifest
//! stores the effective configuration and a SHA-256 of every artifact, so
//! [`replay`] can re-run it and check the outputs byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataio::{
    artifact_path, export_images, load_cifar10, partition_counts, read_json, read_weights, select_binary,
    synth_dataset, write_csv, write_dataset_csv, write_json, write_weights, Geometry, WeightsHeader,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{
    fraction_closer_to_init, grid_aggregate, grid_csv_rows, mean_nn_l2, nn_csv_rows, nn_table, GridReferences,
    GRID_CSV_HEADER, NN_CSV_HEADER,
};
use crate::initsch::{grid, make_init, InitKind, InitScheme, InitSources, MixScheme, DEFAULT_LAMBDAS};
use crate::linear_analysis::{
    check_stationarity, construct_collapse, construct_interpolating_inputs, push_to_margin,
    underdetermination_report, Instance, UnderdeterminationReport, COLLAPSE_MARGIN,
};
use crate::model::{Activation, Dataset, LossKind, LossSpec, ModelSpec, ParamVector};
use crate::numcore::Matrix;
use crate::recon_bilevel::{reconstruct, trace_csv_rows, Method, ReconConfig, ReconResult, TRACE_CSV_HEADER};
use crate::recon_gradpen::{penalty, reconstruct_gradpen, GradPenConfig};
use crate::trainer::{train, TrainConfig};

/// Environment variable naming the output root directory.
pub const OUT_DIR_ENV: &str = "RECON_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "runs";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Cifar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Training samples.
    pub n: usize,
    /// Held-out samples, the pool for partition initializations.
    pub holdout: usize,
    /// Input dimension of synthetic data.
    pub k: usize,
    pub separation: f64,
    pub cifar_paths: Vec<PathBuf>,
    /// CIFAR-10 classes mapped to labels +1 and −1.
    pub classes: [u8; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            n: 12,
            holdout: 12,
            k: 48,
            separation: 1.0,
            cifar_paths: Vec::new(),
            classes: [0, 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Affine,
    OneHidden,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActKind {
    Softplus,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ArchKind,
    /// Hidden widths; empty means one layer of width `2K`.
    pub hidden: Vec<usize>,
    pub activation: ActKind,
    pub beta: f64,
    pub loss: LossKind,
    pub weight_decay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: ArchKind::Affine,
            hidden: Vec::new(),
            activation: ActKind::Softplus,
            beta: 20.0,
            loss: LossKind::Logistic,
            weight_decay: 1e-4,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize) -> Result<ModelSpec> {
        let act = match self.activation {
            ActKind::Softplus => Activation::Softplus { beta: self.beta },
            ActKind::Relu => Activation::Relu,
        };
        let widths = if self.hidden.is_empty() { vec![2 * input_dim] } else { self.hidden.clone() };
        let spec = match self.arch {
            ArchKind::Affine => ModelSpec::affine(input_dim),
            ArchKind::OneHidden => {
                if widths.len() != 1 {
                    return Err(Error::Config(format!("one-hidden model needs one width, got {widths:?}")));
                }
                ModelSpec::one_hidden(input_dim, widths[0], act)
            }
            ArchKind::Mlp => ModelSpec::mlp(input_dim, widths, act),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn loss(&self) -> Result<LossSpec> {
        let loss = LossSpec { kind: self.loss, weight_decay: self.weight_decay };
        loss.validate()?;
        Ok(loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitChoice {
    /// U(0, 1) entries.
    Random,
    Gaussian,
    Gt,
    Partition,
    Mix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconSettings {
    pub method: Method,
    pub init: InitChoice,
    /// Standard deviation of the Gaussian initialization.
    pub sigma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub bilevel: ReconConfig,
    pub gradpen: GradPenConfig,
}

impl Default for ReconSettings {
    fn default() -> Self {
        Self {
            method: Method::Bilevel,
            init: InitChoice::Random,
            sigma: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            bilevel: ReconConfig::default(),
            gradpen: GradPenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub lambdas: Vec<f64>,
    pub methods: Vec<Method>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self { lambdas: DEFAULT_LAMBDAS.to_vec(), methods: vec![Method::Bilevel, Method::GradPen] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construct {
    Collapse,
    Interpolate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSettings {
    pub construct: Vec<Construct>,
    pub margin: f64,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self { construct: Vec::new(), margin: COLLAPSE_MARGIN }
    }
}

/// The full configuration tree of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub recon: ReconSettings,
    pub sweep: SweepSettings,
    pub analysis: AnalysisSettings,
    /// Weights file to attack or analyse; trained in-process when absent.
    pub weights: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            recon: ReconSettings::default(),
            sweep: SweepSettings::default(),
            analysis: AnalysisSettings::default(),
            weights: None,
        }
    }
}

impl RunConfig {
    /// Defaults overridden by a (possibly partial) JSON tree. Unknown keys
    /// are rejected.
    pub fn from_json(overrides: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(RunConfig::default())?;
        merge(&mut base, overrides, "")?;
        serde_json::from_value(base).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&v)
    }

    /// The training stage uses the master seed unless the config says
    /// otherwise.
    fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

fn merge(base: &mut Value, over: &Value, at: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            // a different enum variant replaces the whole object
            if o.get("kind").is_some_and(|k| Some(k) != b.get("kind")) {
                *b = o.clone();
                return Ok(());
            }
            for (key, v) in o {
                let path = if at.is_empty() { key.clone() } else { format!("{at}.{key}") };
                match b.get_mut(key) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(Error::Config(format!("unknown config key `{path}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Training data and the disjoint holdout pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Dataset,
    pub holdout: Dataset,
    pub geometry: Geometry,
}

impl Corpus {
    /// SHA-256 over both splits (inputs then labels, little-endian f64).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in [&self.train, &self.holdout] {
            h.update((d.len() as u64).to_le_bytes());
            h.update((d.dim() as u64).to_le_bytes());
            for v in d.inputs.as_slice().iter().chain(&d.labels) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn load_corpus(cfg: &DataConfig, seed: u64) -> Result<Corpus> {
    let total = cfg.n + cfg.holdout;
    let (all, geometry) = match cfg.source {
        DataSource::Synth => (synth_dataset(total, cfg.k, cfg.separation, seed)?, Geometry::infer(cfg.k)),
        DataSource::Cifar => {
            if cfg.cifar_paths.is_empty() {
                return Err(Error::Config("CIFAR-10 source needs at least one batch file".into()));
            }
            if total % 2 != 0 {
                return Err(Error::Config(format!("n + holdout must be even for a balanced pair, got {total}")));
            }
            let set = load_cifar10(&cfg.cifar_paths)?;
            (select_binary(&set, cfg.classes[0], cfg.classes[1], total / 2, seed)?, Geometry::CIFAR)
        }
    };
    let part = partition_counts(&all, cfg.n, seed)?;
    Ok(Corpus { train: part.train, holdout: part.holdout, geometry })
}

/// Which command a manifest belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Train,
    Reconstruct,
    Sweep,
    LinearAnalysis,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Reconstruct => "reconstruct",
            Command::Sweep => "sweep",
            Command::LinearAnalysis => "linear-analysis",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    pub config: RunConfig,
    pub master_seed: u64,
    pub dataset_fingerprint: String,
    /// SHA-256 of input files (the weights file, when one is attacked).
    pub inputs: BTreeMap<String, String>,
    /// Artifact path relative to the run directory → SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub tool_version: String,
    pub created: String,
}

/// Where a finished run left its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    /// Contents of `summary.json`.
    pub summary: Value,
}

/// Output root: explicit argument, else [`OUT_DIR_ENV`], else `runs`.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Creates `<root>/<timestamp>-seed<seed>-<command>`, adding a counter when
/// the name is taken.
pub fn create_run_dir(root: &Path, command: Command, seed: u64) -> Result<(PathBuf, String)> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let now = chrono::Local::now();
    let stamp = now.format("%Y%m%d-%H%M%S").to_string();
    let base = format!("{stamp}-seed{seed}-{}", command.name());
    for i in 1.. {
        let name = if i == 1 { base.clone() } else { format!("{base}-{i}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok((dir, now.to_rfc3339())),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("an unbounded counter always finds a free name")
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes every file under `dir` except the manifest itself.
fn hash_artifacts(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walked below root");
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                if key != MANIFEST_FILE {
                    out.insert(key, sha256_file(&path)?);
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

struct Run {
    command: Command,
    cfg: RunConfig,
    dir: PathBuf,
    created: String,
    inputs: BTreeMap<String, String>,
}

impl Run {
    fn start(command: Command, cfg: &RunConfig, out_root: &Path) -> Result<Self> {
        let (dir, created) = create_run_dir(out_root, command, cfg.seed)?;
        Ok(Self { command, cfg: cfg.clone(), dir, created, inputs: BTreeMap::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn finish(self, corpus: &Corpus, summary: Value) -> Result<RunOutcome> {
        write_json(&self.path("summary.json"), &summary)?;
        let manifest = RunManifest {
            command: self.command,
            master_seed: self.cfg.seed,
            config: self.cfg,
            dataset_fingerprint: corpus.fingerprint(),
            inputs: self.inputs,
            artifacts: hash_artifacts(&self.dir)?,
            tool_version: TOOL_VERSION.into(),
            created: self.created,
        };
        write_json(&self.dir.join(MANIFEST_FILE), &manifest)?;
        Ok(RunOutcome { dir: self.dir, manifest, summary })
    }
}

/// θ* for a run: read from `cfg.weights`, or trained on the corpus.
struct Released {
    spec: ModelSpec,
    loss: LossSpec,
    theta: ParamVector,
}

fn released_weights(run: &mut Run, corpus: &Corpus) -> Result<Released> {
    match run.cfg.weights.clone() {
        Some(path) => {
            let (header, theta) = read_weights(&path)?;
            if header.model.input_dim != corpus.train.dim() {
                return Err(Error::Shape(format!(
                    "weights expect {} inputs, the data has {}",
                    header.model.input_dim,
                    corpus.train.dim()
                )));
            }
            run.inputs.insert("weights".into(), sha256_file(&path)?);
            Ok(Released { spec: header.model, loss: header.loss, theta })
        }
        None => {
            let spec = run.cfg.model.spec(corpus.train.dim())?;
            let loss = run.cfg.model.loss()?;
            let report = train(&spec, &corpus.train, &loss, &run.cfg.train_config())?;
            if !report.converged {
                return Err(Error::NotConverged {
                    solver: "training",
                    iters: report.iters_used,
                    residual: report.final_grad_norm,
                    tol: run.cfg.train.grad_tol,
                });
            }
            write_weights(&run.path("weights.bin"), &WeightsHeader::new(spec.clone(), loss, run.cfg.seed), &report.theta_star)?;
            Ok(Released { spec, loss, theta: report.theta_star })
        }
    }
}

fn fmt(v: f64) -> String {
    v.to_string()
}

pub fn cmd_train(cfg: &RunConfig, out_root: &Path) -> Result<RunOutcome> {
    let run = Run::start(Command::Train, cfg, out_root)?;
    let corpus = load_corpus(&cfg.data, cfg.seed)?;
    let spec = cfg.model.spec(corpus.train.dim())?;
    let loss = cfg.model.loss()?;
    let report = train(&spec, &corpus.train, &loss, &cfg.train_config())?;
    write_weights(&run.path("weights.bin"), &WeightsHeader::new(spec.clone(), loss, cfg.seed), &report.theta_star)?;
    let rows: Vec<Vec<String>> = report.energy_trace.iter().enumerate().map(|(i, e)| vec![i.to_string(), fmt(*e)]).collect();
    write_csv(&run.path("train_trace.csv"), &["iter", "energy"], &rows)?;
    write_dataset_csv(&run.path("train.csv"), &corpus.train)?;
    write_dataset_csv(&run.path("holdout.csv"), &corpus.holdout)?;
    let summary = serde_json::json!({
        "converged": report.converged,
        "final_grad_norm": report.final_grad_norm,
        "iters": report.iters_used,
        "newton_steps": report.newton_steps_used,
        "energy": report.energy_trace.last(),
        "n_params": spec.param_count(),
    });
    if !report.converged {
        // artifacts stay on disk for inspection
        run.finish(&corpus, summary)?;
        return Err(Error::NotConverged {
            solver: "training",
            iters: report.iters_used,
            residual: report.final_grad_norm,
            tol: cfg.train.grad_tol,
        });
    }
    run.finish(&corpus, summary)
}

fn init_kind(s: &ReconSettings) -> Result<InitKind> {
    Ok(match s.init {
        InitChoice::Random => InitKind::Uniform01,
        InitChoice::Gaussian => InitKind::Gaussian { sigma: s.sigma },
        InitChoice::Gt => InitKind::GroundTruth,
        InitChoice::Partition => InitKind::Partition,
        InitChoice::Mix => InitKind::Mix(MixScheme::new(s.lambda1, s.lambda2)?),
    })
}

fn attack(method: Method, w: &Released, corpus: &Corpus, x0: &Matrix, s: &ReconSettings) -> Result<ReconResult> {
    let y = &corpus.train.labels;
    match method {
        Method::Bilevel => reconstruct(&w.spec, &w.theta, y, x0, &w.loss, &s.bilevel),
        Method::GradPen => reconstruct_gradpen(&w.spec, &w.theta, y, x0, &w.loss, &s.gradpen),
    }
}

pub fn cmd_reconstruct(cfg: &RunConfig, out_root: &Path) -> Result<RunOutcome> {
    let mut run = Run::start(Command::Reconstruct, cfg, out_root)?;
    let corpus = load_corpus(&cfg.data, cfg.seed)?;
    let w = released_weights(&mut run, &corpus)?;
    let scheme = InitScheme::new(init_kind(&cfg.recon)?, cfg.seed);
    let sources = InitSources { ground_truth: Some(&corpus.train), partition: Some(&corpus.holdout) };
    let init = make_init(&scheme, corpus.train.inputs.shape(), sources)?;
    let res = attack(cfg.recon.method, &w, &corpus, &init.x0, &cfg.recon)?;

    let rec = corpus.train.with_inputs(res.x_rec.clone())?;
    write_dataset_csv(&run.path("x_rec.csv"), &rec)?;
    write_dataset_csv(&run.path("x0.csv"), &corpus.train.with_inputs(init.x0.clone())?)?;
    write_csv(&run.path("trace.csv"), &TRACE_CSV_HEADER, &trace_csv_rows(&res.trace))?;
    let table = nn_table(&res.x_rec, &corpus.train.inputs)?;
    let identity: Vec<usize> = (0..rec.len()).collect();
    write_csv(&run.path("nn.csv"), &NN_CSV_HEADER, &nn_csv_rows(&table, Some(&identity))?)?;
    export_images(&res.x_rec, corpus.geometry, &run.path("images"))?;

    let final_objective = res.trace.last().map(|r| r.objective);
    let summary = serde_json::json!({
        "method": res.method,
        "init": cfg.recon.init,
        "theta_dist": res.theta_dist,
        "converged": res.converged,
        "stop_reason": res.stop_reason,
        "iters": res.iters,
        "final_objective": final_objective,
        "mean_nn_l2_train": mean_nn_l2(&res.x_rec, &corpus.train.inputs)?,
        "mean_nn_l2_init": mean_nn_l2(&res.x_rec, &init.x0)?,
        "mean_abs_diff_gt": mean_abs_diff(&res.x_rec, &corpus.train.inputs)?,
        "fraction_closer_to_init": fraction_closer_to_init(&res.x_rec, &init.x0, &corpus.train.inputs)?,
        "partition_assignment": init.assignment,
        "solver": res.settings,
    });
    run.finish(&corpus, summary)
}

/// Mean per-entry `|a − b|`.
pub fn mean_abs_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(d.as_slice().iter().map(|v| v.abs()).sum::<f64>() / d.as_slice().len().max(1) as f64)
}

/// Per-cell results of a sweep for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCellRun {
    pub lambda1: f64,
    pub lambda2: f64,
    pub theta_dist: f64,
    pub converged: bool,
}

pub fn cmd_sweep(cfg: &RunConfig, out_root: &Path) -> Result<RunOutcome> {
    let mut run = Run::start(Command::Sweep, cfg, out_root)?;
    let corpus = load_corpus(&cfg.data, cfg.seed)?;
    let w = released_weights(&mut run, &corpus)?;
    let schemes = grid(&cfg.sweep.lambdas)?;
    if cfg.sweep.methods.is_empty() {
        return Err(Error::Config("sweep needs at least one method".into()));
    }
    let shape = corpus.train.inputs.shape();
    let sources = InitSources { ground_truth: Some(&corpus.train), partition: Some(&corpus.holdout) };
    // every cell shares run index 0, so all cells mix the same partition
    // rows and the same noise; the pure mixes recover those two references
    let pure = |l1: f64, l2: f64| -> Result<Matrix> {
        Ok(make_init(&InitScheme::new(InitKind::Mix(MixScheme::new(l1, l2)?), cfg.seed), shape, sources)?.x0)
    };
    let x_part = pure(0.0, 1.0)?;
    let x_rnd = pure(0.0, 0.0)?;
    let refs = GridReferences { ground_truth: &corpus.train.inputs, partition: &x_part, random: &x_rnd };

    let jobs: Vec<(Method, MixScheme)> =
        cfg.sweep.methods.iter().flat_map(|&m| schemes.iter().map(move |&s| (m, s))).collect();
    let results: Vec<Result<ReconResult>> = jobs
        .par_iter()
        .map(|&(method, scheme)| {
            let x0 = make_init(&InitScheme::new(InitKind::Mix(scheme), cfg.seed), shape, sources)?.x0;
            attack(method, &w, &corpus, &x0, &cfg.recon)
        })
        .collect();

    let mut summary = serde_json::Map::new();
    let mut failure = None;
    for &method in &cfg.sweep.methods {
        let name = match method {
            Method::Bilevel => "bilevel",
            Method::GradPen => "gradpen",
        };
        let mut runs = Vec::new();
        let mut cells = Vec::new();
        for ((m, scheme), res) in jobs.iter().zip(&results) {
            if *m != method {
                continue;
            }
            match res {
                Ok(r) => {
                    runs.push((*scheme, r.x_rec.clone()));
                    cells.push(SweepCellRun {
                        lambda1: scheme.lambda1,
                        lambda2: scheme.lambda2,
                        theta_dist: r.theta_dist,
                        converged: r.converged,
                    });
                }
                Err(e) if failure.is_none() => {
                    failure = Some(format!("{name} cell λ1={} λ2={}: {e}", scheme.lambda1, scheme.lambda2));
                }
                Err(_) => {}
            }
        }
        let done: Vec<MixScheme> = runs.iter().map(|(s, _)| *s).collect();
        let grid_cells = grid_aggregate(&done, &runs, refs)?;
        let file = if failure.is_some() { format!("grid_{name}.partial.csv") } else { format!("grid_{name}.csv") };
        write_csv(&run.path(&file), &GRID_CSV_HEADER, &grid_csv_rows(&grid_cells))?;
        summary.insert(name.into(), serde_json::json!({ "grid_csv": file, "cells": cells }));
    }
    if let Some(msg) = failure {
        let dir = run.dir.display().to_string();
        run.finish(&corpus, Value::Object(summary))?;
        return Err(Error::Numeric(format!("{msg}; partial results in {dir}")));
    }
    run.finish(&corpus, Value::Object(summary))
}

/// JSON report of `linear-analysis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub stationarity_residual: f64,
    pub underdetermination: UnderdeterminationReport,
    pub collapse: Option<CollapseReport>,
    pub interpolation: Option<InterpolationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub dataset: String,
    /// Holdout row the seed started from.
    pub seed_row: usize,
    pub label: f64,
    pub margin: f64,
    /// Penalty without weight decay; the verified quantity.
    pub penalty: f64,
    /// Penalty including the `ρθ*` term, which no dataset can remove.
    pub penalty_regularized: f64,
    /// Distance from the repeated row to its nearest training sample.
    pub nn_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationReport {
    pub dataset: String,
    /// Squared-error penalty without weight decay.
    pub penalty: f64,
    pub max_abs_residual: f64,
}

pub fn cmd_linear_analysis(cfg: &RunConfig, out_root: &Path) -> Result<RunOutcome> {
    let mut run = Run::start(Command::LinearAnalysis, cfg, out_root)?;
    let corpus = load_corpus(&cfg.data, cfg.seed)?;
    let w = released_weights(&mut run, &corpus)?;
    if !w.spec.is_affine() {
        return Err(Error::Config("linear analysis needs an affine model".into()));
    }
    let report = analyse(&w.spec, &w.theta, &w.loss, &corpus, &cfg.analysis, &run.dir)?;
    let summary = serde_json::to_value(&report)?;
    write_json(&run.path("report.json"), &report)?;
    run.finish(&corpus, summary)
}

/// Stationarity, equation counts, and the requested constructions; datasets
/// are written into `dir`.
pub fn analyse(
    spec: &ModelSpec,
    theta: &ParamVector,
    loss: &LossSpec,
    corpus: &Corpus,
    settings: &AnalysisSettings,
    dir: &Path,
) -> Result<AnalysisReport> {
    let train = &corpus.train;
    let residual = check_stationarity(train, theta, loss)?;
    let under = underdetermination_report(
        train.len(),
        train.dim(),
        1,
        Some(Instance { data: train, theta_star: theta, loss }),
    )?;
    let mut report = AnalysisReport { stationarity_residual: residual, underdetermination: under, collapse: None, interpolation: None };
    for c in &settings.construct {
        match c {
            Construct::Collapse => report.collapse = Some(collapse_from_holdout(spec, theta, loss, corpus, settings.margin, dir)?),
            Construct::Interpolate => {
                let x = construct_interpolating_inputs(theta, &train.labels, None)?;
                let data = train.with_inputs(x)?;
                let z = crate::model::forward(spec, theta, &data.inputs)?;
                let max_abs_residual = z.iter().zip(&data.labels).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let p = penalty(spec, theta, &data, &LossSpec::mse(0.0))?;
                write_dataset_csv(&artifact_path(dir, "interpolation.csv")?, &data)?;
                report.interpolation =
                    Some(InterpolationReport { dataset: "interpolation.csv".into(), penalty: p, max_abs_residual });
            }
        }
    }
    Ok(report)
}

/// Collapse dataset seeded from the first holdout row the model classifies
/// correctly, pushed out to the margin.
fn collapse_from_holdout(
    spec: &ModelSpec,
    theta: &ParamVector,
    loss: &LossSpec,
    corpus: &Corpus,
    margin: f64,
    dir: &Path,
) -> Result<CollapseReport> {
    let logits = crate::model::forward(spec, theta, &corpus.holdout.inputs)?;
    let row = (0..corpus.holdout.len())
        .find(|&i| corpus.holdout.labels[i] * logits[i] > 0.0)
        .ok_or_else(|| Error::Numeric("no holdout sample is classified correctly".into()))?;
    let y = corpus.holdout.labels[row];
    let x = push_to_margin(spec, theta, corpus.holdout.inputs.row(row), y, margin)?;
    let n = corpus.train.len();
    let c = construct_collapse(&x, spec, theta, y, n, &loss.data_term(), margin)?;
    let penalty_regularized = penalty(spec, theta, &c.data, loss)?;
    let nn = crate::evalmetrics::nearest_neighbor(0, &x, &corpus.train.inputs)?;
    write_dataset_csv(&artifact_path(dir, "collapse.csv")?, &c.data)?;
    Ok(CollapseReport {
        dataset: "collapse.csv".into(),
        seed_row: row,
        label: y,
        margin: c.margin,
        penalty: c.penalty,
        penalty_regularized,
        nn_distance: nn.l2,
    })
}

pub fn run_command(command: Command, cfg: &RunConfig, out_root: &Path) -> Result<RunOutcome> {
    match command {
        Command::Train => cmd_train(cfg, out_root),
        Command::Reconstruct => cmd_reconstruct(cfg, out_root),
        Command::Sweep => cmd_sweep(cfg, out_root),
        Command::LinearAnalysis => cmd_linear_analysis(cfg, out_root),
    }
}

/// Re-runs a manifest into a fresh run directory and checks that every
/// recorded artifact, input, and the dataset fingerprint are reproduced.
pub fn replay(manifest_path: &Path, out_root: &Path) -> Result<RunOutcome> {
    let old: RunManifest = read_json(manifest_path)?;
    if let (Some(path), Some(want)) = (&old.config.weights, old.inputs.get("weights")) {
        let got = sha256_file(path)?;
        if &got != want {
            return Err(Error::Replay(format!("weights file {} changed since the recorded run", path.display())));
        }
    }
    let new = run_command(old.command, &old.config, out_root)?;
    if new.manifest.dataset_fingerprint != old.dataset_fingerprint {
        return Err(Error::Replay("dataset fingerprint differs".into()));
    }
    let diffs: Vec<&String> = old
        .artifacts
        .iter()
        .filter(|(k, v)| new.manifest.artifacts.get(*k) != Some(*v))
        .map(|(k, _)| k)
        .chain(new.manifest.artifacts.keys().filter(|k| !old.artifacts.contains_key(*k)))
        .collect();
    if !diffs.is_empty() {
        return Err(Error::Replay(format!(
            "{} artifact(s) differ, first {}; replay in {}",
            diffs.len(),
            diffs[0],
            new.dir.display()
        )));
    }
    Ok(new)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_merges_over_defaults() {
        let v = serde_json::json!({ "seed": 7, "data": { "n": 4 }, "train": { "theta_init": { "kind": "gaussian", "sigma": 0.5 } } });
        let cfg = RunConfig::from_json(&v).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.n, 4);
        assert_eq!(cfg.data.k, 48);
        assert_eq!(cfg.train.theta_init, crate::trainer::ThetaInit::Gaussian { sigma: 0.5 });
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = RunConfig::from_json(&serde_json::json!({ "data": { "nn": 4 } })).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("data.nn")));
    }

    #[test]
    fn config_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn corpus_is_deterministic_and_disjoint() {
        let cfg = DataConfig::default();
        let a = load_corpus(&cfg, 3).unwrap();
        let b = load_corpus(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), load_corpus(&cfg, 4).unwrap().fingerprint());
        assert_eq!((a.train.len(), a.holdout.len()), (12, 12));
        for r in a.holdout.inputs.row_iter() {
            assert!(a.train.inputs.row_iter().all(|t| t != r));
        }
    }

    #[test]
    fn run_dirs_do_not_collide() {
        let tmp = tempfile::tempdir().unwrap();
        let (a, _) = create_run_dir(tmp.path(), Command::Train, 1).unwrap();
        let (b, _) = create_run_dir(tmp.path(), Command::Train, 1).unwrap();
        assert_ne!(a, b);
        let name = a.file_name().unwrap().to_string_lossy().to_string();
        assert!(name.ends_with("-seed1-train"));
    }

    #[test]
    fn one_hidden_defaults_to_twice_the_input_width() {
        let cfg = ModelConfig { arch: ArchKind::OneHidden, ..ModelConfig::default() };
        assert_eq!(cfg.spec(48).unwrap().hidden_widths(), vec![96]);
    }
}
