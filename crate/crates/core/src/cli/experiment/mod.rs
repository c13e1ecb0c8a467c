//! Packaged comparisons between a physics ground truth, surrogate variants
//! and the hybrid gray-box variant.
//!
//! A spec is a TOML file; relative paths inside it resolve against the
//! spec's directory. Every run writes `report.csv` (`variant,quantity,value,note`)
//! next to the trained models and the per-point solution tables.

mod composite;
mod masking;
mod sensitivity;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use super::csvio::{header, num, write_table};
use crate::graybox::GrayBoxSystem;
use crate::netlist::{FsLoader, LoadError, ModelLoader};
use crate::neural::{save_model, train, Architecture, Dataset, Mlp, Preset, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum Metric {
    MaxRelError,
    SensitivityError,
    ResidualNorm,
    UnknownCounts,
    WallTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Device macromodel: backprop sensitivities and a DC sweep.
    Sensitivity,
    /// Composite load against the constant-power surrogate.
    Composite,
    /// Recurrent macromodel replacing a dynamic device in a transient.
    Masking,
    /// Whole-system network against the hybrid, away from its training data.
    Blackbox,
}

/// Training data and schedule for the experiment's macromodel(s).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    /// Device statement in the physics netlist to learn.
    pub device: Option<String>,
    pub preset: Option<String>,
    /// Architecture string such as `"5,32,32,2:tanh"`, overriding the preset.
    pub arch: Option<String>,
    /// File name of the trained model inside the run directory.
    pub model: Option<String>,
    pub epochs: Option<usize>,
    pub samples: Option<usize>,
    pub grid: Option<Vec<usize>>,
    pub ranges: Option<Vec<[f64; 2]>>,
    /// Voltage magnitude and angle ranges for grid-side data (pu, rad).
    pub magnitude: Option<[f64; 2]>,
    pub angle: Option<[f64; 2]>,
    /// Transient data: number of runs, run length and hold time between steps (s).
    pub trajectories: Option<usize>,
    pub duration: Option<f64>,
    pub hold: Option<[f64; 2]>,
}

/// One exogenous input varied across DC solves.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub input: usize,
    pub from: f64,
    pub to: f64,
    pub points: usize,
    /// Unknown compared between variants, by display name (e.g. `v1.i`).
    pub probe: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JacobianSpec {
    pub ranges: Vec<[f64; 2]>,
    pub grid: Vec<usize>,
    /// Points this close to a region boundary are skipped.
    #[serde(default)]
    pub band: f64,
}

/// Composite load `capacitor + resistor + motor` whose parameters depend on
/// hidden exogenous features: `T_L = t_load[0] + t_load[1] u0 u1`,
/// `g = g[0] + g[1] u2`, `B_c = c[0] + c[1] u3`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    pub rating: f64,
    pub t_load: [f64; 2],
    pub g: [f64; 2],
    pub c: [f64; 2],
}

/// Operating points of the composite and black-box comparisons.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    /// Exogenous features at the reported operating points.
    pub u: Option<[f64; 4]>,
    /// Source magnitudes at which current and sensitivity are reported.
    pub voltages: Option<Vec<f64>>,
    /// Central-difference step for dI/dV.
    pub delta: Option<f64>,
    /// Feeder `[r, x]` for the two-bus cases.
    pub line: Option<[f64; 2]>,
    /// Random two-bus cases for the voltage-extreme table.
    pub cases: Option<usize>,
    /// Source magnitude range of the training cases.
    pub source: Option<[f64; 2]>,
    /// Offsets of the source magnitude beyond the training range.
    pub deviations: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub kind: ExperimentKind,
    pub metric: Metric,
    pub physics: Option<PathBuf>,
    pub hybrid: Option<PathBuf>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub train: TrainSpec,
    /// Second network of the experiment (forecaster or whole-system model).
    pub surrogate: Option<TrainSpec>,
    pub sweep: Option<SweepSpec>,
    pub jacobian: Option<JacobianSpec>,
    pub load: Option<LoadSpec>,
    pub compare: Option<CompareSpec>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut spec: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        spec.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(spec)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// Resolved variant netlist, `None` when absent from the spec or disk.
    fn variant_path(&self, p: &Option<PathBuf>) -> Option<PathBuf> {
        p.as_ref().map(|p| self.resolve(p)).filter(|p| p.is_file())
    }

    fn physics_path(&self) -> Result<PathBuf> {
        match &self.physics {
            Some(p) => {
                let full = self.resolve(p);
                anyhow::ensure!(full.is_file(), "physics netlist {} not found", full.display());
                Ok(full)
            }
            None => bail!("spec `{}` names no physics netlist", self.name),
        }
    }

    fn compare(&self) -> Result<&CompareSpec> {
        self.compare
            .as_ref()
            .with_context(|| format!("spec `{}` lacks a [compare] table", self.name))
    }

    fn load(&self) -> Result<&LoadSpec> {
        self.load
            .as_ref()
            .with_context(|| format!("spec `{}` lacks a [load] table", self.name))
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Overrides the spec's seed.
    pub seed: Option<u64>,
    pub quiet: bool,
    /// Repetitions behind each reported wall time (median).
    pub repeats: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("."),
            seed: None,
            quiet: false,
            repeats: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Ran,
    NotRun(String),
    Failed(String),
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Status::Ran => write!(f, "ran"),
            Status::NotRun(why) => write!(f, "not run: {why}"),
            Status::Failed(why) => write!(f, "failed: {why}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub variant: String,
    pub quantity: String,
    pub value: f64,
}

/// Boundary residuals of every converged hybrid solve, re-assembled after the solve.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ResidualLedger {
    pub solves: usize,
    pub max: f64,
}

impl ResidualLedger {
    pub fn record(&mut self, r: f64) {
        self.solves += 1;
        self.max = self.max.max(r);
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub name: String,
    pub metric: Metric,
    pub dir: PathBuf,
    pub rows: Vec<Row>,
    pub statuses: Vec<(String, Status)>,
    pub residuals: ResidualLedger,
    /// Files whose bytes depend only on the spec and seed.
    pub artifacts: Vec<PathBuf>,
}

impl Report {
    fn new(spec: &ExperimentSpec, dir: PathBuf) -> Self {
        Self {
            name: spec.name.clone(),
            metric: spec.metric,
            dir,
            rows: Vec::new(),
            statuses: Vec::new(),
            residuals: ResidualLedger::default(),
            artifacts: Vec::new(),
        }
    }

    pub fn push(&mut self, variant: &str, quantity: impl Into<String>, value: f64) {
        self.rows.push(Row {
            variant: variant.to_string(),
            quantity: quantity.into(),
            value,
        });
    }

    pub fn value(&self, variant: &str, quantity: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.quantity == quantity)
            .map(|r| r.value)
    }

    pub fn status(&self, variant: &str) -> Option<&Status> {
        self.statuses.iter().find(|(v, _)| v == variant).map(|(_, s)| s)
    }

    fn set_status(&mut self, variant: &str, status: Status) {
        self.statuses.retain(|(v, _)| v != variant);
        self.statuses.push((variant.to_string(), status));
    }

    fn artifact(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.artifacts.push(p.clone());
        p
    }

    fn write(&self) -> Result<PathBuf> {
        let path = self.dir.join("report.csv");
        let mut rows: Vec<Vec<String>> = self
            .statuses
            .iter()
            .map(|(v, s)| vec![v.clone(), "status".into(), String::new(), s.to_string()])
            .collect();
        rows.extend(
            self.rows
                .iter()
                .map(|r| vec![r.variant.clone(), r.quantity.clone(), num(r.value), String::new()]),
        );
        rows.push(vec![
            "hybrid".into(),
            "max_boundary_residual".into(),
            num(self.residuals.max),
            format!("{} solves", self.residuals.solves),
        ]);
        write_table(&path, &header(&["variant", "quantity", "value", "note"]), rows)?;
        Ok(path)
    }

    /// Human-readable table.
    pub fn render(&self) -> String {
        let mut s = format!("experiment {} ({:?})\n", self.name, self.metric);
        for (v, st) in &self.statuses {
            s += &format!("  {v:<10} {st}\n");
        }
        for r in &self.rows {
            s += &format!("  {:<10} {:<28} {:.6e}\n", r.variant, r.quantity, r.value);
        }
        s += &format!(
            "  hybrid     max boundary residual {:.3e} over {} solves\n",
            self.residuals.max, self.residuals.solves
        );
        s
    }
}

/// Serves freshly trained models by file name and defers everything else to disk.
struct TrainedLoader {
    trained: HashMap<String, Arc<Mlp>>,
    fs: FsLoader,
}

impl TrainedLoader {
    fn new(netlist: &Path, trained: &[(String, Arc<Mlp>)]) -> Self {
        Self {
            trained: trained.iter().cloned().collect(),
            fs: FsLoader::for_netlist(netlist),
        }
    }
}

impl ModelLoader for TrainedLoader {
    fn model(&mut self, path: &str) -> Result<Arc<Mlp>, LoadError> {
        match self.trained.get(path.trim_start_matches("./")) {
            Some(m) => Ok(Arc::clone(m)),
            None => self.fs.model(path),
        }
    }

    fn text(&mut self, path: &str) -> Result<String, LoadError> {
        self.fs.text(path)
    }
}

/// Runs `f` `repeats` times; returns the last result and the median duration.
pub fn median_wall<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, Duration)> {
    let mut times = Vec::with_capacity(repeats.max(1));
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        last = Some(f()?);
        times.push(t.elapsed());
    }
    times.sort();
    Ok((last.expect("at least one run"), times[times.len() / 2]))
}

/// Fits normalization, trains, saves the model and its per-epoch loss.
fn train_model(
    train_spec: &TrainSpec,
    default_preset: Preset,
    data: &Dataset,
    seed: u64,
    report: &mut Report,
    variant: &str,
    default_name: &str,
) -> Result<(String, Arc<Mlp>)> {
    let preset: Preset = match &train_spec.preset {
        Some(p) => p.parse().map_err(anyhow::Error::msg)?,
        None => default_preset,
    };
    let arch: Architecture = match &train_spec.arch {
        Some(a) => a.parse().map_err(anyhow::Error::msg)?,
        None => preset.architecture(),
    };
    let mut cfg: TrainConfig = preset.train_config(seed);
    if let Some(e) = train_spec.epochs {
        cfg.epochs = e;
    }
    let mut net = arch.build(seed)?;
    net.fit_normalization(data)?;
    let out = train(net, data, &cfg)?;
    let (mae, mse) = data.errors(&out.model)?;
    report.push(variant, "train_mae", mae);
    report.push(variant, "train_mse", mse);
    report.push(variant, "train_samples", data.len() as f64);
    let name = train_spec.model.clone().unwrap_or_else(|| default_name.to_string());
    let model_path = report.artifact(&name);
    save_model(&out.model, &model_path)?;
    let stem = Path::new(&name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    let loss_path = report.artifact(&format!("{stem}_loss.csv"));
    write_table(
        &loss_path,
        &header(&["epoch", "loss"]),
        out.loss_history
            .iter()
            .enumerate()
            .map(|(k, l)| vec![(k + 1).to_string(), num(*l)]),
    )?;
    Ok((name, Arc::new(out.model)))
}

fn push_counts(report: &mut Report, variant: &str, sys: &GrayBoxSystem) {
    report.push(variant, "n_internal", sys.n_internal() as f64);
    report.push(variant, "n_boundary", sys.n_boundary() as f64);
}

/// Runs one spec end to end and writes its report.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<Report> {
    let dir = opts.out_dir.join(&spec.name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let seed = opts.seed.or(spec.seed).unwrap_or(0);
    let mut report = Report::new(spec, dir);
    match spec.kind {
        ExperimentKind::Sensitivity => sensitivity::run(spec, opts, seed, &mut report)?,
        ExperimentKind::Composite => composite::run_composite(spec, opts, seed, &mut report)?,
        ExperimentKind::Blackbox => composite::run_blackbox(spec, opts, seed, &mut report)?,
        ExperimentKind::Masking => masking::run(spec, opts, seed, &mut report)?,
    }
    report.write()?;
    Ok(report)
}

/// Runs a spec file, looking it up by name in `experiments/` when `spec` is not a path.
pub fn run_named(spec: &str, opts: &RunOptions) -> Result<Report> {
    let direct = PathBuf::from(spec);
    let path = if direct.is_file() {
        direct
    } else {
        let by_name = PathBuf::from("experiments").join(format!("{spec}.toml"));
        anyhow::ensure!(
            by_name.is_file(),
            "no experiment spec at `{spec}` or {}",
            by_name.display()
        );
        by_name
    };
    run_experiment(&ExperimentSpec::from_file(&path)?, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_runs() {
        let mut calls = 0;
        let (v, _) = median_wall(5, || {
            calls += 1;
            Ok(calls)
        })
        .unwrap();
        assert_eq!((v, calls), (5, 5));
    }

    #[test]
    fn spec_rejects_unknown_keys() {
        let bad = "name='x'\nkind='sensitivity'\nmetric='WallTime'\nbogus=1\n";
        assert!(toml::from_str::<ExperimentSpec>(bad).is_err());
        let ok = "name='x'\nkind='masking'\nmetric='UnknownCounts'\n[train]\nmodel='m.gsnn'\n";
        let s: ExperimentSpec = toml::from_str(ok).unwrap();
        assert_eq!(s.kind, ExperimentKind::Masking);
        assert_eq!(s.train.model.as_deref(), Some("m.gsnn"));
    }
}
