//! Command-line front end.
//!
//! Exit codes: 0 success, 1 numerical or runtime failure, 2 usage error.
//! Relative output paths resolve against `--out-dir`.

pub mod csvio;
pub mod experiment;
pub mod jac;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use crate::devices::{sweep_dataset, Diode, Mosfet, Sampling, SweepDevice};
use crate::netlist::{parse, prepare, FsLoader, Simulation};
use crate::neural::{load_model, save_model, train, Architecture, Preset, TrainConfig};
use crate::solvers::SolverError;
use csvio::{header, num, read_dataset, write_dataset, write_table};
use experiment::{median_wall, run_named, RunOptions};
use jac::{check_jacobian, grid_points, near_boundary};

#[derive(Debug, Parser)]
#[command(
    name = "graysim",
    version,
    about = "Hybrid physics/neural circuit and grid simulation"
)]
pub struct Cli {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Suppress the human-readable summary.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate a device characteristic as a training dataset.
    GenData(GenDataArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Steady-state solve of a netlist.
    Dc(SolveArgs),
    /// Transient solve of a netlist.
    Tran(SolveArgs),
    /// Compare a model's input Jacobian with the device derivatives.
    CheckJac(CheckJacArgs),
    /// Run a packaged experiment spec (path or name under `experiments/`).
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DeviceKind {
    Diode,
    Mosfet,
}

#[derive(Debug, Args)]
pub struct DeviceArgs {
    #[arg(long, value_enum)]
    pub device: DeviceKind,
    /// Diode saturation current (A).
    #[arg(long = "is", default_value_t = 1e-10)]
    pub i_sat: f64,
    /// Diode thermal voltage times ideality (V).
    #[arg(long, default_value_t = 0.06)]
    pub vt: f64,
    /// MOSFET gain factor (A/V^2).
    #[arg(long, default_value_t = 4e-4)]
    pub k: f64,
    #[arg(long, default_value_t = 0.4)]
    pub vth: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Input range `lo:hi`, once per device input (default 0:1).
    #[arg(long = "range", value_parser = parse_range)]
    pub ranges: Vec<(f64, f64)>,
    /// Number of random points.
    #[arg(long)]
    pub n: Option<usize>,
    /// Grid counts such as `50x50`.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<GridCounts>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub device: DeviceArgs,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("shape").required(true).multiple(true).args(["preset", "arch"])))]
pub struct TrainArgs {
    /// Dataset CSV (`in_0,...,out_0,...`).
    #[arg(long)]
    pub data: PathBuf,
    /// diode, mosfet, pq, motor or load.
    #[arg(long)]
    pub preset: Option<String>,
    /// Architecture such as `5,32,32,2:tanh`; overrides the preset's.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Model file to write.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Per-epoch loss CSV (default: `<model stem>_loss.csv`).
    #[arg(long)]
    pub loss: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    pub netlist: PathBuf,
    /// Solution CSV (default `dc.csv` or `tran.csv`).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Runs behind the reported wall time (median).
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
}

#[derive(Debug, Args)]
pub struct CheckJacArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub device: DeviceArgs,
    /// Skip points this close to a MOSFET region boundary (V).
    #[arg(long, default_value_t = 0.0)]
    pub band: f64,
    #[arg(short, long, default_value = "jacobian.csv")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    pub spec: String,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
}

/// Bad flag values found after parsing; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("range `{s}` is not lo:hi"))?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("range `{s}`: {e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("range `{s}`: {e}"))?;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(format!("range `{s}` needs finite lo <= hi"));
    }
    Ok((lo, hi))
}

/// Per-input grid counts; a newtype so clap treats the flag as one value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridCounts(pub Vec<usize>);

fn parse_grid(s: &str) -> Result<GridCounts, String> {
    let counts = s
        .split(['x', 'X'])
        .map(|c| c.trim().parse::<usize>().map_err(|e| format!("grid `{s}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if counts.contains(&0) {
        return Err(format!("grid `{s}` has a zero count"));
    }
    Ok(GridCounts(counts))
}

impl DeviceArgs {
    fn device(&self) -> Result<SweepDevice> {
        Ok(match self.device {
            DeviceKind::Diode => SweepDevice::Diode(Diode::new(self.i_sat, self.vt).map_err(|e| usage(e.to_string()))?),
            DeviceKind::Mosfet => {
                SweepDevice::Mosfet(Mosfet::new(self.k, self.vth, self.lambda).map_err(|e| usage(e.to_string()))?)
            }
        })
    }

    fn ranges(&self, dim: usize) -> Result<Vec<(f64, f64)>> {
        match self.ranges.len() {
            0 => Ok(vec![(0.0, 1.0); dim]),
            n if n == dim => Ok(self.ranges.clone()),
            n => Err(usage(format!("{n} --range flags for a {dim}-input device"))),
        }
    }

    fn sampling(&self, dim: usize) -> Result<Sampling> {
        match (&self.grid, self.n) {
            (Some(_), Some(_)) => Err(usage("give --n or --grid, not both")),
            (Some(g), None) if g.0.len() != dim => Err(usage(format!(
                "--grid has {} counts for a {dim}-input device",
                g.0.len()
            ))),
            (Some(g), None) => Ok(Sampling::Grid(g.0.clone())),
            (None, Some(0)) => Err(usage("--n must be positive")),
            (None, Some(n)) => Ok(Sampling::Random(n)),
            (None, None) => Err(usage("give --n or --grid")),
        }
    }
}

struct Ctx {
    seed: u64,
    out_dir: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        self.out_dir.join(p)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return 2;
    }
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(0),
        out_dir: cli.out_dir.clone(),
        quiet: cli.quiet,
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Dc(a) => dc(&ctx, a),
        Command::Tran(a) => tran(&ctx, a),
        Command::CheckJac(a) => check_jac(&ctx, a),
        Command::Experiment(a) => experiment(&ctx, &cli, a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(history) = residual_history(&e) {
                eprintln!("residual history (inf-norm per iteration):");
                for (k, r) in history.iter().enumerate() {
                    eprintln!("  {k:>3}  {r:.6e}");
                }
            }
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

/// `GRAYSIM_THREADS` caps the worker pool used for concurrent sweeps.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("GRAYSIM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| usage(format!("GRAYSIM_THREADS=`{v}` is not a positive integer")))?;
    // a pool built earlier in this process stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn residual_history(e: &anyhow::Error) -> Option<&[f64]> {
    e.chain().find_map(|c| match c.downcast_ref::<SolverError>()? {
        SolverError::NonConvergence { report, .. } | SolverError::StepNonConvergence { report, .. } => {
            Some(report.residual_history.as_slice())
        }
        _ => None,
    })
}

fn gen_data(ctx: &Ctx, a: &GenDataArgs) -> Result<()> {
    let device = a.device.device()?;
    let dim = device.input_dim();
    let data = sweep_dataset(&device, &a.device.ranges(dim)?, &a.device.sampling(dim)?, ctx.seed)?;
    let path = ctx.out(&a.output);
    write_dataset(&path, &data)?;
    ctx.say(format!("wrote {} rows to {}", data.len(), path.display()));
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let preset: Option<Preset> = a.preset.as_deref().map(str::parse).transpose().map_err(usage)?;
    let arch: Architecture = match (&a.arch, preset) {
        (Some(s), _) => s.parse().map_err(usage)?,
        (None, Some(p)) => p.architecture(),
        (None, None) => unreachable!("clap requires --preset or --arch"),
    };
    let mut cfg = preset.map_or_else(
        || TrainConfig {
            seed: ctx.seed,
            ..TrainConfig::default()
        },
        |p| p.train_config(ctx.seed),
    );
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    let mut net = arch.build(ctx.seed)?;
    anyhow::ensure!(
        net.input_dim() == data.input_dim() && net.output_dim() == data.output_dim(),
        "architecture is {}->{} but the dataset is {}->{}",
        net.input_dim(),
        net.output_dim(),
        data.input_dim(),
        data.output_dim()
    );
    net.fit_normalization(&data)?;
    let out = train(net, &data, &cfg)?;
    let model_path = ctx.out(&a.output);
    save_model(&out.model, &model_path)?;
    let loss_path = match &a.loss {
        Some(p) => ctx.out(p),
        None => {
            let stem = a.output.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            model_path.with_file_name(format!("{stem}_loss.csv"))
        }
    };
    write_table(
        &loss_path,
        &header(&["epoch", "loss"]),
        out.loss_history
            .iter()
            .enumerate()
            .map(|(k, l)| vec![(k + 1).to_string(), num(*l)]),
    )?;
    let (mae, mse) = data.errors(&out.model)?;
    ctx.say(format!(
        "trained {arch} for {} epochs on {} samples\nfinal train MAE {mae:.6e}  MSE {mse:.6e}\nmodel {}\nloss  {}",
        cfg.epochs,
        data.len(),
        model_path.display(),
        loss_path.display()
    ));
    Ok(())
}

fn load_simulation(path: &Path) -> Result<Simulation> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc = parse(&text).with_context(|| format!("parsing {}", path.display()))?;
    prepare(&doc, &mut FsLoader::for_netlist(path)).with_context(|| format!("building {}", path.display()))
}

fn dc(ctx: &Ctx, a: &SolveArgs) -> Result<()> {
    let sim = load_simulation(&a.netlist)?;
    let ((z, report), wall) = median_wall(a.repeats, || Ok(sim.run_dc()?))?;
    let sys = &sim.system;
    let path = ctx.out(a.output.as_deref().unwrap_or(Path::new("dc.csv")));
    write_table(
        &path,
        &header(&["name", "value"]),
        z.iter().enumerate().map(|(i, v)| vec![sys.unknown_name(i), num(*v)]),
    )?;
    let mut msg = format!(
        "dc: {} iterations, residual {:.3e}, wall {:.3} ms (median of {})\n",
        report.iterations,
        report.final_residual_norm,
        wall.as_secs_f64() * 1e3,
        a.repeats.max(1)
    );
    for (i, v) in z.iter().enumerate() {
        msg += &format!("  {:<20} {v:.9e}\n", sys.unknown_name(i));
    }
    msg += &format!("wrote {}", path.display());
    ctx.say(msg);
    Ok(())
}

fn tran(ctx: &Ctx, a: &SolveArgs) -> Result<()> {
    let sim = load_simulation(&a.netlist)?;
    let (series, wall) = median_wall(a.repeats, || Ok(sim.run_tran()?))?;
    let sys = &sim.system;
    let mut head = vec!["t".to_string()];
    head.extend((0..sys.len()).map(|i| sys.unknown_name(i)));
    head.push("iterations".into());
    let rows = series.times.iter().zip(&series.states).enumerate().map(|(k, (t, z))| {
        let mut row = vec![num(*t)];
        row.extend(z.iter().map(|v| num(*v)));
        row.push(k.checked_sub(1).map_or(0, |j| series.reports[j].iterations).to_string());
        row
    });
    let path = ctx.out(a.output.as_deref().unwrap_or(Path::new("tran.csv")));
    write_table(&path, &head, rows)?;
    let total: usize = series.reports.iter().map(|r| r.iterations).sum();
    ctx.say(format!(
        "tran: {} steps, iterations per step max {} mean {:.2}, wall {:.3} ms (median of {})\nwrote {}",
        series.reports.len(),
        series.max_iterations(),
        total as f64 / series.reports.len().max(1) as f64,
        wall.as_secs_f64() * 1e3,
        a.repeats.max(1),
        path.display()
    ));
    Ok(())
}

fn check_jac(ctx: &Ctx, a: &CheckJacArgs) -> Result<()> {
    let model = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let device = a.device.device()?;
    let dim = device.input_dim();
    let ranges = a.device.ranges(dim)?;
    let points: Vec<Vec<f64>> = match a.device.sampling(dim)? {
        Sampling::Grid(g) => grid_points(&ranges, &g),
        Sampling::Random(n) if dim == 1 => grid_points(&ranges, &[n]),
        Sampling::Random(n) => {
            let side = (n as f64).powf(1.0 / dim as f64).round().max(1.0) as usize;
            grid_points(&ranges, &vec![side; dim])
        }
    }
    .into_iter()
    .filter(|x| !near_boundary(&device, x, a.band))
    .collect();
    let s = check_jacobian(&model, &device, &points)?;
    let mut head: Vec<String> = (0..dim).map(|k| format!("in_{k}")).collect();
    for prefix in ["physics", "backprop", "err"] {
        head.extend((0..dim).map(|k| format!("{prefix}_{k}")));
    }
    let rows = s.points.iter().map(|p| {
        p.x.iter()
            .chain(&p.physics)
            .chain(&p.backprop)
            .chain(&p.error)
            .map(|v| num(*v))
            .collect::<Vec<_>>()
    });
    let path = ctx.out(&a.output);
    write_table(&path, &head, rows)?;
    let mut msg = format!("check-jac: {} points\n", s.points.len());
    for k in 0..dim {
        msg += &format!(
            "  d/d in_{k}: mean error {:.4e}, max error {:.4e}\n",
            s.mean[k], s.max[k]
        );
    }
    msg += &format!("wrote {}", path.display());
    ctx.say(msg);
    Ok(())
}

fn experiment(ctx: &Ctx, cli: &Cli, a: &ExperimentArgs) -> Result<()> {
    let opts = RunOptions {
        out_dir: ctx.out_dir.clone(),
        seed: cli.seed,
        quiet: ctx.quiet,
        repeats: a.repeats,
    };
    let report = run_named(&a.spec, &opts)?;
    ctx.say(report.render());
    ctx.say(format!("wrote {}", report.dir.join("report.csv").display()));
    Ok(())
}
