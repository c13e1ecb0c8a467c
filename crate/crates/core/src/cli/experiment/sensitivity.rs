use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use super::{median_wall, push_counts, train_model, ExperimentSpec, Report, RunOptions, Status, TrainedLoader};
use crate::cli::csvio::{header, num, write_table};
use crate::cli::jac::{check_jacobian, floored_error, grid_points, near_boundary};
use crate::devices::{sweep_dataset, Diode, Mosfet, Sampling, SweepDevice};
use crate::netlist::{parse, prepare, Element, FsLoader, ModelLoader, NetlistDoc, Simulation};
use crate::neural::Preset;
use crate::solvers::{boundary_residual, nr_solve};

/// Device learned by the experiment, taken from the physics netlist.
pub(crate) fn sweep_device(doc: &NetlistDoc, name: &str) -> Result<SweepDevice> {
    let stmt = doc
        .devices
        .iter()
        .find(|d| d.name.eq_ignore_ascii_case(name))
        .with_context(|| format!("physics netlist has no device `{name}`"))?;
    Ok(match &stmt.element {
        Element::Diode { i_sat, v_thermal } => SweepDevice::Diode(Diode::new(*i_sat, *v_thermal)?),
        Element::Mosfet { k, v_th, lambda } => SweepDevice::Mosfet(Mosfet::new(*k, *v_th, lambda.unwrap_or(0.0))?),
        other => bail!(
            "`{name}` is a {}, only diodes and mosfets can be swept",
            other.keyword()
        ),
    })
}

pub(super) fn read_doc(path: &Path) -> Result<NetlistDoc> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text).with_context(|| format!("parsing {}", path.display()))
}

pub(super) fn prepared(path: &Path, loader: &mut dyn ModelLoader) -> Result<Simulation> {
    prepare(&read_doc(path)?, loader).with_context(|| format!("building {}", path.display()))
}

/// Warm-started DC solves along the sweep: `(u, z)` per point.
fn dc_sweep(sim: &Simulation, input: usize, values: &[f64]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut z = sim.initial.clone().unwrap_or_else(|| sim.system.flat_start());
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let mut u = sim.inputs_at(0.0);
        if u.len() <= input {
            u.resize(input + 1, 0.0);
        }
        u[input] = v;
        let (zs, _) =
            nr_solve(&sim.system, &z, &u, &sim.solver).with_context(|| format!("DC solve at u{input} = {v}"))?;
        z = zs.clone();
        out.push((u, zs));
    }
    Ok(out)
}

pub(super) fn probe_index(sim: &Simulation, name: &str) -> Result<usize> {
    (0..sim.system.len())
        .find(|&i| sim.system.unknown_name(i).eq_ignore_ascii_case(name))
        .with_context(|| format!("no unknown named `{name}`"))
}

pub(super) fn run(spec: &ExperimentSpec, opts: &RunOptions, seed: u64, report: &mut Report) -> Result<()> {
    let physics_path = spec.physics_path()?;
    let doc = read_doc(&physics_path)?;
    let t = &spec.train;
    let dev_name = t.device.as_deref().context("[train] needs `device`")?;
    let device = sweep_device(&doc, dev_name)?;
    let dim = device.input_dim();

    let ranges: Vec<(f64, f64)> = t
        .ranges
        .as_ref()
        .map(|r| r.iter().map(|[a, b]| (*a, *b)).collect())
        .unwrap_or_else(|| vec![(0.0, 1.0); dim]);
    let sampling = match (&t.grid, t.samples) {
        (Some(g), _) => Sampling::Grid(g.clone()),
        (None, Some(n)) => Sampling::Random(n),
        (None, None) => bail!("[train] needs `samples` or `grid`"),
    };
    let data = sweep_dataset(&device, &ranges, &sampling, seed)?;
    let default_preset = match device {
        SweepDevice::Diode(_) => Preset::Diode,
        SweepDevice::Mosfet(_) => Preset::Mosfet,
    };
    let trained = train_model(t, default_preset, &data, seed, report, "surrogate", "model.gsnn")?;
    report.set_status("physics", Status::Ran);
    report.set_status("surrogate", Status::Ran);

    if let Some(j) = &spec.jacobian {
        let ranges: Vec<(f64, f64)> = j.ranges.iter().map(|[a, b]| (*a, *b)).collect();
        let points: Vec<Vec<f64>> = grid_points(&ranges, &j.grid)
            .into_iter()
            .filter(|x| !near_boundary(&device, x, j.band))
            .collect();
        let summary = check_jacobian(&trained.1, &device, &points)?;
        for k in 0..dim {
            report.push("surrogate", format!("jac_mean_err_{k}"), summary.mean[k]);
            report.push("surrogate", format!("jac_max_err_{k}"), summary.max[k]);
        }
        report.push("surrogate", "jac_points", points.len() as f64);
        let mut head: Vec<String> = (0..dim).map(|k| format!("in_{k}")).collect();
        for prefix in ["physics", "backprop", "err"] {
            head.extend((0..dim).map(|k| format!("{prefix}_{k}")));
        }
        let rows = summary.points.iter().map(|p| {
            p.x.iter()
                .chain(&p.physics)
                .chain(&p.backprop)
                .chain(&p.error)
                .map(|v| num(*v))
                .collect::<Vec<_>>()
        });
        let path = report.artifact("jacobian.csv");
        write_table(&path, &head, rows)?;
    }

    let Some(sweep) = &spec.sweep else {
        return Ok(());
    };
    let values: Vec<f64> = grid_points(&[(sweep.from, sweep.to)], &[sweep.points])
        .into_iter()
        .map(|p| p[0])
        .collect();
    let physics = prepared(&physics_path, &mut FsLoader::for_netlist(&physics_path))?;
    let p_probe = probe_index(&physics, &sweep.probe)?;
    let (p_states, p_time) = median_wall(opts.repeats, || dc_sweep(&physics, sweep.input, &values))?;
    push_counts(report, "physics", &physics.system);
    report.push("physics", "wall_time_s", p_time.as_secs_f64());
    let truth: Vec<f64> = p_states.iter().map(|(_, z)| z[p_probe]).collect();
    let scale = truth.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let Some(hybrid_path) = spec.variant_path(&spec.hybrid) else {
        report.set_status("hybrid", Status::NotRun("hybrid netlist missing".into()));
        return Ok(());
    };
    let hybrid = prepared(&hybrid_path, &mut TrainedLoader::new(&hybrid_path, &[trained]))?;
    let h_probe = probe_index(&hybrid, &sweep.probe)?;
    let h_states = match median_wall(opts.repeats, || dc_sweep(&hybrid, sweep.input, &values)) {
        Ok((s, time)) => {
            report.push("hybrid", "wall_time_s", time.as_secs_f64());
            s
        }
        Err(e) => {
            report.set_status("hybrid", Status::Failed(format!("{e:#}")));
            return Ok(());
        }
    };
    report.set_status("hybrid", Status::Ran);
    push_counts(report, "hybrid", &hybrid.system);
    for (u, z) in &h_states {
        report.residuals.record(boundary_residual(&hybrid.system, z, u)?);
    }
    let errors: Vec<f64> = h_states
        .iter()
        .zip(&truth)
        .map(|((_, z), t)| floored_error(z[h_probe], *t, scale))
        .collect();
    report.push(
        "hybrid",
        "probe_max_err",
        errors.iter().fold(0.0, |m: f64, e| m.max(*e)),
    );
    report.push(
        "hybrid",
        "probe_mean_err",
        errors.iter().sum::<f64>() / errors.len().max(1) as f64,
    );
    let head = header(&["u", "physics", "hybrid", "err"]);
    let rows = values
        .iter()
        .zip(&truth)
        .zip(&h_states)
        .zip(&errors)
        .map(|(((v, t), (_, z)), e)| vec![num(*v), num(*t), num(z[h_probe]), num(*e)]);
    let path = report.artifact("sweep.csv");
    write_table(&path, &head, rows)?;
    Ok(())
}
