use std::sync::Arc;

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{median_wall, push_counts, train_model, ExperimentSpec, LoadSpec, Report, RunOptions, Status, TrainSpec};
use crate::cli::csvio::{header, num, write_table};
use crate::devices::{
    Capacitor, Device, InductionMotorReduced, InputSlot, NeuralDevice, PqLoad, Resistor, Source, TransmissionNetwork,
    Units, VSource,
};
use crate::graybox::{AnalysisKind, GrayBoxSystem, SubsystemKind, SubsystemSpec};
use crate::neural::{Dataset, Mlp, Preset};
use crate::solvers::{boundary_residual, nr_solve, SolverConfig};

const UNITS: Units = Units::PerUnit;
const N_FEATURES: usize = 4;

impl LoadSpec {
    fn parts(&self, u: &[f64]) -> Result<[Device; 3]> {
        let motor = InductionMotorReduced {
            t_load: self.t_load[0] + self.t_load[1] * u[0] * u[1],
            rating: self.rating,
            ..Default::default()
        };
        motor.validate()?;
        Ok([
            Device::Resistor(Resistor::new(1.0 / (self.g[0] + self.g[1] * u[2]))?),
            Device::Capacitor(Capacitor::new(self.c[0] + self.c[1] * u[3])?),
            Device::Motor(motor),
        ])
    }

    /// Steady current drawn at bus voltage `v`, from the device equations directly.
    pub(crate) fn current(&self, u: &[f64], v: [f64; 2]) -> Result<[f64; 2]> {
        let mut total = [0.0; 2];
        for dev in self.parts(u)? {
            let mut local = match &dev {
                Device::Motor(m) => m.steady_state(v).context("motor stalls at this voltage")?.to_vec(),
                _ => Vec::new(),
            };
            let n = local.len();
            local.extend(v);
            local.resize(dev.local_size(UNITS), 0.0);
            let ev = dev.eval(UNITS, &local, &[])?;
            total[0] += ev.residual[n];
            total[1] += ev.residual[n + 1];
        }
        Ok(total)
    }
}

/// How the load at the bus is represented.
#[derive(Clone, Copy)]
enum Variant<'a> {
    Physics(&'a LoadSpec),
    Pq(&'a Mlp),
    Hybrid(&'a Arc<Mlp>),
}

impl Variant<'_> {
    fn name(&self) -> &'static str {
        match self {
            Variant::Physics(_) => "physics",
            Variant::Pq(_) => "pq",
            Variant::Hybrid(_) => "hybrid",
        }
    }

    fn subsystems(&self, u: &[f64], bus: usize) -> Result<Vec<SubsystemSpec>> {
        let at = |id: &str, kind: SubsystemKind, n: usize| SubsystemSpec {
            id: id.into(),
            kind,
            terminals: [Some(bus), None][..n].to_vec(),
        };
        Ok(match self {
            Variant::Physics(load) => {
                let [r, c, m] = load.parts(u)?;
                vec![
                    at("load_r", SubsystemKind::Physics(r), 2),
                    at("load_c", SubsystemKind::Physics(c), 2),
                    at("load_m", SubsystemKind::Physics(m), 1),
                ]
            }
            Variant::Pq(net) => {
                let pq = net.forward(u)?;
                vec![at(
                    "load_pq",
                    SubsystemKind::Physics(Device::PqLoad(PqLoad::new(pq[0], pq[1])?)),
                    1,
                )]
            }
            Variant::Hybrid(net) => {
                let mut inputs = vec![InputSlot::V(None)];
                inputs.extend((0..N_FEATURES).map(InputSlot::U));
                let nd = NeuralDevice::new(Arc::clone(net), 1, UNITS, inputs, None)?;
                vec![at("load_nn", SubsystemKind::Neural(nd), 1)]
            }
        })
    }
}

fn tight() -> SolverConfig {
    SolverConfig {
        epsilon: 1e-10,
        max_iter: 50,
        ..SolverConfig::default()
    }
}

fn source(v: f64, bus: usize) -> SubsystemSpec {
    SubsystemSpec {
        id: "src".into(),
        kind: SubsystemKind::Physics(Device::VSource(VSource::new(Source::Const(v)))),
        terminals: vec![Some(bus), None],
    }
}

struct Solved {
    system: GrayBoxSystem,
    z: Vec<f64>,
    boundary_residual: f64,
}

fn solve(
    variant: Variant<'_>,
    u: &[f64],
    nodes: Vec<String>,
    mut specs: Vec<SubsystemSpec>,
    bus: usize,
) -> Result<Solved> {
    specs.extend(variant.subsystems(u, bus)?);
    let system = GrayBoxSystem::new(UNITS, AnalysisKind::Algebraic, nodes, specs)?;
    let (z, _) = nr_solve(&system, &system.flat_start(), u, &tight())?;
    let boundary_residual = boundary_residual(&system, &z, u)?;
    Ok(Solved {
        system,
        z,
        boundary_residual,
    })
}

/// Load bus fed by an ideal source; returns `|I|` drawn from the source.
fn single_bus(variant: Variant<'_>, u: &[f64], v: f64) -> Result<(f64, Solved)> {
    let s = solve(variant, u, vec!["bus".into()], vec![source(v, 0)], 0)?;
    let src = &s.system.subsystems()[0].internal;
    let i = s.z[src[0]].hypot(s.z[src[1]]);
    Ok((i, s))
}

/// Load at bus 2 fed through a feeder from an ideal source at bus 1; returns `V_2`.
fn two_bus(variant: Variant<'_>, u: &[f64], vs: f64, line: &TransmissionNetwork) -> Result<([f64; 2], Solved)> {
    let specs = vec![
        source(vs, 0),
        SubsystemSpec {
            id: "line".into(),
            kind: SubsystemKind::Physics(Device::TxNet(line.clone())),
            terminals: vec![Some(0), Some(1)],
        },
    ];
    let s = solve(variant, u, vec!["b1".into(), "b2".into()], specs, 1)?;
    let at = s.system.node_index("b2").expect("declared");
    Ok(([s.z[at], s.z[at + 1]], s))
}

fn features(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..N_FEATURES).map(|_| rng.random_range(0.0..=1.0)).collect()
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// `(v_r, v_i, u) -> (i_r, i_i)` samples of the physics load.
fn load_dataset(load: &LoadSpec, t: &TrainSpec, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = t.samples.unwrap_or(4000);
    let mag = t.magnitude.unwrap_or([0.8, 1.3]);
    let ang = t.angle.unwrap_or([-0.3, 0.3]);
    let (mut xs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let u = features(&mut rng);
        let (m, a) = (draw(&mut rng, mag), draw(&mut rng, ang));
        let v = [m * a.cos(), m * a.sin()];
        let i = load.current(&u, v)?;
        let mut x = v.to_vec();
        x.extend(&u);
        xs.push(x);
        ys.push(i.to_vec());
    }
    Ok(Dataset::from_rows(&xs, &ys)?)
}

/// `u -> (P, Q)` of the physics load at nominal voltage.
fn forecaster_dataset(load: &LoadSpec, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut xs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let u = features(&mut rng);
        let i = load.current(&u, [1.0, 0.0])?;
        // S = V conj(I) with V = 1
        ys.push(vec![i[0], -i[1]]);
        xs.push(u);
    }
    Ok(Dataset::from_rows(&xs, &ys)?)
}

fn train_load_model(spec: &ExperimentSpec, load: &LoadSpec, seed: u64, report: &mut Report) -> Result<Arc<Mlp>> {
    let data = load_dataset(load, &spec.train, seed)?;
    Ok(train_model(&spec.train, Preset::Load, &data, seed, report, "hybrid", "load.gsnn")?.1)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn mag(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

pub(super) fn run_composite(spec: &ExperimentSpec, opts: &RunOptions, seed: u64, report: &mut Report) -> Result<()> {
    let load = spec.load()?;
    let cmp = spec.compare()?;
    report.set_status("physics", Status::Ran);
    let hybrid_model = train_load_model(spec, load, seed, report)?;
    let pq_train = spec.surrogate.clone().unwrap_or_default();
    let pq_data = forecaster_dataset(load, pq_train.samples.unwrap_or(1000), seed.wrapping_add(1))?;
    let pq_model = train_model(&pq_train, Preset::PqForecaster, &pq_data, seed, report, "pq", "pq.gsnn")?.1;

    let u = cmp.u.unwrap_or([0.5; N_FEATURES]).to_vec();
    let voltages = cmp.voltages.clone().unwrap_or_else(|| vec![1.0, 1.2]);
    let delta = cmp.delta.unwrap_or(0.01);
    let variants = [
        Variant::Physics(load),
        Variant::Pq(&pq_model),
        Variant::Hybrid(&hybrid_model),
    ];

    // current and dI/dV at the source voltages
    let mut table1 = Vec::new();
    let mut truth = Vec::new();
    for variant in variants {
        let name = variant.name();
        let mut point = |v: f64| -> Result<(f64, f64)> {
            let (i, s) = single_bus(variant, &u, v)?;
            let (hi, sh) = single_bus(variant, &u, v + delta)?;
            let (lo, sl) = single_bus(variant, &u, v - delta)?;
            if matches!(variant, Variant::Hybrid(_)) {
                for s in [&s, &sh, &sl] {
                    report.residuals.record(s.boundary_residual);
                }
            }
            Ok((i, (hi - lo) / (2.0 * delta)))
        };
        let results: Result<Vec<(f64, f64)>> = voltages.iter().map(|&v| point(v)).collect();
        match results {
            Ok(res) => {
                report.set_status(name, Status::Ran);
                for (k, (&v, &(i, d))) in voltages.iter().zip(&res).enumerate() {
                    report.push(name, format!("I@{v}"), i);
                    report.push(name, format!("dIdV@{v}"), d);
                    if let Variant::Physics(_) = variant {
                        truth.push((i, d));
                    } else {
                        report.push(name, format!("I_err@{v}"), rel(i, truth[k].0));
                        report.push(name, format!("dIdV_err@{v}"), rel(d, truth[k].1));
                    }
                    table1.push(vec![name.to_string(), num(v), num(i), num(d)]);
                }
            }
            Err(e) if !matches!(variant, Variant::Physics(_)) => {
                report.set_status(name, Status::Failed(format!("{e:#}")));
            }
            Err(e) => return Err(e),
        }
    }
    let path = report.artifact("currents.csv");
    write_table(&path, &header(&["variant", "v", "current", "dIdV"]), table1)?;

    // bus-voltage extremes over random feeder cases
    let line_rx = cmp.line.unwrap_or([0.02, 0.1]);
    let line = TransmissionNetwork::from_branches(2, &[(0, 1, line_rx[0], line_rx[1])], &[])?;
    let src = cmp.source.unwrap_or([0.95, 1.1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let cases: Vec<(Vec<f64>, f64)> = (0..cmp.cases.unwrap_or(20))
        .map(|_| {
            let u = features(&mut rng);
            (u, draw(&mut rng, src))
        })
        .collect();
    let mut columns: Vec<Option<Vec<f64>>> = Vec::new();
    for variant in variants {
        let name = variant.name();
        if !matches!(report.status(name), Some(Status::Ran)) {
            columns.push(None);
            continue;
        }
        let run = || -> Result<Vec<Solved>> {
            cases
                .iter()
                .map(|(u, vs)| two_bus(variant, u, *vs, &line).map(|(_, s)| s))
                .collect()
        };
        match median_wall(opts.repeats, run) {
            Ok((solved, time)) => {
                report.push(name, "wall_time_s", time.as_secs_f64());
                push_counts(report, name, &solved[0].system);
                let mags: Vec<f64> = solved
                    .iter()
                    .map(|s| {
                        let at = s.system.node_index("b2").expect("declared");
                        mag([s.z[at], s.z[at + 1]])
                    })
                    .collect();
                if matches!(variant, Variant::Hybrid(_)) {
                    for s in &solved {
                        report.residuals.record(s.boundary_residual);
                    }
                }
                report.push(name, "v2_min", mags.iter().copied().fold(f64::INFINITY, f64::min));
                report.push(name, "v2_max", mags.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                columns.push(Some(mags));
            }
            Err(e) => {
                report.set_status(name, Status::Failed(format!("{e:#}")));
                columns.push(None);
            }
        }
    }
    if let Some(truth) = columns[0].clone() {
        for (variant, col) in variants.iter().zip(&columns).skip(1) {
            if let Some(col) = col {
                let err = col.iter().zip(&truth).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
                report.push(variant.name(), "v2_max_err", err);
            }
        }
    }
    let rows = cases.iter().enumerate().map(|(k, (u, vs))| {
        let mut row = vec![k.to_string(), num(*vs)];
        row.extend(u.iter().map(|x| num(*x)));
        row.extend(columns.iter().map(|c| c.as_ref().map_or(String::new(), |c| num(c[k]))));
        row
    });
    let path = report.artifact("voltages.csv");
    write_table(
        &path,
        &header(&["case", "vs", "u0", "u1", "u2", "u3", "physics", "pq", "hybrid"]),
        rows,
    )?;
    Ok(())
}

/// KCL mismatch at bus 2 when its voltage is `v2` and bus 1 sits at `vs`.
fn feeder_residual(line: &TransmissionNetwork, load: &LoadSpec, u: &[f64], vs: f64, v2: [f64; 2]) -> Result<f64> {
    let (g, b) = (line.g(), line.b());
    let v = [[vs, 0.0], v2];
    let mut i = load.current(u, v2)?;
    for (j, vj) in v.iter().enumerate() {
        i[0] += g[(1, j)] * vj[0] - b[(1, j)] * vj[1];
        i[1] += g[(1, j)] * vj[1] + b[(1, j)] * vj[0];
    }
    Ok(mag(i))
}

pub(super) fn run_blackbox(spec: &ExperimentSpec, opts: &RunOptions, seed: u64, report: &mut Report) -> Result<()> {
    let load = spec.load()?;
    let cmp = spec.compare()?;
    let line_rx = cmp.line.unwrap_or([0.02, 0.1]);
    let line = TransmissionNetwork::from_branches(2, &[(0, 1, line_rx[0], line_rx[1])], &[])?;
    let src = cmp.source.unwrap_or([0.95, 1.05]);
    report.set_status("physics", Status::Ran);
    let hybrid_model = train_load_model(spec, load, seed, report)?;

    // whole-system network: (V_s, u) -> V_2 from solved physics cases
    let bb_train = spec.surrogate.clone().unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for _ in 0..bb_train.samples.unwrap_or(400) {
        let u = features(&mut rng);
        let vs = draw(&mut rng, src);
        let (v2, _) = two_bus(Variant::Physics(load), &u, vs, &line)?;
        let mut x = vec![vs];
        x.extend(&u);
        xs.push(x);
        ys.push(v2.to_vec());
    }
    let bb_data = Dataset::from_rows(&xs, &ys)?;
    let mut bb_spec = bb_train.clone();
    if bb_spec.arch.is_none() && bb_spec.preset.is_none() {
        bb_spec.arch = Some("5,32,32,2:tanh".into());
    }
    let bb = train_model(
        &bb_spec,
        Preset::PqForecaster,
        &bb_data,
        seed,
        report,
        "blackbox",
        "system.gsnn",
    )?
    .1;
    report.set_status("blackbox", Status::Ran);

    let deviations = cmp.deviations.clone().unwrap_or_else(|| vec![0.0, 0.05, 0.1, 0.2, 0.3]);
    let tests: Vec<Vec<f64>> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
        (0..cmp.cases.unwrap_or(20)).map(|_| features(&mut rng)).collect()
    };
    let mut rows = Vec::new();
    let mut hybrid_ok = true;
    for &d in &deviations {
        let vs = src[1] + d;
        let (mut bb_res, mut bb_err, mut hy_res, mut hy_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for u in &tests {
            let (truth, _) = two_bus(Variant::Physics(load), u, vs, &line)?;
            let mut x = vec![vs];
            x.extend(u);
            let p = bb.forward(&x)?;
            let pred = [p[0], p[1]];
            bb_res = bb_res.max(feeder_residual(&line, load, u, vs, pred)?);
            bb_err = bb_err.max(mag([pred[0] - truth[0], pred[1] - truth[1]]) / mag(truth));
            match two_bus(Variant::Hybrid(&hybrid_model), u, vs, &line) {
                Ok((v2, s)) => {
                    report.residuals.record(s.boundary_residual);
                    hy_res = hy_res.max(s.boundary_residual);
                    hy_err = hy_err.max(mag([v2[0] - truth[0], v2[1] - truth[1]]) / mag(truth));
                }
                Err(e) => {
                    report.set_status("hybrid", Status::Failed(format!("{e:#}")));
                    hybrid_ok = false;
                }
            }
        }
        report.push("blackbox", format!("residual@{d}"), bb_res);
        report.push("blackbox", format!("v_err@{d}"), bb_err);
        report.push("hybrid", format!("residual@{d}"), hy_res);
        report.push("hybrid", format!("v_err@{d}"), hy_err);
        rows.push(vec![
            num(d),
            num(vs),
            num(bb_res),
            num(hy_res),
            num(bb_err),
            num(hy_err),
        ]);
    }
    if hybrid_ok {
        report.set_status("hybrid", Status::Ran);
    }
    let u = tests.first().cloned().unwrap_or_else(|| vec![0.5; N_FEATURES]);
    for variant in [Variant::Physics(load), Variant::Hybrid(&hybrid_model)] {
        let (s, time) = median_wall(opts.repeats, || two_bus(variant, &u, src[1], &line))?;
        report.push(variant.name(), "wall_time_s", time.as_secs_f64());
        push_counts(report, variant.name(), &s.1.system);
    }
    let path = report.artifact("drift.csv");
    write_table(
        &path,
        &header(&[
            "deviation",
            "vs",
            "blackbox_residual",
            "hybrid_residual",
            "blackbox_v_err",
            "hybrid_v_err",
        ]),
        rows,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load() -> LoadSpec {
        LoadSpec {
            rating: 0.02,
            t_load: [0.3, 0.4],
            g: [0.04, 0.02],
            c: [0.02, 0.01],
        }
    }

    #[test]
    fn closed_form_current_matches_solved_system() {
        let l = load();
        let u = [0.3, 0.8, 0.1, 0.6];
        let (i, s) = single_bus(Variant::Physics(&l), &u, 1.1).unwrap();
        let direct = l.current(&u, [1.1, 0.0]).unwrap();
        assert!((i - mag(direct)).abs() < 1e-9, "{i} vs {direct:?}");
        assert!(s.boundary_residual < 1e-9);
    }

    #[test]
    fn constant_power_sensitivity_is_negative() {
        // a forecaster that ignores u and returns P = 0.06, Q = 0
        let w = crate::numlin::DenseMatrix::zeros(2, 4);
        let layer = crate::neural::Layer::new(w, vec![0.06, 0.0], crate::neural::Activation::Identity).unwrap();
        let net = Mlp::from_layers(vec![layer]).unwrap();
        let (lo, _) = single_bus(Variant::Pq(&net), &[0.0; 4], 0.99).unwrap();
        let (hi, _) = single_bus(Variant::Pq(&net), &[0.0; 4], 1.01).unwrap();
        assert!(((hi - lo) / 0.02 + 0.06).abs() < 1e-3);
    }

    #[test]
    fn feeder_residual_vanishes_at_physics_solution() {
        let l = load();
        let line = TransmissionNetwork::from_branches(2, &[(0, 1, 0.02, 0.1)], &[]).unwrap();
        let u = [0.5, 0.5, 0.5, 0.5];
        let (v2, _) = two_bus(Variant::Physics(&l), &u, 1.02, &line).unwrap();
        assert!(feeder_residual(&line, &l, &u, 1.02, v2).unwrap() < 1e-9);
    }
}
