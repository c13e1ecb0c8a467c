use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::sensitivity::{prepared, read_doc};
use super::{
    median_wall, push_counts, train_model, ExperimentSpec, Report, RunOptions, Status, TrainSpec, TrainedLoader,
};
use crate::cli::csvio::{header, num, write_table};
use crate::devices::{Device, InductionMotorReduced, NeuralHistory, Source, Units, VSource};
use crate::graybox::{AnalysisKind, GrayBoxSystem, SubsystemKind, SubsystemSpec, TransientState};
use crate::netlist::{Analysis, FsLoader};
use crate::neural::{Dataset, Preset};
use crate::solvers::{nr_solve, transient_from_state, transient_solve, SolverConfig, TimeSeries, USchedule};

/// Noisy duplicates per recurrent sample and their feedback noise (machine base).
const NOISY_COPIES: usize = 1;
const FEEDBACK_NOISE: f64 = 0.02;

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Bus current and speed of the motor at state `s`.
fn motor_outputs(m: &InductionMotorReduced, s: &[f64]) -> [f64; 3] {
    let (d, q) = m.stator_currents(s);
    [m.rating * d, m.rating * q, s[4]]
}

/// Recurrent samples `[v_k, v_{k-1}, i_{k-1}] -> [i_k, omega_k]` from the motor
/// behind an ideal source stepping through random magnitudes and angles.
fn motor_dataset(motor: &InductionMotorReduced, t: &TrainSpec, dt: f64, seed: u64) -> Result<Dataset> {
    let src = SubsystemSpec {
        id: "src".into(),
        kind: SubsystemKind::Physics(Device::VSource(VSource {
            value: Source::Input(0),
            angle: Source::Input(1),
        })),
        terminals: vec![Some(0), None],
    };
    let mot = SubsystemSpec {
        id: "m".into(),
        kind: SubsystemKind::Physics(Device::Motor(*motor)),
        terminals: vec![Some(0)],
    };
    let sys = GrayBoxSystem::new(
        Units::PerUnit,
        AnalysisKind::Differential,
        vec!["bus".into()],
        vec![src, mot],
    )?;
    let states = sys.subsystems()[1].internal.clone();
    let bus = sys.node_index("bus").expect("declared");
    let cfg = SolverConfig {
        epsilon: 1e-10,
        ..SolverConfig::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let runs = t.trajectories.unwrap_or(20);
    let duration = t.duration.unwrap_or(1.0);
    let hold = t.hold.unwrap_or([0.05, 0.3]);
    let mag = t.magnitude.unwrap_or([0.85, 1.05]);
    let ang = t.angle.unwrap_or([-0.1, 0.1]);
    let (copies, noise) = (NOISY_COPIES, FEEDBACK_NOISE * motor.rating);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for run in 0..runs {
        let mut entries = vec![(0.0, vec![draw(&mut rng, mag), draw(&mut rng, ang)])];
        let mut at = draw(&mut rng, hold);
        while at < duration {
            entries.push((at, vec![draw(&mut rng, mag), draw(&mut rng, ang)]));
            at += draw(&mut rng, hold);
        }
        let schedule = USchedule::new(entries)?;
        let (z0, _) = nr_solve(&sys, &sys.flat_start(), &schedule.at(0.0), &cfg)
            .with_context(|| format!("motor steady state for training run {run}"))?;
        let series = transient_solve(&sys, &z0, &schedule, duration, dt, &cfg)
            .with_context(|| format!("motor training run {run}"))?;
        let sample = |z: &[f64]| {
            let s: Vec<f64> = states.iter().map(|&g| z[g]).collect();
            ([z[bus], z[bus + 1]], motor_outputs(motor, &s))
        };
        for w in series.states.windows(2) {
            let (v0, o0) = sample(&w[0]);
            let (v1, o1) = sample(&w[1]);
            xs.push(vec![v1[0], v1[1], v0[0], v0[1], o0[0], o0[1]]);
            ys.push(o1.to_vec());
            // perturbed feedback with the true target pulls closed-loop errors back
            for _ in 0..copies {
                let e: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                xs.push(vec![
                    v1[0],
                    v1[1],
                    v0[0],
                    v0[1],
                    o0[0] + noise * e[0],
                    o0[1] + noise * e[1],
                ]);
                ys.push(o1.to_vec());
            }
        }
    }
    Ok(Dataset::from_rows(&xs, &ys)?)
}

/// Largest boundary-row static residual over the accepted points, re-assembled
/// by replaying the trajectory.
fn replay_boundary_residuals(
    sys: &GrayBoxSystem,
    first: TransientState,
    series: &TimeSeries,
    sim_u: impl Fn(f64) -> Vec<f64>,
) -> Result<Vec<f64>> {
    let rows = sys.boundary_range();
    let mut state = first;
    let mut out = Vec::with_capacity(series.len().saturating_sub(1));
    for (z, &t) in series.states.iter().zip(&series.times).skip(1) {
        state.advance(sys, z.clone(), t, &sim_u(t))?;
        out.push(
            state.static_residual()[rows.clone()]
                .iter()
                .fold(0.0, |m: f64, r| m.max(r.abs())),
        );
    }
    Ok(out)
}

fn mag_at(z: &[f64], at: usize) -> f64 {
    z[at].hypot(z[at + 1])
}

pub(super) fn run(spec: &ExperimentSpec, opts: &RunOptions, seed: u64, report: &mut Report) -> Result<()> {
    let physics_path = spec.physics_path()?;
    let Analysis::Tran { dt, t_end } = read_doc(&physics_path)?.analysis else {
        bail!("masking needs a transient physics netlist");
    };
    let physics = prepared(&physics_path, &mut FsLoader::for_netlist(&physics_path))?;
    let t = &spec.train;
    let dev_name = t.device.as_deref().context("[train] needs `device`")?;
    let masked = physics
        .system
        .subsystems()
        .iter()
        .find(|s| s.id.eq_ignore_ascii_case(dev_name))
        .with_context(|| format!("physics netlist has no device `{dev_name}`"))?;
    let SubsystemKind::Physics(Device::Motor(motor)) = masked.kind else {
        bail!("`{dev_name}` is not a motor");
    };
    let motor_states = masked.internal.clone();
    let bus_at = masked.boundary()[0];
    let bus_name = physics.system.unknown_name(bus_at);

    let data = motor_dataset(&motor, t, dt, seed)?;
    let trained = train_model(t, Preset::Motor, &data, seed, report, "hybrid", "motor.gsnn")?;
    report.set_status("physics", Status::Ran);

    let ((p_dc, p_series), p_time) = median_wall(opts.repeats, || {
        let (z, _) = physics.run_dc()?;
        let s = transient_solve(&physics.system, &z, &physics.schedule, t_end, dt, &physics.solver)?;
        Ok((z, s))
    })?;
    report.push("physics", "wall_time_s", p_time.as_secs_f64());
    report.push("physics", "max_iterations", p_series.max_iterations() as f64);
    push_counts(report, "physics", &physics.system);

    let Some(hybrid_path) = spec.variant_path(&spec.hybrid) else {
        report.set_status("hybrid", Status::NotRun("hybrid netlist missing".into()));
        return Ok(());
    };
    let hybrid = prepared(&hybrid_path, &mut TrainedLoader::new(&hybrid_path, &[trained]))?;
    push_counts(report, "hybrid", &hybrid.system);

    // start from the physics operating point, unknown by unknown
    let names: Vec<String> = (0..physics.system.len())
        .map(|i| physics.system.unknown_name(i))
        .collect();
    let z0 = (0..hybrid.system.len())
        .map(|i| {
            let name = hybrid.system.unknown_name(i);
            names
                .iter()
                .position(|n| *n == name)
                .map(|j| p_dc[j])
                .with_context(|| format!("hybrid unknown `{name}` has no physics counterpart"))
        })
        .collect::<Result<Vec<f64>>>()?;
    let s0: Vec<f64> = motor_states.iter().map(|&g| p_dc[g]).collect();
    let histories: Vec<Option<NeuralHistory>> = hybrid
        .system
        .subsystems()
        .iter()
        .map(|s| {
            s.is_neural().then(|| NeuralHistory {
                ports: s.boundary().iter().map(|&g| z0[g]).collect(),
                outputs: motor_outputs(&motor, &s0).to_vec(),
            })
        })
        .collect();
    let u0 = hybrid.inputs_at(0.0);
    let first = TransientState::with_histories(&hybrid.system, z0, 0.0, &u0, histories)?;
    let h_run = median_wall(opts.repeats, || {
        Ok(transient_from_state(
            &hybrid.system,
            first.clone(),
            &hybrid.schedule,
            t_end,
            dt,
            &hybrid.solver,
        )?)
    });
    let h_series = match h_run {
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
    report.push("hybrid", "max_iterations", h_series.max_iterations() as f64);
    for r in replay_boundary_residuals(&hybrid.system, first, &h_series, |t| hybrid.inputs_at(t))? {
        report.residuals.record(r);
    }

    let h_at = (0..hybrid.system.len())
        .find(|&i| hybrid.system.unknown_name(i) == bus_name)
        .context("masked bus missing from the hybrid")?;
    anyhow::ensure!(p_series.len() == h_series.len(), "trajectories differ in length");
    let rows: Vec<[f64; 4]> = p_series
        .times
        .iter()
        .zip(&p_series.states)
        .zip(&h_series.states)
        .map(|((&t, zp), zh)| {
            let (vp, vh) = (mag_at(zp, bus_at), mag_at(zh, h_at));
            [t, vp, vh, (vh - vp).abs() / vp]
        })
        .collect();
    report.push(
        "hybrid",
        "max_voltage_err",
        rows.iter().fold(0.0, |m: f64, r| m.max(r[3])),
    );
    report.push(
        "hybrid",
        "mean_voltage_err",
        rows.iter().map(|r| r[3]).sum::<f64>() / rows.len() as f64,
    );
    let path = report.artifact("trajectory.csv");
    write_table(
        &path,
        &header(&["t", "physics", "hybrid", "err"]),
        rows.iter().map(|r| r.iter().map(|v| num(*v)).collect::<Vec<_>>()),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_starts_at_equilibrium() {
        let m = InductionMotorReduced {
            rating: 0.3,
            ..Default::default()
        };
        let spec = TrainSpec {
            trajectories: Some(1),
            duration: Some(0.02),
            hold: Some([1.0, 1.0]),
            magnitude: Some([1.0, 1.0]),
            angle: Some([0.0, 0.0]),
            ..Default::default()
        };
        let d = motor_dataset(&m, &spec, 1e-3, 0).unwrap();
        let stride = 1 + NOISY_COPIES;
        assert_eq!(d.len(), 20 * stride);
        // constant source: clean inputs and outputs stay put
        let last = 19 * stride;
        let (x0, y0) = (d.inputs.row(0).to_vec(), d.targets.row(0).to_vec());
        let (xl, yl) = (d.inputs.row(last).to_vec(), d.targets.row(last).to_vec());
        for (a, b) in x0.iter().zip(&xl).chain(y0.iter().zip(&yl)) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert!((x0[4] - y0[0]).abs() < 1e-8);
    }
}
