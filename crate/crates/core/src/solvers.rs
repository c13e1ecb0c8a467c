//! Damped Newton-Raphson for steady state, trapezoidal stepping for
//! transients, and the central-difference Jacobian oracle.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::graybox::{assemble_algebraic, assemble_trapezoidal, GrayBoxError, GrayBoxSystem, TransientState};
use crate::numlin::{inf_norm, lu_solve, DenseMatrix, LinalgError};

/// Maximum number of step halvings per Newton iteration.
const MAX_HALVINGS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    Fail,
    BestIterate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub max_iter: usize,
    pub fallback: Fallback,
    /// Halve the step (up to four times) when it raises the residual norm.
    pub halving: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            epsilon: 1e-6,
            max_iter: 100,
            fallback: Fallback::Fail,
            halving: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(SolverError::InvalidConfig(format!(
                "alpha = {} not in (0, 1]",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(SolverError::InvalidConfig(format!(
                "epsilon = {} must be positive",
                self.epsilon
            )));
        }
        if self.max_iter == 0 {
            return Err(SolverError::InvalidConfig("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    /// `||r||_inf` at the start and after every iteration.
    pub residual_history: Vec<f64>,
    pub final_residual_norm: f64,
    pub wall_time: Duration,
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("no convergence after {} iterations, residual {:e}", report.iterations, report.final_residual_norm)]
    NonConvergence { report: SolveReport, best: Vec<f64> },
    #[error("singular Jacobian at iteration {iteration}: {source}")]
    SingularJacobian {
        iteration: usize,
        #[source]
        source: LinalgError,
    },
    #[error(transparent)]
    Model(#[from] GrayBoxError),
    #[error("transient step to t = {t} did not converge (residual {:e})", report.final_residual_norm)]
    StepNonConvergence {
        t: f64,
        report: SolveReport,
        partial: Box<TimeSeries>,
    },
    #[error("transient aborted at t = {t}: {source}")]
    StepFailed {
        t: f64,
        #[source]
        source: Box<SolverError>,
        partial: Box<TimeSeries>,
    },
}

/// Damped Newton on `f(z) = (r, J)`. With `update_tol` set, convergence also
/// needs at least one update no larger than it.
fn newton<F>(
    mut f: F,
    z0: &[f64],
    cfg: &SolverConfig,
    update_tol: Option<f64>,
) -> Result<(Vec<f64>, SolveReport), SolverError>
where
    F: FnMut(&[f64]) -> Result<(Vec<f64>, DenseMatrix), GrayBoxError>,
{
    cfg.validate()?;
    let start = Instant::now();
    let mut z = z0.to_vec();
    let (mut r, mut jac) = f(&z)?;
    let mut norm = inf_norm(&r);
    if !norm.is_finite() {
        return Err(GrayBoxError::DimensionMismatch("non-finite residual at the initial point".into()).into());
    }
    let mut history = vec![norm];
    let mut best = (z.clone(), norm);
    let mut last_update = f64::INFINITY;
    let done = |norm: f64, upd: f64| norm <= cfg.epsilon && update_tol.is_none_or(|t| upd <= t);

    let mut iterations = 0;
    while !done(norm, last_update) && iterations < cfg.max_iter {
        iterations += 1;
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let dz = lu_solve(&jac, &neg).map_err(|source| SolverError::SingularJacobian {
            iteration: iterations,
            source,
        })?;
        let mut step = cfg.alpha;
        let mut halvings = 0;
        loop {
            let trial: Vec<f64> = z.iter().zip(&dz).map(|(a, d)| a + step * d).collect();
            let can_halve = cfg.halving && halvings < MAX_HALVINGS;
            match f(&trial) {
                Ok((rt, jt)) => {
                    let nt = inf_norm(&rt);
                    let worse = !nt.is_finite() || nt > norm;
                    if worse && can_halve {
                        step *= 0.5;
                        halvings += 1;
                        continue;
                    }
                    if !nt.is_finite() {
                        return Err(GrayBoxError::DimensionMismatch(format!(
                            "non-finite residual at iteration {iterations}"
                        ))
                        .into());
                    }
                    last_update = step * inf_norm(&dz);
                    z = trial;
                    r = rt;
                    jac = jt;
                    norm = nt;
                    break;
                }
                Err(_) if can_halve => {
                    step *= 0.5;
                    halvings += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
        history.push(norm);
        if norm < best.1 {
            best = (z.clone(), norm);
        }
    }

    let converged = done(norm, last_update);
    let report = SolveReport {
        converged,
        iterations,
        residual_history: history,
        final_residual_norm: norm,
        wall_time: start.elapsed(),
    };
    if converged {
        return Ok((z, report));
    }
    match cfg.fallback {
        Fallback::Fail => Err(SolverError::NonConvergence { report, best: best.0 }),
        Fallback::BestIterate => {
            let report = SolveReport {
                final_residual_norm: best.1,
                ..report
            };
            Ok((best.0, report))
        }
    }
}

/// Steady-state solve `z <- z + alpha dz`, `J dz = -r`, until `||r||_inf <= eps`.
pub fn nr_solve(
    sys: &GrayBoxSystem,
    z0: &[f64],
    u: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveReport), SolverError> {
    newton(|z| assemble_algebraic(sys, z, u), z0, cfg, None)
}

/// Largest boundary (KCL) residual of the steady-state equations at `z`.
pub fn boundary_residual(sys: &GrayBoxSystem, z: &[f64], u: &[f64]) -> Result<f64, GrayBoxError> {
    let (r, _) = assemble_algebraic(sys, z, u)?;
    Ok(inf_norm(&r[sys.boundary_range()]))
}

/// Piecewise-constant exogenous inputs: each entry holds from its time until the next.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct USchedule {
    entries: Vec<(f64, Vec<f64>)>,
}

impl USchedule {
    pub fn new(mut entries: Vec<(f64, Vec<f64>)>) -> Result<Self, SolverError> {
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, first)) = entries.first() {
            let w = first.len();
            if entries.iter().any(|(t, v)| v.len() != w || !t.is_finite()) {
                return Err(SolverError::InvalidConfig(
                    "schedule entries must share one width".into(),
                ));
            }
        }
        if entries.windows(2).any(|p| p[0].0 == p[1].0) {
            return Err(SolverError::InvalidConfig("duplicate schedule time".into()));
        }
        Ok(Self { entries })
    }

    pub fn constant(u: Vec<f64>) -> Self {
        Self {
            entries: vec![(0.0, u)],
        }
    }

    pub fn entries(&self) -> &[(f64, Vec<f64>)] {
        &self.entries
    }

    /// Inputs in force at `t`; before the first entry the first entry applies.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let tol = 1e-9 * (1.0 + t.abs());
        self.entries
            .iter()
            .take_while(|(te, _)| *te <= t + tol)
            .last()
            .or(self.entries.first())
            .map(|(_, u)| u.clone())
            .unwrap_or_default()
    }
}

/// Uniformly spaced transient samples. `reports[k]` belongs to the step
/// ending at `times[k + 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeSeries {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub reports: Vec<SolveReport>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Trajectory of unknown `i`.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[i]).collect()
    }

    pub fn max_iterations(&self) -> usize {
        self.reports.iter().map(|r| r.iterations).max().unwrap_or(0)
    }
}

/// Integrates from `z_init` (neural histories at steady state) with step
/// times `k dt`, using `u(t + dt)` for new-time terms.
pub fn transient_solve(
    sys: &GrayBoxSystem,
    z_init: &[f64],
    schedule: &USchedule,
    t_end: f64,
    dt: f64,
    cfg: &SolverConfig,
) -> Result<TimeSeries, SolverError> {
    let state = TransientState::from_steady(sys, z_init.to_vec(), 0.0, &schedule.at(0.0))?;
    transient_from_state(sys, state, schedule, t_end, dt, cfg)
}

/// As [`transient_solve`] from an explicit starting state.
pub fn transient_from_state(
    sys: &GrayBoxSystem,
    mut state: TransientState,
    schedule: &USchedule,
    t_end: f64,
    dt: f64,
    cfg: &SolverConfig,
) -> Result<TimeSeries, SolverError> {
    cfg.validate()?;
    if !(dt > 0.0 && t_end >= dt) {
        return Err(SolverError::InvalidConfig(format!(
            "need dt > 0 and t_end >= dt (dt={dt}, t_end={t_end})"
        )));
    }
    let steps = (t_end / dt).round() as usize;
    let t0 = state.t;
    let mut series = TimeSeries {
        times: vec![t0],
        states: vec![state.z.clone()],
        reports: Vec::with_capacity(steps),
    };
    for k in 1..=steps {
        let t = t0 + k as f64 * dt;
        let u = schedule.at(t);
        let solved = newton(
            |z| assemble_trapezoidal(sys, &state, z, &u, dt),
            &state.z,
            &SolverConfig {
                fallback: Fallback::Fail,
                ..*cfg
            },
            Some(cfg.epsilon),
        );
        let (z, report) = match solved {
            Ok(ok) => ok,
            Err(SolverError::NonConvergence { report, .. }) => {
                return Err(SolverError::StepNonConvergence {
                    t,
                    report,
                    partial: Box::new(series),
                })
            }
            Err(e) => {
                return Err(SolverError::StepFailed {
                    t,
                    source: Box::new(e),
                    partial: Box::new(series),
                })
            }
        };
        if let Err(e) = state.advance(sys, z, t, &u) {
            return Err(SolverError::StepFailed {
                t,
                source: Box::new(e.into()),
                partial: Box::new(series),
            });
        }
        series.times.push(t);
        series.states.push(state.z.clone());
        series.reports.push(report);
    }
    Ok(series)
}

/// Central differences, column `j` stepped by `h (1 + |z_j|)`.
pub fn fd_jacobian<F>(mut f: F, z: &[f64], h: f64) -> DenseMatrix
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = z.len();
    let m = f(z).len();
    let mut jac = DenseMatrix::zeros(m, n);
    let mut x = z.to_vec();
    for j in 0..n {
        let step = h * (1.0 + z[j].abs());
        x[j] = z[j] + step;
        let fp = f(&x);
        x[j] = z[j] - step;
        let fm = f(&x);
        x[j] = z[j];
        let col: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * step)).collect();
        jac.set_column(j, &col);
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::{diode_eval, Capacitor, Device, Diode, Resistor, Source, Units, VSource};
    use crate::graybox::{AnalysisKind, SubsystemKind, SubsystemSpec};

    fn phys(id: &str, d: Device, t: &[Option<usize>]) -> SubsystemSpec {
        SubsystemSpec {
            id: id.into(),
            kind: SubsystemKind::Physics(d),
            terminals: t.to_vec(),
        }
    }

    fn diode_circuit(diode: Diode, e: f64) -> GrayBoxSystem {
        GrayBoxSystem::new(
            Units::Si,
            AnalysisKind::Algebraic,
            vec!["a".into(), "b".into()],
            vec![
                phys("v1", Device::VSource(VSource::new(Source::Const(e))), &[Some(0), None]),
                phys(
                    "r1",
                    Device::Resistor(Resistor::new(600.0).unwrap()),
                    &[Some(0), Some(1)],
                ),
                phys("d1", Device::Diode(diode), &[Some(1), None]),
            ],
        )
        .unwrap()
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) > 0.0) == (f(lo) > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn rc() -> GrayBoxSystem {
        GrayBoxSystem::new(
            Units::Si,
            AnalysisKind::Differential,
            vec!["a".into()],
            vec![
                phys("r1", Device::Resistor(Resistor::new(1.0).unwrap()), &[Some(0), None]),
                phys("c1", Device::Capacitor(Capacitor::new(1.0).unwrap()), &[Some(0), None]),
            ],
        )
        .unwrap()
    }

    fn rc_max_error(dt: f64) -> f64 {
        let ts = transient_solve(&rc(), &[1.0], &USchedule::default(), 1.0, dt, &SolverConfig::default()).unwrap();
        ts.times
            .iter()
            .zip(&ts.states)
            .map(|(t, s)| (s[0] - (-t).exp()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn linear_divider_one_iteration() {
        let sys = GrayBoxSystem::new(
            Units::Si,
            AnalysisKind::Algebraic,
            vec!["a".into(), "b".into()],
            vec![
                phys(
                    "v1",
                    Device::VSource(VSource::new(Source::Const(1.0))),
                    &[Some(0), None],
                ),
                phys("r1", Device::Resistor(Resistor::new(1.0).unwrap()), &[Some(0), Some(1)]),
                phys("r2", Device::Resistor(Resistor::new(1.0).unwrap()), &[Some(1), None]),
            ],
        )
        .unwrap();
        let (z, rep) = nr_solve(&sys, &sys.flat_start(), &[], &SolverConfig::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert_eq!(rep.residual_history.len(), 2);
        assert!((z[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn diode_matches_bisection() {
        for (is, vt) in [(1e-12, 0.025), (1e-10, 0.06)] {
            let d = Diode::new(is, vt).unwrap();
            let sys = diode_circuit(d, 1.0);
            let cfg = SolverConfig {
                epsilon: 1e-13,
                ..Default::default()
            };
            let (z, rep) = nr_solve(&sys, &sys.flat_start(), &[], &cfg).unwrap();
            assert!(rep.converged);
            let oracle = bisect(|v| (1.0 - v) / 600.0 - diode_eval(&d, v).unwrap().0, 0.0, 1.0);
            assert!((z[2] - oracle).abs() < 1e-9, "{} vs {oracle}", z[2]);
        }
    }

    #[test]
    fn one_iteration_does_not_converge() {
        let sys = diode_circuit(Diode::new(1e-12, 0.025).unwrap(), 1.0);
        let cfg = SolverConfig {
            max_iter: 1,
            epsilon: 1e-14,
            ..Default::default()
        };
        match nr_solve(&sys, &sys.flat_start(), &[], &cfg) {
            Err(SolverError::NonConvergence { report, .. }) => {
                assert!(!report.converged);
                assert_eq!(report.residual_history.len(), 2);
            }
            other => panic!("{other:?}"),
        }
        let best = SolverConfig {
            fallback: Fallback::BestIterate,
            ..cfg
        };
        let (_, rep) = nr_solve(&sys, &sys.flat_start(), &[], &best).unwrap();
        assert!(!rep.converged);
    }

    #[test]
    fn half_damping_decreases_monotonically() {
        let sys = diode_circuit(Diode::new(1e-12, 0.025).unwrap(), 1.0);
        let cfg = SolverConfig {
            alpha: 0.5,
            epsilon: 1e-12,
            ..Default::default()
        };
        let (_, rep) = nr_solve(&sys, &sys.flat_start(), &[], &cfg).unwrap();
        let h = &rep.residual_history;
        assert!(h.len() > 4);
        for w in h[2..].windows(2) {
            assert!(w[1] < w[0], "{h:?}");
        }
    }

    #[test]
    fn converged_residual_is_fresh() {
        let sys = diode_circuit(Diode::new(1e-10, 0.06).unwrap(), 0.7);
        let cfg = SolverConfig::default();
        let (z, rep) = nr_solve(&sys, &sys.flat_start(), &[], &cfg).unwrap();
        let (r, _) = assemble_algebraic(&sys, &z, &[]).unwrap();
        assert!(inf_norm(&r) <= cfg.epsilon);
        assert_eq!(inf_norm(&r), rep.final_residual_norm);
    }

    #[test]
    fn rc_decay_accuracy_and_order() {
        let e1 = rc_max_error(1e-3);
        let e2 = rc_max_error(2e-3);
        assert!(e1 <= 1e-6, "{e1}");
        let ratio = e2 / e1;
        assert!((ratio - 4.0).abs() <= 0.4, "{ratio}");
    }

    #[test]
    fn equilibrium_is_kept() {
        let sys = diode_circuit(Diode::new(1e-10, 0.06).unwrap(), 0.8);
        let (z, _) = nr_solve(
            &sys,
            &sys.flat_start(),
            &[],
            &SolverConfig {
                epsilon: 1e-14,
                ..Default::default()
            },
        )
        .unwrap();
        let ts = transient_solve(&sys, &z, &USchedule::default(), 0.1, 1e-3, &SolverConfig::default()).unwrap();
        assert_eq!(ts.len(), 101);
        for s in &ts.states {
            assert!(s.iter().zip(&z).all(|(a, b)| (a - b).abs() <= 1e-10));
        }
    }

    #[test]
    fn schedule_is_piecewise_constant() {
        let s = USchedule::new(vec![(0.5, vec![2.0]), (0.0, vec![1.0])]).unwrap();
        assert_eq!(s.at(0.0), vec![1.0]);
        assert_eq!(s.at(0.4999), vec![1.0]);
        assert_eq!(s.at(0.5), vec![2.0]);
        assert_eq!(s.at(9.0), vec![2.0]);
        assert!(USchedule::new(vec![(0.0, vec![1.0]), (1.0, vec![1.0, 2.0])]).is_err());
        assert!(USchedule::default().at(1.0).is_empty());
    }

    #[test]
    fn fd_oracle_examples() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let j = fd_jacobian(|z| a.matvec(z), &[0.3, -2.0], 1e-5);
        assert!(j.max_abs_diff(&a) < 1e-9);
        let j = fd_jacobian(|z| vec![z[0] * z[0]], &[3.0], 1e-5);
        assert!((j[(0, 0)] - 6.0).abs() < 1e-7);
        let d = Diode::new(1e-12, 0.025).unwrap();
        let j = fd_jacobian(|z| vec![diode_eval(&d, z[0]).unwrap().0], &[0.6], 1e-5);
        let g = diode_eval(&d, 0.6).unwrap().1;
        assert!((j[(0, 0)] - g).abs() / g < 1e-5);
    }

    #[test]
    fn bad_config_rejected() {
        let sys = rc();
        for cfg in [
            SolverConfig {
                alpha: 0.0,
                ..Default::default()
            },
            SolverConfig {
                alpha: 1.5,
                ..Default::default()
            },
            SolverConfig {
                epsilon: 0.0,
                ..Default::default()
            },
            SolverConfig {
                max_iter: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                nr_solve(&sys, &[0.0], &[], &cfg),
                Err(SolverError::InvalidConfig(_))
            ));
        }
    }
}
