//! Partitioned gray-box systems and their residual assembly.
//!
//! Unknowns are `z = [x; y]`: internal device states first (subsystem order),
//! then node voltages (node-major, one or two components each). Residual rows
//! follow the same layout, with node rows holding KCL (sum of currents leaving
//! the node into devices). The transient form is `M dz/dt + S(z, u) = 0`.

use std::fmt;

use thiserror::Error;

use crate::devices::{Device, DeviceError, Entry, LocalEval, NeuralDevice, NeuralHistory, Units};
use crate::numlin::DenseMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrayBoxError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("subsystem `{subsystem}`: {source}")]
    Device {
        subsystem: String,
        #[source]
        source: DeviceError,
    },
    #[error("system is not square: {0}")]
    NotSquare(String),
    #[error("invalid topology: {0}")]
    Topology(String),
}

pub type Result<T, E = GrayBoxError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisKind {
    Algebraic,
    Differential,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SubsystemKind {
    Physics(Device),
    Neural(NeuralDevice),
}

/// One partition block with its slots in the global unknown vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsystem {
    pub id: String,
    pub kind: SubsystemKind,
    /// Global indices of the private states `x_i`.
    pub internal: Vec<usize>,
    /// Node index per terminal, `None` for ground.
    pub terminals: Vec<Option<usize>>,
    /// Global index of each local unknown, `None` for grounded components.
    local_map: Vec<Option<usize>>,
}

impl Subsystem {
    pub fn is_neural(&self) -> bool {
        matches!(self.kind, SubsystemKind::Neural(_))
    }

    /// Global indices of the boundary voltages the subsystem touches.
    pub fn boundary(&self) -> Vec<usize> {
        self.local_map[self.internal.len()..]
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    /// Exogenous inputs read by the subsystem.
    pub fn inputs(&self) -> Vec<usize> {
        match &self.kind {
            SubsystemKind::Physics(d) => d.input_indices(),
            SubsystemKind::Neural(n) => n.max_input_index().map(|k| (0..=k).collect()).unwrap_or_default(),
        }
    }

    fn gather(&self, z: &[f64]) -> Vec<f64> {
        self.local_map.iter().map(|g| g.map_or(0.0, |i| z[i])).collect()
    }

    fn kind_name(&self) -> &'static str {
        match &self.kind {
            SubsystemKind::Physics(d) => d.kind_name(),
            SubsystemKind::Neural(_) => "nndevice",
        }
    }
}

/// Subsystem description before slot assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemSpec {
    pub id: String,
    pub kind: SubsystemKind,
    pub terminals: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrayBoxSystem {
    units: Units,
    analysis: AnalysisKind,
    node_names: Vec<String>,
    subsystems: Vec<Subsystem>,
    n_internal: usize,
    n_inputs: usize,
    mass: Vec<Entry>,
    differential_rows: Vec<bool>,
}

impl GrayBoxSystem {
    pub fn new(
        units: Units,
        analysis: AnalysisKind,
        node_names: Vec<String>,
        specs: Vec<SubsystemSpec>,
    ) -> Result<Self> {
        let c = units.components();
        let n_nodes = node_names.len();
        let mut n_internal = 0;
        let mut n_inputs = 0;
        let mut subsystems = Vec::with_capacity(specs.len());
        for spec in &specs {
            let (n_int, n_term) = match &spec.kind {
                SubsystemKind::Physics(d) => {
                    if !d.supports(units) {
                        return Err(GrayBoxError::Topology(format!(
                            "{} `{}` is not defined for {units:?} units",
                            d.kind_name(),
                            spec.id
                        )));
                    }
                    (d.n_internal(units), d.n_terminals())
                }
                SubsystemKind::Neural(n) => {
                    if n.units() != units {
                        return Err(GrayBoxError::Topology(format!(
                            "nndevice `{}` built for {:?} units",
                            spec.id,
                            n.units()
                        )));
                    }
                    (0, n.n_terminals())
                }
            };
            if spec.terminals.len() != n_term {
                return Err(GrayBoxError::Topology(format!(
                    "`{}` needs {n_term} terminals, got {}",
                    spec.id,
                    spec.terminals.len()
                )));
            }
            if let Some(bad) = spec.terminals.iter().flatten().find(|&&t| t >= n_nodes) {
                return Err(GrayBoxError::Topology(format!(
                    "`{}` references node index {bad} of {n_nodes}",
                    spec.id
                )));
            }
            let internal: Vec<usize> = (n_internal..n_internal + n_int).collect();
            n_internal += n_int;
            subsystems.push(Subsystem {
                id: spec.id.clone(),
                kind: spec.kind.clone(),
                internal,
                terminals: spec.terminals.clone(),
                local_map: Vec::new(),
            });
        }
        for sub in &mut subsystems {
            let mut map: Vec<Option<usize>> = sub.internal.iter().map(|&i| Some(i)).collect();
            for t in &sub.terminals {
                for k in 0..c {
                    map.push(t.map(|node| n_internal + node * c + k));
                }
            }
            sub.local_map = map;
            n_inputs = n_inputs.max(sub.inputs().iter().max().map_or(0, |m| m + 1));
        }

        let mut referenced = vec![false; n_nodes];
        for t in subsystems.iter().flat_map(|s| s.terminals.iter().flatten()) {
            referenced[*t] = true;
        }
        if let Some(i) = referenced.iter().position(|r| !r) {
            return Err(GrayBoxError::Topology(format!(
                "node `{}` is not connected to any device",
                node_names[i]
            )));
        }

        let n = n_internal + n_nodes * c;
        let mut mass = Vec::new();
        for sub in &subsystems {
            if let SubsystemKind::Physics(d) = &sub.kind {
                for (r, col, v) in d.mass(units) {
                    if let (Some(gr), Some(gc)) = (sub.local_map[r], sub.local_map[col]) {
                        mass.push((gr, gc, v));
                    }
                }
            }
        }
        let mut differential_rows = vec![false; n];
        for &(r, _, v) in &mass {
            if v != 0.0 {
                differential_rows[r] = true;
            }
        }

        let sys = Self {
            units,
            analysis,
            node_names,
            subsystems,
            n_internal,
            n_inputs,
            mass,
            differential_rows,
        };
        sys.check_structure()?;
        Ok(sys)
    }

    /// Rejects systems whose equation/unknown incidence has no perfect matching.
    fn check_structure(&self) -> Result<()> {
        let n = self.len();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for sub in &self.subsystems {
            let local = match &sub.kind {
                SubsystemKind::Physics(d) => d.pattern(self.units),
                SubsystemKind::Neural(nd) => nd.pattern(),
            };
            for (r, col) in local {
                if let (Some(gr), Some(gc)) = (sub.local_map[r], sub.local_map[col]) {
                    adj[gr].push(gc);
                }
            }
        }
        if self.analysis == AnalysisKind::Differential {
            for &(r, col, _) in &self.mass {
                adj[r].push(col);
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        let rank = max_matching(&adj, n);
        if rank == n {
            return Ok(());
        }
        let mut msg = format!(
            "{n} equations in {n} unknowns but structural rank {rank} ({} analysis); subsystems:",
            match self.analysis {
                AnalysisKind::Algebraic => "dc",
                AnalysisKind::Differential => "tran",
            }
        );
        for sub in &self.subsystems {
            msg.push_str(&format!(
                " {}({}): {} internal, {} boundary;",
                sub.id,
                sub.kind_name(),
                sub.internal.len(),
                sub.boundary().len()
            ));
        }
        let empty: Vec<String> = (0..n)
            .filter(|&r| adj[r].is_empty())
            .map(|r| self.unknown_name(r))
            .collect();
        if !empty.is_empty() {
            msg.push_str(&format!(" empty equations for {}", empty.join(", ")));
        }
        Err(GrayBoxError::NotSquare(msg))
    }

    pub fn units(&self) -> Units {
        self.units
    }

    pub fn analysis(&self) -> AnalysisKind {
        self.analysis
    }

    pub fn subsystems(&self) -> &[Subsystem] {
        &self.subsystems
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    pub fn n_internal(&self) -> usize {
        self.n_internal
    }

    pub fn n_boundary(&self) -> usize {
        self.node_names.len() * self.units.components()
    }

    /// Total unknowns `len(z)`.
    pub fn len(&self) -> usize {
        self.n_internal + self.n_boundary()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of exogenous inputs the system reads.
    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn mass(&self) -> &[Entry] {
        &self.mass
    }

    pub fn boundary_range(&self) -> std::ops::Range<usize> {
        self.n_internal..self.len()
    }

    /// Global index of a node voltage component.
    pub fn node_index(&self, name: &str) -> Option<usize> {
        let c = self.units.components();
        self.node_names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .map(|i| self.n_internal + i * c)
    }

    /// Display name of unknown `i`, e.g. `v(a)`, `v(bus1).im`, `l1.i`.
    pub fn unknown_name(&self, i: usize) -> String {
        if i < self.n_internal {
            for sub in &self.subsystems {
                if let Some(k) = sub.internal.iter().position(|&g| g == i) {
                    let names = match &sub.kind {
                        SubsystemKind::Physics(d) => d.internal_names(self.units),
                        SubsystemKind::Neural(_) => Vec::new(),
                    };
                    return format!("{}.{}", sub.id, names.get(k).copied().unwrap_or("x"));
                }
            }
            unreachable!("internal index {i} not owned");
        }
        let c = self.units.components();
        let b = i - self.n_internal;
        let node = &self.node_names[b / c];
        match self.units {
            Units::Si => format!("v({node})"),
            Units::PerUnit => format!("v({node}).{}", ["re", "im"][b % c]),
        }
    }

    /// Flat start: zero for circuits; 1+j0 pu node voltages and nominal
    /// device states for grids.
    pub fn flat_start(&self) -> Vec<f64> {
        let mut z = vec![0.0; self.len()];
        if self.units == Units::PerUnit {
            for sub in &self.subsystems {
                if let SubsystemKind::Physics(d) = &sub.kind {
                    for (&g, v) in sub.internal.iter().zip(d.initial_internal(self.units)) {
                        z[g] = v;
                    }
                }
            }
            for node in 0..self.node_names.len() {
                z[self.n_internal + 2 * node] = 1.0;
            }
        }
        z
    }

    fn check_inputs(&self, z: &[f64], u: &[f64]) -> Result<()> {
        if z.len() != self.len() {
            return Err(GrayBoxError::DimensionMismatch(format!(
                "z has {} entries, system has {} unknowns",
                z.len(),
                self.len()
            )));
        }
        if u.len() < self.n_inputs {
            return Err(GrayBoxError::DimensionMismatch(format!(
                "system reads {} inputs, {} given",
                self.n_inputs,
                u.len()
            )));
        }
        Ok(())
    }

    /// Static residual `S(z, u)` and Jacobian. `histories` switches recurrent
    /// neural devices from steady-state to time-step evaluation.
    fn assemble_static(
        &self,
        z: &[f64],
        u: &[f64],
        histories: Option<&[Option<NeuralHistory>]>,
        neural_out: Option<&mut Vec<Option<NeuralHistory>>>,
    ) -> Result<(Vec<f64>, DenseMatrix)> {
        self.check_inputs(z, u)?;
        let n = self.len();
        let mut r = vec![0.0; n];
        let mut jac = DenseMatrix::zeros(n, n);
        let mut outs = Vec::with_capacity(self.subsystems.len());
        for (si, sub) in self.subsystems.iter().enumerate() {
            let local = sub.gather(z);
            let wrap = |source: DeviceError| GrayBoxError::Device {
                subsystem: sub.id.clone(),
                source,
            };
            let ev: LocalEval = match &sub.kind {
                SubsystemKind::Physics(d) => {
                    outs.push(None);
                    d.eval(self.units, &local, u).map_err(wrap)?
                }
                SubsystemKind::Neural(nd) => {
                    let hist = histories.and_then(|h| h[si].as_ref());
                    let ne = match hist {
                        Some(h) if nd.is_recurrent() => nd.eval_step(&local, u, h),
                        _ => nd.eval_steady(&local, u),
                    }
                    .map_err(wrap)?;
                    outs.push(Some(NeuralHistory {
                        ports: ne.ports,
                        outputs: ne.outputs,
                    }));
                    ne.local
                }
            };
            scatter(&sub.local_map, &ev, &mut r, &mut jac);
        }
        if let Some(o) = neural_out {
            *o = outs;
        }
        Ok((r, jac))
    }

    /// Neural outputs at a steady operating point, for reporting.
    pub fn neural_outputs(&self, z: &[f64], u: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let mut outs = Vec::new();
        self.assemble_static(z, u, None, Some(&mut outs))?;
        Ok(outs.into_iter().map(|o| o.map(|h| h.outputs)).collect())
    }
}

fn scatter(map: &[Option<usize>], ev: &LocalEval, r: &mut [f64], jac: &mut DenseMatrix) {
    for (lr, gr) in map.iter().enumerate() {
        let Some(gr) = *gr else { continue };
        r[gr] += ev.residual[lr];
        for (lc, gc) in map.iter().enumerate() {
            if let Some(gc) = *gc {
                let v = ev.jacobian[(lr, lc)];
                if v != 0.0 {
                    jac[(gr, gc)] += v;
                }
            }
        }
    }
}

/// Size of a maximum matching between rows and the columns they touch.
fn max_matching(adj: &[Vec<usize>], n_cols: usize) -> usize {
    fn augment(r: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &c in &adj[r] {
            if seen[c] {
                continue;
            }
            seen[c] = true;
            if owner[c].is_none_or(|o| augment(o, adj, seen, owner)) {
                owner[c] = Some(r);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; n_cols];
    let mut size = 0;
    for r in 0..adj.len() {
        let mut seen = vec![false; n_cols];
        if augment(r, adj, &mut seen, &mut owner) {
            size += 1;
        }
    }
    size
}

/// Steady-state residual and Jacobian (recurrent neural devices at their fixed point).
pub fn assemble_algebraic(sys: &GrayBoxSystem, z: &[f64], u: &[f64]) -> Result<(Vec<f64>, DenseMatrix)> {
    sys.assemble_static(z, u, None, None)
}

/// `(n_internal, n_boundary)`; neural subsystems add no internal unknowns.
pub fn count_unknowns(sys: &GrayBoxSystem) -> (usize, usize) {
    (sys.n_internal(), sys.n_boundary())
}

/// Accepted transient point with the old-time terms of the trapezoidal rule.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientState {
    pub z: Vec<f64>,
    pub t: f64,
    static_residual: Vec<f64>,
    histories: Vec<Option<NeuralHistory>>,
}

impl TransientState {
    /// Starts from `z` with neural histories at their steady operating point.
    pub fn from_steady(sys: &GrayBoxSystem, z: Vec<f64>, t: f64, u: &[f64]) -> Result<Self> {
        let mut outs = Vec::new();
        let (s, _) = sys.assemble_static(&z, u, None, Some(&mut outs))?;
        Ok(Self {
            z,
            t,
            static_residual: s,
            histories: outs,
        })
    }

    /// Starts from `z` with caller-supplied neural histories (one slot per subsystem).
    pub fn with_histories(
        sys: &GrayBoxSystem,
        z: Vec<f64>,
        t: f64,
        u: &[f64],
        histories: Vec<Option<NeuralHistory>>,
    ) -> Result<Self> {
        if histories.len() != sys.subsystems().len() {
            return Err(GrayBoxError::DimensionMismatch(format!(
                "{} histories for {} subsystems",
                histories.len(),
                sys.subsystems().len()
            )));
        }
        let (s, _) = sys.assemble_static(&z, u, Some(&histories), None)?;
        Ok(Self {
            z,
            t,
            static_residual: s,
            histories,
        })
    }

    pub fn histories(&self) -> &[Option<NeuralHistory>] {
        &self.histories
    }

    /// Cached `S` at the accepted point.
    pub fn static_residual(&self) -> &[f64] {
        &self.static_residual
    }

    /// Moves to `z_next`: caches `S` there (evaluated against the old
    /// histories, as in the step that produced it) and shifts the histories.
    pub fn advance(&mut self, sys: &GrayBoxSystem, z_next: Vec<f64>, t_next: f64, u: &[f64]) -> Result<()> {
        let mut outs = Vec::new();
        let (s, _) = sys.assemble_static(&z_next, u, Some(&self.histories), Some(&mut outs))?;
        for (h, o) in self.histories.iter_mut().zip(outs) {
            if h.is_some() {
                *h = o;
            }
        }
        self.static_residual = s;
        self.z = z_next;
        self.t = t_next;
        Ok(())
    }
}

/// Trapezoidal-step residual for `z` at `t + dt`: differential rows hold
/// `M (z - z_prev) + dt/2 (S(z) + S_prev)`, algebraic rows `dt/2 S(z)`.
/// Jacobian is `M + dt/2 dS/dz` on differential rows, `dt/2 dS/dz` elsewhere.
pub fn assemble_trapezoidal(
    sys: &GrayBoxSystem,
    prev: &TransientState,
    z: &[f64],
    u: &[f64],
    dt: f64,
) -> Result<(Vec<f64>, DenseMatrix)> {
    if !(dt >= 0.0) {
        return Err(GrayBoxError::DimensionMismatch(format!(
            "dt = {dt} must be non-negative"
        )));
    }
    if prev.z.len() != sys.len() {
        return Err(GrayBoxError::DimensionMismatch("previous state size".into()));
    }
    let (s, mut jac) = sys.assemble_static(z, u, Some(&prev.histories), None)?;
    let half = 0.5 * dt;
    let mut r: Vec<f64> = s
        .iter()
        .zip(&prev.static_residual)
        .zip(&sys.differential_rows)
        .map(|((sn, so), &diff)| if diff { half * (sn + so) } else { half * sn })
        .collect();
    jac.scale(half);
    for &(row, col, m) in &sys.mass {
        r[row] += m * (z[col] - prev.z[col]);
        jac[(row, col)] += m;
    }
    Ok((r, jac))
}

impl fmt::Display for GrayBoxSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let neural = self.subsystems.iter().filter(|s| s.is_neural()).count();
        write!(
            f,
            "{} subsystems ({neural} neural), {} internal + {} boundary unknowns",
            self.subsystems.len(),
            self.n_internal,
            self.n_boundary()
        )
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::devices::{Capacitor, InputSlot, Resistor, Source, VSource};
    use crate::neural::{Activation, Layer, Mlp};
    use crate::solvers::fd_jacobian;

    fn spec(id: &str, d: Device, t: &[Option<usize>]) -> SubsystemSpec {
        SubsystemSpec {
            id: id.into(),
            kind: SubsystemKind::Physics(d),
            terminals: t.to_vec(),
        }
    }

    fn divider() -> Vec<SubsystemSpec> {
        vec![
            spec(
                "v1",
                Device::VSource(VSource::new(Source::Const(1.0))),
                &[Some(0), None],
            ),
            spec("r1", Device::Resistor(Resistor::new(1.0).unwrap()), &[Some(0), Some(1)]),
            spec("r2", Device::Resistor(Resistor::new(1.0).unwrap()), &[Some(1), None]),
        ]
    }

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn divider_exact_solution_has_zero_residual() {
        let sys = GrayBoxSystem::new(Units::Si, AnalysisKind::Algebraic, names(&["a", "b"]), divider()).unwrap();
        assert_eq!(count_unknowns(&sys), (1, 2));
        // z = [i_v1, v_a, v_b]; the source delivers 0.5 A so its branch current is -0.5
        let (r, _) = assemble_algebraic(&sys, &[-0.5, 1.0, 0.5], &[]).unwrap();
        assert!(r.iter().all(|v| v.abs() <= 1e-12), "{r:?}");
        assert_eq!(sys.unknown_name(0), "v1.i");
        assert_eq!(sys.unknown_name(2), "v(b)");
    }

    #[test]
    fn empty_system() {
        let sys = GrayBoxSystem::new(Units::Si, AnalysisKind::Algebraic, Vec::new(), Vec::new()).unwrap();
        assert_eq!(count_unknowns(&sys), (0, 0));
    }

    #[test]
    fn unconnected_node_and_singular_structure_rejected() {
        let r = GrayBoxSystem::new(Units::Si, AnalysisKind::Algebraic, names(&["a", "b", "c"]), divider());
        assert!(matches!(r, Err(GrayBoxError::Topology(_))));
        let cap_only = vec![
            spec("r1", Device::Resistor(Resistor::new(1.0).unwrap()), &[Some(0), None]),
            spec("c1", Device::Capacitor(Capacitor::new(1.0).unwrap()), &[Some(1), None]),
        ];
        let r = GrayBoxSystem::new(Units::Si, AnalysisKind::Algebraic, names(&["a", "b"]), cap_only.clone());
        assert!(matches!(r, Err(GrayBoxError::NotSquare(_))));
        assert!(GrayBoxSystem::new(Units::Si, AnalysisKind::Differential, names(&["a", "b"]), cap_only).is_ok());
    }

    fn zero_net(inputs: usize) -> Arc<Mlp> {
        let layer = Layer::new(DenseMatrix::zeros(1, inputs), vec![0.0], Activation::Identity).unwrap();
        Arc::new(Mlp::from_layers(vec![layer]).unwrap())
    }

    #[test]
    fn zero_network_adds_nothing() {
        let mut specs = divider();
        let base = GrayBoxSystem::new(Units::Si, AnalysisKind::Algebraic, names(&["a", "b"]), specs.clone()).unwrap();
        let nd = NeuralDevice::new(zero_net(1), 1, Units::Si, vec![InputSlot::V(None)], None).unwrap();
        specs.push(SubsystemSpec {
            id: "nn".into(),
            kind: SubsystemKind::Neural(nd),
            terminals: vec![Some(1)],
        });
        let hyb = GrayBoxSystem::new(Units::Si, AnalysisKind::Algebraic, names(&["a", "b"]), specs).unwrap();
        let z = [0.3, 0.9, -0.2];
        assert_eq!(
            assemble_algebraic(&base, &z, &[]).unwrap(),
            assemble_algebraic(&hyb, &z, &[]).unwrap()
        );
    }

    #[test]
    fn rc_trapezoid_step_and_zero_dt() {
        let specs = vec![
            spec("r1", Device::Resistor(Resistor::new(1.0).unwrap()), &[Some(0), None]),
            spec("c1", Device::Capacitor(Capacitor::new(1.0).unwrap()), &[Some(0), None]),
        ];
        let sys = GrayBoxSystem::new(Units::Si, AnalysisKind::Differential, names(&["a"]), specs).unwrap();
        let prev = TransientState::from_steady(&sys, vec![1.0], 0.0, &[]).unwrap();
        let (r, _) = assemble_trapezoidal(&sys, &prev, &[1.0], &[], 0.0).unwrap();
        assert_eq!(r, vec![0.0]);
        // linear in v: one Newton step from any guess is exact
        let dt = 0.1;
        let (r, j) = assemble_trapezoidal(&sys, &prev, &[0.0], &[], dt).unwrap();
        let v = -r[0] / j[(0, 0)];
        let want = (1.0 - dt / 2.0) / (1.0 + dt / 2.0);
        assert!((v - want).abs() < 1e-14);
        let fd = fd_jacobian(
            |z| assemble_trapezoidal(&sys, &prev, z, &[], dt).unwrap().0,
            &[0.4],
            1e-6,
        );
        assert!((fd[(0, 0)] - j[(0, 0)]).abs() < 1e-9);
    }

    #[test]
    fn permuting_subsystems_permutes_internal_slots() {
        let a = GrayBoxSystem::new(Units::Si, AnalysisKind::Algebraic, names(&["a", "b"]), divider()).unwrap();
        let mut rev = divider();
        rev.reverse();
        let b = GrayBoxSystem::new(Units::Si, AnalysisKind::Algebraic, names(&["a", "b"]), rev).unwrap();
        let z = [0.2, 0.7, 0.1];
        assert_eq!(
            assemble_algebraic(&a, &z, &[]).unwrap(),
            assemble_algebraic(&b, &z, &[]).unwrap()
        );
    }

    #[test]
    fn missing_input_reported() {
        let specs = vec![
            spec("v1", Device::VSource(VSource::new(Source::Input(0))), &[Some(0), None]),
            spec("r1", Device::Resistor(Resistor::new(1.0).unwrap()), &[Some(0), None]),
        ];
        let sys = GrayBoxSystem::new(Units::Si, AnalysisKind::Algebraic, names(&["a"]), specs).unwrap();
        assert_eq!(sys.n_inputs(), 1);
        assert!(matches!(
            assemble_algebraic(&sys, &[0.0, 0.0], &[]),
            Err(GrayBoxError::DimensionMismatch(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn neural_stamp_is_additive(
            seed in 0u64..1000,
            z in proptest::array::uniform3(-2.0f64..2.0),
            u in -1.0f64..1.0,
        ) {
            let net = Arc::new(Mlp::random(&[2, 8, 1], &[Activation::Tanh, Activation::Identity], seed).unwrap());
            let mut specs = divider();
            let base = GrayBoxSystem::new(Units::Si, AnalysisKind::Algebraic, names(&["a", "b"]), specs.clone()).unwrap();
            let nd = NeuralDevice::new(net.clone(), 2, Units::Si, vec![InputSlot::V(None), InputSlot::U(0)], None).unwrap();
            specs.push(SubsystemSpec {
                id: "nn".into(),
                kind: SubsystemKind::Neural(nd),
                terminals: vec![Some(0), Some(1)],
            });
            let hyb = GrayBoxSystem::new(Units::Si, AnalysisKind::Algebraic, names(&["a", "b"]), specs).unwrap();
            let (rb, jb) = assemble_algebraic(&base, &z, &[u]).unwrap();
            let (rh, jh) = assemble_algebraic(&hyb, &z, &[u]).unwrap();
            // port a-b: the output leaves node a and returns through node b
            let x = [z[1] - z[2], u];
            let out = net.forward(&x).unwrap()[0];
            let g = net.input_jacobian(&x).unwrap()[(0, 0)];
            let want_r = [0.0, out, -out];
            for k in 0..3 {
                proptest::prop_assert!((rh[k] - rb[k] - want_r[k]).abs() <= 1e-12);
            }
            let sign = [0.0, 1.0, -1.0];
            for r in 0..3 {
                for c in 0..3 {
                    proptest::prop_assert!((jh[(r, c)] - jb[(r, c)] - sign[r] * sign[c] * g).abs() <= 1e-12);
                }
            }
        }
    }
}
