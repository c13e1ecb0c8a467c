use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use super::{is_ground, Analysis, Element, NetlistDoc, NetlistError, SourceValue, Span};
use crate::devices::{
    Capacitor, Device, DeviceError, Diode, ISource, InductionMotorReduced, Inductor, Mosfet, NeuralDevice, PqLoad,
    Resistor, Source, TransmissionNetwork, Units, VSource,
};
use crate::graybox::{AnalysisKind, GrayBoxError, GrayBoxSystem, SubsystemKind, SubsystemSpec};
use crate::neural::{read_model, Mlp};
use crate::solvers::{nr_solve, transient_solve, SolveReport, SolverConfig, SolverError, TimeSeries, USchedule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoadError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
}

/// Resolves the files a netlist refers to.
pub trait ModelLoader {
    fn model(&mut self, path: &str) -> Result<Arc<Mlp>, LoadError>;
    fn text(&mut self, path: &str) -> Result<String, LoadError>;
}

/// Reads files relative to a base directory. Models are cached by canonical
/// path, so every binding to one file shares a single instance.
#[derive(Debug, Default)]
pub struct FsLoader {
    base: PathBuf,
    cache: HashMap<PathBuf, Arc<Mlp>>,
}

impl FsLoader {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        Self {
            base: base.into(),
            cache: HashMap::new(),
        }
    }

    /// Loader rooted at the directory holding `netlist`.
    pub fn for_netlist(netlist: &Path) -> Self {
        Self::new(netlist.parent().map(Path::to_path_buf).unwrap_or_default())
    }

    fn resolve(&self, path: &str) -> Result<PathBuf, LoadError> {
        let p = self.base.join(path);
        p.canonicalize()
            .map_err(|e| LoadError::NotFound(format!("{}: {e}", p.display())))
    }
}

impl ModelLoader for FsLoader {
    fn model(&mut self, path: &str) -> Result<Arc<Mlp>, LoadError> {
        let full = self.resolve(path)?;
        if let Some(m) = self.cache.get(&full) {
            return Ok(Arc::clone(m));
        }
        let bytes = fs::read(&full).map_err(|e| LoadError::NotFound(format!("{}: {e}", full.display())))?;
        let model = Arc::new(read_model(bytes.as_slice()).map_err(|e| LoadError::Invalid(e.to_string()))?);
        self.cache.insert(full, Arc::clone(&model));
        Ok(model)
    }

    fn text(&mut self, path: &str) -> Result<String, LoadError> {
        let full = self.resolve(path)?;
        fs::read_to_string(&full).map_err(|e| LoadError::NotFound(format!("{}: {e}", full.display())))
    }
}

fn load_err(span: Span, path: &str, e: LoadError) -> NetlistError {
    match e {
        LoadError::NotFound(message) => NetlistError::FileNotFound {
            span,
            path: path.to_string(),
            message,
        },
        LoadError::Invalid(message) => NetlistError::Invalid {
            span,
            message: format!("`{path}`: {message}"),
        },
    }
}

fn source(v: SourceValue) -> Source {
    match v {
        SourceValue::Const(x) => Source::Const(x),
        SourceValue::Input(k) => Source::Input(k),
    }
}

fn motor(params: &[(String, f64)]) -> InductionMotorReduced {
    let mut m = InductionMotorReduced::default();
    for (k, v) in params {
        let slot = match k.as_str() {
            "rs" => &mut m.r_s,
            "rr" => &mut m.r_r,
            "lls" => &mut m.l_ls,
            "llr" => &mut m.l_lr,
            "lm" => &mut m.l_m,
            "h" => &mut m.h,
            "tl" => &mut m.t_load,
            "rating" => &mut m.rating,
            _ => &mut m.omega_b,
        };
        *slot = *v;
    }
    m
}

fn element_kind(
    units: Units,
    el: &Element,
    n_terminals: usize,
    name: &str,
    span: Span,
    loader: &mut dyn ModelLoader,
) -> Result<SubsystemKind, NetlistError> {
    let invalid = |e: DeviceError| NetlistError::Invalid {
        span,
        message: format!("`{name}`: {e}"),
    };
    let dev = match el {
        Element::Resistor(r) => Device::Resistor(Resistor::new(*r).map_err(invalid)?),
        Element::Capacitor(c) => Device::Capacitor(Capacitor::new(*c).map_err(invalid)?),
        Element::Inductor(l) => Device::Inductor(Inductor::new(*l).map_err(invalid)?),
        Element::VSource { value, angle } => Device::VSource(VSource {
            value: source(*value),
            angle: angle.map_or(Source::Const(0.0), source),
        }),
        Element::ISource(v) => Device::ISource(ISource { value: source(*v) }),
        Element::Diode { i_sat, v_thermal } => Device::Diode(Diode::new(*i_sat, *v_thermal).map_err(invalid)?),
        Element::Mosfet { k, v_th, lambda } => {
            Device::Mosfet(Mosfet::new(*k, *v_th, lambda.unwrap_or(0.0)).map_err(invalid)?)
        }
        Element::PqLoad { p, q } => Device::PqLoad(PqLoad::new(*p, *q).map_err(invalid)?),
        Element::Motor(params) => {
            let m = motor(params);
            m.validate().map_err(invalid)?;
            Device::Motor(m)
        }
        Element::NnDevice { model, inputs, outputs } => {
            let net = loader.model(model).map_err(|e| load_err(span, model, e))?;
            let outs = outputs
                .clone()
                .unwrap_or_else(|| NeuralDevice::default_outputs(n_terminals, units, net.output_dim()));
            let (ni, no) = NeuralDevice::layout_dims(n_terminals, units, inputs, &outs);
            if ni != net.input_dim() || no != net.output_dim() {
                return Err(NetlistError::ModelDimMismatch {
                    span,
                    name: name.to_string(),
                    message: format!(
                        "declared layout needs a {ni}->{no} model, `{model}` is {}->{}",
                        net.input_dim(),
                        net.output_dim()
                    ),
                });
            }
            let nd = NeuralDevice::new(net, n_terminals, units, inputs.clone(), Some(outs)).map_err(invalid)?;
            return Ok(SubsystemKind::Neural(nd));
        }
    };
    Ok(SubsystemKind::Physics(dev))
}

fn graybox_err(e: GrayBoxError) -> NetlistError {
    match e {
        GrayBoxError::NotSquare(m) | GrayBoxError::Topology(m) => NetlistError::NotSquare(m),
        other => NetlistError::Invalid {
            span: Span::default(),
            message: other.to_string(),
        },
    }
}

/// Instantiates every statement as a subsystem and checks structural squareness.
pub fn build(doc: &NetlistDoc, loader: &mut dyn ModelLoader) -> Result<GrayBoxSystem, NetlistError> {
    let index: HashMap<String, usize> = doc
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.name.to_ascii_lowercase(), i))
        .collect();
    let terminal = |n: &str| -> Option<usize> {
        if is_ground(n) {
            None
        } else {
            index.get(&n.to_ascii_lowercase()).copied()
        }
    };
    let mut specs = Vec::with_capacity(doc.devices.len() + doc.txnets.len());
    for d in &doc.devices {
        let kind = element_kind(doc.units, &d.element, d.nodes.len(), &d.name, d.span, loader)?;
        specs.push(SubsystemSpec {
            id: d.name.clone(),
            kind,
            terminals: d.nodes.iter().map(|n| terminal(n)).collect(),
        });
    }
    for (k, t) in doc.txnets.iter().enumerate() {
        let text = loader.text(&t.file).map_err(|e| load_err(t.span, &t.file, e))?;
        let net = TransmissionNetwork::parse(&text).map_err(|e| NetlistError::Invalid {
            span: t.span,
            message: format!("`{}`: {e}", t.file),
        })?;
        let n = net.size();
        let terminals: Vec<Option<usize>> = if t.nodes.is_empty() {
            if n > doc.nodes.len() {
                return Err(NetlistError::Invalid {
                    span: t.span,
                    message: format!(
                        "`{}` has {n} buses but only {} nodes are declared",
                        t.file,
                        doc.nodes.len()
                    ),
                });
            }
            (0..n).map(Some).collect()
        } else if t.nodes.len() == n {
            t.nodes.iter().map(|b| terminal(b)).collect()
        } else {
            return Err(NetlistError::Invalid {
                span: t.span,
                message: format!("`{}` has {n} buses, {} listed", t.file, t.nodes.len()),
            });
        };
        specs.push(SubsystemSpec {
            id: format!("txnet{k}"),
            kind: SubsystemKind::Physics(Device::TxNet(net)),
            terminals,
        });
    }
    let analysis = match doc.analysis {
        Analysis::Dc => AnalysisKind::Algebraic,
        Analysis::Tran { .. } => AnalysisKind::Differential,
    };
    let names = doc.nodes.iter().map(|n| n.name.clone()).collect();
    GrayBoxSystem::new(doc.units, analysis, names, specs).map_err(graybox_err)
}

/// A built system with everything needed to run its analysis.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub system: GrayBoxSystem,
    pub analysis: Analysis,
    pub solver: SolverConfig,
    pub schedule: USchedule,
    /// Starting point assembled from `ic` statements, if any were given.
    pub initial: Option<Vec<f64>>,
}

impl Simulation {
    pub fn inputs_at(&self, t: f64) -> Vec<f64> {
        self.schedule.at(t)
    }

    /// Steady state at `u(0)` from the initial point or a flat start.
    pub fn run_dc(&self) -> Result<(Vec<f64>, SolveReport), SolverError> {
        let z0 = self.initial.clone().unwrap_or_else(|| self.system.flat_start());
        nr_solve(&self.system, &z0, &self.inputs_at(0.0), &self.solver)
    }

    /// Transient from the `ic` point, or from the DC solution when none was given.
    pub fn run_tran(&self) -> Result<TimeSeries, SolverError> {
        let Analysis::Tran { dt, t_end } = self.analysis else {
            return Err(SolverError::InvalidConfig("netlist requests a DC analysis".into()));
        };
        let z0 = match &self.initial {
            Some(z) => z.clone(),
            None => self.run_dc()?.0,
        };
        transient_solve(&self.system, &z0, &self.schedule, t_end, dt, &self.solver)
    }
}

/// Builds the system and resolves solver settings, schedule and initial conditions.
pub fn prepare(doc: &NetlistDoc, loader: &mut dyn ModelLoader) -> Result<Simulation, NetlistError> {
    let system = build(doc, loader)?;
    let defaults = SolverConfig::default();
    let solver = SolverConfig {
        alpha: doc.solver.alpha.unwrap_or(defaults.alpha),
        epsilon: doc.solver.eps.unwrap_or(defaults.epsilon),
        max_iter: doc.solver.max_iter.unwrap_or(defaults.max_iter),
        halving: doc.solver.halving.unwrap_or(defaults.halving),
        ..defaults
    };
    let schedule = USchedule::new(doc.schedule.iter().map(|e| (e.t, e.values.clone())).collect()).map_err(|e| {
        NetlistError::Invalid {
            span: doc.schedule.first().map(|e| e.span).unwrap_or_default(),
            message: e.to_string(),
        }
    })?;
    let width = schedule.entries().first().map_or(0, |e| e.1.len());
    if system.n_inputs() > width {
        return Err(NetlistError::Invalid {
            span: doc.schedule.first().map(|e| e.span).unwrap_or_default(),
            message: format!(
                "devices read {} inputs, the schedule provides {width}",
                system.n_inputs()
            ),
        });
    }
    let initial = if doc.ics.is_empty() {
        None
    } else {
        let mut z = system.flat_start();
        let c = doc.units.components();
        for ic in &doc.ics {
            if let Some(at) = system.node_index(&ic.target) {
                z[at..at + c].copy_from_slice(&ic.values);
                continue;
            }
            let sub = system
                .subsystems()
                .iter()
                .find(|s| s.id.eq_ignore_ascii_case(&ic.target))
                .ok_or_else(|| NetlistError::UnknownNode {
                    span: ic.span,
                    name: ic.target.clone(),
                })?;
            if sub.internal.len() != ic.values.len() {
                return Err(NetlistError::Invalid {
                    span: ic.span,
                    message: format!(
                        "`{}` has {} internal states, {} values given",
                        sub.id,
                        sub.internal.len(),
                        ic.values.len()
                    ),
                });
            }
            for (&g, &v) in sub.internal.iter().zip(&ic.values) {
                z[g] = v;
            }
        }
        Some(z)
    };
    Ok(Simulation {
        system,
        analysis: doc.analysis,
        solver,
        schedule,
        initial,
    })
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;
    use crate::neural::{write_model, Activation};
    use crate::solvers::boundary_residual;

    /// In-memory files keyed by path.
    #[derive(Default)]
    struct MemLoader {
        models: HashMap<String, Arc<Mlp>>,
        texts: HashMap<String, String>,
    }

    impl ModelLoader for MemLoader {
        fn model(&mut self, path: &str) -> Result<Arc<Mlp>, LoadError> {
            self.models
                .get(path)
                .cloned()
                .ok_or_else(|| LoadError::NotFound(path.into()))
        }

        fn text(&mut self, path: &str) -> Result<String, LoadError> {
            self.texts
                .get(path)
                .cloned()
                .ok_or_else(|| LoadError::NotFound(path.into()))
        }
    }

    #[test]
    fn physics_only_divider() {
        let doc =
            parse("node a\nnode b\nvsource v1 a 0 1.0\nresistor r1 a b 1\nresistor r2 b 0 1\nanalysis dc").unwrap();
        let sim = prepare(&doc, &mut MemLoader::default()).unwrap();
        assert!(sim.system.subsystems().iter().all(|s| !s.is_neural()));
        let (z, rep) = sim.run_dc().unwrap();
        assert!(rep.converged);
        let b = sim.system.node_index("b").unwrap();
        assert!((z[b] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn shared_model_instance_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let net = Mlp::random(&[2, 4, 2], &[Activation::Tanh, Activation::Identity], 3).unwrap();
        write_model(&net, fs::File::create(dir.path().join("load.gsnn")).unwrap()).unwrap();
        fs::write(
            dir.path().join("line.txt"),
            TransmissionNetwork::from_branches(2, &[(0, 1, 0.01, 0.05)], &[])
                .unwrap()
                .to_text(),
        )
        .unwrap();
        let text = "units pu\nnode b1\nnode b2\nvsource vs b1 0 1.0\ntxnet line.txt\nnndevice n1 b2 model=load.gsnn inputs=v\nnndevice n2 b2 model=./load.gsnn inputs=v\nanalysis dc\n";
        let path = dir.path().join("grid.net");
        let doc = parse(text).unwrap();
        let sys = build(&doc, &mut FsLoader::for_netlist(&path)).unwrap();
        let models: Vec<&Arc<Mlp>> = sys
            .subsystems()
            .iter()
            .filter_map(|s| match &s.kind {
                SubsystemKind::Neural(n) => Some(n.model()),
                _ => None,
            })
            .collect();
        assert_eq!(models.len(), 2);
        assert!(Arc::ptr_eq(models[0], models[1]));
    }

    #[test]
    fn model_dimension_mismatch() {
        let mut l = MemLoader::default();
        l.models.insert(
            "m.gsnn".into(),
            Arc::new(Mlp::random(&[2, 3, 1], &[Activation::Tanh, Activation::Identity], 1).unwrap()),
        );
        let doc = parse("node a\nnndevice n1 a model=m.gsnn inputs=v,u0,u1\nanalysis dc").unwrap();
        assert!(matches!(
            build(&doc, &mut l),
            Err(NetlistError::ModelDimMismatch { .. })
        ));
        let doc = parse("node a\nnndevice n1 a model=other.gsnn inputs=v\nanalysis dc").unwrap();
        assert!(matches!(build(&doc, &mut l), Err(NetlistError::FileNotFound { .. })));
    }

    #[test]
    fn rejects_non_square() {
        // two ideal sources in parallel leave the branch currents undetermined
        let doc = parse("node a\nvsource v1 a 0 1\nvsource v2 a 0 1\nanalysis dc").unwrap();
        assert!(matches!(
            build(&doc, &mut MemLoader::default()),
            Err(NetlistError::NotSquare(_))
        ));
        let doc = parse("node a\nnode b\nresistor r1 a 0 1\nanalysis dc").unwrap();
        assert!(matches!(
            build(&doc, &mut MemLoader::default()),
            Err(NetlistError::NotSquare(_))
        ));
    }

    #[test]
    fn rc_transient_from_ic() {
        let doc = parse("node a\ncapacitor c1 a 0 1\nresistor r1 a 0 1\nic a 1\nanalysis tran dt=1e-3 tend=1").unwrap();
        let sim = prepare(&doc, &mut MemLoader::default()).unwrap();
        let ts = sim.run_tran().unwrap();
        let v = ts.states.last().unwrap()[sim.system.n_internal()];
        assert!((v - (-1.0f64).exp()).abs() < 1e-6, "{v}");
    }

    #[test]
    fn scheduled_grid_and_motor() {
        let mut l = MemLoader::default();
        l.texts.insert(
            "line.txt".into(),
            TransmissionNetwork::from_branches(2, &[(0, 1, 0.01, 0.05)], &[])
                .unwrap()
                .to_text(),
        );
        let doc = parse(
            "units pu\nnode b1\nnode b2\nvsource vs b1 0 u0\ntxnet line.txt\nmotor m1 b2 rating=0.3\nresistor rl b2 0 5\nuschedule 0 1.0\nanalysis dc",
        )
        .unwrap();
        let sim = prepare(&doc, &mut l).unwrap();
        let (z, _) = sim.run_dc().unwrap();
        assert!(boundary_residual(&sim.system, &z, &sim.inputs_at(0.0)).unwrap() <= 1e-6);
        let doc =
            parse("units pu\nnode b1\nvsource vs b1 0 u1\nresistor r b1 0 1\nuschedule 0 1.0\nanalysis dc").unwrap();
        assert!(matches!(prepare(&doc, &mut l), Err(NetlistError::Invalid { .. })));
    }
}
