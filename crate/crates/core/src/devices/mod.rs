//! Physics device models.
//!
//! Every device works on a *local* unknown vector laid out as
//! `[internal states..., terminal voltages...]` (terminal-major, one component
//! per terminal for SI circuits, real/imaginary pairs for per-unit grids) and
//! returns a local residual with rows in the same layout:
//!
//! * internal rows: the device's own equations, written so that the transient
//!   form is `M dz/dt + S(z, u) = 0` with `M` the constant local mass matrix;
//! * terminal rows: current leaving each terminal node into the device.
//!
//! [`crate::graybox`] scatters these local blocks into the global system.

mod linear;
mod motor;
mod neural_device;
mod nonlinear;
mod sweep;

use thiserror::Error;

use crate::numlin::DenseMatrix;

pub use linear::{Capacitor, ISource, Inductor, Resistor, Source, TransmissionNetwork, VSource};
pub use motor::{InductionMotorReduced, MotorDerivatives, MOTOR_STATES};
pub use neural_device::{InputSlot, NeuralDevice, NeuralEval, NeuralHistory, OutputSlot};
pub use nonlinear::{diode_eval, mosfet_eval, pq_residual, Diode, Mosfet, PqLoad};
pub use sweep::{sweep_dataset, Sampling, SweepDevice};

/// Nominal system frequency used by per-unit dynamic elements (rad/s).
pub const OMEGA_BASE: f64 = 2.0 * std::f64::consts::PI * 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("diode exponent {exponent:.1} exceeds guard at v = {v} V")]
    OverflowGuard { v: f64, exponent: f64 },
    #[error("voltage collapse: |V|^2 = {mag2:e}")]
    VoltageCollapse { mag2: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("neural device: {0}")]
    Neural(String),
}

pub type Result<T, E = DeviceError> = std::result::Result<T, E>;

/// Unit convention of a system: real node voltages (SI) or phasor pairs (per-unit).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Units {
    Si,
    PerUnit,
}

impl Units {
    /// Scalar unknowns per node voltage.
    pub fn components(self) -> usize {
        match self {
            Units::Si => 1,
            Units::PerUnit => 2,
        }
    }
}

/// Local residual and Jacobian of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEval {
    pub residual: Vec<f64>,
    pub jacobian: DenseMatrix,
}

impl LocalEval {
    pub fn zeros(n: usize) -> Self {
        Self {
            residual: vec![0.0; n],
            jacobian: DenseMatrix::zeros(n, n),
        }
    }
}

/// Sparse local entry `(row, col, value)`.
pub type Entry = (usize, usize, f64);

/// A physics-based subsystem.
#[derive(Debug, Clone, PartialEq)]
pub enum Device {
    Resistor(Resistor),
    Capacitor(Capacitor),
    Inductor(Inductor),
    VSource(VSource),
    ISource(ISource),
    Diode(Diode),
    Mosfet(Mosfet),
    PqLoad(PqLoad),
    Motor(InductionMotorReduced),
    TxNet(TransmissionNetwork),
}

impl Device {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Device::Resistor(_) => "resistor",
            Device::Capacitor(_) => "capacitor",
            Device::Inductor(_) => "inductor",
            Device::VSource(_) => "vsource",
            Device::ISource(_) => "isource",
            Device::Diode(_) => "diode",
            Device::Mosfet(_) => "mosfet",
            Device::PqLoad(_) => "pqload",
            Device::Motor(_) => "motor",
            Device::TxNet(_) => "txnet",
        }
    }

    pub fn n_terminals(&self) -> usize {
        match self {
            Device::Mosfet(_) => 3,
            Device::PqLoad(_) | Device::Motor(_) => 1,
            Device::TxNet(t) => t.size(),
            _ => 2,
        }
    }

    pub fn n_internal(&self, units: Units) -> usize {
        match self {
            Device::Inductor(_) | Device::VSource(_) => units.components(),
            Device::Motor(_) => MOTOR_STATES,
            _ => 0,
        }
    }

    pub fn local_size(&self, units: Units) -> usize {
        self.n_internal(units) + self.n_terminals() * units.components()
    }

    /// Unit conventions the device is defined for.
    pub fn supports(&self, units: Units) -> bool {
        match self {
            Device::Diode(_) | Device::Mosfet(_) => units == Units::Si,
            Device::PqLoad(_) | Device::Motor(_) | Device::TxNet(_) => units == Units::PerUnit,
            _ => true,
        }
    }

    /// Static residual `S` and its Jacobian at a local operating point.
    pub fn eval(&self, units: Units, local: &[f64], u: &[f64]) -> Result<LocalEval> {
        debug_assert_eq!(local.len(), self.local_size(units));
        match self {
            Device::Resistor(d) => Ok(d.eval(units, local)),
            Device::Capacitor(d) => Ok(d.eval(units, local)),
            Device::Inductor(d) => Ok(d.eval(units, local)),
            Device::VSource(d) => d.eval(units, local, u),
            Device::ISource(d) => d.eval(units, local, u),
            Device::Diode(d) => d.stamp(local),
            Device::Mosfet(d) => Ok(d.stamp(local)),
            Device::PqLoad(d) => d.stamp(local),
            Device::Motor(d) => Ok(d.stamp(local)),
            Device::TxNet(d) => Ok(d.eval(local)),
        }
    }

    /// Names of the internal unknowns, in local order.
    pub fn internal_names(&self, units: Units) -> Vec<&'static str> {
        match (self, units) {
            (Device::Inductor(_) | Device::VSource(_), Units::Si) => vec!["i"],
            (Device::Inductor(_) | Device::VSource(_), Units::PerUnit) => vec!["i_re", "i_im"],
            (Device::Motor(_), _) => vec!["psi_ds", "psi_qs", "psi_dr", "psi_qr", "omega"],
            _ => Vec::new(),
        }
    }

    /// Starting values for internal unknowns at nominal terminal voltage.
    pub fn initial_internal(&self, units: Units) -> Vec<f64> {
        match self {
            Device::Motor(m) => m
                .steady_state([1.0, 0.0])
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0, -1.0, 0.0, -1.0, 1.0]),
            _ => vec![0.0; self.n_internal(units)],
        }
    }

    /// Exogenous input indices the device reads.
    pub fn input_indices(&self) -> Vec<usize> {
        match self {
            Device::VSource(v) => [v.value, v.angle].iter().filter_map(|s| s.input_index()).collect(),
            Device::ISource(i) => i.value.input_index().into_iter().collect(),
            _ => Vec::new(),
        }
    }

    /// Constant local mass matrix entries.
    pub fn mass(&self, units: Units) -> Vec<Entry> {
        match self {
            Device::Capacitor(d) => d.mass(units),
            Device::Inductor(d) => d.mass(units),
            Device::Motor(_) => (0..MOTOR_STATES).map(|i| (i, i, 1.0)).collect(),
            _ => Vec::new(),
        }
    }

    /// Structural nonzeros of the static Jacobian.
    pub fn pattern(&self, units: Units) -> Vec<(usize, usize)> {
        let c = units.components();
        match self {
            Device::Resistor(_) | Device::Diode(_) => two_terminal_block(0, c),
            Device::Capacitor(_) => match units {
                Units::Si => Vec::new(),
                Units::PerUnit => two_terminal_block(0, c),
            },
            Device::Inductor(_) => {
                // terminal rows see the branch current, branch rows see the terminals
                let mut p = Vec::new();
                for k in 0..c {
                    p.push((c + k, k));
                    p.push((2 * c + k, k));
                    p.push((k, c + k));
                    p.push((k, 2 * c + k));
                }
                if units == Units::PerUnit {
                    p.push((0, 1));
                    p.push((1, 0));
                }
                p
            }
            Device::VSource(_) => {
                let mut p = Vec::new();
                for k in 0..c {
                    p.push((c + k, k));
                    p.push((2 * c + k, k));
                    p.push((k, c + k));
                    p.push((k, 2 * c + k));
                }
                p
            }
            Device::ISource(_) => Vec::new(),
            Device::Mosfet(_) => {
                // drain and source rows depend on all three terminals
                let mut p = Vec::new();
                for r in [0, 2] {
                    for col in 0..3 {
                        p.push((r, col));
                    }
                }
                p
            }
            Device::PqLoad(_) => vec![(0, 0), (0, 1), (1, 0), (1, 1)],
            Device::Motor(_) => {
                let n = MOTOR_STATES + 2;
                let mut p = Vec::new();
                for r in 0..n {
                    for col in 0..n {
                        if r >= MOTOR_STATES && col >= MOTOR_STATES {
                            continue;
                        }
                        p.push((r, col));
                    }
                }
                p
            }
            Device::TxNet(t) => t.pattern(),
        }
    }
}

fn two_terminal_block(offset: usize, c: usize) -> Vec<(usize, usize)> {
    let mut p = Vec::new();
    for r in 0..2 * c {
        for col in 0..2 * c {
            p.push((offset + r, offset + col));
        }
    }
    p
}
