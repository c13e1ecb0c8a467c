//! Line-oriented system descriptions.
//!
//! ```text
//! netlist    = { line } ;
//! line       = [ statement ] [ "#" comment ] newline ;
//! statement  = units | node_decl | device | txnet | uschedule | analysis | solver | ic ;
//! units      = "units" ( "si" | "pu" ) ;
//! node_decl  = "node" name ;
//! device     = two_term | vsource | isource | diode | mosfet | pqload | motor | nndevice ;
//! two_term   = ( "resistor" | "capacitor" | "inductor" ) name node node number ;
//! vsource    = "vsource" name node node source [ "angle=" source ] ;
//! isource    = "isource" name node node source ;
//! diode      = "diode" name node node "is=" number "vt=" number ;
//! mosfet     = "mosfet" name node node node "k=" number "vth=" number [ "lambda=" number ] ;
//! pqload     = "pqload" name node "p=" number "q=" number ;
//! motor      = "motor" name node { motor_key "=" number } ;
//! motor_key  = "rs" | "rr" | "lls" | "llr" | "lm" | "h" | "tl" | "rating" | "wb" ;
//! nndevice   = "nndevice" name node { node } "model=" path "inputs=" in_slots [ "outputs=" out_slots ] ;
//! txnet      = "txnet" path { name } ;
//! uschedule  = "uschedule" number number { number } ;
//! analysis   = "analysis" ( "dc" | "tran" "dt=" number "tend=" number ) ;
//! solver     = "solver" { ( "alpha" | "eps" | "maxiter" | "halving" ) "=" value } ;
//! ic         = "ic" name number { number } ;
//! source     = number | "u" digits ;
//! in_slots   = in_slot { "," in_slot } ;
//! in_slot    = "v" [ digits ] | "vp" [ digits ] | "h" digits | "u" digits ;
//! out_slots  = out_slot { "," out_slot } ;
//! out_slot   = "i" digits | "m" ;
//! node       = name | "0" | "gnd" ;
//! name       = name_char { name_char } ;
//! name_char  = letter | digit | "_" | "." | "-" | "[" | "]" | ":" ;
//! path       = non-blank characters ;
//! ```
//!
//! Keywords and parameter keys are case-insensitive; names keep their case
//! but are compared case-insensitively. `0` and `gnd` denote ground.

mod build;
mod parse;

use std::fmt;

use thiserror::Error;

use crate::devices::{InputSlot, OutputSlot, Units};

pub use build::{build, prepare, FsLoader, LoadError, ModelLoader, Simulation};
pub use parse::parse;

/// Source position (1-based line and column, in characters).
///
/// Positions never take part in equality so that re-parsed documents compare
/// equal to the originals.
#[derive(Debug, Clone, Copy, Default)]
pub struct Span {
    pub line: usize,
    pub col: usize,
}

impl PartialEq for Span {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetlistError {
    #[error("{span}: {message} (at `{token}`)")]
    Parse { span: Span, message: String, token: String },
    #[error("{span}: duplicate node `{name}`")]
    DuplicateNode { span: Span, name: String },
    #[error("{span}: unknown node `{name}`")]
    UnknownNode { span: Span, name: String },
    #[error("missing `analysis` directive")]
    MissingAnalysis,
    #[error("{span}: {device} `{name}` is not defined for {units} units")]
    UnitMismatch {
        span: Span,
        device: String,
        name: String,
        units: String,
    },
    #[error("{span}: model for `{name}` does not fit its layout: {message}")]
    ModelDimMismatch { span: Span, name: String, message: String },
    #[error("{span}: cannot read `{path}`: {message}")]
    FileNotFound { span: Span, path: String, message: String },
    #[error("{span}: {message}")]
    Invalid { span: Span, message: String },
    #[error("not square: {0}")]
    NotSquare(String),
}

impl NetlistError {
    /// Position of the offending token, when there is one.
    pub fn span(&self) -> Option<Span> {
        match self {
            NetlistError::Parse { span, .. }
            | NetlistError::DuplicateNode { span, .. }
            | NetlistError::UnknownNode { span, .. }
            | NetlistError::UnitMismatch { span, .. }
            | NetlistError::ModelDimMismatch { span, .. }
            | NetlistError::FileNotFound { span, .. }
            | NetlistError::Invalid { span, .. } => Some(*span),
            NetlistError::MissingAnalysis | NetlistError::NotSquare(_) => None,
        }
    }
}

/// A source parameter: literal value or exogenous input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceValue {
    Const(f64),
    Input(usize),
}

impl fmt::Display for SourceValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceValue::Const(v) => write!(f, "{v}"),
            SourceValue::Input(k) => write!(f, "u{k}"),
        }
    }
}

/// Device-specific parameters of a statement.
#[derive(Debug, Clone, PartialEq)]
pub enum Element {
    Resistor(f64),
    Capacitor(f64),
    Inductor(f64),
    VSource {
        value: SourceValue,
        angle: Option<SourceValue>,
    },
    ISource(SourceValue),
    Diode {
        i_sat: f64,
        v_thermal: f64,
    },
    Mosfet {
        k: f64,
        v_th: f64,
        lambda: Option<f64>,
    },
    PqLoad {
        p: f64,
        q: f64,
    },
    /// Overrides in source order, keys lower-case.
    Motor(Vec<(String, f64)>),
    NnDevice {
        model: String,
        inputs: Vec<InputSlot>,
        outputs: Option<Vec<OutputSlot>>,
    },
}

impl Element {
    pub fn keyword(&self) -> &'static str {
        match self {
            Element::Resistor(_) => "resistor",
            Element::Capacitor(_) => "capacitor",
            Element::Inductor(_) => "inductor",
            Element::VSource { .. } => "vsource",
            Element::ISource(_) => "isource",
            Element::Diode { .. } => "diode",
            Element::Mosfet { .. } => "mosfet",
            Element::PqLoad { .. } => "pqload",
            Element::Motor(_) => "motor",
            Element::NnDevice { .. } => "nndevice",
        }
    }

    /// Unit conventions the element exists in.
    pub fn allowed(&self, units: Units) -> bool {
        match self {
            Element::Diode { .. } | Element::Mosfet { .. } => units == Units::Si,
            Element::PqLoad { .. } | Element::Motor(_) => units == Units::PerUnit,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceStmt {
    pub name: String,
    pub nodes: Vec<String>,
    pub element: Element,
    pub span: Span,
    pub node_spans: Vec<Span>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeDecl {
    pub name: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TxNetStmt {
    pub file: String,
    pub nodes: Vec<String>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleEntry {
    pub t: f64,
    pub values: Vec<f64>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcStmt {
    pub target: String,
    pub values: Vec<f64>,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Analysis {
    Dc,
    Tran { dt: f64, t_end: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolverOverrides {
    pub alpha: Option<f64>,
    pub eps: Option<f64>,
    pub max_iter: Option<usize>,
    pub halving: Option<bool>,
}

impl SolverOverrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetlistDoc {
    pub units: Units,
    pub nodes: Vec<NodeDecl>,
    pub devices: Vec<DeviceStmt>,
    pub txnets: Vec<TxNetStmt>,
    pub schedule: Vec<ScheduleEntry>,
    pub ics: Vec<IcStmt>,
    pub analysis: Analysis,
    pub solver: SolverOverrides,
}

pub(crate) fn is_ground(name: &str) -> bool {
    name == "0" || name.eq_ignore_ascii_case("gnd")
}

fn join<T: fmt::Display>(items: &[T], sep: &str) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

impl fmt::Display for DeviceStmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.element.keyword(), self.name, self.nodes.join(" "))?;
        match &self.element {
            Element::Resistor(v) | Element::Capacitor(v) | Element::Inductor(v) => write!(f, " {v}"),
            Element::VSource { value, angle } => {
                write!(f, " {value}")?;
                match angle {
                    Some(a) => write!(f, " angle={a}"),
                    None => Ok(()),
                }
            }
            Element::ISource(v) => write!(f, " {v}"),
            Element::Diode { i_sat, v_thermal } => write!(f, " is={i_sat} vt={v_thermal}"),
            Element::Mosfet { k, v_th, lambda } => {
                write!(f, " k={k} vth={v_th}")?;
                match lambda {
                    Some(l) => write!(f, " lambda={l}"),
                    None => Ok(()),
                }
            }
            Element::PqLoad { p, q } => write!(f, " p={p} q={q}"),
            Element::Motor(params) => params.iter().try_for_each(|(k, v)| write!(f, " {k}={v}")),
            Element::NnDevice { model, inputs, outputs } => {
                write!(f, " model={model} inputs={}", join(inputs, ","))?;
                match outputs {
                    Some(o) => write!(f, " outputs={}", join(o, ",")),
                    None => Ok(()),
                }
            }
        }
    }
}

/// Canonical text; parsing it yields an equal document.
impl fmt::Display for NetlistDoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let units = match self.units {
            Units::Si => "si",
            Units::PerUnit => "pu",
        };
        writeln!(f, "units {units}")?;
        for n in &self.nodes {
            writeln!(f, "node {}", n.name)?;
        }
        for d in &self.devices {
            writeln!(f, "{d}")?;
        }
        for t in &self.txnets {
            write!(f, "txnet {}", t.file)?;
            for n in &t.nodes {
                write!(f, " {n}")?;
            }
            writeln!(f)?;
        }
        for s in &self.schedule {
            writeln!(f, "uschedule {} {}", s.t, join(&s.values, " "))?;
        }
        for ic in &self.ics {
            writeln!(f, "ic {} {}", ic.target, join(&ic.values, " "))?;
        }
        if !self.solver.is_empty() {
            write!(f, "solver")?;
            if let Some(a) = self.solver.alpha {
                write!(f, " alpha={a}")?;
            }
            if let Some(e) = self.solver.eps {
                write!(f, " eps={e}")?;
            }
            if let Some(m) = self.solver.max_iter {
                write!(f, " maxiter={m}")?;
            }
            if let Some(h) = self.solver.halving {
                write!(f, " halving={}", if h { "on" } else { "off" })?;
            }
            writeln!(f)?;
        }
        match self.analysis {
            Analysis::Dc => writeln!(f, "analysis dc"),
            Analysis::Tran { dt, t_end } => writeln!(f, "analysis tran dt={dt} tend={t_end}"),
        }
    }
}
