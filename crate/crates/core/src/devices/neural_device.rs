//! Boundary macromodel backed by a trained network.
//!
//! A device on nodes `[n_0, ..., n_{k-1}]` exposes ports: with one node the
//! port voltage is `v(n_0)`, otherwise port `j` is `v(n_j) - v(n_{k-1})` for
//! `j < k - 1`. Port current outputs are currents leaving the port's node
//! into the device; the reference node receives their negative sum.

use std::fmt;
use std::sync::Arc;

use super::{DeviceError, LocalEval, Result, Units};
use crate::neural::Mlp;
use crate::numlin::{lu_solve, DenseMatrix};

/// One token of a network input layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSlot {
    /// Present port voltage; `None` means every port in order.
    V(Option<usize>),
    /// Port voltage at the previous time step.
    VPrev(Option<usize>),
    /// Network output `k` at the previous time step.
    H(usize),
    /// Exogenous input `u[k]`.
    U(usize),
}

/// Role of one network output group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSlot {
    /// Current into port `j` (one value in SI, a real/imaginary pair in per-unit).
    Current(usize),
    /// Reported but not stamped.
    Monitor,
}

impl fmt::Display for InputSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputSlot::V(None) => write!(f, "v"),
            InputSlot::V(Some(j)) => write!(f, "v{j}"),
            InputSlot::VPrev(None) => write!(f, "vp"),
            InputSlot::VPrev(Some(j)) => write!(f, "vp{j}"),
            InputSlot::H(k) => write!(f, "h{k}"),
            InputSlot::U(k) => write!(f, "u{k}"),
        }
    }
}

impl fmt::Display for OutputSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputSlot::Current(j) => write!(f, "i{j}"),
            OutputSlot::Monitor => write!(f, "m"),
        }
    }
}

fn split_index(tok: &str, prefix: &str) -> Option<Option<usize>> {
    let rest = tok.strip_prefix(prefix)?;
    if rest.is_empty() {
        Some(None)
    } else {
        rest.parse().ok().map(Some)
    }
}

impl std::str::FromStr for InputSlot {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let t = s.to_ascii_lowercase();
        let slot = if let Some(j) = split_index(&t, "vp") {
            Some(InputSlot::VPrev(j))
        } else if let Some(j) = split_index(&t, "v") {
            Some(InputSlot::V(j))
        } else if let Some(Some(k)) = split_index(&t, "h") {
            Some(InputSlot::H(k))
        } else if let Some(Some(k)) = split_index(&t, "u") {
            Some(InputSlot::U(k))
        } else {
            None
        };
        slot.ok_or_else(|| format!("unknown input slot `{s}` (expected v, v<j>, vp, vp<j>, h<k>, u<k>)"))
    }
}

impl std::str::FromStr for OutputSlot {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let t = s.to_ascii_lowercase();
        if t == "m" {
            return Ok(OutputSlot::Monitor);
        }
        match split_index(&t, "i") {
            Some(Some(j)) => Ok(OutputSlot::Current(j)),
            _ => Err(format!("unknown output slot `{s}` (expected i<j> or m)")),
        }
    }
}

/// Scalar network input after expanding slot tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Feed {
    Port(usize),
    PrevPort(usize),
    PrevOut(usize),
    Exo(usize),
}

/// Previous-step quantities consumed by recurrent layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralHistory {
    /// Port voltages, port-major with `components` entries each.
    pub ports: Vec<f64>,
    /// All network outputs.
    pub outputs: Vec<f64>,
}

/// Local stamp plus the raw network outputs behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralEval {
    pub local: LocalEval,
    pub outputs: Vec<f64>,
    pub ports: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NeuralDevice {
    model: Arc<Mlp>,
    n_terminals: usize,
    units: Units,
    inputs: Vec<InputSlot>,
    outputs: Vec<OutputSlot>,
    feeds: Vec<Feed>,
    /// `(port, component)` for each scalar output, `None` for monitors.
    targets: Vec<Option<(usize, usize)>>,
}

impl PartialEq for NeuralDevice {
    fn eq(&self, other: &Self) -> bool {
        (Arc::ptr_eq(&self.model, &other.model) || *self.model == *other.model)
            && self.n_terminals == other.n_terminals
            && self.units == other.units
            && self.inputs == other.inputs
            && self.outputs == other.outputs
    }
}

fn n_ports(n_terminals: usize) -> usize {
    n_terminals.saturating_sub(1).max(1)
}

impl NeuralDevice {
    /// Scalar input and output counts a layout needs, without a model.
    pub fn layout_dims(
        n_terminals: usize,
        units: Units,
        inputs: &[InputSlot],
        outputs: &[OutputSlot],
    ) -> (usize, usize) {
        let c = units.components();
        let p = n_ports(n_terminals);
        let ins = inputs
            .iter()
            .map(|s| match s {
                InputSlot::V(None) | InputSlot::VPrev(None) => p * c,
                InputSlot::V(Some(_)) | InputSlot::VPrev(Some(_)) => c,
                InputSlot::H(_) | InputSlot::U(_) => 1,
            })
            .sum();
        let outs = outputs
            .iter()
            .map(|s| match s {
                OutputSlot::Current(_) => c,
                OutputSlot::Monitor => 1,
            })
            .sum();
        (ins, outs)
    }

    /// Default output roles: currents for ports `0, 1, ...` while outputs
    /// remain, monitors for the rest.
    pub fn default_outputs(n_terminals: usize, units: Units, output_dim: usize) -> Vec<OutputSlot> {
        let c = units.components();
        let mut slots = Vec::new();
        let mut used = 0;
        for j in 0..n_ports(n_terminals) {
            if used + c > output_dim {
                break;
            }
            slots.push(OutputSlot::Current(j));
            used += c;
        }
        slots.extend(std::iter::repeat_n(OutputSlot::Monitor, output_dim - used));
        slots
    }

    pub fn new(
        model: Arc<Mlp>,
        n_terminals: usize,
        units: Units,
        inputs: Vec<InputSlot>,
        outputs: Option<Vec<OutputSlot>>,
    ) -> Result<Self> {
        let bad = |m: String| DeviceError::Neural(m);
        if n_terminals == 0 {
            return Err(bad("needs at least one node".into()));
        }
        let outputs = outputs.unwrap_or_else(|| Self::default_outputs(n_terminals, units, model.output_dim()));
        let (ni, no) = Self::layout_dims(n_terminals, units, &inputs, &outputs);
        if ni != model.input_dim() || no != model.output_dim() {
            return Err(bad(format!(
                "layout needs a {ni}->{no} model, file has {}->{}",
                model.input_dim(),
                model.output_dim()
            )));
        }
        let c = units.components();
        let p = n_ports(n_terminals);
        let mut feeds = Vec::with_capacity(ni);
        for slot in &inputs {
            match *slot {
                InputSlot::V(j) | InputSlot::VPrev(j) => {
                    let ports: Vec<usize> = match j {
                        None => (0..p).collect(),
                        Some(j) if j < p => vec![j],
                        Some(j) => return Err(bad(format!("port {j} out of range ({p} ports)"))),
                    };
                    let prev = matches!(slot, InputSlot::VPrev(_));
                    for port in ports {
                        for k in 0..c {
                            let idx = port * c + k;
                            feeds.push(if prev { Feed::PrevPort(idx) } else { Feed::Port(idx) });
                        }
                    }
                }
                InputSlot::H(k) if k >= no => {
                    return Err(bad(format!("h{k} refers past the {no} outputs")));
                }
                InputSlot::H(k) => feeds.push(Feed::PrevOut(k)),
                InputSlot::U(k) => feeds.push(Feed::Exo(k)),
            }
        }
        let mut targets = Vec::with_capacity(no);
        for slot in &outputs {
            match *slot {
                OutputSlot::Current(j) if j >= p => {
                    return Err(bad(format!("output i{j} refers past the {p} ports")));
                }
                OutputSlot::Current(j) => targets.extend((0..c).map(|k| Some((j, k)))),
                OutputSlot::Monitor => targets.push(None),
            }
        }
        Ok(Self {
            model,
            n_terminals,
            units,
            inputs,
            outputs,
            feeds,
            targets,
        })
    }

    pub fn model(&self) -> &Arc<Mlp> {
        &self.model
    }

    pub fn n_terminals(&self) -> usize {
        self.n_terminals
    }

    pub fn units(&self) -> Units {
        self.units
    }

    pub fn inputs(&self) -> &[InputSlot] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[OutputSlot] {
        &self.outputs
    }

    pub fn local_size(&self) -> usize {
        self.n_terminals * self.units.components()
    }

    /// Whether the layout reads previous-step quantities.
    pub fn is_recurrent(&self) -> bool {
        self.feeds
            .iter()
            .any(|f| matches!(f, Feed::PrevPort(_) | Feed::PrevOut(_)))
    }

    /// Largest exogenous index read, if any.
    pub fn max_input_index(&self) -> Option<usize> {
        self.feeds
            .iter()
            .filter_map(|f| match f {
                Feed::Exo(k) => Some(*k),
                _ => None,
            })
            .max()
    }

    /// Port voltages from terminal voltages.
    pub fn port_voltages(&self, local: &[f64]) -> Vec<f64> {
        let c = self.units.components();
        let p = n_ports(self.n_terminals);
        let refd = self.n_terminals >= 2;
        let last = (self.n_terminals - 1) * c;
        (0..p * c)
            .map(|idx| local[idx] - if refd { local[last + idx % c] } else { 0.0 })
            .collect()
    }

    /// Terminal rows touched by the outputs and columns read by the inputs.
    pub fn pattern(&self) -> Vec<(usize, usize)> {
        let n = self.local_size();
        let reads_v = self
            .feeds
            .iter()
            .any(|f| matches!(f, Feed::Port(_) | Feed::PrevPort(_)));
        if !reads_v {
            return Vec::new();
        }
        (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).collect()
    }

    fn assemble_input(&self, ports: &[f64], u: &[f64], prev_ports: &[f64], prev_out: &[f64]) -> Result<Vec<f64>> {
        self.feeds
            .iter()
            .map(|f| match *f {
                Feed::Port(i) => Ok(ports[i]),
                Feed::PrevPort(i) => Ok(prev_ports[i]),
                Feed::PrevOut(k) => Ok(prev_out[k]),
                Feed::Exo(k) => u
                    .get(k)
                    .copied()
                    .ok_or_else(|| DeviceError::Neural(format!("input u{k} not provided ({} given)", u.len()))),
            })
            .collect()
    }

    /// Scatters outputs `y` and their port sensitivities `dy/dports` into a local stamp.
    fn stamp(&self, y: &[f64], dy_dport: &DenseMatrix) -> LocalEval {
        let c = self.units.components();
        let n = self.local_size();
        let refd = self.n_terminals >= 2;
        let last = (self.n_terminals - 1) * c;
        let mut ev = LocalEval::zeros(n);
        for (o, target) in self.targets.iter().enumerate() {
            let Some((port, k)) = *target else { continue };
            let row = port * c + k;
            let mut rows = vec![(row, 1.0)];
            if refd {
                rows.push((last + k, -1.0));
            }
            for &(r, sign) in &rows {
                ev.residual[r] += sign * y[o];
                for pi in 0..dy_dport.cols() {
                    let d = sign * dy_dport[(o, pi)];
                    if d == 0.0 {
                        continue;
                    }
                    ev.jacobian[(r, pi)] += d;
                    if refd {
                        ev.jacobian[(r, last + pi % c)] -= d;
                    }
                }
            }
        }
        ev
    }

    fn run(&self, x: &[f64]) -> Result<(Vec<f64>, DenseMatrix)> {
        self.model
            .forward_with_jacobian(x)
            .map_err(|e| DeviceError::Neural(e.to_string()))
    }

    /// Transient evaluation: previous-step slots read `hist`.
    pub fn eval_step(&self, local: &[f64], u: &[f64], hist: &NeuralHistory) -> Result<NeuralEval> {
        let ports = self.port_voltages(local);
        let x = self.assemble_input(&ports, u, &hist.ports, &hist.outputs)?;
        let (y, jx) = self.run(&x)?;
        let mut dport = DenseMatrix::zeros(y.len(), ports.len());
        for (col, f) in self.feeds.iter().enumerate() {
            if let Feed::Port(i) = *f {
                for o in 0..y.len() {
                    dport[(o, i)] += jx[(o, col)];
                }
            }
        }
        Ok(NeuralEval {
            local: self.stamp(&y, &dport),
            outputs: y,
            ports,
        })
    }

    /// Steady-state evaluation: previous-step voltages equal present ones and
    /// fed-back outputs sit at the fixed point `h = N(v, v, h)`.
    pub fn eval_steady(&self, local: &[f64], u: &[f64]) -> Result<NeuralEval> {
        let ports = self.port_voltages(local);
        let no = self.model.output_dim();
        let fed: Vec<usize> = {
            let mut f: Vec<usize> = self
                .feeds
                .iter()
                .filter_map(|f| match f {
                    Feed::PrevOut(k) => Some(*k),
                    _ => None,
                })
                .collect();
            f.sort_unstable();
            f.dedup();
            f
        };
        let mut h = vec![0.0; no];
        let mut converged = fed.is_empty();
        let (mut y, mut jx) = self.run(&self.assemble_input(&ports, u, &ports, &h)?)?;
        for _ in 0..100 {
            if converged {
                break;
            }
            // G(h) = y_fed(h) - h, dG/dh = C_fed - I
            let nf = fed.len();
            let c_fed = self.fed_block(&jx, &fed);
            let mut g = DenseMatrix::zeros(nf, nf);
            let mut rhs = vec![0.0; nf];
            let mut gap = 0.0f64;
            for (a, &ka) in fed.iter().enumerate() {
                rhs[a] = -(y[ka] - h[ka]);
                gap = gap.max(rhs[a].abs() / (1.0 + y[ka].abs()));
                for b in 0..nf {
                    g[(a, b)] = c_fed[(ka, b)] - if a == b { 1.0 } else { 0.0 };
                }
            }
            if gap <= 1e-13 {
                converged = true;
                break;
            }
            let dh =
                lu_solve(&g, &rhs).map_err(|e| DeviceError::Neural(format!("steady-state feedback solve: {e}")))?;
            for (a, &ka) in fed.iter().enumerate() {
                h[ka] += dh[a];
            }
            (y, jx) = self.run(&self.assemble_input(&ports, u, &ports, &h)?)?;
        }
        if !converged {
            return Err(DeviceError::Neural("steady-state feedback did not converge".into()));
        }

        // direct sensitivity B: present and previous port slots both track v
        let np = ports.len();
        let mut b = DenseMatrix::zeros(no, np);
        for (col, f) in self.feeds.iter().enumerate() {
            if let Feed::Port(i) | Feed::PrevPort(i) = *f {
                for o in 0..no {
                    b[(o, i)] += jx[(o, col)];
                }
            }
        }
        let dport = if fed.is_empty() {
            b
        } else {
            // dy/dv = B + C (I - C_fed)^-1 B_fed
            let nf = fed.len();
            let c = self.fed_block(&jx, &fed);
            let mut m = DenseMatrix::identity(nf);
            for (a, &ka) in fed.iter().enumerate() {
                for bcol in 0..nf {
                    m[(a, bcol)] -= c[(ka, bcol)];
                }
            }
            let mut dh = DenseMatrix::zeros(nf, np);
            for col in 0..np {
                let rhs: Vec<f64> = fed.iter().map(|&k| b[(k, col)]).collect();
                let sol =
                    lu_solve(&m, &rhs).map_err(|e| DeviceError::Neural(format!("steady-state sensitivity: {e}")))?;
                dh.set_column(col, &sol);
            }
            let mut total = b;
            total.add_scaled(&c.matmul(&dh), 1.0);
            total
        };
        Ok(NeuralEval {
            local: self.stamp(&y, &dport),
            outputs: y,
            ports,
        })
    }

    /// `dy / dh_fed`, one column per fed-back output (summed over repeated slots).
    fn fed_block(&self, jx: &DenseMatrix, fed: &[usize]) -> DenseMatrix {
        let mut c = DenseMatrix::zeros(jx.rows(), fed.len());
        for (col, f) in self.feeds.iter().enumerate() {
            if let Feed::PrevOut(k) = *f {
                let b = fed.binary_search(&k).expect("listed");
                for o in 0..jx.rows() {
                    c[(o, b)] += jx[(o, col)];
                }
            }
        }
        c
    }

    /// History at a steady operating point.
    pub fn steady_history(&self, local: &[f64], u: &[f64]) -> Result<NeuralHistory> {
        let ev = self.eval_steady(local, u)?;
        Ok(NeuralHistory {
            ports: ev.ports,
            outputs: ev.outputs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Activation, Layer};
    use crate::solvers::fd_jacobian;

    fn linear_net(w: &[&[f64]], b: &[f64]) -> Arc<Mlp> {
        let rows: Vec<Vec<f64>> = w.iter().map(|r| r.to_vec()).collect();
        let layer = Layer::new(DenseMatrix::from_rows(&rows).unwrap(), b.to_vec(), Activation::Identity).unwrap();
        Arc::new(Mlp::from_layers(vec![layer]).unwrap())
    }

    #[test]
    fn slot_tokens_round_trip() {
        for t in ["v", "v1", "vp", "vp0", "h2", "u3"] {
            let s: InputSlot = t.parse().unwrap();
            assert_eq!(s.to_string(), t);
        }
        assert!("x".parse::<InputSlot>().is_err());
        assert!("h".parse::<InputSlot>().is_err());
        assert_eq!("I1".parse::<OutputSlot>().unwrap(), OutputSlot::Current(1));
        assert_eq!("m".parse::<OutputSlot>().unwrap(), OutputSlot::Monitor);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = linear_net(&[&[1.0, 0.0]], &[0.0]);
        let r = NeuralDevice::new(
            net,
            2,
            Units::Si,
            vec![InputSlot::V(None), InputSlot::U(0), InputSlot::U(1)],
            None,
        );
        assert!(matches!(r, Err(DeviceError::Neural(_))));
    }

    #[test]
    fn linear_net_acts_as_conductance() {
        // i = 0.5 v across a two-terminal port
        let dev = NeuralDevice::new(
            linear_net(&[&[0.5]], &[0.0]),
            2,
            Units::Si,
            vec![InputSlot::V(None)],
            None,
        )
        .unwrap();
        let ev = dev.eval_steady(&[3.0, 1.0], &[]).unwrap();
        assert_eq!(ev.local.residual, vec![1.0, -1.0]);
        assert_eq!(ev.local.jacobian.as_slice(), &[0.5, -0.5, -0.5, 0.5]);
    }

    #[test]
    fn steady_feedback_fixed_point() {
        // y = 0.2 v + 0.5 h  =>  h* = 0.4 v, dy/dv = 0.4
        let dev = NeuralDevice::new(
            linear_net(&[&[0.2, 0.5]], &[0.0]),
            1,
            Units::Si,
            vec![InputSlot::V(None), InputSlot::H(0)],
            None,
        )
        .unwrap();
        assert!(dev.is_recurrent());
        let ev = dev.eval_steady(&[2.0], &[]).unwrap();
        assert!((ev.outputs[0] - 0.8).abs() < 1e-12);
        assert!((ev.local.jacobian[(0, 0)] - 0.4).abs() < 1e-12);
        let hist = NeuralHistory {
            ports: vec![2.0],
            outputs: vec![0.8],
        };
        let step = dev.eval_step(&[2.0], &[], &hist).unwrap();
        assert!((step.outputs[0] - 0.8).abs() < 1e-12);
        assert!((step.local.jacobian[(0, 0)] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn per_unit_recurrent_jacobian_matches_fd() {
        let net = Arc::new(
            Mlp::random(&[6, 8, 3], &[Activation::Tanh, Activation::Identity], 3)
                .unwrap()
                .with_normalization(vec![1.0; 6], vec![0.0; 6], vec![0.1; 3], vec![0.0; 3])
                .unwrap(),
        );
        let dev = NeuralDevice::new(
            net,
            2,
            Units::PerUnit,
            vec![
                InputSlot::V(None),
                InputSlot::VPrev(None),
                InputSlot::H(0),
                InputSlot::H(1),
            ],
            Some(vec![OutputSlot::Current(0), OutputSlot::Monitor]),
        )
        .unwrap();
        let z = [1.0, 0.1, 0.2, -0.1];
        let hist = NeuralHistory {
            ports: vec![0.7, 0.25],
            outputs: vec![0.1, -0.2, 0.0],
        };
        let a = dev.eval_step(&z, &[], &hist).unwrap().local.jacobian;
        let fd = fd_jacobian(|x| dev.eval_step(x, &[], &hist).unwrap().local.residual, &z, 1e-6);
        assert!(a.max_abs_diff(&fd) < 1e-8 * (1.0 + fd.max_abs()));
        let a = dev.eval_steady(&z, &[]).unwrap().local.jacobian;
        let fd = fd_jacobian(|x| dev.eval_steady(x, &[]).unwrap().local.residual, &z, 1e-6);
        assert!(a.max_abs_diff(&fd) < 1e-7 * (1.0 + fd.max_abs()));
    }
}
