use super::{DeviceError, Entry, LocalEval, Result, Units, OMEGA_BASE};
use crate::numlin::DenseMatrix;

/// A source value: a constant or an entry of the exogenous input vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Source {
    Const(f64),
    Input(usize),
}

impl Source {
    pub fn value(self, u: &[f64]) -> Result<f64> {
        match self {
            Source::Const(v) => Ok(v),
            Source::Input(k) => u
                .get(k)
                .copied()
                .ok_or_else(|| DeviceError::InvalidParameter(format!("input u{k} not provided ({} given)", u.len()))),
        }
    }

    pub fn input_index(self) -> Option<usize> {
        match self {
            Source::Input(k) => Some(k),
            Source::Const(_) => None,
        }
    }
}

/// Stamps a conductance `g` between local terminal blocks starting at `a` and `b`.
fn stamp_conductance(ev: &mut LocalEval, local: &[f64], a: usize, b: usize, c: usize, g: f64) {
    for k in 0..c {
        let dv = local[a + k] - local[b + k];
        ev.residual[a + k] += g * dv;
        ev.residual[b + k] -= g * dv;
        ev.jacobian[(a + k, a + k)] += g;
        ev.jacobian[(a + k, b + k)] -= g;
        ev.jacobian[(b + k, a + k)] -= g;
        ev.jacobian[(b + k, b + k)] += g;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resistor {
    pub resistance: f64,
}

impl Resistor {
    pub fn new(resistance: f64) -> Result<Self> {
        positive("resistance", resistance)?;
        Ok(Self { resistance })
    }

    pub(super) fn eval(&self, units: Units, local: &[f64]) -> LocalEval {
        let c = units.components();
        let mut ev = LocalEval::zeros(2 * c);
        stamp_conductance(&mut ev, local, 0, c, c, 1.0 / self.resistance);
        ev
    }
}

/// In SI circuits a plain capacitor; in per-unit grids a dynamic-phasor shunt
/// whose value is its susceptance at nominal frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capacitor {
    pub capacitance: f64,
}

impl Capacitor {
    pub fn new(capacitance: f64) -> Result<Self> {
        positive("capacitance", capacitance)?;
        Ok(Self { capacitance })
    }

    pub(super) fn eval(&self, units: Units, local: &[f64]) -> LocalEval {
        let c = units.components();
        let mut ev = LocalEval::zeros(2 * c);
        if units == Units::PerUnit {
            // i = j C v on top of the C/wb dv/dt term carried by the mass matrix
            let cap = self.capacitance;
            let (dr, di) = (local[0] - local[2], local[1] - local[3]);
            let rows = [(-cap * di, [(1, -cap), (3, cap)]), (cap * dr, [(0, cap), (2, -cap)])];
            for (k, (val, partials)) in rows.into_iter().enumerate() {
                ev.residual[k] += val;
                ev.residual[2 + k] -= val;
                for (col, d) in partials {
                    ev.jacobian[(k, col)] += d;
                    ev.jacobian[(2 + k, col)] -= d;
                }
            }
        }
        ev
    }

    pub(super) fn mass(&self, units: Units) -> Vec<Entry> {
        let c = units.components();
        let m = match units {
            Units::Si => self.capacitance,
            Units::PerUnit => self.capacitance / OMEGA_BASE,
        };
        let mut e = Vec::new();
        for k in 0..c {
            e.push((k, k, m));
            e.push((k, c + k, -m));
            e.push((c + k, k, -m));
            e.push((c + k, c + k, m));
        }
        e
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inductor {
    pub inductance: f64,
}

impl Inductor {
    pub fn new(inductance: f64) -> Result<Self> {
        positive("inductance", inductance)?;
        Ok(Self { inductance })
    }

    pub(super) fn eval(&self, units: Units, local: &[f64]) -> LocalEval {
        let c = units.components();
        let mut ev = LocalEval::zeros(3 * c);
        branch_current_stamp(&mut ev, local, c);
        // branch rows: -(v_a - v_b) plus the per-unit rotation term
        for k in 0..c {
            ev.residual[k] = -(local[c + k] - local[2 * c + k]);
            ev.jacobian[(k, c + k)] = -1.0;
            ev.jacobian[(k, 2 * c + k)] = 1.0;
        }
        if units == Units::PerUnit {
            let l = self.inductance;
            ev.residual[0] -= l * local[1];
            ev.residual[1] += l * local[0];
            ev.jacobian[(0, 1)] -= l;
            ev.jacobian[(1, 0)] += l;
        }
        ev
    }

    pub(super) fn mass(&self, units: Units) -> Vec<Entry> {
        let m = match units {
            Units::Si => self.inductance,
            Units::PerUnit => self.inductance / OMEGA_BASE,
        };
        (0..units.components()).map(|k| (k, k, m)).collect()
    }
}

/// Terminal rows for a device whose internal unknowns are its branch current
/// flowing from terminal a to terminal b.
fn branch_current_stamp(ev: &mut LocalEval, local: &[f64], c: usize) {
    for (k, &i) in local[..c].iter().enumerate() {
        ev.residual[c + k] += i;
        ev.residual[2 * c + k] -= i;
        ev.jacobian[(c + k, k)] += 1.0;
        ev.jacobian[(2 * c + k, k)] -= 1.0;
    }
}

/// Ideal voltage source; per-unit sources take an optional phase angle (rad).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VSource {
    pub value: Source,
    pub angle: Source,
}

impl VSource {
    pub fn new(value: Source) -> Self {
        Self {
            value,
            angle: Source::Const(0.0),
        }
    }

    pub(super) fn eval(&self, units: Units, local: &[f64], u: &[f64]) -> Result<LocalEval> {
        let c = units.components();
        let mut ev = LocalEval::zeros(3 * c);
        branch_current_stamp(&mut ev, local, c);
        let e = self.value.value(u)?;
        let target = match units {
            Units::Si => vec![e],
            Units::PerUnit => {
                let th = self.angle.value(u)?;
                vec![e * th.cos(), e * th.sin()]
            }
        };
        for k in 0..c {
            ev.residual[k] = local[c + k] - local[2 * c + k] - target[k];
            ev.jacobian[(k, c + k)] = 1.0;
            ev.jacobian[(k, 2 * c + k)] = -1.0;
        }
        Ok(ev)
    }
}

/// Ideal current source pushing `value` from terminal a through the source to b.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ISource {
    pub value: Source,
}

impl ISource {
    pub(super) fn eval(&self, units: Units, _local: &[f64], u: &[f64]) -> Result<LocalEval> {
        let c = units.components();
        let mut ev = LocalEval::zeros(2 * c);
        let i = self.value.value(u)?;
        ev.residual[0] = i;
        ev.residual[c] = -i;
        Ok(ev)
    }
}

/// Linear network between buses, `I = (G + jB) V` in rectangular coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionNetwork {
    g: DenseMatrix,
    b: DenseMatrix,
}

impl TransmissionNetwork {
    pub fn new(g: DenseMatrix, b: DenseMatrix) -> Result<Self> {
        if !g.is_square() || g.rows() != b.rows() || g.cols() != b.cols() || g.rows() == 0 {
            return Err(DeviceError::InvalidParameter(
                "G and B must be square and the same size".into(),
            ));
        }
        if !g.is_finite() || !b.is_finite() {
            return Err(DeviceError::InvalidParameter("non-finite G/B entry".into()));
        }
        let n = g.rows();
        for i in 0..n {
            for j in 0..i {
                let sym = |m: &DenseMatrix| (m[(i, j)] - m[(j, i)]).abs() <= 1e-9 * (1.0 + m[(i, j)].abs());
                if !sym(&g) || !sym(&b) {
                    return Err(DeviceError::InvalidParameter(format!("G/B not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { g, b })
    }

    /// Builds G/B from series branches `(from, to, r, x)` and shunt susceptances.
    pub fn from_branches(n: usize, branches: &[(usize, usize, f64, f64)], shunt_b: &[(usize, f64)]) -> Result<Self> {
        let mut g = DenseMatrix::zeros(n, n);
        let mut b = DenseMatrix::zeros(n, n);
        for &(i, j, r, x) in branches {
            let z2 = r * r + x * x;
            if i >= n || j >= n || i == j || z2 <= 0.0 {
                return Err(DeviceError::InvalidParameter(format!("bad branch {i}-{j}")));
            }
            let (gs, bs) = (r / z2, -x / z2);
            for (m, v) in [(&mut g, gs), (&mut b, bs)] {
                m[(i, i)] += v;
                m[(j, j)] += v;
                m[(i, j)] -= v;
                m[(j, i)] -= v;
            }
        }
        for &(i, bsh) in shunt_b {
            b[(i, i)] += bsh;
        }
        Self::new(g, b)
    }

    pub fn size(&self) -> usize {
        self.g.rows()
    }

    pub fn g(&self) -> &DenseMatrix {
        &self.g
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    /// Parses the sidecar matrix format: `n`, n rows of G, blank line, n rows of B.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| DeviceError::InvalidParameter(format!("txnet file: {m}"));
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.starts_with('#'))
            .skip_while(|l| l.is_empty());
        let n: usize = lines
            .next()
            .ok_or_else(|| bad("empty".into()))?
            .parse()
            .map_err(|e| bad(format!("size line: {e}")))?;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * n);
        for line in lines.filter(|l| !l.is_empty()) {
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| bad(format!("`{t}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != n {
                return Err(bad(format!("row has {} values, expected {n}", row.len())));
            }
            rows.push(row);
        }
        if rows.len() != 2 * n {
            return Err(bad(format!("expected {} matrix rows, found {}", 2 * n, rows.len())));
        }
        let g = DenseMatrix::from_rows(&rows[..n]).map_err(|e| bad(e.to_string()))?;
        let b = DenseMatrix::from_rows(&rows[n..]).map_err(|e| bad(e.to_string()))?;
        Self::new(g, b)
    }

    pub fn to_text(&self) -> String {
        let n = self.size();
        let mut s = format!("{n}\n");
        for m in [&self.g, &self.b] {
            for r in 0..n {
                let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:e}")).collect();
                s.push_str(&row.join(" "));
                s.push('\n');
            }
            s.push('\n');
        }
        s
    }

    pub(super) fn eval(&self, local: &[f64]) -> LocalEval {
        let n = self.size();
        let mut ev = LocalEval::zeros(2 * n);
        for k in 0..n {
            for j in 0..n {
                let (g, b) = (self.g[(k, j)], self.b[(k, j)]);
                let (vr, vi) = (local[2 * j], local[2 * j + 1]);
                ev.residual[2 * k] += g * vr - b * vi;
                ev.residual[2 * k + 1] += b * vr + g * vi;
                ev.jacobian[(2 * k, 2 * j)] = g;
                ev.jacobian[(2 * k, 2 * j + 1)] = -b;
                ev.jacobian[(2 * k + 1, 2 * j)] = b;
                ev.jacobian[(2 * k + 1, 2 * j + 1)] = g;
            }
        }
        ev
    }

    pub(super) fn pattern(&self) -> Vec<(usize, usize)> {
        let n = self.size();
        let mut p = Vec::new();
        for k in 0..n {
            for j in 0..n {
                if self.g[(k, j)] != 0.0 || self.b[(k, j)] != 0.0 {
                    p.extend([
                        (2 * k, 2 * j),
                        (2 * k, 2 * j + 1),
                        (2 * k + 1, 2 * j),
                        (2 * k + 1, 2 * j + 1),
                    ]);
                }
            }
        }
        p
    }
}

fn positive(what: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(DeviceError::InvalidParameter(format!(
            "{what} must be positive, got {v}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::jacobian_mismatch;
    use super::super::Device;
    use super::*;

    #[test]
    fn resistor_current() {
        let ev = Resistor::new(2.0).unwrap().eval(Units::Si, &[3.0, 1.0]);
        assert_eq!(ev.residual, vec![1.0, -1.0]);
    }

    #[test]
    fn nonpositive_parameters_rejected() {
        assert!(Resistor::new(0.0).is_err());
        assert!(Capacitor::new(-1.0).is_err());
        assert!(Inductor::new(f64::NAN).is_err());
    }

    #[test]
    fn vsource_uses_input() {
        let vs = VSource::new(Source::Input(1));
        let ev = vs.eval(Units::Si, &[0.0, 2.5, 0.0], &[0.0, 2.5]).unwrap();
        assert_eq!(ev.residual[0], 0.0);
        assert!(vs.eval(Units::Si, &[0.0; 3], &[1.0]).is_err());
    }

    #[test]
    fn txnet_text_round_trip() {
        let net = TransmissionNetwork::from_branches(2, &[(0, 1, 0.01, 0.05)], &[(1, 0.02)]).unwrap();
        let back = TransmissionNetwork::parse(&net.to_text()).unwrap();
        assert!(back.g().max_abs_diff(net.g()) < 1e-12);
        assert!(back.b().max_abs_diff(net.b()) < 1e-12);
        assert!(TransmissionNetwork::parse("2\n1 0\n0 1\n").is_err());
        assert!(TransmissionNetwork::parse("2\n1 0\n1 1\n\n0 0\n0 0\n").is_err());
    }

    #[test]
    fn linear_jacobians_match_fd() {
        let tx = TransmissionNetwork::from_branches(3, &[(0, 1, 0.01, 0.1), (1, 2, 0.02, 0.08)], &[]).unwrap();
        let cases: Vec<(Device, Units)> = vec![
            (Device::Resistor(Resistor::new(3.0).unwrap()), Units::Si),
            (Device::Resistor(Resistor::new(3.0).unwrap()), Units::PerUnit),
            (Device::Capacitor(Capacitor::new(0.2).unwrap()), Units::PerUnit),
            (Device::Inductor(Inductor::new(0.1).unwrap()), Units::Si),
            (Device::Inductor(Inductor::new(0.1).unwrap()), Units::PerUnit),
            (
                Device::VSource(VSource {
                    value: Source::Const(1.0),
                    angle: Source::Const(0.3),
                }),
                Units::PerUnit,
            ),
            (Device::TxNet(tx), Units::PerUnit),
        ];
        for (dev, units) in cases {
            let n = dev.local_size(units);
            let local: Vec<f64> = (0..n).map(|i| 0.3 * i as f64 - 0.7).collect();
            assert!(jacobian_mismatch(&dev, units, &local, &[]) < 1e-6, "{dev:?}");
        }
    }
}
