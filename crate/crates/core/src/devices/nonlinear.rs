use super::{DeviceError, LocalEval, Result};

/// Largest admissible `v / v_thermal` before the exponential is refused.
const EXP_GUARD: f64 = 60.0;
/// Smallest admissible `|V|^2` for constant-power loads.
const COLLAPSE_GUARD: f64 = 1e-12;

/// Shockley diode `I = i_sat (exp(V / v_thermal) - 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diode {
    pub i_sat: f64,
    pub v_thermal: f64,
}

impl Diode {
    pub fn new(i_sat: f64, v_thermal: f64) -> Result<Self> {
        if !(i_sat > 0.0 && i_sat.is_finite() && v_thermal > 0.0 && v_thermal.is_finite()) {
            return Err(DeviceError::InvalidParameter(format!(
                "diode needs is > 0 and vt > 0, got is={i_sat}, vt={v_thermal}"
            )));
        }
        Ok(Self { i_sat, v_thermal })
    }

    pub(super) fn stamp(&self, local: &[f64]) -> Result<LocalEval> {
        let (i, g) = diode_eval(self, local[0] - local[1])?;
        let mut ev = LocalEval::zeros(2);
        ev.residual = vec![i, -i];
        ev.jacobian[(0, 0)] = g;
        ev.jacobian[(0, 1)] = -g;
        ev.jacobian[(1, 0)] = -g;
        ev.jacobian[(1, 1)] = g;
        Ok(ev)
    }
}

/// Current and small-signal conductance at bias `v`.
pub fn diode_eval(d: &Diode, v: f64) -> Result<(f64, f64)> {
    let x = v / d.v_thermal;
    if !(x <= EXP_GUARD) {
        return Err(DeviceError::OverflowGuard { v, exponent: x });
    }
    let e = x.exp();
    Ok((d.i_sat * (e - 1.0), d.i_sat / d.v_thermal * e))
}

/// Square-law NMOS with channel-length modulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mosfet {
    pub k: f64,
    pub v_th: f64,
    pub lambda: f64,
}

impl Mosfet {
    pub fn new(k: f64, v_th: f64, lambda: f64) -> Result<Self> {
        if !(k > 0.0 && k.is_finite() && lambda >= 0.0 && lambda.is_finite() && v_th.is_finite()) {
            return Err(DeviceError::InvalidParameter(format!(
                "mosfet needs k > 0, lambda >= 0, got k={k}, lambda={lambda}"
            )));
        }
        Ok(Self { k, v_th, lambda })
    }

    /// Overdrive at which triode meets saturation for a given `v_gs`.
    pub fn v_ov(&self, v_gs: f64) -> f64 {
        v_gs - self.v_th
    }

    fn forward(&self, v_gs: f64, v_ds: f64) -> (f64, f64, f64) {
        let v_ov = v_gs - self.v_th;
        if v_ov <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let (k, l) = (self.k, self.lambda);
        let clm = 1.0 + l * v_ds;
        if v_ds < v_ov {
            let core = v_ov * v_ds - 0.5 * v_ds * v_ds;
            (k * core * clm, k * v_ds * clm, k * (v_ov - v_ds) * clm + k * core * l)
        } else {
            let core = 0.5 * v_ov * v_ov;
            (k * core * clm, k * v_ov * clm, k * core * l)
        }
    }

    /// Terminals `[d, g, s]`; drain current flows from d to s through the channel.
    pub(super) fn stamp(&self, local: &[f64]) -> LocalEval {
        let (vd, vg, vs) = (local[0], local[1], local[2]);
        let (i, gm, gds) = mosfet_eval(self, vg - vs, vd - vs);
        let mut ev = LocalEval::zeros(3);
        ev.residual = vec![i, 0.0, -i];
        let di = [gds, gm, -gm - gds];
        for (col, d) in di.into_iter().enumerate() {
            ev.jacobian[(0, col)] = d;
            ev.jacobian[(2, col)] = -d;
        }
        ev
    }
}

/// `(I_DS, dI/dV_GS, dI/dV_DS)`. Negative `v_ds` swaps the roles of drain and
/// source, so the characteristic is odd about `v_ds = 0`.
pub fn mosfet_eval(m: &Mosfet, v_gs: f64, v_ds: f64) -> (f64, f64, f64) {
    if v_ds >= 0.0 {
        m.forward(v_gs, v_ds)
    } else {
        let (i, dg, dd) = m.forward(v_gs - v_ds, -v_ds);
        (-i, -dg, dg + dd)
    }
}

/// Constant-power load `P + jQ = V I*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PqLoad {
    pub p: f64,
    pub q: f64,
}

impl PqLoad {
    pub fn new(p: f64, q: f64) -> Result<Self> {
        if !(p.is_finite() && q.is_finite()) {
            return Err(DeviceError::InvalidParameter("pqload p/q must be finite".into()));
        }
        Ok(Self { p, q })
    }

    pub(super) fn stamp(&self, local: &[f64]) -> Result<LocalEval> {
        let (ir, ii, jac) = pq_residual(self, local[0], local[1])?;
        let mut ev = LocalEval::zeros(2);
        ev.residual = vec![ir, ii];
        for (r, row) in jac.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                ev.jacobian[(r, c)] = v;
            }
        }
        Ok(ev)
    }
}

/// Load current `(i_r, i_i)` and `d(i_r, i_i)/d(v_r, v_i)`.
pub fn pq_residual(load: &PqLoad, v_r: f64, v_i: f64) -> Result<(f64, f64, [[f64; 2]; 2])> {
    let m = v_r * v_r + v_i * v_i;
    if !(m >= COLLAPSE_GUARD) {
        return Err(DeviceError::VoltageCollapse { mag2: m });
    }
    let (p, q) = (load.p, load.q);
    let nr = p * v_r + q * v_i;
    let ni = p * v_i - q * v_r;
    let (ir, ii) = (nr / m, ni / m);
    let m2 = m * m;
    let jac = [
        [p / m - 2.0 * nr * v_r / m2, q / m - 2.0 * nr * v_i / m2],
        [-q / m - 2.0 * ni * v_r / m2, p / m - 2.0 * ni * v_i / m2],
    ];
    Ok((ir, ii, jac))
}

#[cfg(test)]
mod tests {
    use super::super::testing::jacobian_mismatch;
    use super::super::{Device, Units};
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diode_examples() {
        let d = Diode::new(1e-12, 0.025).unwrap();
        assert_eq!(diode_eval(&d, 0.0).unwrap(), (0.0, 1e-12 / 0.025));
        let (i, _) = diode_eval(&d, 0.6).unwrap();
        // 1e-12 * (e^24 - 1)
        assert!((i - 2.648912212984e-2).abs() < 1e-12, "{i}");
        assert!(matches!(diode_eval(&d, 2.0), Err(DeviceError::OverflowGuard { .. })));
    }

    #[test]
    fn mosfet_examples() {
        let m = Mosfet::new(2e-4, 0.4, 0.0).unwrap();
        assert_eq!(
            mosfet_eval(&Mosfet::new(2e-4, 0.4, 0.0).unwrap(), 0.2, 0.5),
            (0.0, 0.0, 0.0)
        );
        assert!((mosfet_eval(&m, 1.0, 1.0).0 - 3.6e-5).abs() < 1e-18);
        assert!((mosfet_eval(&m, 1.0, 0.3).0 - 2.7e-5).abs() < 1e-18);
    }

    #[test]
    fn mosfet_region_continuity() {
        for (k, vth, lambda) in [(2e-4, 0.4, 0.0), (4e-4, 0.4, 0.1), (2e-4, 0.35, 0.05)] {
            let m = Mosfet::new(k, vth, lambda).unwrap();
            for vgs in [0.5, 0.7, 1.0] {
                let v_ov = m.v_ov(vgs);
                let lo = mosfet_eval(&m, vgs, v_ov - 1e-9);
                let hi = mosfet_eval(&m, vgs, v_ov + 1e-9);
                assert!((lo.0 - hi.0).abs() <= 1e-9 * k);
                // the slope itself moves by about k per volt inside the triode region
                assert!((lo.2 - hi.2).abs() <= 2e-9 * k * (1.0 + lambda * v_ov));
            }
        }
    }

    #[test]
    fn pq_examples() {
        let l = PqLoad::new(0.03, 0.01).unwrap();
        let (ir, ii, _) = pq_residual(&l, 1.0, 0.0).unwrap();
        assert!((ir - 0.03).abs() < 1e-15 && (ii + 0.01).abs() < 1e-15);
        let z = PqLoad::new(0.0, 0.0).unwrap();
        let (ir, ii, _) = pq_residual(&z, 0.7, -0.4).unwrap();
        assert_eq!((ir, ii), (0.0, 0.0));
        assert!(matches!(
            pq_residual(&l, 0.0, 0.0),
            Err(DeviceError::VoltageCollapse { .. })
        ));
    }

    #[test]
    fn pq_sensitivity_is_minus_p_at_nominal() {
        for p in [0.01, 0.3, 2.0] {
            let (_, _, j) = pq_residual(&PqLoad::new(p, 0.0).unwrap(), 1.0, 0.0).unwrap();
            assert!((j[0][0] + p).abs() < 1e-14);
        }
    }

    #[test]
    fn nonlinear_jacobians_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let diode = Device::Diode(Diode::new(1e-10, 0.06).unwrap());
        let mos = Device::Mosfet(Mosfet::new(4e-4, 0.4, 0.1).unwrap());
        let pq = Device::PqLoad(PqLoad::new(0.3, 0.1).unwrap());
        for _ in 0..100 {
            let v = [rng.random_range(-0.5..1.0), rng.random_range(-0.5..0.5)];
            assert!(jacobian_mismatch(&diode, Units::Si, &v, &[]) < 1e-6);
            // stay clear of the region seams where one-sided slopes differ
            let m = loop {
                let m: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let (vgs, vds) = (m[1] - m[2], m[0] - m[2]);
                let seams = [
                    vgs - 0.4,
                    vds,
                    vds - (vgs - 0.4),
                    vgs - vds - 0.4,
                    -vds - (vgs - vds - 0.4),
                ];
                if seams.iter().all(|s| s.abs() > 1e-3) {
                    break m;
                }
            };
            assert!(jacobian_mismatch(&mos, Units::Si, &m, &[]) < 1e-6, "{m:?}");
            let w = [rng.random_range(0.5..1.5), rng.random_range(-0.5..0.5)];
            assert!(jacobian_mismatch(&pq, Units::PerUnit, &w, &[]) < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn pq_power_balance(p in -2.0f64..2.0, q in -2.0f64..2.0, vr in -1.5f64..1.5, vi in -1.5f64..1.5) {
            prop_assume!(vr * vr + vi * vi > 1e-6);
            let (ir, ii, _) = pq_residual(&PqLoad::new(p, q).unwrap(), vr, vi).unwrap();
            prop_assert!((vr * ir + vi * ii - p).abs() < 1e-9 * (1.0 + p.abs()));
            prop_assert!((vi * ir - vr * ii - q).abs() < 1e-9 * (1.0 + q.abs()));
        }

        #[test]
        fn mosfet_odd_in_vds(vgs in 0.0f64..1.0, vds in 0.0f64..1.0) {
            let m = Mosfet::new(4e-4, 0.4, 0.0).unwrap();
            let fwd = mosfet_eval(&m, vgs, vds).0;
            // swapping drain and source: v_gs' = v_gs - v_ds, v_ds' = -v_ds
            let rev = mosfet_eval(&m, vgs - vds, -vds).0;
            prop_assert!((fwd + rev).abs() < 1e-15);
        }
    }
}
