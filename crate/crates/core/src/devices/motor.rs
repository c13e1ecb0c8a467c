//! Reduced-order induction motor in the synchronous dq frame.
//!
//! State `[psi_ds, psi_qs, psi_dr, psi_qr, omega_r]` (per-unit fluxes and speed),
//! motor sign convention, stator frequency fixed at 1 pu. Flux rates are in
//! pu/s (scaled by `omega_b`), the speed obeys `d omega / dt = (T_e - T_L) / 2H`.
//! The terminal phasor `v_r + j v_i` is read directly as `v_d + j v_q`.

use super::{DeviceError, LocalEval, Result, OMEGA_BASE};
use crate::numlin::{inf_norm, lu_solve, DenseMatrix};

pub const MOTOR_STATES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InductionMotorReduced {
    pub r_s: f64,
    pub r_r: f64,
    pub l_ls: f64,
    pub l_lr: f64,
    pub l_m: f64,
    pub h: f64,
    pub t_load: f64,
    /// Machine base over system base; scales the current drawn from the bus.
    pub rating: f64,
    pub omega_b: f64,
}

impl Default for InductionMotorReduced {
    fn default() -> Self {
        Self {
            r_s: 0.01,
            r_r: 0.02,
            l_ls: 0.05,
            l_lr: 0.05,
            l_m: 3.0,
            h: 0.5,
            t_load: 0.5,
            rating: 1.0,
            omega_b: OMEGA_BASE,
        }
    }
}

/// `d state / dt` and its partials with respect to the state and `(v_d, v_q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotorDerivatives {
    pub dstate: [f64; MOTOR_STATES],
    pub d_state: [[f64; MOTOR_STATES]; MOTOR_STATES],
    pub d_v: [[f64; 2]; MOTOR_STATES],
}

impl InductionMotorReduced {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("rs", self.r_s),
            ("rr", self.r_r),
            ("lls", self.l_ls),
            ("llr", self.l_lr),
            ("lm", self.l_m),
            ("h", self.h),
            ("rating", self.rating),
            ("wb", self.omega_b),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DeviceError::InvalidParameter(format!(
                    "motor {name} must be positive, got {v}"
                )));
            }
        }
        if !self.t_load.is_finite() {
            return Err(DeviceError::InvalidParameter("motor tl must be finite".into()));
        }
        Ok(())
    }

    /// Inverse inductance coefficients `(a, b, c)`: `i_s = a psi_s - b psi_r`,
    /// `i_r = c psi_r - b psi_s`.
    fn coefficients(&self) -> (f64, f64, f64) {
        let ls = self.l_ls + self.l_m;
        let lr = self.l_lr + self.l_m;
        let det = ls * lr - self.l_m * self.l_m;
        (lr / det, self.l_m / det, ls / det)
    }

    /// Stator currents `(i_ds, i_qs)` in machine base.
    pub fn stator_currents(&self, s: &[f64]) -> (f64, f64) {
        let (a, b, _) = self.coefficients();
        (a * s[0] - b * s[2], a * s[1] - b * s[3])
    }

    pub fn electrical_torque(&self, s: &[f64]) -> f64 {
        let (_, b, _) = self.coefficients();
        b * (s[1] * s[2] - s[0] * s[3])
    }

    pub fn derivatives(&self, s: &[f64], v: [f64; 2]) -> MotorDerivatives {
        let (a, b, c) = self.coefficients();
        let (wb, rs, rr) = (self.omega_b, self.r_s, self.r_r);
        let [pds, pqs, pdr, pqr, w] = [s[0], s[1], s[2], s[3], s[4]];
        let ids = a * pds - b * pdr;
        let iqs = a * pqs - b * pqr;
        let idr = c * pdr - b * pds;
        let iqr = c * pqr - b * pqs;
        let slip = 1.0 - w;
        let h2 = 2.0 * self.h;
        let te = b * (pqs * pdr - pds * pqr);

        let dstate = [
            wb * (v[0] - rs * ids + pqs),
            wb * (v[1] - rs * iqs - pds),
            wb * (-rr * idr + slip * pqr),
            wb * (-rr * iqr - slip * pdr),
            (te - self.t_load) / h2,
        ];
        let d_state = [
            [-wb * rs * a, wb, wb * rs * b, 0.0, 0.0],
            [-wb, -wb * rs * a, 0.0, wb * rs * b, 0.0],
            [wb * rr * b, 0.0, -wb * rr * c, wb * slip, -wb * pqr],
            [0.0, wb * rr * b, -wb * slip, -wb * rr * c, wb * pdr],
            [-b * pqr / h2, b * pdr / h2, b * pqs / h2, -b * pds / h2, 0.0],
        ];
        let d_v = [[wb, 0.0], [0.0, wb], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        MotorDerivatives { dstate, d_state, d_v }
    }

    /// Local layout `[state(5), v_r, v_i]`; internal rows hold `-d state/dt`.
    pub(super) fn stamp(&self, local: &[f64]) -> LocalEval {
        let n = MOTOR_STATES;
        let d = self.derivatives(&local[..n], [local[n], local[n + 1]]);
        let mut ev = LocalEval::zeros(n + 2);
        for r in 0..n {
            ev.residual[r] = -d.dstate[r];
            for c in 0..n {
                ev.jacobian[(r, c)] = -d.d_state[r][c];
            }
            ev.jacobian[(r, n)] = -d.d_v[r][0];
            ev.jacobian[(r, n + 1)] = -d.d_v[r][1];
        }
        let (a, b, _) = self.coefficients();
        let (ids, iqs) = self.stator_currents(local);
        let k = self.rating;
        ev.residual[n] = k * ids;
        ev.residual[n + 1] = k * iqs;
        ev.jacobian[(n, 0)] = k * a;
        ev.jacobian[(n, 2)] = -k * b;
        ev.jacobian[(n + 1, 1)] = k * a;
        ev.jacobian[(n + 1, 3)] = -k * b;
        ev
    }

    /// Equilibrium state at a fixed terminal voltage, by Newton from a
    /// near-synchronous guess. `None` if the machine stalls at this voltage.
    pub fn steady_state(&self, v: [f64; 2]) -> Option<[f64; MOTOR_STATES]> {
        let ls = self.l_ls + self.l_m;
        // stator flux lags the voltage by 90 degrees; rotor flux follows it
        let (psd, psq) = (v[1], -v[0]);
        let ratio = self.l_m / ls;
        let mut s = vec![psd, psq, psd * ratio, psq * ratio, 0.99];
        for _ in 0..60 {
            let d = self.derivatives(&s, v);
            if inf_norm(&d.dstate) < 1e-12 {
                return s.try_into().ok().filter(|s: &[f64; 5]| s[4] > 0.0);
            }
            let jac = DenseMatrix::from_rows(&d.d_state.map(|r| r.to_vec())).ok()?;
            let neg: Vec<f64> = d.dstate.iter().map(|x| -x).collect();
            let dx = lu_solve(&jac, &neg).ok()?;
            for (si, di) in s.iter_mut().zip(&dx) {
                *si += di;
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::jacobian_mismatch;
    use super::super::{Device, Units};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unexcited_machine_only_decelerates() {
        let m = InductionMotorReduced::default();
        let d = m.derivatives(&[0.0; 5], [0.0, 0.0]);
        assert_eq!(&d.dstate[..4], &[0.0; 4]);
        assert_eq!(d.dstate[4], -m.t_load / (2.0 * m.h));
    }

    #[test]
    fn steady_state_is_equilibrium() {
        let m = InductionMotorReduced::default();
        let s = m.steady_state([1.0, 0.0]).unwrap();
        let d = m.derivatives(&s, [1.0, 0.0]);
        assert!(inf_norm(&d.dstate) <= 1e-8);
        assert!(s[4] > 0.95 && s[4] < 1.0, "slip out of range: {}", s[4]);
        assert!((m.electrical_torque(&s) - m.t_load).abs() < 1e-9);
        // motoring: real power drawn from the bus is positive
        let (ids, iqs) = m.stator_currents(&s);
        assert!(ids > 0.0 && iqs.abs() < 1.0);
    }

    #[test]
    fn jacobian_matches_fd_at_random_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dev = Device::Motor(InductionMotorReduced {
            rating: 0.3,
            ..Default::default()
        });
        for _ in 0..100 {
            let local: Vec<f64> = (0..7)
                .map(|i| {
                    if i == 4 {
                        rng.random_range(0.8..1.0)
                    } else {
                        rng.random_range(-1.2..1.2)
                    }
                })
                .collect();
            assert!(jacobian_mismatch(&dev, Units::PerUnit, &local, &[]) < 1e-6);
        }
    }

    #[test]
    fn nonpositive_parameter_rejected() {
        let m = InductionMotorReduced {
            l_m: 0.0,
            ..Default::default()
        };
        assert!(m.validate().is_err());
        assert!(InductionMotorReduced::default().validate().is_ok());
    }
}
