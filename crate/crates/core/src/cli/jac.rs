//! Backpropagated sensitivities against physics derivatives.

use anyhow::Result;
use rayon::prelude::*;

use crate::devices::SweepDevice;
use crate::neural::Mlp;

/// Errors are relative to `max(|truth|, FLOOR * full_scale)`, so points where
/// the true value crosses zero do not dominate the mean.
pub const ERROR_FLOOR: f64 = 0.1;

pub fn floored_error(estimate: f64, truth: f64, full_scale: f64) -> f64 {
    let denom = truth.abs().max(ERROR_FLOOR * full_scale);
    if denom == 0.0 {
        (estimate - truth).abs()
    } else {
        (estimate - truth).abs() / denom
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacPoint {
    pub x: Vec<f64>,
    pub physics: Vec<f64>,
    pub backprop: Vec<f64>,
    pub error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacSummary {
    pub points: Vec<JacPoint>,
    /// Per input.
    pub mean: Vec<f64>,
    pub max: Vec<f64>,
}

/// True when `x` lies within `band` of a region boundary of the device.
pub fn near_boundary(device: &SweepDevice, x: &[f64], band: f64) -> bool {
    match device {
        SweepDevice::Diode(_) => false,
        SweepDevice::Mosfet(m) => {
            let v_ov = m.v_ov(x[0]);
            (x[0] - m.v_th).abs() < band || (v_ov > 0.0 && (x[1] - v_ov).abs() < band)
        }
    }
}

/// Inclusive grid over `ranges`, first input slowest.
pub fn grid_points(ranges: &[(f64, f64)], counts: &[usize]) -> Vec<Vec<f64>> {
    let total: usize = counts.iter().product();
    (0..total)
        .map(|mut flat| {
            let mut p = vec![0.0; ranges.len()];
            for d in (0..ranges.len()).rev() {
                let i = flat % counts[d];
                flat /= counts[d];
                let (lo, hi) = ranges[d];
                p[d] = if counts[d] == 1 {
                    lo
                } else {
                    lo + (hi - lo) * i as f64 / (counts[d] - 1) as f64
                };
            }
            p
        })
        .collect()
}

/// Compares `model`'s input Jacobian row with the device gradient at every
/// point. Points are evaluated concurrently; output order follows `points`.
pub fn check_jacobian(model: &Mlp, device: &SweepDevice, points: &[Vec<f64>]) -> Result<JacSummary> {
    let dim = device.input_dim();
    anyhow::ensure!(
        model.input_dim() == dim && model.output_dim() == 1,
        "model is {}->{}, device needs {dim}->1",
        model.input_dim(),
        model.output_dim()
    );
    let evals: Vec<(Vec<f64>, Vec<f64>)> = points
        .par_iter()
        .map(|x| -> Result<(Vec<f64>, Vec<f64>)> {
            let g = device.gradient(x)?;
            let j = model.input_jacobian(x)?;
            Ok((g, j.row(0).to_vec()))
        })
        .collect::<Result<_>>()?;
    let scale: Vec<f64> = (0..dim)
        .map(|k| evals.iter().map(|(g, _)| g[k].abs()).fold(0.0, f64::max))
        .collect();
    let pts: Vec<JacPoint> = points
        .iter()
        .zip(evals)
        .map(|(x, (g, j))| JacPoint {
            x: x.clone(),
            error: (0..dim).map(|k| floored_error(j[k], g[k], scale[k])).collect(),
            physics: g,
            backprop: j,
        })
        .collect();
    let n = pts.len().max(1) as f64;
    let mean = (0..dim)
        .map(|k| pts.iter().map(|p| p.error[k]).sum::<f64>() / n)
        .collect();
    let max = (0..dim)
        .map(|k| pts.iter().map(|p| p.error[k]).fold(0.0, f64::max))
        .collect();
    Ok(JacSummary { points: pts, mean, max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::{Diode, Mosfet};
    use crate::neural::{Activation, Layer};
    use crate::numlin::DenseMatrix;

    #[test]
    fn exact_linear_model_has_zero_error() {
        // a diode with huge v_thermal is linear to first order: slope 1e-9
        let d = SweepDevice::Diode(Diode::new(1e-3, 1e6).unwrap());
        let w = DenseMatrix::from_row_major(1, 1, vec![1e-9]).unwrap();
        let net = Mlp::from_layers(vec![Layer::new(w, vec![0.0], Activation::Identity).unwrap()]).unwrap();
        let s = check_jacobian(&net, &d, &grid_points(&[(0.0, 1.0)], &[11])).unwrap();
        assert!(s.max[0] < 1e-5, "{:?}", s.max);
    }

    #[test]
    fn random_model_reports_without_failing() {
        let m = SweepDevice::Mosfet(Mosfet::new(4e-4, 0.4, 0.1).unwrap());
        let net = Mlp::random(&[2, 8, 1], &[Activation::Tanh, Activation::Identity], 4).unwrap();
        let pts = grid_points(&[(0.0, 1.0), (0.0, 1.0)], &[5, 5]);
        let s = check_jacobian(&net, &m, &pts).unwrap();
        assert_eq!(s.points.len(), 25);
        assert!(s.mean.iter().all(|e| e.is_finite()));
    }

    #[test]
    fn boundary_band() {
        let m = SweepDevice::Mosfet(Mosfet::new(4e-4, 0.4, 0.0).unwrap());
        assert!(near_boundary(&m, &[0.42, 0.9], 0.05));
        assert!(near_boundary(&m, &[0.9, 0.52], 0.05));
        assert!(!near_boundary(&m, &[0.9, 0.2], 0.05));
        assert!(!near_boundary(&m, &[0.2, 0.5], 0.05));
    }

    #[test]
    fn floor_limits_relative_blowup() {
        assert_eq!(floored_error(1.0, 0.0, 10.0), 1.0);
        assert!((floored_error(1.1, 1.0, 1.0) - 0.1).abs() < 1e-12);
    }
}
