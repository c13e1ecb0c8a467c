use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{diode_eval, mosfet_eval, DeviceError, Diode, Mosfet, Result};
use crate::neural::Dataset;

/// Device whose characteristic can be tabulated for training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepDevice {
    /// `V_D -> I_D`
    Diode(Diode),
    /// `(V_GS, V_DS) -> I_DS`
    Mosfet(Mosfet),
}

impl SweepDevice {
    pub fn input_dim(&self) -> usize {
        match self {
            SweepDevice::Diode(_) => 1,
            SweepDevice::Mosfet(_) => 2,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            SweepDevice::Diode(d) => Ok(diode_eval(d, x[0])?.0),
            SweepDevice::Mosfet(m) => Ok(mosfet_eval(m, x[0], x[1]).0),
        }
    }

    /// Physics gradient with respect to each input.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            SweepDevice::Diode(d) => Ok(vec![diode_eval(d, x[0])?.1]),
            SweepDevice::Mosfet(m) => {
                let (_, gm, gds) = mosfet_eval(m, x[0], x[1]);
                Ok(vec![gm, gds])
            }
        }
    }
}

/// How sample points are placed inside the ranges.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampling {
    /// Inclusive evenly spaced grid, one count per input; first input varies slowest.
    Grid(Vec<usize>),
    /// Seeded uniform draws.
    Random(usize),
}

fn linspace(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    if n == 1 {
        lo
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}

/// Tabulates exact device outputs over `ranges`.
pub fn sweep_dataset(device: &SweepDevice, ranges: &[(f64, f64)], sampling: &Sampling, seed: u64) -> Result<Dataset> {
    let dim = device.input_dim();
    if ranges.len() != dim || ranges.iter().any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
        return Err(DeviceError::InvalidParameter(format!(
            "sweep needs {dim} finite ranges lo <= hi"
        )));
    }
    let points: Vec<Vec<f64>> = match sampling {
        Sampling::Grid(counts) => {
            if counts.len() != dim || counts.contains(&0) {
                return Err(DeviceError::InvalidParameter(format!(
                    "grid needs {dim} non-zero counts"
                )));
            }
            let total: usize = counts.iter().product();
            (0..total)
                .map(|mut flat| {
                    let mut p = vec![0.0; dim];
                    for d in (0..dim).rev() {
                        let i = flat % counts[d];
                        flat /= counts[d];
                        p[d] = linspace(ranges[d].0, ranges[d].1, counts[d], i);
                    }
                    p
                })
                .collect()
        }
        Sampling::Random(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..*n)
                .map(|_| {
                    ranges
                        .iter()
                        .map(|&(a, b)| if a == b { a } else { rng.random_range(a..=b) })
                        .collect()
                })
                .collect()
        }
    };
    let targets = points
        .iter()
        .map(|p| device.eval(p).map(|i| vec![i]))
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_rows(&points, &targets).map_err(|e| DeviceError::InvalidParameter(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diode_grid() {
        let d = SweepDevice::Diode(Diode::new(1e-10, 0.06).unwrap());
        let data = sweep_dataset(&d, &[(0.0, 1.0)], &Sampling::Grid(vec![1000]), 0).unwrap();
        assert_eq!(data.len(), 1000);
        assert_eq!(data.inputs.row(0), &[0.0]);
        assert_eq!(data.targets.row(0), &[0.0]);
        assert_eq!(data.inputs.row(999), &[1.0]);
    }

    #[test]
    fn mosfet_grid() {
        let m = SweepDevice::Mosfet(Mosfet::new(2e-4, 0.4, 0.0).unwrap());
        let data = sweep_dataset(&m, &[(0.0, 1.0), (0.0, 1.0)], &Sampling::Grid(vec![50, 50]), 0).unwrap();
        assert_eq!(data.len(), 2500);
        assert_eq!(data.inputs.row(1), &[0.0, 1.0 / 49.0]);
        assert_eq!(data.inputs.row(50), &[1.0 / 49.0, 0.0]);
    }

    #[test]
    fn random_is_seeded() {
        let m = SweepDevice::Mosfet(Mosfet::new(2e-4, 0.4, 0.0).unwrap());
        let r = [(0.0, 1.0), (0.0, 1.0)];
        let a = sweep_dataset(&m, &r, &Sampling::Random(64), 9).unwrap();
        let b = sweep_dataset(&m, &r, &Sampling::Random(64), 9).unwrap();
        let c = sweep_dataset(&m, &r, &Sampling::Random(64), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bad_ranges_rejected() {
        let d = SweepDevice::Diode(Diode::new(1e-10, 0.06).unwrap());
        assert!(sweep_dataset(&d, &[(1.0, 0.0)], &Sampling::Random(3), 0).is_err());
        assert!(sweep_dataset(&d, &[(0.0, 1.0), (0.0, 1.0)], &Sampling::Random(3), 0).is_err());
        assert!(sweep_dataset(&d, &[(0.0, 1.0)], &Sampling::Grid(vec![0]), 0).is_err());
    }
}
