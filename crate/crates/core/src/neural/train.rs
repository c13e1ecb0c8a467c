use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Mlp, NeuralError, Result};
use crate::numlin::DenseMatrix;

/// Paired input/target samples, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DenseMatrix,
    pub targets: DenseMatrix,
}

impl Dataset {
    pub fn new(inputs: DenseMatrix, targets: DenseMatrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(NeuralError::DimensionMismatch(format!(
                "{} input rows vs {} target rows",
                inputs.rows(),
                targets.rows()
            )));
        }
        if !inputs.is_finite() || !targets.is_finite() {
            return Err(NeuralError::DimensionMismatch(
                "dataset contains non-finite values".into(),
            ));
        }
        Ok(Self { inputs, targets })
    }

    pub fn from_rows(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self> {
        let i = DenseMatrix::from_rows(inputs).map_err(|e| NeuralError::DimensionMismatch(e.to_string()))?;
        let t = DenseMatrix::from_rows(targets).map_err(|e| NeuralError::DimensionMismatch(e.to_string()))?;
        Self::new(i, t)
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.cols()
    }

    pub(crate) fn check_dims(&self, net: &Mlp) -> Result<()> {
        if self.input_dim() != net.input_dim() || self.output_dim() != net.output_dim() {
            return Err(NeuralError::DimensionMismatch(format!(
                "dataset is {}->{}, network is {}->{}",
                self.input_dim(),
                self.output_dim(),
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(())
    }

    /// Mean absolute and mean squared error of `net` over the whole set.
    pub fn errors(&self, net: &Mlp) -> Result<(f64, f64)> {
        self.check_dims(net)?;
        let (mut mae, mut mse) = (0.0, 0.0);
        for r in 0..self.len() {
            let y = net.forward(self.inputs.row(r))?;
            for (p, t) in y.iter().zip(self.targets.row(r)) {
                mae += (p - t).abs();
                mse += (p - t) * (p - t);
            }
        }
        let n = (self.len() * self.output_dim()).max(1) as f64;
        Ok((mae / n, mse / n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mse,
    Mae,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate in the last epoch over the first; decays geometrically in between.
    pub final_lr_ratio: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            final_lr_ratio: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss: Loss::Mse,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.final_lr_ratio > 0.0
            && self.final_lr_ratio <= 1.0
            && (0.0..1.0).contains(&self.adam_beta1)
            && self.adam_beta1 > 0.0
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_beta2 > 0.0
            && self.adam_eps > 0.0
            && self.batch_size >= 1;
        if ok {
            Ok(())
        } else {
            Err(NeuralError::InvalidConfig(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    /// Loss over the full dataset in physical output units, one per epoch.
    pub loss_history: Vec<f64>,
}

/// Flat Adam moment buffers mirroring the layer parameters.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(net: &Mlp) -> Self {
        let sizes: Vec<usize> = net
            .layers()
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    fn apply(&mut self, net: &mut Mlp, grads: &[Vec<f64>], cfg: &TrainConfig, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - cfg.adam_beta1.powi(self.step);
        let bc2 = 1.0 - cfg.adam_beta2.powi(self.step);
        for (li, layer) in net.layers_mut().iter_mut().enumerate() {
            let n_w = layer.weights.as_slice().len();
            let (m, v, g) = (&mut self.m[li], &mut self.v[li], &grads[li]);
            let mut update = |k: usize, p: &mut f64| {
                m[k] = cfg.adam_beta1 * m[k] + (1.0 - cfg.adam_beta1) * g[k];
                v[k] = cfg.adam_beta2 * v[k] + (1.0 - cfg.adam_beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            };
            let cols = layer.weights.cols();
            for k in 0..n_w {
                update(k, &mut layer.weights[(k / cols, k % cols)]);
            }
            for (k, b) in layer.bias.iter_mut().enumerate() {
                update(n_w + k, b);
            }
        }
    }
}

/// Mini-batch Adam on the normalized outputs. Normalization stored in the
/// model is left untouched; call [`Mlp::fit_normalization`] beforehand if the
/// data spans decades.
pub fn train(net: Mlp, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    data.check_dims(&net)?;

    let mut net = net;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&net);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let n_out = net.output_dim();
    let targets_norm: Vec<Vec<f64>> = (0..data.len())
        .map(|r| {
            data.targets
                .row(r)
                .iter()
                .zip(net.output_offset())
                .zip(net.output_scale())
                .map(|((t, o), s)| (t - o) / s)
                .collect()
        })
        .collect();

    for epoch in 0..cfg.epochs {
        let snapshot = net.clone();
        let lr = cfg.learning_rate * cfg.final_lr_ratio.powf(epoch as f64 / (cfg.epochs - 1).max(1) as f64);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> = net
                .layers()
                .iter()
                .map(|l| vec![0.0; l.weights.as_slice().len() + l.bias.len()])
                .collect();
            let denom = (batch.len() * n_out) as f64;
            for &sample in batch {
                let trace = net.trace(net.normalize_input(data.inputs.row(sample)));
                let mut adj: Vec<f64> = trace
                    .output
                    .iter()
                    .zip(&targets_norm[sample])
                    .map(|(y, t)| match cfg.loss {
                        Loss::Mse => 2.0 * (y - t) / denom,
                        Loss::Mae => (y - t).signum() / denom,
                    })
                    .collect();
                for li in (0..net.layers().len()).rev() {
                    let layer = &net.layers()[li];
                    for (a, z) in adj.iter_mut().zip(&trace.pre[li]) {
                        *a *= layer.activation.derivative(*z);
                    }
                    let input = &trace.inputs[li];
                    let cols = layer.weights.cols();
                    let n_w = layer.weights.as_slice().len();
                    let g = &mut grads[li];
                    for (r, a) in adj.iter().enumerate() {
                        for (c, x) in input.iter().enumerate() {
                            g[r * cols + c] += a * x;
                        }
                        g[n_w + r] += a;
                    }
                    if li > 0 {
                        let mut up = vec![0.0; cols];
                        for (r, a) in adj.iter().enumerate() {
                            for (u, w) in up.iter_mut().zip(layer.weights.row(r)) {
                                *u += a * w;
                            }
                        }
                        adj = up;
                    }
                }
            }
            adam.apply(&mut net, &grads, cfg, lr);
        }

        let (mae, mse) = data.errors(&net)?;
        let loss = match cfg.loss {
            Loss::Mse => mse,
            Loss::Mae => mae,
        };
        if !loss.is_finite() {
            return Err(NeuralError::NonFiniteLoss {
                epoch,
                last_finite: Box::new(snapshot),
            });
        }
        history.push(loss);
    }

    Ok(TrainOutcome {
        model: net,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Activation, Layer};

    fn linear_dataset() -> Dataset {
        let xs: Vec<Vec<f64>> = (0..50).map(|i| vec![-1.0 + 2.0 * i as f64 / 49.0]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![2.0 * x[0]]).collect();
        Dataset::from_rows(&xs, &ys).unwrap()
    }

    #[test]
    fn fits_linear_map() {
        let net = Mlp::random(&[1, 1], &[Activation::Identity], 3).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 5,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let out = train(net, &linear_dataset(), &cfg).unwrap();
        assert_eq!(out.loss_history.len(), 200);
        assert!(*out.loss_history.last().unwrap() < 1e-6);
    }

    #[test]
    fn single_sample_loss_does_not_increase() {
        let data = Dataset::from_rows(&vec![vec![0.5, -0.2]; 16], &vec![vec![0.3]; 16]).unwrap();
        let net = Mlp::random(&[2, 8, 1], &[Activation::Tanh, Activation::Identity], 5).unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 16,
            // small enough that Adam momentum never carries past the minimum
            learning_rate: 1e-4,
            ..TrainConfig::default()
        };
        let out = train(net, &data, &cfg).unwrap();
        for w in out.loss_history[5..].windows(2) {
            assert!(w[1] <= w[0], "{:?}", out.loss_history);
        }
    }

    #[test]
    fn same_seed_same_history() {
        let net = Mlp::random(&[1, 6, 1], &[Activation::Softplus, Activation::Identity], 1).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            seed: 42,
            ..TrainConfig::default()
        };
        let a = train(net.clone(), &linear_dataset(), &cfg).unwrap();
        let b = train(net, &linear_dataset(), &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn zero_epochs_keeps_weights() {
        let net = Mlp::random(&[1, 4, 1], &[Activation::Tanh, Activation::Identity], 9).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(net.clone(), &linear_dataset(), &cfg).unwrap();
        assert!(out.loss_history.is_empty());
        assert_eq!(out.model, net);
    }

    #[test]
    fn empty_dataset_rejected() {
        let net = Mlp::random(&[1, 1], &[Activation::Identity], 0).unwrap();
        let data = Dataset::new(DenseMatrix::zeros(0, 1), DenseMatrix::zeros(0, 1)).unwrap();
        assert!(matches!(
            train(net, &data, &TrainConfig::default()),
            Err(NeuralError::EmptyDataset)
        ));
    }

    #[test]
    fn divergence_reports_last_finite_model() {
        // A huge learning rate on a square network blows up within a few epochs.
        let layer = |w: f64| {
            Layer::new(
                DenseMatrix::from_row_major(1, 1, vec![w]).unwrap(),
                vec![0.0],
                Activation::Square,
            )
            .unwrap()
        };
        let net = Mlp::from_layers(vec![layer(3.0), layer(3.0), layer(3.0)]).unwrap();
        let cfg = TrainConfig {
            epochs: 500,
            batch_size: 1,
            learning_rate: 1e150,
            ..TrainConfig::default()
        };
        match train(net, &linear_dataset(), &cfg) {
            Err(NeuralError::NonFiniteLoss { last_finite, .. }) => {
                assert!(last_finite.forward(&[0.1]).unwrap()[0].is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bad_config_rejected() {
        let net = Mlp::random(&[1, 1], &[Activation::Identity], 0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(net, &linear_dataset(), &cfg),
            Err(NeuralError::InvalidConfig(_))
        ));
    }
}
