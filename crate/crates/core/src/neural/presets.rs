use std::fmt;
use std::str::FromStr;

use super::{Activation, Mlp, Result, TrainConfig};

/// Layer widths (input first, output last) and one activation per layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl Architecture {
    /// Hidden layers share `hidden`; the output layer is linear.
    pub fn uniform(sizes: &[usize], hidden: Activation) -> Self {
        let n = sizes.len().saturating_sub(1);
        let mut activations = vec![hidden; n];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        Self {
            sizes: sizes.to_vec(),
            activations,
        }
    }

    pub fn build(&self, seed: u64) -> Result<Mlp> {
        Mlp::random(&self.sizes, &self.activations, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }
}

/// `"2,32,32,1:softplus"`: widths, then the hidden activation.
impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (widths, act) = s.split_once(':').unwrap_or((s, "tanh"));
        let sizes = widths
            .split(',')
            .map(|w| w.trim().parse::<usize>().map_err(|e| format!("width `{w}`: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(format!("architecture `{s}` needs at least two non-zero widths"));
        }
        Ok(Self::uniform(&sizes, act.parse()?))
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let widths: Vec<String> = self.sizes.iter().map(usize::to_string).collect();
        let hidden = self.activations.first().copied().unwrap_or(Activation::Identity);
        write!(f, "{}:{hidden}", widths.join(","))
    }
}

/// Architectures for the packaged device macromodels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// V_D -> I_D
    Diode,
    /// (V_GS, V_DS) -> I_DS
    Mosfet,
    /// four exogenous features -> (P, Q)
    PqForecaster,
    /// (v(t), v(t-1), i(t-1)) in dq -> (i_d, i_q, speed)
    Motor,
    /// (v_r, v_i, four exogenous features) -> (i_r, i_i)
    Load,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Diode,
        Preset::Mosfet,
        Preset::PqForecaster,
        Preset::Motor,
        Preset::Load,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Diode => "diode",
            Preset::Mosfet => "mosfet",
            Preset::PqForecaster => "pq",
            Preset::Motor => "motor",
            Preset::Load => "load",
        }
    }

    pub fn architecture(self) -> Architecture {
        match self {
            Preset::Diode => Architecture::uniform(&[1, 16, 16, 16, 1], Activation::Softplus),
            Preset::Mosfet => Architecture::uniform(&[2, 32, 32, 32, 1], Activation::Softplus),
            Preset::PqForecaster => Architecture::uniform(&[4, 32, 32, 32, 2], Activation::Tanh),
            Preset::Motor => Architecture::uniform(&[6, 24, 24, 3], Activation::Square),
            Preset::Load => Architecture::uniform(&[6, 32, 32, 32, 2], Activation::Tanh),
        }
    }

    /// Training schedule that reaches the packaged accuracy targets.
    pub fn train_config(self, seed: u64) -> TrainConfig {
        let (epochs, batch_size, learning_rate, final_lr_ratio) = match self {
            Preset::Diode => (2000, 16, 5e-3, 0.01),
            Preset::Mosfet => (600, 32, 2e-3, 0.01),
            Preset::PqForecaster => (300, 32, 1e-3, 0.01),
            Preset::Motor => (60, 64, 1e-3, 0.01),
            Preset::Load => (400, 32, 1e-3, 0.01),
        };
        TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            final_lr_ratio,
            seed,
            ..TrainConfig::default()
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown preset `{s}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_shapes() {
        let d = Preset::Diode.architecture();
        assert_eq!(d.sizes, vec![1, 16, 16, 16, 1]);
        assert_eq!(d.activations.len(), 4);
        assert_eq!(d.activations[0], Activation::Softplus);
        assert_eq!(d.activations[3], Activation::Identity);
        let m = Preset::Motor.architecture();
        assert_eq!((m.input_dim(), m.output_dim()), (6, 3));
        assert_eq!(
            m.activations,
            vec![Activation::Square, Activation::Square, Activation::Identity]
        );
    }

    #[test]
    fn parse_architecture() {
        let a: Architecture = "2,8,1:softplus".parse().unwrap();
        assert_eq!(a, Architecture::uniform(&[2, 8, 1], Activation::Softplus));
        assert_eq!(a.to_string(), "2,8,1:softplus");
        assert!("3".parse::<Architecture>().is_err());
        assert!("2,x,1".parse::<Architecture>().is_err());
        assert!("2,4,1:relu".parse::<Architecture>().is_err());
    }
}
