//! Builtin target and initial-condition formulas.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formula {
    /// `x^2 + 0.3 sin(2 pi x) + 0.2 cos(3 pi x)` in the first coordinate.
    MixedTrig,
    /// `sum_k x_k^2`
    Square,
    /// `sum_k cos(pi x_k)`
    CosSum,
    Zero,
}

impl Formula {
    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            Self::MixedTrig => {
                let t = x[0];
                t * t + 0.3 * (2.0 * PI * t).sin() + 0.2 * (3.0 * PI * t).cos()
            }
            Self::Square => x.iter().map(|v| v * v).sum(),
            Self::CosSum => x.iter().map(|v| (PI * v).cos()).sum(),
            Self::Zero => 0.0,
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MixedTrig => "mixed_trig",
            Self::Square => "square",
            Self::CosSum => "cos_sum",
            Self::Zero => "zero",
        })
    }
}

impl FromStr for Formula {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mixed_trig" => Ok(Self::MixedTrig),
            "square" => Ok(Self::Square),
            "cos_sum" => Ok(Self::CosSum),
            "zero" => Ok(Self::Zero),
            _ => Err(CliError::Input(format!(
                "unknown formula '{s}' (expected mixed_trig, square, cos_sum or zero)"
            ))),
        }
    }
}
