use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    /// One Bernoulli draw per `(row, channel)`, shared by all `n` components.
    Component,
    /// One draw per scalar.
    Flat,
}

impl DropoutMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DropoutMode::Component => "component",
            DropoutMode::Flat => "flat",
        }
    }
}

impl fmt::Display for DropoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DropoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "component" => Ok(DropoutMode::Component),
            "flat" => Ok(DropoutMode::Flat),
            other => Err(Error::invalid(format!("unknown dropout mode `{other}`"))),
        }
    }
}

/// Inverted dropout on a `b × (n·m)` embedding. Kept entries are scaled by
/// `1/(1-p)`. Passing `rng = None` (eval) or `p = 0` returns `x` itself.
pub fn hc_dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    n: usize,
    p: f64,
    mode: DropoutMode,
    rng: Option<&mut R>,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    let rng = match rng {
        Some(rng) if p > 0.0 => rng,
        _ => return Ok(x),
    };
    let (b, width) = tape.value(x).dims2()?;
    if n == 0 || width % n != 0 {
        return Err(Error::shape(format!("dropout: width {width} not divisible by n={n}")));
    }
    let keep = 1.0 / (1.0 - p);
    let mut draw = || if rng.random::<f64>() < p { 0.0 } else { keep };
    let mask = match mode {
        DropoutMode::Flat => (0..b * width).map(|_| draw()).collect(),
        DropoutMode::Component => {
            let m = width / n;
            let mut mask = Vec::with_capacity(b * width);
            for _ in 0..b {
                let row: Vec<f64> = (0..m).map(|_| draw()).collect();
                for _ in 0..n {
                    mask.extend_from_slice(&row);
                }
            }
            mask
        }
    };
    let mask = tape.constant(Tensor::new(&[b, width], mask)?);
    tape.mul(x, mask)
}
