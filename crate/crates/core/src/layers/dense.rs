use rand::Rng;

use crate::algebra::keyed_rng;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor;

/// Real affine map `y = x·A + b` with `A` stored as `d_in × d_out`.
///
/// Serves as the real transform that collapses an `n·m` hypercomplex
/// embedding to real outputs, and as the continuous-feature encoder.
#[derive(Clone, Debug)]
pub struct Dense {
    d_in: usize,
    d_out: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, seed: u64, layer: u64) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::invalid(format!("dense layer `{name}` needs positive widths")));
        }
        let a = (6.0 / (d_in + d_out) as f64).sqrt();
        let mut rng = keyed_rng(seed, layer, 1 << 30);
        let w = (0..d_in * d_out).map(|_| rng.random_range(-a..a)).collect();
        Self::from_parts(store, name, Tensor::new(&[d_in, d_out], w)?, Tensor::zeros(&[d_out]))
    }

    pub fn from_parts(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Result<Self> {
        let (d_in, d_out) = weight.dims2()?;
        if bias.shape() != [d_out] {
            return Err(Error::shape(format!("dense `{name}`: bias {:?} for {d_out} outputs", bias.shape())));
        }
        Ok(Dense {
            d_in,
            d_out,
            weight: store.add(format!("{name}.weight"), weight, ParamRole::Dense, true)?,
            bias: store.add(format!("{name}.bias"), bias, ParamRole::Bias, true)?,
        })
    }

    pub fn in_width(&self) -> usize {
        self.d_in
    }

    pub fn out_width(&self) -> usize {
        self.d_out
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<Var> {
        let (_, w) = tape.value(x).dims2()?;
        if w != self.d_in {
            return Err(Error::shape(format!("dense expects width {}, got {w}", self.d_in)));
        }
        let y = tape.matmul(x, bind.var(self.weight))?;
        tape.add_row_vec(y, bind.var(self.bias))
    }
}
