use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor;

use super::Mode;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization applied separately to every (component, channel)
/// pair of a `b × n × m` hypercomplex embedding, i.e. `n·m` independent
/// statistics over the batch axis.
#[derive(Clone, Debug)]
pub struct ComponentBatchNorm {
    n: usize,
    m: usize,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

/// Pending running-statistics update produced by a train-mode forward.
#[derive(Clone, Debug)]
pub struct RunningStatsUpdate {
    mean_id: ParamId,
    var_id: ParamId,
    mean: Tensor,
    var: Tensor,
}

impl RunningStatsUpdate {
    pub fn apply(self, store: &mut ParamStore) {
        *store.value_mut(self.mean_id) = self.mean;
        *store.value_mut(self.var_id) = self.var;
    }
}

impl ComponentBatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, n: usize, m: usize) -> Result<Self> {
        let width = n * m;
        Ok(ComponentBatchNorm {
            n,
            m,
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0), ParamRole::Norm, true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]), ParamRole::Norm, true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[width]), ParamRole::Buffer, false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[width], 1.0), ParamRole::Buffer, false)?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    pub fn gamma_id(&self) -> ParamId {
        self.gamma
    }

    pub fn beta_id(&self) -> ParamId {
        self.beta
    }

    pub fn running_mean_id(&self) -> ParamId {
        self.running_mean
    }

    pub fn running_var_id(&self) -> ParamId {
        self.running_var
    }

    /// Normalizes `x` (`b × n·m` or `b × n × m`; the output keeps the input
    /// shape). Train mode uses batch statistics and returns the running
    /// average update; eval mode uses the stored running statistics.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<RunningStatsUpdate>)> {
        let shape = tape.shape(x).to_vec();
        let width = self.n * self.m;
        let rows = match shape.as_slice() {
            &[b, w] if w == width => b,
            &[b, n, m] if n == self.n && m == self.m => b,
            s => {
                return Err(Error::shape(format!(
                    "component batch norm over {}×{} got {s:?}",
                    self.n, self.m
                )))
            }
        };
        let flat = if shape.len() == 3 { tape.reshape(x, &[rows, width])? } else { x };
        let gamma = bind.var(self.gamma);
        let beta = bind.var(self.beta);
        let (y, update) = match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(flat, gamma, beta, self.eps)?;
                let blend = |old: &Tensor, new: &[f64]| {
                    Tensor::vector(
                        old.data()
                            .iter()
                            .zip(new)
                            .map(|(o, b)| (1.0 - self.momentum) * o + self.momentum * b)
                            .collect(),
                    )
                };
                let update = RunningStatsUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    mean: blend(store.value(self.running_mean), &stats.mean),
                    var: blend(store.value(self.running_var), &stats.var_unbiased),
                };
                (y, Some(update))
            }
            Mode::Eval => {
                let inv_std = store.value(self.running_var).map(|v| 1.0 / (v + self.eps).sqrt());
                let inv_std = tape.constant(inv_std);
                let mean = tape.constant(store.value(self.running_mean).clone());
                let scale = tape.mul(gamma, inv_std)?;
                let shifted = tape.mul(mean, scale)?;
                let shift = tape.sub(beta, shifted)?;
                let y = tape.mul_row_vec(flat, scale)?;
                (tape.add_row_vec(y, shift)?, None)
            }
        };
        let y = if shape.len() == 3 { tape.reshape(y, &shape)? } else { y };
        Ok((y, update))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..3.0)).collect()).unwrap()
    }

    fn run(bn: &ComponentBatchNorm, store: &ParamStore, x: &Tensor, mode: Mode) -> (Tensor, Option<RunningStatsUpdate>) {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (y, u) = bn.forward(&mut tape, &bind, store, xv, mode).unwrap();
        (tape.value(y).clone(), u)
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let mut store = ParamStore::new();
        let bn = ComponentBatchNorm::new(&mut store, "bn", 2, 3).unwrap();
        let (y, _) = run(&bn, &store, &Tensor::full(&[4, 2, 3], 7.5), Mode::Train);
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[4, 2, 3]);
    }

    #[test]
    fn train_mode_standardizes_each_component_channel() {
        let mut store = ParamStore::new();
        let bn = ComponentBatchNorm::new(&mut store, "bn", 4, 3).unwrap();
        let x = random(&[50, 12], 1);
        let (y, _) = run(&bn, &store, &x, Mode::Train);
        for j in 0..12 {
            let col: Vec<f64> = (0..50).map(|i| y.at2(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-6);
            // ε shrinks the variance by a factor var/(var+ε)
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn running_mean_single_update() {
        let mut store = ParamStore::new();
        let bn = ComponentBatchNorm::new(&mut store, "bn", 1, 2).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 10.0], vec![3.0, 20.0]]).unwrap();
        let (_, update) = run(&bn, &store, &x, Mode::Train);
        update.unwrap().apply(&mut store);
        let rm = store.value(bn.running_mean_id()).data();
        assert!((rm[0] - 0.1 * 2.0).abs() < 1e-15);
        assert!((rm[1] - 0.1 * 15.0).abs() < 1e-15);
        // unbiased batch variance: 2 and 50
        let rv = store.value(bn.running_var_id()).data();
        assert!((rv[0] - (0.9 + 0.2)).abs() < 1e-15);
        assert!((rv[1] - (0.9 + 5.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut store = ParamStore::new();
        let bn = ComponentBatchNorm::new(&mut store, "bn", 1, 2).unwrap();
        *store.value_mut(bn.running_mean_id()) = Tensor::vector(vec![1.0, -1.0]);
        *store.value_mut(bn.running_var_id()) = Tensor::vector(vec![4.0, 0.25]);
        *store.value_mut(bn.gamma_id()) = Tensor::vector(vec![2.0, 1.0]);
        *store.value_mut(bn.beta_id()) = Tensor::vector(vec![0.5, 0.0]);
        let x = Tensor::from_rows(&[vec![3.0, 0.0]]).unwrap();
        let (y, update) = run(&bn, &store, &x, Mode::Eval);
        assert!(update.is_none());
        let e0 = 2.0 * (3.0 - 1.0) / (4.0 + BN_EPS).sqrt() + 0.5;
        let e1 = (0.0 + 1.0) / (0.25 + BN_EPS).sqrt();
        assert!((y.data()[0] - e0).abs() < 1e-14);
        assert!((y.data()[1] - e1).abs() < 1e-14);
    }

    #[test]
    fn train_mode_needs_two_rows() {
        let mut store = ParamStore::new();
        let bn = ComponentBatchNorm::new(&mut store, "bn", 2, 2).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(bn.forward(&mut tape, &bind, &store, x, Mode::Train).is_err());
    }

    #[test]
    fn invariant_under_per_channel_affine_rescaling() {
        let mut store = ParamStore::new();
        let bn = ComponentBatchNorm::new(&mut store, "bn", 2, 3).unwrap();
        let x = random(&[20, 6], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scales: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..4.0)).collect();
        let shifts: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut x2 = x.clone();
        for row in x2.data_mut().chunks_mut(6) {
            for j in 0..6 {
                row[j] = row[j] * scales[j] + shifts[j];
            }
        }
        let (y1, _) = run(&bn, &store, &x, Mode::Train);
        let (y2, _) = run(&bn, &store, &x2, Mode::Train);
        // equal up to the ε term, whose effect shrinks as the scale grows
        assert!(y1.max_abs_diff(&y2).unwrap() < 1e-4);
        let big: Vec<f64> = scales.iter().map(|s| s * 1e4).collect();
        let mut x3 = x.clone();
        let mut x4 = x.clone();
        for (r3, r4) in x3.data_mut().chunks_mut(6).zip(x4.data_mut().chunks_mut(6)) {
            for j in 0..6 {
                r3[j] *= 1e4;
                r4[j] = r4[j] * big[j] + shifts[j];
            }
        }
        let (y3, _) = run(&bn, &store, &x3, Mode::Train);
        let (y4, _) = run(&bn, &store, &x4, Mode::Train);
        assert!(y3.max_abs_diff(&y4).unwrap() < 1e-10);
    }
}
