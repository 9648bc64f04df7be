use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Bias-corrected Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradients so their joint L2 norm is at most this.
    pub clip: Option<f64>,
    step: u64,
    /// First/second moments, indexed like the store; `None` for tensors
    /// that are not trainable.
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(store: &ParamStore, clip: Option<f64>) -> Adam {
        let zeros = |store: &ParamStore| {
            store
                .iter()
                .map(|(_, p)| p.trainable.then(|| Tensor::zeros(p.value.shape())))
                .collect()
        };
        Adam {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            clip,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        Some((self.m[id.index()].as_ref()?, self.v[id.index()].as_ref()?))
    }

    /// Restores state saved from [`Adam::steps`] and [`Adam::moments`].
    pub fn restore(&mut self, step: u64, moments: Vec<(ParamId, Tensor, Tensor)>) -> Result<()> {
        for (id, m, v) in moments {
            let slot = self.m.get(id.index()).and_then(Option::as_ref);
            match slot {
                Some(cur) if cur.shape() == m.shape() && m.shape() == v.shape() => {
                    self.m[id.index()] = Some(m);
                    self.v[id.index()] = Some(v);
                }
                _ => return Err(Error::Checkpoint(format!("optimizer moments do not match parameter {}", id.index()))),
            }
        }
        self.step = step;
        Ok(())
    }

    /// Applies one update. `grads` lists trainable parameters with their
    /// gradients; missing entries count as zero. Returns the global
    /// gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut [(ParamId, Tensor)], lr: f64) -> Result<f64> {
        for (id, g) in grads.iter() {
            g.ensure_finite(&format!("gradient of `{}`", store.get(*id).name))?;
        }
        let norm = grads.iter().map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if let Some(max) = self.clip {
            if norm > max {
                let s = max / norm;
                for (_, g) in grads.iter_mut() {
                    g.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let (Some(m), Some(v)) = (self.m[id.index()].as_mut(), self.v[id.index()].as_mut()) else {
                return Err(Error::invalid(format!("`{}` is not trainable", store.get(*id).name)));
            };
            let w = store.value_mut(*id);
            if w.shape() != g.shape() {
                return Err(Error::shape(format!("gradient {:?} for parameter {:?}", g.shape(), w.shape())));
            }
            for (((w, m), v), &g) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRole;

    fn store_with(values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(values), ParamRole::Dense, true).unwrap();
        (store, id)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = store_with(vec![1.0]);
        let mut adam = Adam::new(&store, None);
        adam.step(&mut store, &mut [(id, Tensor::vector(vec![0.3]))], 0.01).unwrap();
        let delta = store.value(id).data()[0] - 1.0;
        assert!((delta + 0.01).abs() < 1e-8, "{delta}");
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = store_with(vec![1.0, -2.0]);
        let mut adam = Adam::new(&store, None);
        for _ in 0..3 {
            adam.step(&mut store, &mut [(id, Tensor::zeros(&[2]))], 0.1).unwrap();
        }
        assert_eq!(store.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn clipping_halves_gradients_of_norm_four() {
        let (mut store, id) = store_with(vec![0.0, 0.0]);
        let mut adam = Adam::new(&store, Some(2.0));
        let mut grads = [(id, Tensor::vector(vec![0.0, 4.0]))];
        let norm = adam.step(&mut store, &mut grads, 0.1).unwrap();
        assert_eq!(norm, 4.0);
        assert_eq!(grads[0].1.data(), &[0.0, 2.0]);
        let (m, _) = adam.moments(id).unwrap();
        assert!((m.data()[1] - 0.1 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn matches_hand_rolled_two_steps() {
        let (mut store, id) = store_with(vec![0.5]);
        let mut adam = Adam::new(&store, None);
        let (lr, g1, g2) = (0.05, 0.2, -0.4);
        adam.step(&mut store, &mut [(id, Tensor::vector(vec![g1]))], lr).unwrap();
        adam.step(&mut store, &mut [(id, Tensor::vector(vec![g2]))], lr).unwrap();
        let mut w = 0.5;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, g1), (2, g2)] {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= lr * mh / (vh.sqrt() + 1e-8);
        }
        assert!((store.value(id).data()[0] - w).abs() < 1e-15);
        assert_eq!(adam.steps(), 2);
    }

    #[test]
    fn rejects_non_finite_and_frozen() {
        let (mut store, id) = store_with(vec![0.0]);
        let frozen = store.add("f", Tensor::vector(vec![1.0]), ParamRole::Contribution, false).unwrap();
        let mut adam = Adam::new(&store, None);
        assert!(adam.step(&mut store, &mut [(id, Tensor::vector(vec![f64::NAN]))], 0.1).is_err());
        assert!(adam.step(&mut store, &mut [(frozen, Tensor::vector(vec![1.0]))], 0.1).is_err());
    }
}
