//! AdamW with decoupled weight decay, global-norm clipping and the
//! step-function learning-rate schedule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::ModelError;
use crate::params::{Bound, ParamKind, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(store: &ParamStore<F>, cfg: AdamWConfig) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| Array2::zeros(p.value.dim()))
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with per-parameter gradients in store order. Weight
    /// matrices are decayed; biases and normalization parameters are not.
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &[Array2<F>], lr: f64) -> Result<(), ModelError> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(ModelError::Shape(format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let (b1, b2) = (F::c(c.beta1), F::c(c.beta2));
        let bc1 = F::one() - F::c(c.beta1.powi(self.step as i32));
        let bc2 = F::one() - F::c(c.beta2.powi(self.step as i32));
        let lr_f = F::c(lr);
        let eps = F::c(c.eps);
        let decay = F::one() - F::c(lr * c.weight_decay);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.dim() != p.value.dim() {
                return Err(ModelError::Shape(format!("gradient shape for `{}`", p.name)));
            }
            if p.kind == ParamKind::Weight {
                p.value.mapv_inplace(|x| x * decay);
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|x, m, v, &g| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *x -= lr_f * mh / (vh.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Collects gradients for every parameter of `store` (zeros where a
/// parameter did not take part in the graph).
pub fn param_grads<F: Real>(store: &ParamStore<F>, bound: &Bound, grads: &mut Gradients<F>) -> Vec<Array2<F>> {
    store
        .params()
        .iter()
        .zip(bound.vars())
        .map(|(p, &v)| grads.take(v).unwrap_or_else(|| Array2::zeros(p.value.dim())))
        .collect()
}

/// Scales gradients in place so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [Array2<F>], max_norm: Option<f64>) -> F {
    let total = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum::<F>()
        .sqrt();
    if let Some(max) = max_norm {
        let max = F::c(max);
        if total > max {
            let scale = max / (total + F::c(1e-6));
            for g in grads.iter_mut() {
                g.mapv_inplace(|x| x * scale);
            }
        }
    }
    total
}

/// Base rate, divided by `factor` once `epoch >= epochs - decay_epochs`.
pub fn learning_rate(base: f64, epoch: usize, epochs: usize, decay_epochs: usize, factor: f64) -> f64 {
    if epoch >= epochs.saturating_sub(decay_epochs) {
        base / factor
    } else {
        base
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_drops_for_last_ten_epochs() {
        assert_eq!(learning_rate(5e-4, 14, 25, 10, 10.0), 5e-4);
        assert_eq!(learning_rate(5e-4, 15, 25, 10, 10.0), 5e-4 / 10.0);
        assert_eq!(learning_rate(5e-4, 24, 25, 10, 10.0), 5e-4 / 10.0);
        assert_eq!(5e-4 / 10.0, 5e-5);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Array2::from_elem((2, 2), 3.0f64), Array2::from_elem((1, 1), 4.0)];
        let before = clip_global_norm(&mut g, Some(2.0));
        assert!((before - (36.0f64 + 16.0).sqrt()).abs() < 1e-12);
        let after = clip_global_norm(&mut g, None);
        assert!(after <= 2.0);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let w = store.weight("w", 1, 1, &mut rng);
        let b = store.bias("b", 1);
        store.get_mut(w).fill(2.0);
        store.get_mut(b).fill(2.0);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let grads = vec![Array2::from_elem((1, 1), 0.5), Array2::from_elem((1, 1), 0.5)];
        opt.update(&mut store, &grads, 0.1).unwrap();
        // bias-corrected first step moves by lr·g/(|g|+eps) ≈ lr
        let step = 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((store.get(b)[[0, 0]] - (2.0 - step)).abs() < 1e-12);
        let decayed = 2.0 * (1.0 - 0.1 * 1e-4);
        assert!((store.get(w)[[0, 0]] - (decayed - step)).abs() < 1e-12);
    }
}
