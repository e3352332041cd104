use super::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }

    /// Advances the store's step counter and applies one update.
    pub fn step<S: Scalar>(&self, params: &mut ParamStore<S>) {
        params.step += 1;
        let t = params.step;
        adam_step(params, self.lr, self.beta1, self.beta2, self.eps, t);
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update of every trainable entry; `step_index` starts
/// at 1. All gradients are zeroed afterwards.
pub fn adam_step<S: Scalar>(params: &mut ParamStore<S>, lr: f64, beta1: f64, beta2: f64, eps: f64, step_index: u64) {
    let t = step_index.max(1) as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (S::lit(beta1), S::lit(beta2));
    let (ob1, ob2) = (S::one() - b1, S::one() - b2);
    let (lr, eps, c1, c2) = (S::lit(lr), S::lit(eps), S::lit(c1), S::lit(c2));
    for (_, e) in params.iter_mut() {
        if e.trainable {
            for i in 0..e.value.len() {
                let g = e.grad[i];
                e.m[i] = b1 * e.m[i] + ob1 * g;
                e.v[i] = b2 * e.v[i] + ob2 * g * g;
                let mhat = e.m[i] / c1;
                let vhat = e.v[i] / c2;
                e.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        e.grad.iter_mut().for_each(|g| *g = S::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", &[1], vec![w], true).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_store(0.7);
        for t in 1..=5 {
            adam_step(&mut p, 1e-2, 0.9, 0.999, 1e-8, t);
        }
        assert_eq!(p.value("w").unwrap()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(0.0);
        p.accumulate("w", &[1.0]).unwrap();
        adam_step(&mut p, 1e-3, 0.9, 0.999, 1e-8, 1);
        let w = p.value("w").unwrap()[0];
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((w + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(p.get("w").unwrap().grad[0], 0.0);
    }

    #[test]
    fn frozen_entries_do_not_move() {
        let mut p = ParamStore::<f64>::new();
        p.insert("f", &[1], vec![1.0], false).unwrap();
        p.accumulate("f", &[3.0]).unwrap();
        AdamConfig::with_lr(0.1).step(&mut p);
        assert_eq!(p.value("f").unwrap()[0], 1.0);
        assert_eq!(p.get("f").unwrap().grad[0], 0.0);
    }
}
