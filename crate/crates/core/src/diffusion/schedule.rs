use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nnkit::Tensor;
use crate::scalar::Scalar;

/// Linear-beta noise schedule. Index 0 is the clean state.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_T: usize = 2000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// `T` steps with `beta` linearly spaced from `beta_start` (t = 1) to
/// `beta_end` (t = T).
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::InvalidParam("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParam(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let mut beta = vec![0.0; t_max + 1];
    let mut alpha = vec![1.0; t_max + 1];
    let mut alpha_bar = vec![1.0; t_max + 1];
    for t in 1..=t_max {
        beta[t] = if t_max == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (t - 1) as f64 / (t_max - 1) as f64
        };
        alpha[t] = 1.0 - beta[t];
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }
    Ok(NoiseSchedule {
        t_max,
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    /// A `T`-step schedule that visits the 2000-step default curve at `T`
    /// evenly spaced points, so `alpha_bar(t)` equals the default
    /// `alpha_bar(round(t * 2000 / T))` up to rounding.
    pub fn time_rescaled(t_max: usize) -> Result<Self> {
        if t_max == 0 || t_max > DEFAULT_T {
            return Err(Error::InvalidParam(format!("respaced schedule needs 1 <= T <= {DEFAULT_T}, got {t_max}")));
        }
        let full = make_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END)?;
        let at = |t: usize| full.alpha_bar((t * DEFAULT_T + t_max / 2) / t_max);
        let mut beta = vec![0.0; t_max + 1];
        let mut alpha = vec![1.0; t_max + 1];
        let mut alpha_bar = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            beta[t] = 1.0 - at(t) / at(t - 1);
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        Ok(NoiseSchedule { t_max, beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::InvalidParam(format!("step {t} outside [0, {}]", self.t_max)));
        }
        Ok(())
    }

    /// Coefficients `(c0, ct, var)` of `q(x_{t-1} | x_t, x0)`: mean
    /// `c0 * x0 + ct * x_t`, variance `var`.
    pub fn posterior(&self, t: usize) -> Result<(f64, f64, f64)> {
        if t == 0 || t > self.t_max {
            return Err(Error::InvalidParam(format!("posterior step {t} outside [1, {}]", self.t_max)));
        }
        let (ab, ab_prev) = (self.alpha_bar[t], self.alpha_bar[t - 1]);
        let c0 = ab_prev.sqrt() * self.beta[t] / (1.0 - ab);
        let ct = self.alpha[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = (1.0 - ab_prev) / (1.0 - ab) * self.beta[t];
        Ok((c0, ct, var))
    }
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_noise<S: Scalar>(x0: &Tensor<S>, t: usize, eps: &Tensor<S>, schedule: &NoiseSchedule) -> Result<Tensor<S>> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (S::lit(ab.sqrt()), S::lit((1.0 - ab).sqrt()));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Per-item steps, for batched training.
pub fn forward_noise_batch<S: Scalar>(x0: &Tensor<S>, ts: &[usize], eps: &Tensor<S>, schedule: &NoiseSchedule) -> Result<Tensor<S>> {
    eps.expect_shape(x0.shape(), "forward_noise")?;
    if ts.len() != x0.n() {
        return Err(Error::shape("forward_noise steps", x0.n(), ts.len()));
    }
    let mut out = Tensor::zeros(x0.shape());
    for (i, &t) in ts.iter().enumerate() {
        schedule.check_step(t)?;
        let ab = schedule.alpha_bar(t);
        let (a, b) = (S::lit(ab.sqrt()), S::lit((1.0 - ab).sqrt()));
        let (x, e) = (x0.item(i), eps.item(i));
        for (k, o) in out.item_mut(i).iter_mut().enumerate() {
            *o = a * x[k] + b * e[k];
        }
    }
    Ok(out)
}

/// `x0 = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`.
pub fn x0_from_eps<S: Scalar>(x_t: &Tensor<S>, eps_hat: &Tensor<S>, t: usize, schedule: &NoiseSchedule) -> Result<Tensor<S>> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (S::lit(1.0 / ab.sqrt()), S::lit((1.0 - ab).sqrt()));
    x_t.zip_map(eps_hat, |x, e| (x - b * e) * a)
}

pub fn gaussian<S: Scalar, R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::lit(z)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Mean squared error.
pub fn loss_rm<S: Scalar>(x0: &Tensor<S>, x0_hat: &Tensor<S>) -> Result<S> {
    x0_hat.expect_shape(x0.shape(), "loss_rm")?;
    let n = S::from_usize_lossy(x0.len());
    Ok(x0.data().iter().zip(x0_hat.data()).map(|(&a, &b)| (b - a) * (b - a)).sum::<S>() / n)
}

pub(crate) fn loss_rm_grad<S: Scalar>(target: &Tensor<S>, pred: &Tensor<S>) -> Result<(S, Tensor<S>)> {
    let l = loss_rm(target, pred)?;
    let k = S::lit(2.0) / S::from_usize_lossy(target.len());
    Ok((l, pred.zip_map(target, |p, t| k * (p - t))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.02, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.98).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_properties() {
        let s = make_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        for t in 1..=DEFAULT_T {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert_eq!(s.alpha_bar(t - 1) * s.alpha(t), s.alpha_bar(t));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
        assert!(s.alpha_bar(DEFAULT_T) < 1e-4);
        let r = NoiseSchedule::time_rescaled(200).unwrap();
        // same curve at matching fractions of the horizon
        for t in 1..=200 {
            assert!((r.alpha_bar(t) / s.alpha_bar(t * 10) - 1.0).abs() < 1e-9);
        }
        assert_eq!(NoiseSchedule::time_rescaled(DEFAULT_T).unwrap().alpha_bar(DEFAULT_T), s.alpha_bar(DEFAULT_T));
        assert!(NoiseSchedule::time_rescaled(0).is_err());
    }

    #[test]
    fn invalid_schedules() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let s = make_schedule(10, 0.01, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = gaussian::<f64, _>([1, 3, 4, 4], &mut rng);
        let eps = gaussian::<f64, _>([1, 3, 4, 4], &mut rng);
        assert_eq!(forward_noise(&x0, 0, &eps, &s).unwrap(), x0);
        assert!(forward_noise(&x0, 11, &eps, &s).is_err());
        let xt = forward_noise(&x0, 7, &eps, &s).unwrap();
        let back = x0_from_eps(&xt, &eps, 7, &s).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn loss_rm_offset() {
        let a = Tensor::<f64>::full([1, 3, 2, 2], 0.3);
        let b = Tensor::<f64>::full([1, 3, 2, 2], 0.3 + 0.25);
        assert!((loss_rm(&a, &b).unwrap() - 0.0625).abs() < 1e-9);
        assert_eq!(loss_rm(&a, &a).unwrap(), 0.0);
    }
}
