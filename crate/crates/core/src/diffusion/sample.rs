use rand::Rng;

use super::denoiser::{rm_predict, Denoiser};
use super::schedule::{gaussian, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nnkit::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Ancestral sampling through every step.
    Markov,
    /// Iterated clean-image substitution over a step subsequence.
    #[default]
    NonMarkov,
    /// Deterministic DDIM update over a subsequence; comparison only.
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub mode: SamplerKind,
    /// Denoiser calls for the subsequence samplers; ignored by `Markov`.
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: SamplerKind::NonMarkov,
            steps: 1,
            seed: 0,
        }
    }
}

/// `steps + 1` evenly spaced step indices from `T` down to the terminal 1.
/// The denoiser runs at every entry but the last.
pub fn tau_schedule(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || t_max < 2 || steps > t_max - 1 {
        return Err(Error::InvalidParam(format!("cannot pick {steps} steps out of T = {t_max}")));
    }
    Ok((0..=steps)
        .rev()
        .map(|k| 1 + ((t_max - 1) as f64 * k as f64 / steps as f64).round() as usize)
        .collect())
}

fn check_tau(tau: &[usize], schedule: Option<&NoiseSchedule>) -> Result<()> {
    if tau.len() < 2 {
        return Err(Error::InvalidParam(format!(
            "step subsequence needs at least a start step and the terminal 1, got {tau:?}"
        )));
    }
    if tau.windows(2).any(|w| w[0] <= w[1]) || *tau.last().unwrap() != 1 {
        return Err(Error::InvalidParam(format!("step subsequence must decrease strictly to 1, got {tau:?}")));
    }
    if let Some(s) = schedule {
        s.check_step(tau[0])?;
    }
    Ok(())
}

fn clamp_model(x: Tensor<f32>) -> Tensor<f32> {
    x.map(|v| v.clamp(-1.0, 1.0))
}

/// One ancestral step `x_t -> x_{t-1}` from the posterior given `x0_hat`;
/// no noise is added at `t = 1`.
pub fn markov_step<R: Rng + ?Sized>(
    x_t: &Tensor<f32>,
    x0_hat: &Tensor<f32>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let (c0, ct, var) = schedule.posterior(t)?;
    let mean = x0_hat.zip_map(x_t, |a, b| (c0 * a as f64 + ct * b as f64) as f32)?;
    if t == 1 {
        return Ok(mean);
    }
    let z = gaussian::<f32, _>(mean.shape(), rng);
    let sd = var.sqrt() as f32;
    mean.zip_map(&z, |m, e| m + sd * e)
}

/// Ancestral sampling from `x_init` at step `T` down to step 0.
pub fn sample_markov<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    x_init: &Tensor<f32>,
    c: &Tensor<f32>,
    s_hat: &Tensor<f32>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let mut x = x_init.clone();
    for t in (1..=schedule.steps()).rev() {
        let x0_hat = rm_predict(model, &x, c, s_hat, t)?;
        x = markov_step(&x, &x0_hat, t, schedule, rng)?;
    }
    Ok(clamp_model(x))
}

/// `x_{tau[s+1]} = f(x_{tau[s]}, c, s_hat, tau[s])`: the denoiser output
/// becomes the next state directly, without re-noising.
pub fn sample_non_markov(
    model: &dyn Denoiser,
    x_init: &Tensor<f32>,
    c: &Tensor<f32>,
    s_hat: &Tensor<f32>,
    tau: &[usize],
) -> Result<Tensor<f32>> {
    check_tau(tau, None)?;
    let mut x = x_init.clone();
    for &t in &tau[..tau.len() - 1] {
        x = rm_predict(model, &x, c, s_hat, t)?;
    }
    Ok(clamp_model(x))
}

/// Deterministic DDIM (eta = 0) over the same subsequence; the last call
/// returns the clean estimate.
pub fn sample_ddim(
    model: &dyn Denoiser,
    x_init: &Tensor<f32>,
    c: &Tensor<f32>,
    s_hat: &Tensor<f32>,
    tau: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    check_tau(tau, Some(schedule))?;
    let mut x = x_init.clone();
    let calls = tau.len() - 1;
    for (i, &t) in tau[..calls].iter().enumerate() {
        let x0_hat = clamp_model(rm_predict(model, &x, c, s_hat, t)?);
        if i + 1 == calls {
            x = x0_hat;
            break;
        }
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(tau[i + 1]);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt().max(1e-12));
        x = x.zip_map(&x0_hat, |xt, x0| {
            let eps = (xt as f64 - sa * x0 as f64) / sb;
            (ab_prev.sqrt() * x0 as f64 + (1.0 - ab_prev).sqrt() * eps) as f32
        })?;
    }
    Ok(clamp_model(x))
}

/// Draws the initial noise from `cfg.seed` and runs the configured sampler.
pub fn sample(
    cfg: &SamplerConfig,
    model: &dyn Denoiser,
    c: &Tensor<f32>,
    s_hat: &Tensor<f32>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let x_init = gaussian::<f32, _>(c.shape(), &mut rng);
    match cfg.mode {
        SamplerKind::Markov => sample_markov(model, &x_init, c, s_hat, schedule, &mut rng),
        SamplerKind::NonMarkov => sample_non_markov(model, &x_init, c, s_hat, &tau_schedule(schedule.steps(), cfg.steps)?),
        SamplerKind::Ddim => sample_ddim(model, &x_init, c, s_hat, &tau_schedule(schedule.steps(), cfg.steps)?, schedule),
    }
}
