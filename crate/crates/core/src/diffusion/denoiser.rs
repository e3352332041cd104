use super::rm::{rm_input, RmArch, RmNet};
use super::schedule::{x0_from_eps, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nnkit::{Mode, ParamStore, Tensor};
use crate::scalar::Scalar;

/// What the reconstruction network is trained to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionTarget {
    /// The clean image.
    #[default]
    X0,
    /// The added noise.
    Eps,
}

/// Clean-image estimate from a noisy state and its conditions. All tensors
/// are batched; `x_t` and `c` are 3-channel model range, `s_hat` 1-channel.
pub trait Denoiser: Sync {
    fn predict(&self, x_t: &Tensor<f32>, c: &Tensor<f32>, s_hat: &Tensor<f32>, t: usize) -> Result<Tensor<f32>>;
}

#[derive(Debug, Clone)]
pub struct RmModel<S = f32> {
    pub net: RmNet,
    pub params: ParamStore<S>,
}

impl<S: Scalar> RmModel<S> {
    pub fn new(arch: RmArch, seed: u64) -> Result<Self> {
        let net = RmNet::new(arch)?;
        let mut params = ParamStore::new();
        net.init_params(&mut params, seed)?;
        Ok(RmModel { net, params })
    }

    /// Raw network output for the stacked conditions.
    pub fn raw(&self, x_t: &Tensor<S>, c: &Tensor<S>, s_hat: &Tensor<S>, ts: &[usize]) -> Result<Tensor<S>> {
        let x = rm_input(x_t, c, s_hat)?;
        Ok(self.net.forward(&self.params, &x, ts, Mode::Eval)?.0)
    }
}

/// Network trained for clean-image prediction.
#[derive(Debug, Clone)]
pub struct TrainedRm {
    pub model: RmModel<f32>,
}

impl Denoiser for TrainedRm {
    fn predict(&self, x_t: &Tensor<f32>, c: &Tensor<f32>, s_hat: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        self.model.raw(x_t, c, s_hat, &vec![t; x_t.n()])
    }
}

/// Network trained for noise prediction; converts to a clean-image
/// estimate, clipped to the model range.
#[derive(Debug, Clone)]
pub struct NoisePredictingRm {
    pub model: RmModel<f32>,
    pub schedule: NoiseSchedule,
}

impl Denoiser for NoisePredictingRm {
    fn predict(&self, x_t: &Tensor<f32>, c: &Tensor<f32>, s_hat: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        if t == 0 {
            return Ok(x_t.clone());
        }
        let eps = self.model.raw(x_t, c, s_hat, &vec![t; x_t.n()])?;
        Ok(x0_from_eps(x_t, &eps, t, &self.schedule)?.map(|v| v.clamp(-1.0, 1.0)))
    }
}

/// Returns the stored ground truth whatever it is asked.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub x0: Tensor<f32>,
}

impl Denoiser for OracleDenoiser {
    fn predict(&self, x_t: &Tensor<f32>, c: &Tensor<f32>, s_hat: &Tensor<f32>, _t: usize) -> Result<Tensor<f32>> {
        rm_input(x_t, c, s_hat)?;
        if x_t.shape() != self.x0.shape() {
            return Err(Error::shape("oracle denoiser", format!("{:?}", self.x0.shape()), format!("{:?}", x_t.shape())));
        }
        Ok(self.x0.clone())
    }
}

/// Public single-call form: `x0_hat = f(x_t, c, s_hat, t)`.
pub fn rm_predict(model: &dyn Denoiser, x_t: &Tensor<f32>, c: &Tensor<f32>, s_hat: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
    let out = model.predict(x_t, c, s_hat, t)?;
    out.expect_shape(x_t.shape(), "denoiser output")?;
    Ok(out)
}
