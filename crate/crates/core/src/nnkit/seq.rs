use rand::Rng;

use super::layers::{Cache, Layer, LayerSpec, Mode};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Chain of single-input layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Seq {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub struct SeqCache<S>(Vec<Cache<S>>);

impl Seq {
    pub fn new() -> Self {
        Seq { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, spec: LayerSpec) -> Result<&mut Self> {
        self.layers.push(Layer::new(name, spec)?);
        Ok(self)
    }

    pub fn init_params<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init_params(store, rng))
    }

    pub fn forward<S: Scalar>(&self, params: &ParamStore<S>, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, SeqCache<S>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur: Option<Tensor<S>> = None;
        for layer in &self.layers {
            let input = cur.as_ref().unwrap_or(x);
            let (y, c) = layer.forward(params, &[input], mode)?;
            caches.push(c);
            cur = Some(y);
        }
        Ok((cur.unwrap_or_else(|| x.clone()), SeqCache(caches)))
    }

    pub fn backward<S: Scalar>(&self, params: &mut ParamStore<S>, cache: &SeqCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = grad_out.clone();
        for (layer, c) in self.layers.iter().zip(&cache.0).rev() {
            g = layer.backward(params, c, &g)?.swap_remove(0);
        }
        Ok(g)
    }

    pub fn update_running_stats<S: Scalar>(&self, params: &mut ParamStore<S>, cache: &SeqCache<S>) -> Result<()> {
        for (layer, c) in self.layers.iter().zip(&cache.0) {
            layer.update_running_stats(params, c)?;
        }
        Ok(())
    }
}
