use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nnkit::{Conv2dSpec, LayerSpec, Mode, ParamStore, Seq, SeqCache, Tensor};
use crate::scalar::Scalar;

pub const DEFAULT_FEATURE_CHANNELS: usize = 8;

/// Perceptual feature map used by the character and style losses.
#[derive(Debug, Clone)]
pub enum FeatureExtractor<S> {
    /// `phi(x) = x`.
    Identity,
    /// Three frozen convolutions with seeded random weights.
    Frozen { seq: Seq, params: ParamStore<S>, seed: u64 },
}

pub(crate) enum FeatureCache<S> {
    Identity,
    Frozen(SeqCache<S>),
}

impl<S: Scalar> FeatureExtractor<S> {
    /// Conv 3x3 (1 -> F), Swish, stride-2 conv (F -> F), Swish, conv 3x3 (F -> F).
    pub fn seeded(seed: u64, channels: usize) -> Result<Self> {
        let mut seq = Seq::new();
        seq.push("phi.c1", LayerSpec::Conv2d(Conv2dSpec::same(1, channels, 3)))?
            .push("phi.a1", LayerSpec::Swish)?
            .push("phi.c2", LayerSpec::Conv2d(Conv2dSpec::down(channels, channels)))?
            .push("phi.a2", LayerSpec::Swish)?
            .push("phi.c3", LayerSpec::Conv2d(Conv2dSpec::same(channels, channels, 3)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fp = ParamStore::<f64>::new();
        seq.init_params(&mut fp, &mut rng)?;
        // frozen random biases make the features sensitive to absolute level
        for (name, e) in fp.iter_mut() {
            if name.ends_with(".bias") {
                let t = Tensor::<f64>::randn([1, 1, 1, e.len()], 0.1, &mut rng);
                e.value.copy_from_slice(t.data());
            }
        }
        let mut params = fp.cast::<S>();
        params.iter_mut().for_each(|(_, e)| e.trainable = false);
        Ok(FeatureExtractor::Frozen { seq, params, seed })
    }

    pub fn features(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.forward(x)?.0)
    }

    pub(crate) fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, FeatureCache<S>)> {
        match self {
            FeatureExtractor::Identity => Ok((x.clone(), FeatureCache::Identity)),
            FeatureExtractor::Frozen { seq, params, .. } => {
                let (y, c) = seq.forward(params, x, Mode::Eval)?;
                Ok((y, FeatureCache::Frozen(c)))
            }
        }
    }

    /// Gradient with respect to the extractor input; its own weights stay untouched.
    pub(crate) fn backward(&self, cache: &FeatureCache<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
        match (self, cache) {
            (FeatureExtractor::Frozen { seq, params, .. }, FeatureCache::Frozen(c)) => {
                let mut scratch = params.clone();
                seq.backward(&mut scratch, c, grad)
            }
            _ => Ok(grad.clone()),
        }
    }
}
