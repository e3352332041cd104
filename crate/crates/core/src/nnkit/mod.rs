//! Minimal layer kit: NCHW tensors, forward and hand-written backward passes,
//! Adam, gradient checking and checkpoints.

mod adam;
mod checkpoint;
mod conv;
mod gradcheck;
mod layers;
mod params;
mod seq;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{load_checkpoint, load_into, save_checkpoint, CHECKPOINT_VERSION};
pub use conv::Conv2dSpec;
pub use gradcheck::{
    finite_diff_gradcheck, randomize_params, relative_error, GradcheckReport, LayerObjective, Objective, SeqObjective,
};
pub use layers::{Cache, Layer, LayerSpec, Mode, BN_MOMENTUM, NORM_EPS};
pub use params::{ParamEntry, ParamStore};
pub use seq::{Seq, SeqCache};
pub use tensor::Tensor;

/// GroupNorm group count used throughout: the largest divisor of `channels`
/// not above 8 that keeps at least two channels per group.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8)
        .rev()
        .find(|&g| channels % g == 0 && channels / g >= 2)
        .unwrap_or(1)
}
