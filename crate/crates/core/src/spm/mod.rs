//! Structure prediction: a compact dilated-conv U-Net that maps a corrupted
//! text image to the intact ink map, and its four-part objective.

mod features;
mod losses;
mod model;
mod train;

pub use features::{FeatureExtractor, DEFAULT_FEATURE_CHANNELS};
pub use losses::{
    gram, loss_cha, loss_pix, loss_seg, loss_seg_with, loss_spm, loss_sty, pix_term, seg_term, spm_objective,
    LossWeights, SegLossKind, SpmLossTerms, SEG_CLAMP,
};
pub use model::{spm_predict, NormKind, SpmArch, SpmCache, SpmModel, SpmNet, MIN_BATCHNORM_BATCH};
pub use train::{evaluate_spm, spm_batch, train_spm, EpochStats, SpmTrainConfig, SpmTrainReport};
