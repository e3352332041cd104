use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::features::FeatureExtractor;
use super::losses::{spm_objective, LossWeights, SegLossKind, SpmLossTerms};
use super::model::SpmModel;
use crate::datagen::DatasetRecord;
use crate::error::{Error, Result};
use crate::nnkit::{AdamConfig, Mode, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub seg_loss: SegLossKind,
    pub train_seed: u64,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
}

impl Default for SpmTrainConfig {
    fn default() -> Self {
        SpmTrainConfig {
            epochs: 50,
            batch_size: 32,
            lr: 1e-4,
            weights: LossWeights::default(),
            seg_loss: SegLossKind::Weighted,
            train_seed: 0,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub mean: SpmLossTerms,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpmTrainReport {
    pub epochs: Vec<EpochStats>,
    /// Loss of the very first minibatch, before any update.
    pub initial_loss: f64,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
    pub steps: usize,
    pub seconds: f64,
}

/// Model-range corrupted images and intact ink maps of a batch.
pub fn spm_batch<S: Scalar>(records: &[&DatasetRecord]) -> Result<(Tensor<S>, Tensor<S>)> {
    let inputs = records
        .iter()
        .map(|r| r.corrupted_image.to_model_range())
        .collect::<Result<Vec<_>>>()?;
    let x = Tensor::from_images(&inputs.iter().collect::<Vec<_>>())?;
    let s = Tensor::from_segmaps(&records.iter().map(|r| &r.intact_segmask).collect::<Vec<_>>())?;
    Ok((x, s))
}

fn add_terms(acc: &mut SpmLossTerms, t: &SpmLossTerms, k: f64) {
    acc.pix += k * t.pix;
    acc.seg += k * t.seg;
    acc.cha += k * t.cha;
    acc.sty += k * t.sty;
    acc.total += k * t.total;
}

/// Minibatch Adam on the weighted structure objective.
pub fn train_spm<S: Scalar>(
    model: &mut SpmModel<S>,
    records: &[&DatasetRecord],
    phi: &FeatureExtractor<S>,
    cfg: &SpmTrainConfig,
) -> Result<SpmTrainReport> {
    if records.is_empty() {
        return Err(Error::InvalidParam("structure training needs at least one record".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParam("batch_size must be >= 1".into()));
    }
    cfg.weights.validate()?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train_seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let start = Instant::now();
    let mut report = SpmTrainReport {
        epochs: Vec::new(),
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
        steps: 0,
        seconds: 0.0,
    };
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut mean = SpmLossTerms::default();
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break 'outer;
            }
            let batch: Vec<&DatasetRecord> = chunk.iter().map(|&i| records[i]).collect();
            let (x, s) = spm_batch::<S>(&batch)?;
            let (y, cache) = model.net.forward(&model.params, &x, Mode::Train)?;
            let (terms, grad) = spm_objective(&s, &y, phi, &cfg.weights, cfg.seg_loss)?;
            if !terms.total.is_finite() {
                return Err(Error::Divergence {
                    step: report.steps,
                    detail: format!("structure loss is {} ({terms:?})", terms.total),
                });
            }
            model.net.backward(&mut model.params, &cache, &grad)?;
            model.net.update_running_stats(&mut model.params, &cache)?;
            adam.step(&mut model.params);
            if report.steps == 0 {
                report.initial_loss = terms.total;
            }
            report.steps += 1;
            add_terms(&mut mean, &terms, batch.len() as f64);
            seen += batch.len();
        }
        if seen == 0 {
            break;
        }
        let k = 1.0 / seen as f64;
        let mut m = SpmLossTerms::default();
        add_terms(&mut m, &mean, k);
        log::info!(
            "spm epoch {epoch}: loss {:.4} (pix {:.4} seg {:.4} cha {:.4} sty {:.4})",
            m.total, m.pix, m.seg, m.cha, m.sty
        );
        report.final_loss = m.total;
        report.epochs.push(EpochStats {
            epoch,
            steps: report.steps,
            mean: m,
        });
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Mean loss terms over `records` in inference mode.
pub fn evaluate_spm<S: Scalar>(
    model: &SpmModel<S>,
    records: &[&DatasetRecord],
    phi: &FeatureExtractor<S>,
    weights: &LossWeights,
    batch_size: usize,
) -> Result<SpmLossTerms> {
    let mut acc = SpmLossTerms::default();
    for chunk in records.chunks(batch_size.max(1)) {
        let (x, s) = spm_batch::<S>(chunk)?;
        let y = model.predict_tensor(&x)?;
        let (t, _) = spm_objective(&s, &y, phi, weights, SegLossKind::Weighted)?;
        add_terms(&mut acc, &t, chunk.len() as f64);
    }
    let mut m = SpmLossTerms::default();
    add_terms(&mut m, &acc, 1.0 / records.len().max(1) as f64);
    Ok(m)
}
