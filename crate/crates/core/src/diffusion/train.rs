use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::denoiser::{PredictionTarget, RmModel};
use super::rm::rm_input;
use super::schedule::{forward_noise_batch, gaussian, loss_rm, loss_rm_grad, x0_from_eps, NoiseSchedule};
use crate::datagen::DatasetRecord;
use crate::error::{Error, Result};
use crate::imgcore::SegMap;
use crate::nnkit::{AdamConfig, Mode, Tensor};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target: PredictionTarget,
    pub train_seed: u64,
    pub max_steps: Option<usize>,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        RmTrainConfig {
            epochs: 400,
            batch_size: 2,
            lr: 1e-3,
            target: PredictionTarget::X0,
            train_seed: 0,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RmTrainReport {
    /// Mean training objective per epoch (MSE against the chosen target).
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub seconds: f64,
}

/// Model-range intact images, model-range corrupted images and the paired
/// segmentation maps of a batch.
pub fn rm_batch(records: &[&DatasetRecord], segs: &[&SegMap<f32>]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let to3 = |img: &crate::imgcore::ImageTensor<f32>| img.with_channels(3)?.to_model_range();
    let x0: Vec<_> = records.iter().map(|r| to3(&r.intact_image)).collect::<Result<_>>()?;
    let c: Vec<_> = records.iter().map(|r| to3(&r.corrupted_image)).collect::<Result<_>>()?;
    Ok((
        Tensor::from_images(&x0.iter().collect::<Vec<_>>())?,
        Tensor::from_images(&c.iter().collect::<Vec<_>>())?,
        Tensor::from_segmaps(segs)?,
    ))
}

fn check_inputs(records: &[&DatasetRecord], segs: &[SegMap<f32>]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidParam("reconstruction training needs at least one record".into()));
    }
    if records.len() != segs.len() {
        return Err(Error::shape("segmentation maps per record", records.len(), segs.len()));
    }
    Ok(())
}

/// Minibatch Adam on `||target - f(x_t, c, s, t)||^2` with `t ~ U[1, T]`.
/// `segs[i]` conditions `records[i]` (ground truth, predicted, or blank).
pub fn train_rm(
    model: &mut RmModel<f32>,
    records: &[&DatasetRecord],
    segs: &[SegMap<f32>],
    schedule: &NoiseSchedule,
    cfg: &RmTrainConfig,
) -> Result<RmTrainReport> {
    check_inputs(records, segs)?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParam("batch_size must be >= 1".into()));
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train_seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let start = Instant::now();
    let mut report = RmTrainReport {
        epoch_losses: Vec::new(),
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
        steps: 0,
        seconds: 0.0,
    };
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut acc, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break 'outer;
            }
            let recs: Vec<&DatasetRecord> = chunk.iter().map(|&i| records[i]).collect();
            let seg_refs: Vec<&SegMap<f32>> = chunk.iter().map(|&i| &segs[i]).collect();
            let (x0, c, s) = rm_batch(&recs, &seg_refs)?;
            let ts: Vec<usize> = (0..chunk.len()).map(|_| rng.random_range(1..=schedule.steps())).collect();
            let eps = gaussian::<f32, _>(x0.shape(), &mut rng);
            let x_t = forward_noise_batch(&x0, &ts, &eps, schedule)?;
            let input = rm_input(&x_t, &c, &s)?;
            let (out, cache) = model.net.forward(&model.params, &input, &ts, Mode::Train)?;
            let target = match cfg.target {
                PredictionTarget::X0 => &x0,
                PredictionTarget::Eps => &eps,
            };
            let (loss, grad) = loss_rm_grad(target, &out)?;
            let loss = loss as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: report.steps,
                    detail: format!("reconstruction loss is {loss} at epoch {epoch}"),
                });
            }
            model.net.backward(&mut model.params, &cache, &grad)?;
            adam.step(&mut model.params);
            if report.steps == 0 {
                report.initial_loss = loss;
            }
            report.steps += 1;
            acc += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            break;
        }
        let mean = acc / seen as f64;
        log::info!("rm epoch {epoch}: loss {mean:.5} ({} steps)", report.steps);
        report.final_loss = mean;
        report.epoch_losses.push(mean);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Mean `loss_rm(x0, x0_hat)` in clean-image space at seeded random steps;
/// noise-predicting models are inverted (and clipped) first.
pub fn evaluate_rm_loss(
    model: &RmModel<f32>,
    target: PredictionTarget,
    records: &[&DatasetRecord],
    segs: &[SegMap<f32>],
    schedule: &NoiseSchedule,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    check_inputs(records, segs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut acc, mut n) = (0.0, 0usize);
    let idx: Vec<usize> = (0..records.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let recs: Vec<&DatasetRecord> = chunk.iter().map(|&i| records[i]).collect();
        let seg_refs: Vec<&SegMap<f32>> = chunk.iter().map(|&i| &segs[i]).collect();
        let (x0, c, s) = rm_batch(&recs, &seg_refs)?;
        let ts: Vec<usize> = (0..chunk.len()).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let eps = gaussian::<f32, _>(x0.shape(), &mut rng);
        let x_t = forward_noise_batch(&x0, &ts, &eps, schedule)?;
        let out = model.raw(&x_t, &c, &s, &ts)?;
        for (i, &t) in ts.iter().enumerate() {
            let pred = out.slice_item(i);
            let x0_hat = match target {
                PredictionTarget::X0 => pred,
                PredictionTarget::Eps => x0_from_eps(&x_t.slice_item(i), &pred, t, schedule)?.map(|v| v.clamp(-1.0, 1.0)),
            };
            acc += loss_rm(&x0.slice_item(i), &x0_hat)? as f64;
            n += 1;
        }
    }
    Ok(acc / n as f64)
}
