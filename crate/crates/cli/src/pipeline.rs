//! Structure prediction followed by diffusion reconstruction, one record at
//! a time so results never depend on batching or worker count.

use inpaint_core::datagen::{mix_seed, DatasetRecord};
use inpaint_core::diffusion::{
    gaussian, sample_ddim, sample_markov, sample_non_markov, tau_schedule, Denoiser, NoiseSchedule, SamplerConfig,
    SamplerKind,
};
use inpaint_core::imgcore::{ImageTensor, SegMap, ValueRange};
use inpaint_core::nnkit::Tensor;
use inpaint_core::spm::SpmModel;
use inpaint_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Noise seed of one record: depends only on the run seed and the record id.
pub fn record_seed(sample_seed: u64, id: &str) -> u64 {
    let h = id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    mix_seed(sample_seed, h)
}

/// Eval-mode ink maps for a set of corrupted unit-range images.
pub fn predict_segmaps(spm: &SpmModel<f32>, images: &[&ImageTensor<f32>], batch: usize) -> Result<Vec<SegMap<f32>>> {
    let chunks: Vec<&[&ImageTensor<f32>]> = images.chunks(batch.max(1)).collect();
    let per_chunk: Vec<Vec<SegMap<f32>>> = chunks
        .par_iter()
        .map(|chunk| {
            let model: Vec<ImageTensor<f32>> = chunk.iter().map(|c| c.to_model_range()).collect::<Result<_>>()?;
            let x = Tensor::from_images(&model.iter().collect::<Vec<_>>())?;
            let y = spm.predict_tensor(&x)?;
            (0..chunk.len()).map(|i| y.to_segmap(i)).collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Restores one corrupted unit-range image; the result has the input's
/// channel count and unit range.
pub fn inpaint_image(
    model: &dyn Denoiser,
    c: &ImageTensor<f32>,
    seg: &SegMap<f32>,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<ImageTensor<f32>> {
    let c3 = c.with_channels(3)?.to_model_range()?;
    let ct = Tensor::from_images(&[&c3])?;
    let st = Tensor::from_segmaps(&[seg])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_init = gaussian::<f32, _>(ct.shape(), &mut rng);
    let out = match sampler.mode {
        SamplerKind::Markov => sample_markov(model, &x_init, &ct, &st, schedule, &mut rng)?,
        SamplerKind::NonMarkov => sample_non_markov(model, &x_init, &ct, &st, &tau_schedule(schedule.steps(), sampler.steps)?)?,
        SamplerKind::Ddim => sample_ddim(model, &x_init, &ct, &st, &tau_schedule(schedule.steps(), sampler.steps)?, schedule)?,
    };
    out.to_image(0, ValueRange::Model)?.to_unit_range()?.with_channels(c.channels())
}

/// Restores every record's corrupted image with its own seeded noise.
pub fn inpaint_records(
    model: &dyn Denoiser,
    records: &[&DatasetRecord],
    segs: &[SegMap<f32>],
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<ImageTensor<f32>>> {
    records
        .par_iter()
        .zip(segs.par_iter())
        .map(|(r, s)| inpaint_image(model, &r.corrupted_image, s, sampler, schedule, record_seed(sampler.seed, &r.id)))
        .collect()
}
