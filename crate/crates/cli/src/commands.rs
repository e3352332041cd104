//! Subcommand bodies. Each returns an error exactly when one of its
//! postconditions failed; `main` maps that to a nonzero exit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use inpaint_core::corrosion::{CorrosionForm, CorrosionSpec};
use inpaint_core::datagen::{
    build_record, generate_dataset, mix_seed, read_manifest, test_ids, threshold_segmentation, write_manifest,
    DatasetRecord, Split,
};
use inpaint_core::diffusion::{
    evaluate_rm_loss, train_rm, Denoiser, NoisePredictingRm, OracleDenoiser, PredictionTarget, RmArch, RmModel,
    TrainedRm,
};
use inpaint_core::eval::{evaluate, evaluate_corrupted, EvalReport, ExternalTranscriptFile, Recognizer, ToyTemplateRecognizer};
use inpaint_core::imgcore::{read_png, write_png, write_seg_png, ImageTensor, SegMap};
use inpaint_core::nnkit::{load_into, save_checkpoint, Tensor};
use inpaint_core::spm::{train_spm, FeatureExtractor, SpmArch, SpmModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{DenoiserKind, RunConfig, SegSource, SplitChoice};
use crate::gradsuite::{run_gradient_suite, SuiteOptions, SuiteReport};
use crate::pipeline::{inpaint_image, predict_segmaps, record_seed};

pub const SPM_CHECKPOINT: &str = "spm.ckpt";
pub const RM_CHECKPOINT: &str = "rm.ckpt";
pub const SPM_META: &str = "spm.json";
pub const RM_META: &str = "rm.json";
pub const SPM_CURVE: &str = "spm_loss.csv";
pub const RM_CURVE: &str = "rm_loss.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_TABLE: &str = "eval.txt";
/// Suffix of the predicted ink map written next to each restored image.
pub const SEG_SUFFIX: &str = "_seg.png";

const SEG_BATCH: usize = 16;

fn load_dataset(dir: &Path) -> Result<Vec<DatasetRecord>> {
    ensure!(
        dir.join(inpaint_core::datagen::MANIFEST_FILE).is_file(),
        "no dataset at {} (missing {})",
        dir.display(),
        inpaint_core::datagen::MANIFEST_FILE
    );
    read_manifest(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn select(records: &[DatasetRecord], split: SplitChoice) -> Vec<&DatasetRecord> {
    records
        .iter()
        .filter(|r| match split {
            SplitChoice::All => true,
            SplitChoice::Train => r.split == Split::Train,
            SplitChoice::Test => r.split == Split::Test,
        })
        .collect()
}

fn train_records(records: &[DatasetRecord]) -> Result<Vec<&DatasetRecord>> {
    let train = select(records, SplitChoice::Train);
    ensure!(!train.is_empty(), "dataset has no training records");
    Ok(train)
}

/// Ratio histogram in 0.05-wide bins, empty bins omitted.
pub fn ratio_histogram(records: &[DatasetRecord]) -> BTreeMap<usize, usize> {
    let mut bins = BTreeMap::new();
    for r in records {
        *bins.entry(((r.corrosion_ratio / 0.05) as usize).min(19)).or_insert(0) += 1;
    }
    bins
}

fn print_dataset_summary(records: &[DatasetRecord], dir: &Path) {
    let test = records.iter().filter(|r| r.split == Split::Test).count();
    println!("wrote {} records to {} ({} train, {test} test)", records.len(), dir.display(), records.len() - test);
    for form in CorrosionForm::ALL {
        let n = records.iter().filter(|r| r.corrosion_form == form).count();
        println!("  {form:?}: {n}");
    }
    println!("corrosion ratio histogram:");
    for (bin, n) in ratio_histogram(records) {
        println!("  [{:.2}, {:.2}): {n}", bin as f64 * 0.05, (bin + 1) as f64 * 0.05);
    }
}

pub fn synth(cfg: &RunConfig) -> Result<Vec<DatasetRecord>> {
    let records = generate_dataset(&cfg.dataset_config()).context("generating dataset")?;
    write_manifest(&records, &cfg.dataset_dir).context("writing dataset")?;
    print_dataset_summary(&records, &cfg.dataset_dir);
    Ok(records)
}

fn fnv(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Reads `id<TAB>label` lines; absent files give no labels.
fn read_labels(path: &Path) -> Result<BTreeMap<String, String>> {
    if !path.is_file() {
        return Ok(BTreeMap::new());
    }
    let t = ExternalTranscriptFile::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(t.into_map().into_iter().collect())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Corrodes external intact images; ink maps come from the gray threshold
/// `theta`, labels from an optional `labels.tsv` beside the images.
pub fn corrupt(cfg: &RunConfig, input: &Path) -> Result<Vec<DatasetRecord>> {
    let labels = read_labels(&input.join("labels.tsv"))?;
    let files = png_files(input)?;
    let dcfg = cfg.dataset_config();
    let mut records = files
        .par_iter()
        .map(|path| -> Result<DatasetRecord> {
            let id = stem(path);
            let img = read_png(path).with_context(|| format!("reading {}", path.display()))?;
            let seg = threshold_segmentation(&img, cfg.theta as f32, cfg.ink_polarity)?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.data_seed, fnv(&id)));
            let total: f64 = dcfg.form_mix.iter().sum();
            ensure!(total > 0.0 && dcfg.form_mix.iter().all(|&w| w >= 0.0), "form_mix must be non-negative with a positive sum");
            let mut u = rng.random_range(0.0..total);
            let mut form = CorrosionForm::QuickDraw;
            for (f, &w) in CorrosionForm::ALL.iter().zip(&dcfg.form_mix) {
                if u < w {
                    form = *f;
                    break;
                }
                u -= w;
            }
            let cspec = CorrosionSpec::new(form, cfg.ratio_lo, cfg.ratio_hi, cfg.style.fill(), rng.random())?;
            let label = labels.get(&id).cloned().unwrap_or_default();
            Ok(build_record(id, img, seg, label, &cspec, &mut cspec.rng())?)
        })
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let test = test_ids(&ids, cfg.test_fraction, cfg.split_seed);
    for r in &mut records {
        r.split = if test.contains(&r.id) { Split::Test } else { Split::Train };
    }
    write_manifest(&records, &cfg.dataset_dir).context("writing dataset")?;
    print_dataset_summary(&records, &cfg.dataset_dir);
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpmMeta {
    pub arch: SpmArch,
    pub feature_channels: usize,
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RmMeta {
    pub arch: RmArch,
    pub target: PredictionTarget,
    pub schedule_steps: usize,
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub held_out_loss: Option<f64>,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Appends `epoch,steps,loss` rows; a fresh run rewrites the header.
fn write_curve(path: &Path, resume: bool, first_epoch: usize, rows: &[(usize, f64)]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(path)
        .with_context(|| format!("writing {}", path.display()))?;
    if !resume {
        writeln!(f, "epoch,steps,loss")?;
    }
    for (i, (steps, loss)) in rows.iter().enumerate() {
        writeln!(f, "{},{steps},{loss}", first_epoch + i)?;
    }
    Ok(())
}

/// Reads a loss curve written by the training commands.
pub fn read_curve(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ensure!(f.len() == 3, "bad loss-curve row {l:?}");
            Ok((f[0].parse()?, f[1].parse()?, f[2].parse()?))
        })
        .collect()
}

pub fn load_spm(run_dir: &Path) -> Result<(SpmModel<f32>, SpmMeta)> {
    let meta: SpmMeta = read_json(&run_dir.join(SPM_META))?;
    let mut model = SpmModel::<f32>::new(meta.arch, 0)?;
    load_into(&mut model.params, &run_dir.join(SPM_CHECKPOINT)).context("loading structure checkpoint")?;
    Ok((model, meta))
}

pub fn load_rm(run_dir: &Path) -> Result<(RmModel<f32>, RmMeta)> {
    let meta: RmMeta = read_json(&run_dir.join(RM_META))?;
    let mut model = RmModel::<f32>::new(meta.arch.clone(), 0)?;
    load_into(&mut model.params, &run_dir.join(RM_CHECKPOINT)).context("loading reconstruction checkpoint")?;
    Ok((model, meta))
}

/// Seed of a resumed run, so that it does not replay the first run's shuffles.
fn continuation_seed(train_seed: u64, steps: usize) -> u64 {
    if steps == 0 {
        train_seed
    } else {
        mix_seed(train_seed, steps as u64)
    }
}

pub fn train_spm_cmd(cfg: &RunConfig, resume: bool) -> Result<PathBuf> {
    let records = load_dataset(&cfg.dataset_dir)?;
    let train = train_records(&records)?;
    fs::create_dir_all(&cfg.run_dir)?;
    let channels = train[0].corrupted_image.channels();
    let (mut model, prior) = if resume {
        let (m, meta) = load_spm(&cfg.run_dir)?;
        ensure!(m.net.arch.in_channels == channels, "checkpoint expects {} channels, dataset has {channels}", m.net.arch.in_channels);
        (m, Some(meta))
    } else {
        (SpmModel::<f32>::new(SpmArch::desk(channels, cfg.spm_norm_kind()), cfg.train_seed)?, None)
    };
    let feature_channels = prior.as_ref().map_or(cfg.feature_channels, |m| m.feature_channels);
    let phi = FeatureExtractor::<f32>::seeded(mix_seed(cfg.train_seed, 0x5eed), feature_channels)?;
    let (done_steps, done_epochs) = prior.as_ref().map_or((0, 0), |m| (m.steps, m.epochs));
    let mut tcfg = cfg.spm_train_config();
    tcfg.train_seed = continuation_seed(cfg.train_seed, done_steps);
    let report = train_spm(&mut model, &train, &phi, &tcfg).context("structure training failed")?;
    let ckpt = cfg.run_dir.join(SPM_CHECKPOINT);
    save_checkpoint(&model.params, &ckpt, true)?;
    let rows: Vec<(usize, f64)> = report.epochs.iter().map(|e| (done_steps + e.steps, e.mean.total)).collect();
    write_curve(&cfg.run_dir.join(SPM_CURVE), resume, done_epochs, &rows)?;
    write_json(
        &cfg.run_dir.join(SPM_META),
        &SpmMeta {
            arch: model.net.arch,
            feature_channels,
            steps: done_steps + report.steps,
            epochs: done_epochs + report.epochs.len(),
            final_loss: report.final_loss,
        },
    )?;
    println!(
        "structure module: {} steps in {:.1}s, loss {:.4} -> {:.4}; checkpoint {}",
        report.steps,
        report.seconds,
        report.initial_loss,
        report.final_loss,
        ckpt.display()
    );
    Ok(ckpt)
}

/// Conditioning maps for `records` from the configured source.
fn segs_for(records: &[&DatasetRecord], source: SegSource, run_dir: &Path) -> Result<Vec<SegMap<f32>>> {
    Ok(match source {
        SegSource::Gt => records.iter().map(|r| r.intact_segmask.clone()).collect(),
        SegSource::None => records
            .iter()
            .map(|r| SegMap::zeros(r.intact_segmask.height(), r.intact_segmask.width()))
            .collect(),
        SegSource::Spm => {
            let (spm, _) = load_spm(run_dir).context("ink maps from the structure module need its checkpoint")?;
            let imgs: Vec<&ImageTensor<f32>> = records.iter().map(|r| &r.corrupted_image).collect();
            predict_segmaps(&spm, &imgs, SEG_BATCH)?
        }
    })
}

pub fn train_rm_cmd(cfg: &RunConfig, resume: bool) -> Result<PathBuf> {
    let records = load_dataset(&cfg.dataset_dir)?;
    let train = train_records(&records)?;
    fs::create_dir_all(&cfg.run_dir)?;
    let schedule = cfg.schedule()?;
    let (mut model, prior) = if resume {
        let (m, meta) = load_rm(&cfg.run_dir)?;
        ensure!(meta.target == cfg.rm_target, "checkpoint was trained for {:?}, config asks for {:?}", meta.target, cfg.rm_target);
        ensure!(meta.schedule_steps == schedule.steps(), "checkpoint used {} steps, config has {}", meta.schedule_steps, schedule.steps());
        (m, Some(meta))
    } else {
        (RmModel::<f32>::new(RmArch::desk(), cfg.train_seed)?, None)
    };
    let segs = segs_for(&train, cfg.rm_seg_source, &cfg.run_dir)?;
    let (done_steps, done_epochs) = prior.as_ref().map_or((0, 0), |m| (m.steps, m.epochs));
    let mut tcfg = cfg.rm_train_config();
    tcfg.train_seed = continuation_seed(cfg.train_seed, done_steps);
    let report = train_rm(&mut model, &train, &segs, &schedule, &tcfg).context("reconstruction training failed")?;

    let test = select(&records, SplitChoice::Test);
    let held_out_loss = if test.is_empty() {
        None
    } else {
        let segs = segs_for(&test, cfg.rm_seg_source, &cfg.run_dir)?;
        Some(evaluate_rm_loss(&model, cfg.rm_target, &test, &segs, &schedule, cfg.sample_seed, SEG_BATCH)?)
    };
    let ckpt = cfg.run_dir.join(RM_CHECKPOINT);
    save_checkpoint(&model.params, &ckpt, true)?;
    // epoch_losses[i] ends after ceil(n / batch) steps per epoch
    let per_epoch = train.len().div_ceil(cfg.rm_batch.max(1));
    let rows: Vec<(usize, f64)> = report
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(i, &l)| (done_steps + ((i + 1) * per_epoch).min(report.steps), l))
        .collect();
    write_curve(&cfg.run_dir.join(RM_CURVE), resume, done_epochs, &rows)?;
    write_json(
        &cfg.run_dir.join(RM_META),
        &RmMeta {
            arch: model.net.arch.clone(),
            target: cfg.rm_target,
            schedule_steps: schedule.steps(),
            steps: done_steps + report.steps,
            epochs: done_epochs + report.epoch_losses.len(),
            final_loss: report.final_loss,
            held_out_loss,
        },
    )?;
    println!(
        "reconstruction module: {} steps in {:.1}s, loss {:.5} -> {:.5}, held-out {}; checkpoint {}",
        report.steps,
        report.seconds,
        report.initial_loss,
        report.final_loss,
        held_out_loss.map_or("n/a".to_string(), |l| format!("{l:.5}")),
        ckpt.display()
    );
    Ok(ckpt)
}

/// One inference input: a corrupted image, optionally with its dataset record.
struct InferItem<'a> {
    id: String,
    corrupted: ImageTensor<f32>,
    record: Option<&'a DatasetRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferSummary {
    pub written: usize,
    pub failed: Vec<(String, String)>,
    pub seconds: f64,
}

fn to_model_tensor(img: &ImageTensor<f32>) -> inpaint_core::Result<Tensor<f32>> {
    let m = img.with_channels(3)?.to_model_range()?;
    Tensor::from_images(&[&m])
}

/// Restores every corrupted image of `input` (a dataset directory, or a
/// directory of PNGs) into `output` as `<id>.png` plus `<id>_seg.png`.
pub fn infer(cfg: &RunConfig, input: &Path, output: &Path) -> Result<InferSummary> {
    let start = std::time::Instant::now();
    let records;
    let mut items: Vec<InferItem> = Vec::new();
    let mut failed = Vec::new();
    if input.join(inpaint_core::datagen::MANIFEST_FILE).is_file() {
        records = load_dataset(input)?;
        for r in select(&records, cfg.split) {
            items.push(InferItem { id: r.id.clone(), corrupted: r.corrupted_image.clone(), record: Some(r) });
        }
    } else {
        ensure!(input.is_dir(), "input {} is neither a dataset nor a directory of images", input.display());
        for path in png_files(input)? {
            match read_png(&path) {
                Ok(img) => items.push(InferItem { id: stem(&path), corrupted: img, record: None }),
                Err(e) => {
                    log::error!("{}: {e}", path.display());
                    failed.push((stem(&path), e.to_string()));
                }
            }
        }
    }
    let needs_record = cfg.denoiser == DenoiserKind::Oracle || cfg.infer_seg == SegSource::Gt;
    if needs_record {
        ensure!(input.join(inpaint_core::datagen::MANIFEST_FILE).is_file(), "oracle denoiser and ground-truth ink maps need a dataset input");
    }
    fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;

    let schedule = cfg.schedule()?;
    let spm = match cfg.infer_seg {
        SegSource::Spm => Some(load_spm(&cfg.run_dir)?.0),
        _ => None,
    };
    let trained: Option<Box<dyn Denoiser>> = match cfg.denoiser {
        DenoiserKind::Oracle => None,
        DenoiserKind::Trained => {
            let (model, meta) = load_rm(&cfg.run_dir)?;
            ensure!(
                meta.schedule_steps == schedule.steps(),
                "reconstruction checkpoint used {} steps, config has {}",
                meta.schedule_steps,
                schedule.steps()
            );
            Some(match meta.target {
                PredictionTarget::X0 => Box::new(TrainedRm { model }),
                PredictionTarget::Eps => Box::new(NoisePredictingRm { model, schedule: schedule.clone() }),
            })
        }
    };
    let sampler = cfg.sampler_config();

    let results: Vec<(String, std::result::Result<(), String>)> = items
        .par_iter()
        .map(|item| {
            let run = || -> Result<()> {
                let (h, w) = (item.corrupted.height(), item.corrupted.width());
                let seg = match (cfg.infer_seg, item.record) {
                    (SegSource::Gt, Some(r)) => r.intact_segmask.clone(),
                    (SegSource::None, _) => SegMap::zeros(h, w),
                    (SegSource::Spm, _) => predict_segmaps(spm.as_ref().expect("loaded above"), &[&item.corrupted], 1)?.remove(0),
                    (SegSource::Gt, None) => bail!("no ground-truth ink map"),
                };
                let seed = record_seed(sampler.seed, &item.id);
                let restored = match (&trained, item.record) {
                    (Some(d), _) => inpaint_image(d.as_ref(), &item.corrupted, &seg, &sampler, &schedule, seed)?,
                    (None, Some(r)) => {
                        let oracle = OracleDenoiser { x0: to_model_tensor(&r.intact_image)? };
                        inpaint_image(&oracle, &item.corrupted, &seg, &sampler, &schedule, seed)?
                    }
                    (None, None) => bail!("oracle denoiser needs the intact image"),
                };
                write_png(output.join(format!("{}.png", item.id)), &restored)?;
                write_seg_png(output.join(format!("{}{SEG_SUFFIX}", item.id)), &seg)?;
                Ok(())
            };
            (item.id.clone(), run().map_err(|e| format!("{e:#}")))
        })
        .collect();
    let mut written = 0;
    for (id, r) in results {
        match r {
            Ok(()) => written += 1,
            Err(e) => {
                log::error!("{id}: {e}");
                failed.push((id, e));
            }
        }
    }
    let summary = InferSummary { written, failed, seconds: start.elapsed().as_secs_f64() };
    println!(
        "restored {} images into {} in {:.2}s ({} failed)",
        summary.written,
        output.display(),
        summary.seconds,
        summary.failed.len()
    );
    Ok(summary)
}

/// Where `eval` takes predictions from.
pub enum EvalSource<'a> {
    /// `<id>.png` files in a directory.
    Dir(&'a Path),
    /// The corrupted inputs themselves (the baseline row).
    Corrupted,
}

/// Scores predictions against the dataset's selected split and writes
/// `eval.json` and `eval.txt` into `out_dir`.
pub fn eval_cmd(cfg: &RunConfig, source: EvalSource, transcripts: Option<&Path>, out_dir: &Path) -> Result<EvalReport> {
    let records = load_dataset(&cfg.dataset_dir)?;
    let chosen = select(&records, cfg.split);
    let toy = ToyTemplateRecognizer::new();
    let external = transcripts
        .map(|p| ExternalTranscriptFile::load(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let recognizer: &dyn Recognizer = match &external {
        Some(t) => t,
        None => &toy,
    };
    let norm = cfg.normalization();
    let (report, method) = match source {
        EvalSource::Dir(dir) => {
            ensure!(dir.is_dir(), "prediction directory {} does not exist", dir.display());
            (evaluate(&chosen, dir, recognizer, &norm)?, "Inpainted")
        }
        EvalSource::Corrupted => (evaluate_corrupted(&chosen, recognizer, &norm)?, "Corrupted Image"),
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(EVAL_JSON), report.to_json()?)?;
    let table = report.table(method);
    fs::write(out_dir.join(EVAL_TABLE), &table)?;
    print!("{table}");
    if report.failed > 0 {
        log::warn!("{} of {} records had no usable prediction", report.failed, report.failed + report.scored);
    }
    Ok(report)
}

pub fn gradcheck_cmd(opts: &SuiteOptions) -> Result<SuiteReport> {
    let report = run_gradient_suite(opts)?;
    for e in &report.entries {
        let verdict = if e.checked > 0 && e.worst <= report.tolerance { "ok" } else { "FAIL" };
        println!("{:<20} {:>3} runs {:>7} coords  worst {:.3e}  {verdict}", e.name, e.runs, e.checked, e.worst);
    }
    println!("worst relative error {:.6e} (tolerance {:.0e})", report.worst(), report.tolerance);
    Ok(report)
}
