//! Dataset-level evaluation: per-record rows, means and breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::metrics::{pair_char_acc, psnr, ssim};
use super::recognizer::Recognizer;
use crate::corrosion::CorrosionForm;
use crate::datagen::DatasetRecord;
use crate::error::{Error, Result};
use crate::imgcore::{read_png, ImageTensor};

/// Corrosion-ratio bands used in the breakdown tables, as `[lo, hi)` fractions.
pub const RATIO_BANDS: [(f64, f64); 3] = [(0.05, 0.20), (0.20, 0.40), (0.40, 0.60)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TextNormalization {
    /// Compare case-insensitively.
    pub lowercase: bool,
    /// Drop everything but ASCII letters and digits before comparing.
    pub alnum_only: bool,
}

impl Default for TextNormalization {
    fn default() -> Self {
        TextNormalization {
            lowercase: true,
            alnum_only: false,
        }
    }
}

impl TextNormalization {
    pub fn apply(&self, s: &str) -> String {
        let s: String = if self.alnum_only {
            s.chars().filter(|c| c.is_ascii_alphanumeric()).collect()
        } else {
            s.to_string()
        };
        if self.lowercase { s.to_lowercase() } else { s }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub form: CorrosionForm,
    pub ratio: f64,
    pub label: String,
    pub prediction: String,
    pub psnr: f64,
    pub ssim: f64,
    pub word_correct: bool,
    pub char_acc: f64,
    /// Set when the record could not be scored; such rows stay out of the means.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Breakdown {
    pub name: String,
    pub count: usize,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    /// Percent.
    pub word_acc: f64,
    pub char_acc: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    /// Percent.
    pub word_acc: f64,
    pub char_acc: f64,
    pub scored: usize,
    pub failed: usize,
    pub rows: Vec<EvalRow>,
    pub by_form: Vec<Breakdown>,
    pub by_ratio: Vec<Breakdown>,
}

fn summarize(name: &str, rows: &[&EvalRow]) -> Breakdown {
    let n = rows.len();
    let mean = |f: &dyn Fn(&EvalRow) -> f64| if n == 0 { 0.0 } else { rows.iter().map(|r| f(r)).sum::<f64>() / n as f64 };
    Breakdown {
        name: name.to_string(),
        count: n,
        psnr_mean: mean(&|r| r.psnr),
        ssim_mean: mean(&|r| r.ssim),
        word_acc: 100.0 * mean(&|r| r.word_correct as u8 as f64),
        char_acc: mean(&|r| r.char_acc),
    }
}

pub fn ratio_band_name(lo: f64, hi: f64) -> String {
    format!("{:.0}-{:.0}%", lo * 100.0, hi * 100.0)
}

fn band_of(ratio: f64) -> Option<usize> {
    let last = RATIO_BANDS.len() - 1;
    RATIO_BANDS
        .iter()
        .position(|&(lo, hi)| ratio >= lo && ratio < hi)
        .or_else(|| (ratio == RATIO_BANDS[last].1).then_some(last))
}

fn score_record(
    rec: &DatasetRecord,
    output: Result<ImageTensor<f32>>,
    recognizer: &dyn Recognizer,
    norm: &TextNormalization,
) -> EvalRow {
    let mut row = EvalRow {
        id: rec.id.clone(),
        form: rec.corrosion_form,
        ratio: rec.corrosion_ratio,
        label: rec.text_label.clone(),
        prediction: String::new(),
        psnr: 0.0,
        ssim: 0.0,
        word_correct: false,
        char_acc: 0.0,
        error: None,
    };
    let scored = output.and_then(|img| {
        let img = img.with_channels(rec.intact_image.channels())?;
        let p = psnr(&img, &rec.intact_image)?;
        let s = ssim(&img, &rec.intact_image)?;
        let text = recognizer.transcribe(&rec.id, &img)?;
        Ok((p, s, text))
    });
    match scored {
        Ok((p, s, text)) => {
            let (pn, gn) = (norm.apply(&text), norm.apply(&rec.text_label));
            row.psnr = p;
            row.ssim = s;
            row.word_correct = pn == gn;
            row.char_acc = pair_char_acc(&pn, &gn);
            row.prediction = text;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Scores `output(record)` against each record's intact image and label.
/// Rows are sorted by id, so the report does not depend on record order.
pub fn evaluate_with<F>(
    records: &[&DatasetRecord],
    output: F,
    recognizer: &dyn Recognizer,
    norm: &TextNormalization,
) -> Result<EvalReport>
where
    F: Fn(&DatasetRecord) -> Result<ImageTensor<f32>> + Sync,
{
    if records.is_empty() {
        return Err(Error::InvalidParam("nothing to evaluate".into()));
    }
    let mut rows: Vec<EvalRow> = records
        .par_iter()
        .map(|rec| score_record(rec, output(rec), recognizer, norm))
        .collect();
    rows.sort_by(|a, b| a.id.cmp(&b.id));

    let ok: Vec<&EvalRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let overall = summarize("all", &ok);
    let by_form = CorrosionForm::ALL
        .iter()
        .map(|&f| summarize(f.short_name(), &ok.iter().copied().filter(|r| r.form == f).collect::<Vec<_>>()))
        .collect();
    let by_ratio = RATIO_BANDS
        .iter()
        .enumerate()
        .map(|(i, &(lo, hi))| {
            let members: Vec<&EvalRow> = ok.iter().copied().filter(|r| band_of(r.ratio) == Some(i)).collect();
            summarize(&ratio_band_name(lo, hi), &members)
        })
        .collect();
    let failed = rows.len() - ok.len();
    if failed > 0 {
        log::warn!("{failed} of {} records could not be scored", rows.len());
    }
    Ok(EvalReport {
        psnr_mean: overall.psnr_mean,
        ssim_mean: overall.ssim_mean,
        word_acc: overall.word_acc,
        char_acc: overall.char_acc,
        scored: ok.len(),
        failed,
        rows,
        by_form,
        by_ratio,
    })
}

/// File name of a record's restored image inside an output directory.
pub fn inpainted_file(id: &str) -> String {
    format!("{id}.png")
}

/// Scores `dir/<id>.png` for every record; a missing file becomes an error row.
pub fn evaluate(
    records: &[&DatasetRecord],
    dir: impl AsRef<Path>,
    recognizer: &dyn Recognizer,
    norm: &TextNormalization,
) -> Result<EvalReport> {
    let dir = dir.as_ref();
    evaluate_with(records, |rec| read_png(dir.join(inpainted_file(&rec.id))), recognizer, norm)
}

/// The "corrupted image" baseline: the damaged input scored as if restored.
pub fn evaluate_corrupted(records: &[&DatasetRecord], recognizer: &dyn Recognizer, norm: &TextNormalization) -> Result<EvalReport> {
    evaluate_with(records, |rec| Ok(rec.corrupted_image.clone()), recognizer, norm)
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidParam(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidParam(format!("report parse: {e}")))
    }

    /// Plain-text table: one row for the whole set, then per form and per band.
    pub fn table(&self, method: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>6} {:>9} {:>9} {:>9} {:>8}", "method", "n", "word_acc", "char_acc", "PSNR", "SSIM");
        let mut line = |name: &str, n: usize, w: f64, c: f64, p: f64, s: f64| {
            let _ = writeln!(out, "{name:<16} {n:>6} {w:>8.2}% {c:>9.4} {p:>9.2} {s:>8.4}");
        };
        line(method, self.scored, self.word_acc, self.char_acc, self.psnr_mean, self.ssim_mean);
        for b in self.by_form.iter().chain(&self.by_ratio) {
            line(&format!("  {}", b.name), b.count, b.word_acc, b.char_acc, b.psnr_mean, b.ssim_mean);
        }
        if self.failed > 0 {
            let _ = writeln!(out, "{} records failed", self.failed);
        }
        out
    }

    /// Per-form rows keyed by name, for lookups.
    pub fn form_map(&self) -> BTreeMap<String, Breakdown> {
        self.by_form.iter().map(|b| (b.name.clone(), b.clone())).collect()
    }
}
