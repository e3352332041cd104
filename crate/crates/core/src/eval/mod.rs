//! Restoration quality (PSNR, SSIM) and recognition accuracy, plus the
//! recognizer boundary.

mod metrics;
mod recognizer;
mod report;

pub use metrics::{
    char_acc, edit_distance, pair_char_acc, psnr, ssim, word_acc, PSNR_CAP_DB, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use recognizer::{ExternalTranscriptFile, Recognizer, ToyTemplateRecognizer, MATCH_THRESHOLD};
pub use report::{
    evaluate, evaluate_corrupted, evaluate_with, inpainted_file, ratio_band_name, Breakdown, EvalReport, EvalRow,
    TextNormalization, RATIO_BANDS,
};
