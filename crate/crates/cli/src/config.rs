//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default; an
//! unknown key, a repeated key or an unparsable value is an error.

use std::fmt;
use std::path::{Path, PathBuf};

use inpaint_core::datagen::{DatasetConfig, InkPolarity, TextSource, TextStyle};
use inpaint_core::diffusion::{
    make_schedule, NoiseSchedule, PredictionTarget, RmTrainConfig, SamplerConfig, SamplerKind, DEFAULT_BETA_END,
    DEFAULT_BETA_START, DEFAULT_T,
};
use inpaint_core::eval::TextNormalization;
use inpaint_core::spm::{LossWeights, NormKind, SegLossKind, SpmTrainConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice")]
    Duplicate(String),
    #[error("bad value for `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Textual form of a config value; `render` then `parse` is the identity.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("{s:?}: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(usize, u64, f64, bool, String);

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for [f64; 3] {
    fn parse_value(s: &str) -> Result<Self, String> {
        let parts = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>();
        match parts {
            Ok(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
            _ => Err(format!("{s:?}: expected three comma-separated numbers")),
        }
    }
    fn render(&self) -> String {
        format!("{},{},{}", self[0], self[1], self[2])
    }
}

macro_rules! enum_value {
    ($t:ty { $($v:path => $s:literal),* $(,)? }) => {
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok($v),)*
                    _ => Err(format!("{s:?}: expected one of {}", [$($s),*].join(", "))),
                }
            }
            fn render(&self) -> String {
                match self { $($v => $s.to_string(),)* }
            }
        }
    };
}

/// Which ink map conditions the reconstruction module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegSource {
    /// The dataset's intact segmentation.
    Gt,
    /// The structure module's prediction.
    Spm,
    /// An all-zero map (reconstruction module alone).
    None,
}

/// Denoiser used at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserKind {
    Trained,
    /// Returns the ground-truth image; needs a dataset input.
    Oracle,
}

/// Normalization of the structure network; `Auto` picks by batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormChoice {
    Auto,
    Batch,
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextKind {
    Lexicon,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

enum_value!(TextStyle { TextStyle::Scene => "scene", TextStyle::Handwritten => "handwritten" });
enum_value!(TextKind { TextKind::Lexicon => "lexicon", TextKind::Random => "random" });
enum_value!(InkPolarity { InkPolarity::Darker => "darker", InkPolarity::Lighter => "lighter" });
enum_value!(SegLossKind { SegLossKind::Weighted => "weighted", SegLossKind::Standard => "standard" });
enum_value!(NormChoice { NormChoice::Auto => "auto", NormChoice::Batch => "batch", NormChoice::Group => "group" });
enum_value!(PredictionTarget { PredictionTarget::X0 => "x0", PredictionTarget::Eps => "eps" });
enum_value!(SegSource { SegSource::Gt => "gt", SegSource::Spm => "spm", SegSource::None => "none" });
enum_value!(SamplerKind {
    SamplerKind::Markov => "markov",
    SamplerKind::NonMarkov => "non_markov",
    SamplerKind::Ddim => "ddim",
});
enum_value!(DenoiserKind { DenoiserKind::Trained => "trained", DenoiserKind::Oracle => "oracle" });
enum_value!(SplitChoice { SplitChoice::Train => "train", SplitChoice::Test => "test", SplitChoice::All => "all" });

/// A documented key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyDoc {
    pub key: &'static str,
    pub doc: &'static str,
}

macro_rules! run_config {
    ($( #[doc = $doc:literal] $key:ident : $ty:ty = $default:expr, )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( #[doc = $doc] pub $key: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $key: $default, )* }
            }
        }

        pub const KEYS: &[KeyDoc] = &[ $( KeyDoc { key: stringify!($key), doc: $doc.trim_ascii() }, )* ];

        impl RunConfig {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let bad = |message: String| ConfigError::Value { key: key.to_string(), message };
                match key {
                    $( stringify!($key) => self.$key = <$ty as ConfigValue>::parse_value(value).map_err(bad)?, )*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// Every key with its current textual value, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![ $( (stringify!($key), self.$key.render()), )* ]
            }
        }
    };
}

run_config! {
    /// Dataset directory (manifest plus per-record rasters).
    dataset_dir: PathBuf = PathBuf::from("data"),
    /// Directory for checkpoints, loss curves, inference outputs and reports.
    run_dir: PathBuf = PathBuf::from("run"),
    /// Number of synthesized records.
    records: usize = 100,
    /// Canvas height in pixels (a multiple of 16 for the default networks).
    height: usize = 64,
    /// Canvas width in pixels (a multiple of 16 for the default networks).
    width: usize = 256,
    /// `scene` (3 channels, mixed polarity, black fill) or `handwritten` (gray, dark ink, white fill).
    style: TextStyle = TextStyle::Scene,
    /// `lexicon` words or `random` alphanumeric strings.
    text_source: TextKind = TextKind::Lexicon,
    /// Shortest random string.
    text_min_len: usize = 3,
    /// Longest random string.
    text_max_len: usize = 10,
    /// Maximum random text offset in pixels.
    jitter: usize = 3,
    /// Lower bound of the corrosion-ratio band.
    ratio_lo: f64 = 0.05,
    /// Upper bound of the corrosion-ratio band.
    ratio_hi: f64 = 0.6,
    /// Relative weights of convex hull, irregular region and quick draw.
    form_mix: [f64; 3] = [1.0, 1.0, 1.0],
    /// Fraction of records held out as the test split.
    test_fraction: f64 = 0.2,
    /// Gray threshold deriving ink maps of external images (`corrupt`).
    theta: f64 = 0.5,
    /// Ink polarity of external images: `darker` or `lighter` than the background.
    ink_polarity: InkPolarity = InkPolarity::Darker,
    /// Diffusion steps T.
    t_max: usize = DEFAULT_T,
    /// First beta of the linear schedule.
    beta_start: f64 = DEFAULT_BETA_START,
    /// Last beta of the linear schedule.
    beta_end: f64 = DEFAULT_BETA_END,
    /// When > 0, train and sample on this many points of the default 2000-step curve instead.
    respace: usize = 0,
    /// Structure module learning rate.
    spm_lr: f64 = 1e-4,
    /// Structure module epochs.
    spm_epochs: usize = 50,
    /// Structure module batch size.
    spm_batch: usize = 32,
    /// Structure module normalization: `auto` (batch norm from batch size 4), `batch` or `group`.
    spm_norm: NormChoice = NormChoice::Auto,
    /// Optimizer-step cap for the structure module; 0 means none.
    spm_max_steps: usize = 0,
    /// Weight of the pixel L1 loss.
    lambda_pix: f64 = 1.0,
    /// Weight of the segmentation cross-entropy.
    lambda_seg: f64 = 1.0,
    /// Weight of the content (feature) loss.
    lambda_cha: f64 = 1.0,
    /// Weight of the style (Gram) loss.
    lambda_sty: f64 = 1.0,
    /// Segmentation cross-entropy: `weighted` (ink term doubled) or `standard`.
    seg_loss: SegLossKind = SegLossKind::Weighted,
    /// Channels of the fixed random feature extractor used by the content and style losses.
    feature_channels: usize = 8,
    /// Reconstruction module learning rate.
    rm_lr: f64 = 1e-3,
    /// Reconstruction module epochs.
    rm_epochs: usize = 400,
    /// Reconstruction module batch size.
    rm_batch: usize = 2,
    /// Optimizer-step cap for the reconstruction module; 0 means none.
    rm_max_steps: usize = 0,
    /// Reconstruction target: `x0` (clean image) or `eps` (noise).
    rm_target: PredictionTarget = PredictionTarget::X0,
    /// Ink map conditioning reconstruction training: `gt`, `spm` or `none`.
    rm_seg_source: SegSource = SegSource::Gt,
    /// Sampler: `non_markov`, `markov` or `ddim`.
    sampler: SamplerKind = SamplerKind::NonMarkov,
    /// Denoiser calls of the subsequence samplers (S).
    sampler_steps: usize = 1,
    /// Ink map conditioning inference: `spm`, `gt` or `none`.
    infer_seg: SegSource = SegSource::Spm,
    /// Denoiser at inference: `trained` or `oracle`.
    denoiser: DenoiserKind = DenoiserKind::Trained,
    /// Records processed by `infer` and `eval` when reading a dataset: `test`, `train` or `all`.
    split: SplitChoice = SplitChoice::Test,
    /// Lowercase labels and predictions before comparison.
    lowercase: bool = true,
    /// Drop non-alphanumeric characters before comparison.
    alnum_only: bool = false,
    /// Seed of dataset synthesis and corrosion.
    data_seed: u64 = 0,
    /// Seed of the train/test split.
    split_seed: u64 = 0,
    /// Seed of initialization, shuffling and training noise.
    train_seed: u64 = 0,
    /// Seed of sampling noise.
    sample_seed: u64 = 0,
}

impl RunConfig {
    pub fn keys() -> &'static [KeyDoc] {
        KEYS
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = k.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate(key.to_string()));
            }
            self.set(key, v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: assignment.to_string(),
        })?;
        self.set(k.trim(), v.trim())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            records: self.records,
            height: self.height,
            width: self.width,
            style: self.style,
            ratio_lo: self.ratio_lo,
            ratio_hi: self.ratio_hi,
            form_mix: self.form_mix,
            test_fraction: self.test_fraction,
            text: match self.text_source {
                TextKind::Lexicon => TextSource::Lexicon,
                TextKind::Random => TextSource::Random {
                    min_len: self.text_min_len,
                    max_len: self.text_max_len,
                },
            },
            jitter: self.jitter,
            data_seed: self.data_seed,
            split_seed: self.split_seed,
        }
    }

    pub fn schedule(&self) -> inpaint_core::Result<NoiseSchedule> {
        if self.respace > 0 {
            let default = self.t_max == DEFAULT_T && self.beta_start == DEFAULT_BETA_START && self.beta_end == DEFAULT_BETA_END;
            if !default {
                return Err(inpaint_core::Error::InvalidParam(
                    "respace works on the default schedule only (t_max, beta_start, beta_end at defaults)".into(),
                ));
            }
            NoiseSchedule::time_rescaled(self.respace)
        } else {
            make_schedule(self.t_max, self.beta_start, self.beta_end)
        }
    }

    pub fn spm_norm_kind(&self) -> NormKind {
        match self.spm_norm {
            NormChoice::Auto => NormKind::for_batch_size(self.spm_batch),
            NormChoice::Batch => NormKind::Batch,
            NormChoice::Group => NormKind::Group,
        }
    }

    pub fn spm_train_config(&self) -> SpmTrainConfig {
        SpmTrainConfig {
            epochs: self.spm_epochs,
            batch_size: self.spm_batch,
            lr: self.spm_lr,
            weights: LossWeights {
                pix: self.lambda_pix,
                seg: self.lambda_seg,
                cha: self.lambda_cha,
                sty: self.lambda_sty,
            },
            seg_loss: self.seg_loss,
            train_seed: self.train_seed,
            max_steps: (self.spm_max_steps > 0).then_some(self.spm_max_steps),
        }
    }

    pub fn rm_train_config(&self) -> RmTrainConfig {
        RmTrainConfig {
            epochs: self.rm_epochs,
            batch_size: self.rm_batch,
            lr: self.rm_lr,
            target: self.rm_target,
            train_seed: self.train_seed,
            max_steps: (self.rm_max_steps > 0).then_some(self.rm_max_steps),
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            mode: self.sampler,
            steps: self.sampler_steps,
            seed: self.sample_seed,
        }
    }

    pub fn normalization(&self) -> TextNormalization {
        TextNormalization {
            lowercase: self.lowercase,
            alnum_only: self.alnum_only,
        }
    }
}

/// Serializes every key, so that parsing the result reproduces the config.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_documented_and_settable() {
        let cfg = RunConfig::default();
        let entries = cfg.entries();
        assert_eq!(entries.len(), KEYS.len());
        for ((k, v), doc) in entries.iter().zip(KEYS) {
            assert_eq!(*k, doc.key);
            assert!(!doc.doc.is_empty(), "{k} lacks a description");
            let mut c = RunConfig::default();
            c.set(k, v).unwrap();
            assert_eq!(c, cfg);
        }
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg = RunConfig::parse("# desk run\n\n records = 7 # inline\nstyle=handwritten\n").unwrap();
        assert_eq!(cfg.records, 7);
        assert_eq!(cfg.style, TextStyle::Handwritten);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::parse("nope = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::parse("records = 1\nrecords = 2"), Err(ConfigError::Duplicate(_))));
        assert!(matches!(RunConfig::parse("records"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("records = -1"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::parse("sampler = fast"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::parse("form_mix = 1,2"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn respacing_needs_default_curve() {
        let mut c = RunConfig::default();
        c.respace = 200;
        assert_eq!(c.schedule().unwrap().steps(), 200);
        c.beta_end = 0.03;
        assert!(c.schedule().is_err());
    }
}
