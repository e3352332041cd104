//! Corrosion masks: convex hull, irregular region and quick draw forms, with
//! rejection sampling onto a requested corrosion-ratio band.

mod forms;
mod hull;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use forms::{dilate, draw_stroke, gen_irregular_mask, gen_quickdraw_mask};
pub use hull::{cross, graham_convex_hull, rasterize_polygon, Point, Polygon};

use crate::error::{Error, Result};
use crate::imgcore::{ImageTensor, MaskBitmap, ValueRange};
use crate::scalar::Scalar;

pub const MAX_SAMPLING_ATTEMPTS: usize = 200;

/// Dataset-wide corrosion band.
pub const DATASET_RATIO_LO: f64 = 0.05;
pub const DATASET_RATIO_HI: f64 = 0.60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrosionForm {
    ConvexHull,
    IrregularRegion,
    QuickDraw,
}

impl CorrosionForm {
    pub const ALL: [CorrosionForm; 3] = [
        CorrosionForm::ConvexHull,
        CorrosionForm::IrregularRegion,
        CorrosionForm::QuickDraw,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            CorrosionForm::ConvexHull => "CH",
            CorrosionForm::IrregularRegion => "IR",
            CorrosionForm::QuickDraw => "QD",
        }
    }
}

impl fmt::Display for CorrosionForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Gray value written into corroded pixels: black for scene text, white for
/// handwriting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    Black,
    White,
}

impl Fill {
    pub fn value(self) -> f64 {
        match self {
            Fill::Black => 0.0,
            Fill::White => 1.0,
        }
    }
}

/// Upper bounds on the drawing parameters the sampler may use for quick-draw masks.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StrokeBudget {
    pub max_strokes: usize,
    pub max_thickness: f64,
    pub max_dilation: usize,
}

impl Default for StrokeBudget {
    fn default() -> Self {
        StrokeBudget {
            max_strokes: 8,
            max_thickness: 32.0,
            max_dilation: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorrosionSpec {
    pub form: CorrosionForm,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub fill: Fill,
    pub rng_seed: u64,
    #[serde(default)]
    pub budget: StrokeBudget,
}

impl CorrosionSpec {
    pub fn new(form: CorrosionForm, ratio_lo: f64, ratio_hi: f64, fill: Fill, rng_seed: u64) -> Result<Self> {
        let spec = CorrosionSpec {
            form,
            ratio_lo,
            ratio_hi,
            fill,
            rng_seed,
            budget: StrokeBudget::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_budget(mut self, budget: StrokeBudget) -> Self {
        self.budget = budget;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_lo > 0.0 && self.ratio_lo <= self.ratio_hi && self.ratio_hi < 1.0) {
            return Err(Error::InvalidParam(format!(
                "corrosion band must satisfy 0 < lo <= hi < 1, got [{}, {}]",
                self.ratio_lo, self.ratio_hi
            )));
        }
        Ok(())
    }

    /// RNG seeded from `rng_seed`.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.rng_seed)
    }
}

/// Fraction of set pixels.
pub fn corrosion_ratio(mask: &MaskBitmap) -> f64 {
    mask.count_ones() as f64 / (mask.height() * mask.width()) as f64
}

/// Draws masks of the requested form, rescaling the shape after every miss,
/// until the corrosion ratio lands inside `[ratio_lo, ratio_hi]`.
pub fn sample_mask_with_ratio<R: Rng + ?Sized>(spec: &CorrosionSpec, h: usize, w: usize, rng: &mut R) -> Result<MaskBitmap> {
    spec.validate()?;
    let target = rng.random_range(spec.ratio_lo..=spec.ratio_hi);
    let budget = spec.budget;

    // area grows ~scale^2 for filled shapes, ~scale for strokes
    let exponent = match spec.form {
        CorrosionForm::QuickDraw => 1.0,
        _ => 2.0,
    };
    let (scale_min, scale_max) = match spec.form {
        CorrosionForm::QuickDraw => (1.0, budget.max_thickness.max(1.0)),
        _ => (0.02, 6.0),
    };

    let mut shape_seed = 0u64;
    let mut pieces = 1usize;
    let mut dilation = 0usize;
    let mut scale = 0.0;
    for attempt in 0..MAX_SAMPLING_ATTEMPTS {
        if attempt % 10 == 0 {
            shape_seed = rng.random();
            match spec.form {
                CorrosionForm::QuickDraw => {
                    pieces = rng.random_range(1..=budget.max_strokes.max(1));
                    dilation = rng.random_range(0..=budget.max_dilation);
                    // a stroke covers roughly its length (~1.2 w) times its thickness
                    scale = (target * h as f64 / (1.2 * pieces as f64)).clamp(scale_min, scale_max);
                }
                CorrosionForm::IrregularRegion => {
                    pieces = rng.random_range(1..=3);
                    scale = (1.6 * (target / pieces as f64).sqrt()).clamp(scale_min, scale_max);
                }
                CorrosionForm::ConvexHull => {
                    pieces = 1;
                    scale = (1.6 * target.sqrt()).clamp(scale_min, scale_max);
                }
            }
        }
        let mut shape_rng = ChaCha8Rng::seed_from_u64(shape_seed);
        let mask = match spec.form {
            CorrosionForm::ConvexHull => forms::convex_hull_with_scale(h, w, scale, &mut shape_rng).ok(),
            CorrosionForm::IrregularRegion => Some(forms::irregular_with_scale(h, w, pieces, scale, &mut shape_rng)),
            CorrosionForm::QuickDraw => Some(forms::quickdraw_with_thickness(
                h,
                w,
                pieces,
                scale,
                dilation,
                &mut shape_rng,
            )),
        };
        let ratio = mask.as_ref().map_or(0.0, corrosion_ratio);
        if ratio >= spec.ratio_lo && ratio <= spec.ratio_hi {
            if let Some(mask) = mask {
                return Ok(mask);
            }
        }
        let factor = if ratio <= 0.0 {
            2.0
        } else {
            (target / ratio).powf(1.0 / exponent).clamp(0.5, 2.0)
        };
        scale = (scale * factor).clamp(scale_min, scale_max);
    }
    Err(Error::SamplingFailure {
        form: spec.form.to_string(),
        lo: spec.ratio_lo,
        hi: spec.ratio_hi,
        attempts: MAX_SAMPLING_ATTEMPTS,
    })
}

/// Writes the fill value into every masked pixel on all channels; other
/// pixels are untouched.
pub fn apply_corrosion<S: Scalar>(img: &ImageTensor<S>, mask: &MaskBitmap, fill: Fill) -> Result<ImageTensor<S>> {
    img.expect_range(ValueRange::Unit, "apply_corrosion")?;
    if img.height() != mask.height() || img.width() != mask.width() {
        return Err(Error::shape(
            "apply_corrosion",
            format!("{}x{}", img.height(), img.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    let mut out = img.clone();
    let v = S::lit(fill.value());
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                out.set_pixel(y, x, v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn ratio_of_trivial_masks() {
        assert_eq!(corrosion_ratio(&MaskBitmap::ones(4, 6)), 1.0);
        assert_eq!(corrosion_ratio(&MaskBitmap::zeros(4, 6)), 0.0);
        let mut half = MaskBitmap::zeros(4, 6);
        for y in 0..4 {
            for x in 0..3 {
                half.set(y, x, true);
            }
        }
        assert_eq!(corrosion_ratio(&half), 0.5);
    }

    #[test]
    fn zero_strokes_is_empty() {
        assert_eq!(gen_quickdraw_mask(32, 128, 0, 3, 2, &mut rng(1)).count_ones(), 0);
    }

    #[test]
    fn horizontal_stroke_covers_k_rows() {
        let (h, w) = (32usize, 128usize);
        for k in 1..=6usize {
            let mut m = MaskBitmap::zeros(h, w);
            // center on a pixel center for odd k, on a pixel edge for even k
            let yc = if k % 2 == 1 { 16.5 } else { 16.0 };
            draw_stroke(&mut m, &[Point::new(0.0, yc), Point::new(w as f64, yc)], k as f64);
            let want = (k * w) as f64 / (h * w) as f64;
            assert!((corrosion_ratio(&m) - want).abs() <= 0.05 * want, "k={k}");
        }
    }

    #[test]
    fn dilation_is_monotone() {
        for seed in 0..100u64 {
            let base = gen_quickdraw_mask(32, 64, 2, 1, 0, &mut rng(seed));
            let mut prev = corrosion_ratio(&base);
            for r in 1..4 {
                let m = dilate(&base, r);
                let ratio = corrosion_ratio(&m);
                assert!(ratio >= prev);
                // dilation keeps the original pixels
                assert!(base.bits().iter().zip(m.bits()).all(|(&a, &b)| a <= b));
                prev = ratio;
            }
        }
    }

    #[test]
    fn irregular_masks_are_deterministic() {
        let a = gen_irregular_mask(64, 256, 3, &mut rng(42));
        let b = gen_irregular_mask(64, 256, 3, &mut rng(42));
        assert_eq!(a, b);
    }

    #[test]
    fn apply_corrosion_pixelwise() {
        let mut r = rng(3);
        let data = (0..8 * 10 * 3).map(|_| r.random::<f64>()).collect();
        let img = ImageTensor::new(8, 10, 3, ValueRange::Unit, data).unwrap();
        let bits = (0..80).map(|_| r.random_bool(0.3) as u8).collect();
        let mask = MaskBitmap::new(8, 10, bits).unwrap();
        for fill in [Fill::Black, Fill::White] {
            let out = apply_corrosion(&img, &mask, fill).unwrap();
            for y in 0..8 {
                for x in 0..10 {
                    for c in 0..3 {
                        let want = if mask.get(y, x) { fill.value() } else { img.get(y, x, c) };
                        assert_eq!(out.get(y, x, c), want);
                    }
                }
            }
            assert_eq!(apply_corrosion(&out, &mask, fill).unwrap(), out);
        }
        assert_eq!(apply_corrosion(&img, &MaskBitmap::zeros(8, 10), Fill::Black).unwrap(), img);
        let black = apply_corrosion(&img, &MaskBitmap::ones(8, 10), Fill::Black).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
        assert!(apply_corrosion(&img, &MaskBitmap::zeros(8, 9), Fill::Black).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(CorrosionSpec::new(CorrosionForm::QuickDraw, 0.0, 0.2, Fill::Black, 0).is_err());
        assert!(CorrosionSpec::new(CorrosionForm::QuickDraw, 0.3, 0.2, Fill::Black, 0).is_err());
        assert!(CorrosionSpec::new(CorrosionForm::QuickDraw, 0.3, 1.0, Fill::Black, 0).is_err());
        assert!(CorrosionSpec::new(CorrosionForm::QuickDraw, 0.05, 0.6, Fill::White, 0).is_ok());
    }

    #[test]
    fn low_band_any_form() {
        for form in CorrosionForm::ALL {
            for seed in 0..20 {
                let spec = CorrosionSpec::new(form, 0.05, 0.20, Fill::Black, seed).unwrap();
                let m = sample_mask_with_ratio(&spec, 64, 256, &mut spec.rng()).unwrap();
                let r = corrosion_ratio(&m);
                assert!((0.05..=0.20).contains(&r), "{form} seed {seed}: {r}");
            }
        }
    }

    #[test]
    fn high_band_quickdraw() {
        for seed in 0..50 {
            let spec = CorrosionSpec::new(CorrosionForm::QuickDraw, 0.40, 0.60, Fill::Black, seed).unwrap();
            let m = sample_mask_with_ratio(&spec, 32, 128, &mut spec.rng()).unwrap();
            let r = corrosion_ratio(&m);
            assert!((0.40..=0.60).contains(&r), "seed {seed}: {r}");
        }
    }

    #[test]
    fn infeasible_band_fails() {
        let spec = CorrosionSpec::new(CorrosionForm::QuickDraw, 0.95, 0.99, Fill::Black, 1)
            .unwrap()
            .with_budget(StrokeBudget {
                max_strokes: 1,
                max_thickness: 1.0,
                max_dilation: 0,
            });
        let err = sample_mask_with_ratio(&spec, 8, 8, &mut spec.rng()).unwrap_err();
        match err {
            Error::SamplingFailure { form, attempts, .. } => {
                assert_eq!(form, "QD");
                assert_eq!(attempts, MAX_SAMPLING_ATTEMPTS);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = CorrosionSpec::new(CorrosionForm::IrregularRegion, 0.1, 0.4, Fill::White, 77).unwrap();
        let a = sample_mask_with_ratio(&spec, 32, 128, &mut spec.rng()).unwrap();
        let b = sample_mask_with_ratio(&spec, 32, 128, &mut spec.rng()).unwrap();
        assert_eq!(a, b);
    }
}
