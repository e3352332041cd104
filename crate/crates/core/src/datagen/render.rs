use rand::Rng;

use super::font::{glyph_columns, glyph_pixel, FontId, ADVANCE, GLYPH_H};
use crate::error::{Error, Result};
use crate::imgcore::{ImageTensor, SegMap, ValueRange};

pub const MAX_TEXT_LEN: usize = 20;
/// Minimum gray distance between ink and background.
pub const LEGIBILITY_FLOOR: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RenderStyle {
    pub font_id: FontId,
    pub ink_level: f32,
    pub background_level: f32,
    /// Maximum random offset of the text block, in pixels.
    pub jitter: usize,
    pub channels: usize,
}

impl RenderStyle {
    pub fn new(ink_level: f32, background_level: f32, jitter: usize, channels: usize) -> Result<Self> {
        let style = RenderStyle {
            font_id: FontId::Mono5x7,
            ink_level,
            background_level,
            jitter,
            channels,
        };
        style.validate()?;
        Ok(style)
    }

    pub fn validate(&self) -> Result<()> {
        let ok_level = |v: f32| (0.0..=1.0).contains(&v);
        if !ok_level(self.ink_level) || !ok_level(self.background_level) {
            return Err(Error::InvalidParam("ink/background levels must lie in [0, 1]".into()));
        }
        if ((self.ink_level - self.background_level).abs() as f64) < LEGIBILITY_FLOOR - 1e-6 {
            return Err(Error::InvalidParam(format!(
                "ink {} and background {} closer than the legibility floor {LEGIBILITY_FLOOR}",
                self.ink_level, self.background_level
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidParam(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        Ok(())
    }

    /// Random legible style. `dark_ink` forces ink darker than the background.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dark_ink: Option<bool>, jitter: usize, channels: usize) -> Self {
        let dark = dark_ink.unwrap_or_else(|| rng.random_bool(0.5));
        let (ink, bg) = if dark {
            (rng.random_range(0.0..0.3f32), rng.random_range(0.65..1.0f32))
        } else {
            (rng.random_range(0.7..1.0f32), rng.random_range(0.0..0.35f32))
        };
        RenderStyle {
            font_id: FontId::Mono5x7,
            ink_level: ink,
            background_level: bg,
            jitter,
            channels,
        }
    }

    pub fn ink_is_darker(&self) -> bool {
        self.ink_level < self.background_level
    }
}

/// Integer glyph magnification that fits `len` characters on the canvas.
pub fn glyph_scale(h: usize, w: usize, len: usize) -> usize {
    let by_height = (h * 11 / 20) / GLYPH_H;
    let by_width = if len == 0 { by_height } else { w.saturating_sub(4) / (len * ADVANCE) };
    by_height.min(by_width).max(1)
}

pub(crate) fn check_text(text: &str) -> Result<()> {
    if let Some(c) = text.chars().find(|&c| glyph_columns(c).is_none()) {
        return Err(Error::Render(c));
    }
    if text.chars().count() > MAX_TEXT_LEN {
        return Err(Error::InvalidParam(format!(
            "text longer than {MAX_TEXT_LEN} characters: {text:?}"
        )));
    }
    Ok(())
}

/// Draws `text` with the bundled face, centered with random jitter. Returns
/// the image and its exact ink map.
pub fn render_text_image<R: Rng + ?Sized>(
    text: &str,
    style: &RenderStyle,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<(ImageTensor<f32>, SegMap<f32>)> {
    style.validate()?;
    check_text(text)?;
    let n = text.chars().count();
    let scale = glyph_scale(h, w, n);
    let text_w = (n * ADVANCE * scale).saturating_sub(scale);
    let text_h = GLYPH_H * scale;

    let jitter = style.jitter as i64;
    let mut offset = |free: usize| -> i64 {
        let center = free as i64 / 2;
        let dj = if jitter > 0 { rng.random_range(-jitter..=jitter) } else { 0 };
        (center + dj).clamp(0, free as i64)
    };
    let x0 = offset(w.saturating_sub(text_w)) as usize;
    let y0 = offset(h.saturating_sub(text_h)) as usize;

    let mut ink = vec![0f32; h * w];
    for (i, ch) in text.chars().enumerate() {
        let cols = glyph_columns(ch).ok_or(Error::Render(ch))?;
        let gx = x0 + i * ADVANCE * scale;
        for row in 0..GLYPH_H {
            for col in 0..cols.len() {
                if !glyph_pixel(cols, row, col) {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let (y, x) = (y0 + row * scale + dy, gx + col * scale + dx);
                        if y < h && x < w {
                            ink[y * w + x] = 1.0;
                        }
                    }
                }
            }
        }
    }

    let c = style.channels;
    let mut data = Vec::with_capacity(h * w * c);
    for &m in &ink {
        let v = if m > 0.0 { style.ink_level } else { style.background_level };
        data.extend(std::iter::repeat_n(v, c));
    }
    let img = ImageTensor::new(h, w, c, ValueRange::Unit, data)?;
    let seg = SegMap::new(h, w, ink)?;
    Ok((img, seg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InkPolarity {
    Darker,
    Lighter,
}

/// Binary ink map from a fixed gray threshold.
pub fn threshold_segmentation(img: &ImageTensor<f32>, theta: f32, polarity: InkPolarity) -> Result<SegMap<f32>> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidParam(format!("threshold must lie in (0, 1), got {theta}")));
    }
    img.expect_range(ValueRange::Unit, "threshold_segmentation")?;
    let values = img
        .luminance()
        .into_iter()
        .map(|v| {
            let on = match polarity {
                InkPolarity::Darker => v < theta,
                InkPolarity::Lighter => v > theta,
            };
            on as u8 as f32
        })
        .collect();
    SegMap::new(img.height(), img.width(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn style() -> RenderStyle {
        RenderStyle::new(0.1, 0.95, 2, 3).unwrap()
    }

    #[test]
    fn empty_text_is_background_only() {
        let (img, seg) = render_text_image("", &style(), 64, 256, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.95));
        assert!(seg.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_glyph_foreground_fraction() {
        let (_, seg) = render_text_image("A", &style(), 64, 256, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let f = seg.foreground_fraction();
        // 'A' has 18 ink cells in font units, magnified 5x on the canonical canvas
        assert_eq!(seg.values().iter().filter(|&&v| v == 1.0).count(), 18 * 25);
        assert!(f > 0.0 && f < 0.5);
        assert!(seg.is_binary());
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_text_image("Hello42", &style(), 32, 128, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = render_text_image("Hello42", &style(), 32, 128, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unsupported_character_is_named() {
        let err = render_text_image("ab-c", &style(), 32, 128, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Render('-')));
        let long = "A".repeat(21);
        assert!(render_text_image(&long, &style(), 32, 128, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn style_enforces_legibility() {
        assert!(RenderStyle::new(0.4, 0.6, 0, 1).is_err());
        assert!(RenderStyle::new(0.2, 0.6, 0, 2).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            RenderStyle::random(&mut rng, None, 2, 3).validate().unwrap();
        }
    }

    #[test]
    fn threshold_of_constant_image() {
        let img = ImageTensor::filled(4, 4, 3, ValueRange::Unit, 0.9).unwrap();
        let seg = threshold_segmentation(&img, 0.5, InkPolarity::Darker).unwrap();
        assert!(seg.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn threshold_recovers_binary_image() {
        let data: Vec<f32> = (0..24).map(|i| (i % 3 != 0) as u8 as f32).collect();
        let img = ImageTensor::new(4, 6, 1, ValueRange::Unit, data.clone()).unwrap();
        let seg = threshold_segmentation(&img, 0.5, InkPolarity::Darker).unwrap();
        for (s, v) in seg.values().iter().zip(&data) {
            assert_eq!(*s, 1.0 - v);
        }
    }

    #[test]
    fn threshold_matches_renderer_ground_truth() {
        let (img, seg) = render_text_image("HELLO", &style(), 64, 256, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(threshold_segmentation(&img, 0.5, InkPolarity::Darker).unwrap(), seg);
        let light = RenderStyle::new(0.9, 0.1, 1, 1).unwrap();
        let (img, seg) = render_text_image("w0rld", &light, 32, 128, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(threshold_segmentation(&img, 0.5, InkPolarity::Lighter).unwrap(), seg);
    }
}
