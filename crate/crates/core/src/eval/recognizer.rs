//! Text recognizers: a template matcher over the bundled face and a reader
//! for transcripts produced by an outside system.

use std::collections::HashMap;
use std::path::Path;

use crate::datagen::font::{charset, glyph_columns, glyph_pixel, ADVANCE, GLYPH_H, GLYPH_W};
use crate::error::{Error, Result};
use crate::imgcore::ImageTensor;

pub trait Recognizer: Sync {
    /// Transcribes one image. `id` names the record, for recognizers that
    /// look results up rather than compute them.
    fn transcribe(&self, id: &str, image: &ImageTensor<f32>) -> Result<String>;
}

/// Minimum normalized cross-correlation for a glyph detection.
pub const MATCH_THRESHOLD: f64 = 0.5;
/// Pixels closer than this to the background level are not ink.
const INK_FLOOR: f64 = 0.15;

/// Sliding-window normalized cross-correlation against the bundled glyphs,
/// decoded left to right.
#[derive(Debug, Clone)]
pub struct ToyTemplateRecognizer {
    templates: Vec<(char, Vec<(usize, usize)>)>,
    pub threshold: f64,
}

impl Default for ToyTemplateRecognizer {
    fn default() -> Self {
        Self::new()
    }
}

struct Frame {
    h: usize,
    w: usize,
    ink: Vec<f64>,
    /// Integral images of `ink` and `ink^2`, `(h+1) x (w+1)`.
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Frame {
    fn new(img: &ImageTensor<f32>) -> Self {
        let (h, w, _) = img.shape();
        let lum: Vec<f64> = img.luminance().iter().map(|&v| v as f64).collect();
        let mut sorted = lum.clone();
        sorted.sort_by(f64::total_cmp);
        // text occupies a minority of the canvas, so the median is background
        let bg = sorted[sorted.len() / 2];
        let ink: Vec<f64> = lum
            .iter()
            .map(|v| {
                let d = (v - bg).abs();
                if d < INK_FLOOR { 0.0 } else { d }
            })
            .collect();
        let mut sum = vec![0.0; (h + 1) * (w + 1)];
        let mut sq = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                let v = ink[y * w + x];
                let i = (y + 1) * (w + 1) + x + 1;
                sum[i] = v + sum[i - 1] + sum[i - w - 1] - sum[i - w - 2];
                sq[i] = v * v + sq[i - 1] + sq[i - w - 1] - sq[i - w - 2];
            }
        }
        Frame { h, w, ink, sum, sq }
    }

    fn rect(&self, t: &[f64], y: usize, x: usize, bh: usize, bw: usize) -> f64 {
        let s = self.w + 1;
        t[(y + bh) * s + x + bw] - t[y * s + x + bw] - t[(y + bh) * s + x] + t[y * s + x]
    }

    fn ink_rows(&self) -> Option<(usize, usize)> {
        let rows: Vec<usize> = (0..self.h).filter(|&y| self.ink[y * self.w..(y + 1) * self.w].iter().any(|&v| v > 0.0)).collect();
        Some((*rows.first()?, *rows.last()?))
    }
}

impl ToyTemplateRecognizer {
    pub fn new() -> Self {
        let templates = charset()
            .map(|ch| {
                let cols = glyph_columns(ch).expect("charset glyph");
                let on = (0..GLYPH_H)
                    .flat_map(|r| (0..GLYPH_W).map(move |c| (r, c)))
                    .filter(|&(r, c)| glyph_pixel(cols, r, c))
                    .collect();
                (ch, on)
            })
            .collect();
        ToyTemplateRecognizer {
            templates,
            threshold: MATCH_THRESHOLD,
        }
    }

    /// Best glyph and correlation for the window at `(y, x)` and scale `s`.
    fn best_glyph(&self, f: &Frame, y: usize, x: usize, s: usize) -> Option<(char, f64)> {
        let (bh, bw) = (GLYPH_H * s, GLYPH_W * s);
        let n = (bh * bw) as f64;
        let sw = f.rect(&f.sum, y, x, bh, bw);
        let var_w = f.rect(&f.sq, y, x, bh, bw) - sw * sw / n;
        if var_w <= 1e-12 {
            return None;
        }
        let mut best: Option<(char, f64)> = None;
        for (ch, on) in &self.templates {
            // binary template: the cross term only needs the ink cells
            let k = (on.len() * s * s) as f64;
            let cross: f64 = on
                .iter()
                .map(|&(r, c)| {
                    (0..s)
                        .flat_map(|dy| (0..s).map(move |dx| (dy, dx)))
                        .map(|(dy, dx)| f.ink[(y + r * s + dy) * f.w + x + c * s + dx])
                        .sum::<f64>()
                })
                .sum();
            let cov = cross - sw * k / n;
            let var_t = k - k * k / n;
            let ncc = cov / (var_w * var_t).sqrt();
            if best.is_none_or(|(_, b)| ncc > b) {
                best = Some((*ch, ncc));
            }
        }
        best
    }

    /// Greedy non-maximum suppression along one text line. Returns the
    /// decoded string and its evidence (excess correlation times area).
    fn decode_line(&self, f: &Frame, y: usize, s: usize) -> (String, f64) {
        let bw = GLYPH_W * s;
        let mut cands: Vec<(usize, char, f64)> = (0..=f.w - bw)
            .filter_map(|x| self.best_glyph(f, y, x, s).map(|(c, v)| (x, c, v)))
            .filter(|&(_, _, v)| v >= self.threshold)
            .collect();
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let min_gap = (ADVANCE - 1) * s;
        let mut kept: Vec<(usize, char, f64)> = Vec::new();
        for c in cands {
            if kept.iter().all(|k| k.0.abs_diff(c.0) >= min_gap) {
                kept.push(c);
            }
        }
        kept.sort_by_key(|k| k.0);
        let evidence = kept.iter().map(|k| (k.2 - self.threshold) * (s * s) as f64).sum();
        (kept.iter().map(|k| k.1).collect(), evidence)
    }

    pub fn recognize(&self, img: &ImageTensor<f32>) -> String {
        let f = Frame::new(img);
        let Some((r0, r1)) = f.ink_rows() else {
            return String::new();
        };
        let max_scale = ((f.h * 11 / 20) / GLYPH_H).max(1);
        let mut best = (String::new(), 0.0);
        for s in 1..=max_scale {
            let (bh, bw) = (GLYPH_H * s, GLYPH_W * s);
            if bh > f.h || bw > f.w {
                break;
            }
            let top = f.h - bh;
            // rows consistent with the ink extent; everything if corrosion spills over
            let lo = (r1 + 1).saturating_sub(bh).min(top);
            let hi = r0.min(top);
            let rows = if lo <= hi { lo..=hi } else { 0..=top };
            for y in rows {
                let (text, ev) = self.decode_line(&f, y, s);
                if ev > best.1 {
                    best = (text, ev);
                }
            }
        }
        best.0
    }
}

impl Recognizer for ToyTemplateRecognizer {
    fn transcribe(&self, _id: &str, image: &ImageTensor<f32>) -> Result<String> {
        Ok(self.recognize(image))
    }
}

/// Transcripts from an external recognizer: one `id<TAB>text` line per image.
#[derive(Debug, Clone, Default)]
pub struct ExternalTranscriptFile {
    transcripts: HashMap<String, String>,
}

impl ExternalTranscriptFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut transcripts = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, t) = line
                .split_once('\t')
                .ok_or_else(|| Error::InvalidParam(format!("transcript line {} lacks a tab: {line:?}", n + 1)))?;
            if transcripts.insert(id.to_string(), t.to_string()).is_some() {
                return Err(Error::InvalidParam(format!("duplicate transcript for {id}")));
            }
        }
        Ok(ExternalTranscriptFile { transcripts })
    }

    pub fn len(&self) -> usize {
        self.transcripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transcripts.is_empty()
    }

    pub fn into_map(self) -> HashMap<String, String> {
        self.transcripts
    }
}

impl Recognizer for ExternalTranscriptFile {
    fn transcribe(&self, id: &str, _image: &ImageTensor<f32>) -> Result<String> {
        self.transcripts
            .get(id)
            .cloned()
            .ok_or_else(|| Error::InvalidParam(format!("no transcript for {id}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{render_text_image, RenderStyle};
    use crate::imgcore::ValueRange;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reads_clean_renders() {
        let r = ToyTemplateRecognizer::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (text, h, w) in [("HELLO", 64, 256), ("w0rld", 32, 128), ("Quick7", 32, 128), ("illegal1", 64, 256)] {
            for dark in [true, false] {
                let style = RenderStyle::random(&mut rng, Some(dark), 3, 3);
                let (img, _) = render_text_image(text, &style, h, w, &mut rng).unwrap();
                assert_eq!(r.recognize(&img), text, "{h}x{w} dark={dark}");
            }
        }
    }

    #[test]
    fn blank_image_reads_empty() {
        let img = ImageTensor::filled(32, 128, 3, ValueRange::Unit, 0.8).unwrap();
        assert_eq!(ToyTemplateRecognizer::new().recognize(&img), "");
    }

    #[test]
    fn transcript_file_lookup() {
        let t = ExternalTranscriptFile::parse("r0\tHELLO\nr1\t\n").unwrap();
        let img = ImageTensor::filled(1, 1, 1, ValueRange::Unit, 0.0).unwrap();
        assert_eq!(t.transcribe("r0", &img).unwrap(), "HELLO");
        assert_eq!(t.transcribe("r1", &img).unwrap(), "");
        assert!(t.transcribe("r2", &img).is_err());
        assert!(ExternalTranscriptFile::parse("r0 HELLO").is_err());
    }
}
