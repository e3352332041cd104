use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::render::{render_text_image, InkPolarity, RenderStyle};
use crate::corrosion::{apply_corrosion, corrosion_ratio, sample_mask_with_ratio, CorrosionForm, CorrosionSpec, Fill};
use crate::error::{Error, Result};
use crate::imgcore::{ImageTensor, MaskBitmap, SegMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One training tuple: corrupted image, its corrosion mask, the intact image,
/// both segmentation maps, and the text label.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub corrupted_image: ImageTensor<f32>,
    pub corruption_mask: MaskBitmap,
    pub intact_image: ImageTensor<f32>,
    pub corrupted_segmask: SegMap<f32>,
    pub intact_segmask: SegMap<f32>,
    pub text_label: String,
    pub corrosion_form: CorrosionForm,
    pub corrosion_ratio: f64,
    pub fill: Fill,
    pub seed: u64,
    pub split: Split,
}

impl DatasetRecord {
    pub fn shape(&self) -> (usize, usize) {
        (self.intact_image.height(), self.intact_image.width())
    }
}

/// Samples a mask per `cspec` and derives the corrupted image and the
/// corrupted segmentation (intact ink with corroded pixels cleared).
pub fn build_record<R: Rng + ?Sized>(
    id: impl Into<String>,
    intact: ImageTensor<f32>,
    segmask: SegMap<f32>,
    label: impl Into<String>,
    cspec: &CorrosionSpec,
    rng: &mut R,
) -> Result<DatasetRecord> {
    let (h, w) = (intact.height(), intact.width());
    if segmask.height() != h || segmask.width() != w {
        return Err(Error::shape(
            "build_record",
            format!("{h}x{w}"),
            format!("{}x{}", segmask.height(), segmask.width()),
        ));
    }
    let mask = sample_mask_with_ratio(cspec, h, w, rng)?;
    build_record_with_mask(id, intact, segmask, label, cspec, mask)
}

pub fn build_record_with_mask(
    id: impl Into<String>,
    intact: ImageTensor<f32>,
    segmask: SegMap<f32>,
    label: impl Into<String>,
    cspec: &CorrosionSpec,
    mask: MaskBitmap,
) -> Result<DatasetRecord> {
    let corrupted = apply_corrosion(&intact, &mask, cspec.fill)?;
    let corrupted_seg = SegMap::new(
        segmask.height(),
        segmask.width(),
        segmask
            .values()
            .iter()
            .zip(mask.bits())
            .map(|(&s, &m)| if m != 0 { 0.0 } else { s })
            .collect(),
    )?;
    Ok(DatasetRecord {
        id: id.into(),
        corrupted_image: corrupted,
        corrosion_ratio: corrosion_ratio(&mask),
        corruption_mask: mask,
        intact_image: intact,
        corrupted_segmask: corrupted_seg,
        intact_segmask: segmask,
        text_label: label.into(),
        corrosion_form: cspec.form,
        fill: cspec.fill,
        seed: cspec.rng_seed,
        split: Split::Train,
    })
}

/// Scene-text style (3 channels, mixed polarity, black fill) or handwriting
/// style (gray, dark ink, white fill).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextStyle {
    Scene,
    Handwritten,
}

impl TextStyle {
    pub fn fill(self) -> Fill {
        match self {
            TextStyle::Scene => Fill::Black,
            TextStyle::Handwritten => Fill::White,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            TextStyle::Scene => 3,
            TextStyle::Handwritten => 1,
        }
    }

    pub fn polarity(self) -> Option<InkPolarity> {
        match self {
            TextStyle::Scene => None,
            TextStyle::Handwritten => Some(InkPolarity::Darker),
        }
    }
}

const LEXICON: &[&str] = &[
    "OPEN", "CLOSED", "EXIT", "STOP", "HOTEL", "PARK", "CAFE", "BANK", "SALE", "SHOP", "MARKET", "OFFICE",
    "TAXI", "BUS", "TRAIN", "POLICE", "MUSEUM", "LIBRARY", "GARDEN", "STREET", "ROAD", "BRIDGE", "CITY",
    "HOUSE", "DOOR", "WATER", "COFFEE", "PIZZA", "BAKERY", "GROCERY", "PHONE", "POST", "SCHOOL", "MUSIC",
    "CINEMA", "THEATRE", "SPORT", "HEALTH", "DENTAL", "CLINIC", "FRESH", "FOOD", "DRINK", "BEER", "WINE",
    "TOWER", "PLAZA", "CENTER", "NORTH", "SOUTH", "EAST", "WEST", "LEFT", "RIGHT", "ENTRY", "PUSH", "PULL",
    "FIRE", "ALARM", "HELP", "INFO", "TICKET", "GATE", "PLATFORM", "FLOOR", "LEVEL", "ROOM", "SUITE", "KING",
    "QUEEN", "ROYAL", "GRAND", "STAR", "MOON", "SUN", "LIGHT", "DARK", "RED", "BLUE", "GREEN", "GOLD",
    "SILVER", "HAPPY", "LUCKY", "DREAM", "HOME", "WORLD", "TIME", "LOVE", "PEACE", "FRIEND", "FAMILY",
    "2024", "365", "24H", "NO1", "A1", "B52", "ZONE", "EXPRESS", "QUICK", "JAZZ", "VOX", "YES", "OK",
    "hello", "world", "river", "stone", "paper", "quiet", "bright", "window", "letter", "garden", "silver",
    "Market", "Office", "Coffee", "Station", "Avenue", "Square", "Corner",
];

pub fn lexicon() -> &'static [&'static str] {
    LEXICON
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    /// Words from the bundled lexicon.
    Lexicon,
    /// Random alphanumeric strings with length in the given inclusive range.
    Random { min_len: usize, max_len: usize },
}

impl TextSource {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        match self {
            TextSource::Lexicon => LEXICON[rng.random_range(0..LEXICON.len())].to_string(),
            TextSource::Random { min_len, max_len } => {
                let chars: Vec<char> = super::font::charset().collect();
                let n = rng.random_range(*min_len..=(*max_len).max(*min_len));
                (0..n).map(|_| chars[rng.random_range(0..chars.len())]).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetConfig {
    pub records: usize,
    pub height: usize,
    pub width: usize,
    pub style: TextStyle,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    /// Relative weights for convex hull, irregular region and quick draw.
    pub form_mix: [f64; 3],
    pub test_fraction: f64,
    pub text: TextSource,
    pub jitter: usize,
    pub data_seed: u64,
    pub split_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            records: 100,
            height: 64,
            width: 256,
            style: TextStyle::Scene,
            ratio_lo: crate::corrosion::DATASET_RATIO_LO,
            ratio_hi: crate::corrosion::DATASET_RATIO_HI,
            form_mix: [1.0, 1.0, 1.0],
            test_fraction: 0.2,
            text: TextSource::Lexicon,
            jitter: 3,
            data_seed: 0,
            split_seed: 0,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-record seeds.
pub fn mix_seed(master: u64, salt: u64) -> u64 {
    let mut z = master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_id(id: &str) -> u64 {
    // FNV-1a
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn record_id(index: usize) -> String {
    format!("rec_{index:06}")
}

fn pick_form<R: Rng + ?Sized>(mix: &[f64; 3], rng: &mut R) -> CorrosionForm {
    let total: f64 = mix.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (form, &w) in CorrosionForm::ALL.iter().zip(mix) {
        if u < w {
            return *form;
        }
        u -= w;
    }
    CorrosionForm::QuickDraw
}

/// Builds one record entirely from `(data_seed, index)`.
pub fn generate_record(cfg: &DatasetConfig, index: usize) -> Result<DatasetRecord> {
    let id = record_id(index);
    let seed = mix_seed(cfg.data_seed, hash_id(&id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = cfg.text.sample(&mut rng);
    let dark = cfg.style.polarity().map(|p| p == InkPolarity::Darker);
    let style = RenderStyle::random(&mut rng, dark, cfg.jitter, cfg.style.channels());
    let (intact, seg) = render_text_image(&text, &style, cfg.height, cfg.width, &mut rng)?;
    let form = pick_form(&cfg.form_mix, &mut rng);
    let cspec = CorrosionSpec::new(form, cfg.ratio_lo, cfg.ratio_hi, cfg.style.fill(), rng.random())?;
    build_record(id, intact, seg, text, &cspec, &mut cspec.rng())
}

/// Whole dataset, records in index order, splits assigned.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<DatasetRecord>> {
    if cfg.form_mix.iter().any(|&w| w < 0.0) || cfg.form_mix.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidParam("form mix weights must be non-negative with a positive sum".into()));
    }
    if !(0.0..=1.0).contains(&cfg.test_fraction) {
        return Err(Error::InvalidParam("test fraction must lie in [0, 1]".into()));
    }
    let mut records = (0..cfg.records)
        .into_par_iter()
        .map(|i| generate_record(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let test = test_ids(&ids, cfg.test_fraction, cfg.split_seed);
    for r in &mut records {
        r.split = if test.contains(&r.id) { Split::Test } else { Split::Train };
    }
    Ok(records)
}

/// Deterministic test-set selection keyed on `(split_seed, id)`.
pub fn test_ids(ids: &[&str], test_fraction: f64, split_seed: u64) -> std::collections::HashSet<String> {
    let mut keyed: Vec<(u64, &str)> = ids.iter().map(|id| (mix_seed(split_seed, hash_id(id)), *id)).collect();
    keyed.sort();
    let n_test = (ids.len() as f64 * test_fraction).round() as usize;
    keyed.into_iter().take(n_test).map(|(_, id)| id.to_string()).collect()
}

pub fn split_of<'a>(records: &'a [DatasetRecord], split: Split) -> Vec<&'a DatasetRecord> {
    records.iter().filter(|r| r.split == split).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::render::RenderStyle;

    fn intact(text: &str, seed: u64) -> (ImageTensor<f32>, SegMap<f32>) {
        let style = RenderStyle::new(0.1, 0.9, 2, 3).unwrap();
        render_text_image(text, &style, 32, 128, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn record_postconditions() {
        let (img, seg) = intact("PARK", 1);
        for seed in 0..10 {
            let cspec = CorrosionSpec::new(CorrosionForm::ConvexHull, 0.05, 0.2, Fill::Black, seed).unwrap();
            let rec = build_record("r", img.clone(), seg.clone(), "PARK", &cspec, &mut cspec.rng()).unwrap();
            assert!((0.05..=0.2).contains(&rec.corrosion_ratio));
            assert_eq!(
                rec.corrupted_image,
                apply_corrosion(&rec.intact_image, &rec.corruption_mask, Fill::Black).unwrap()
            );
            for ((&c, &s), &m) in rec
                .corrupted_segmask
                .values()
                .iter()
                .zip(rec.intact_segmask.values())
                .zip(rec.corruption_mask.bits())
            {
                assert!(c <= s);
                if m == 0 {
                    assert_eq!(c, s);
                }
            }
        }
    }

    #[test]
    fn disjoint_mask_keeps_segmentation() {
        let (img, seg) = intact("OK", 2);
        let mut mask = MaskBitmap::zeros(32, 128);
        for y in 0..32 {
            for x in 0..128 {
                if seg.get(y, x) == 0.0 && x < 10 {
                    mask.set(y, x, true);
                }
            }
        }
        let cspec = CorrosionSpec::new(CorrosionForm::IrregularRegion, 0.05, 0.6, Fill::Black, 0).unwrap();
        let rec = build_record_with_mask("r", img, seg.clone(), "OK", &cspec, mask).unwrap();
        assert_eq!(rec.corrupted_segmask, seg);
    }

    #[test]
    fn covering_mask_clears_segmentation() {
        let (img, seg) = intact("STOP", 3);
        let bits = seg.values().iter().map(|&v| (v > 0.0) as u8).collect();
        let mask = MaskBitmap::new(32, 128, bits).unwrap();
        let cspec = CorrosionSpec::new(CorrosionForm::QuickDraw, 0.05, 0.6, Fill::White, 0).unwrap();
        let rec = build_record_with_mask("r", img, seg, "STOP", &cspec, mask).unwrap();
        assert!(rec.corrupted_segmask.values().iter().all(|&v| v == 0.0));
        assert!(rec.intact_segmask.is_binary());
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let ids: Vec<String> = (0..200).map(record_id).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let a = test_ids(&refs, 0.25, 5);
        assert_eq!(a, test_ids(&refs, 0.25, 5));
        assert_eq!(a.len(), 50);
        assert_ne!(a, test_ids(&refs, 0.25, 6));
    }

    #[test]
    fn lexicon_renders() {
        for w in lexicon() {
            super::super::render::check_text(w).unwrap();
        }
    }
}
