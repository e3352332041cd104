//! Raster types shared by every stage: images with an explicit value-range
//! tag, binary corrosion masks, soft segmentation maps, bilinear resizing and
//! 8-bit PNG exchange.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Numeric interval an [`ImageTensor`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ValueRange {
    /// `[0, 1]`, used for files and metrics.
    Unit,
    /// `[-1, 1]`, used inside the diffusion model.
    Model,
}

impl ValueRange {
    fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Model => (-1.0, 1.0),
        }
    }
}

/// `height x width x channels` raster stored row-major as `(h, w, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<S = f32> {
    height: usize,
    width: usize,
    channels: usize,
    range: ValueRange,
    data: Vec<S>,
}

impl<S: Scalar> ImageTensor<S> {
    pub fn new(height: usize, width: usize, channels: usize, range: ValueRange, data: Vec<S>) -> Result<Self> {
        check_dims(height, width)?;
        if channels != 1 && channels != 3 {
            return Err(Error::Contract(format!("image channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "ImageTensor::new",
                height * width * channels,
                data.len(),
            ));
        }
        let (lo, hi) = range.bounds();
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.as_f64() >= lo && v.as_f64() <= hi))
        {
            return Err(Error::Contract(format!(
                "value {v} at index {i} outside {range:?} range [{lo}, {hi}]"
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            range,
            data,
        })
    }

    /// Like [`ImageTensor::new`] but clamps out-of-range (and NaN) values
    /// instead of rejecting them. Used for network outputs.
    pub fn from_clamped(height: usize, width: usize, channels: usize, range: ValueRange, mut data: Vec<S>) -> Result<Self> {
        let (lo, hi) = range.bounds();
        let (lo, hi) = (S::lit(lo), S::lit(hi));
        for v in data.iter_mut() {
            *v = if v.is_nan() { lo } else { v.max(lo).min(hi) };
        }
        Self::new(height, width, channels, range, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, range: ValueRange, value: S) -> Result<Self> {
        Self::new(height, width, channels, range, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> S {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Mutation that keeps the value inside the tagged range.
    pub(crate) fn set_pixel(&mut self, y: usize, x: usize, value: S) {
        let base = (y * self.width + x) * self.channels;
        for c in 0..self.channels {
            self.data[base + c] = value;
        }
    }

    /// `v' = 2v - 1`.
    pub fn to_model_range(&self) -> Result<Self> {
        self.expect_range(ValueRange::Unit, "to_model_range")?;
        let two = S::lit(2.0);
        let data = self.data.iter().map(|&v| (two * v - S::one()).max(-S::one()).min(S::one())).collect();
        Ok(self.with_data(ValueRange::Model, data))
    }

    /// `v' = (v + 1) / 2`.
    pub fn to_unit_range(&self) -> Result<Self> {
        self.expect_range(ValueRange::Model, "to_unit_range")?;
        let half = S::lit(0.5);
        let data = self.data.iter().map(|&v| ((v + S::one()) * half).max(S::zero()).min(S::one())).collect();
        Ok(self.with_data(ValueRange::Unit, data))
    }

    pub fn expect_range(&self, want: ValueRange, op: &str) -> Result<()> {
        if self.range != want {
            return Err(Error::Contract(format!(
                "{op} expects a {want:?}-range image, got {:?}",
                self.range
            )));
        }
        Ok(())
    }

    /// Per-pixel luminance (ITU-R BT.601 weights for RGB).
    pub fn luminance(&self) -> Vec<S> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let (wr, wg, wb) = (S::lit(0.299), S::lit(0.587), S::lit(0.114));
        self.data
            .chunks_exact(3)
            .map(|p| wr * p[0] + wg * p[1] + wb * p[2])
            .collect()
    }

    /// Converts between gray and RGB: gray is replicated, RGB collapses to luminance.
    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (1, 3) => {
                let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
                ImageTensor::new(self.height, self.width, 3, self.range, data)
            }
            (3, 1) => ImageTensor::from_clamped(self.height, self.width, 1, self.range, self.luminance()),
            (_, c) => Err(Error::Contract(format!("unsupported channel count {c}"))),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ImageTensor<T> {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            range: self.range,
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    pub fn min_max(&self) -> (S, S) {
        self.data.iter().fold((S::infinity(), S::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    fn with_data(&self, range: ValueRange, data: Vec<S>) -> Self {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            range,
            data,
        }
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Contract(format!("raster must be at least 1x1, got {height}x{width}")));
    }
    Ok(())
}

/// Binary corrosion mask, `1` marks a corroded pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskBitmap {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl MaskBitmap {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        check_dims(height, width)?;
        if bits.len() != height * width {
            return Err(Error::shape("MaskBitmap::new", height * width, bits.len()));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Contract(format!("mask bit must be 0 or 1, got {b}")));
        }
        Ok(MaskBitmap { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        MaskBitmap {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        MaskBitmap {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn union_with(&mut self, other: &MaskBitmap) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }
}

/// Soft or binary segmentation map in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMap<S = f32> {
    height: usize,
    width: usize,
    values: Vec<S>,
}

impl<S: Scalar> SegMap<S> {
    pub fn new(height: usize, width: usize, values: Vec<S>) -> Result<Self> {
        check_dims(height, width)?;
        if values.len() != height * width {
            return Err(Error::shape("SegMap::new", height * width, values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
            return Err(Error::Contract(format!("segmentation value {v} outside [0, 1]")));
        }
        Ok(SegMap { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        SegMap {
            height,
            width,
            values: vec![S::zero(); height * width],
        }
    }

    pub fn filled(height: usize, width: usize, v: S) -> Result<Self> {
        Self::new(height, width, vec![v; height * width])
    }

    pub fn from_mask(mask: &MaskBitmap) -> Self {
        SegMap {
            height: mask.height,
            width: mask.width,
            values: mask.bits.iter().map(|&b| if b != 0 { S::one() } else { S::zero() }).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> S {
        self.values[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == S::zero() || v == S::one())
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64()).sum::<f64>() / self.values.len() as f64
    }

    /// As a single-channel unit-range image.
    pub fn to_image(&self) -> ImageTensor<S> {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: 1,
            range: ValueRange::Unit,
            data: self.values.clone(),
        }
    }

    pub fn from_image(img: &ImageTensor<S>) -> Result<Self> {
        img.expect_range(ValueRange::Unit, "SegMap::from_image")?;
        SegMap::new(img.height(), img.width(), img.luminance())
    }

    pub fn cast<T: Scalar>(&self) -> SegMap<T> {
        SegMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }
}

/// Bilinear resize with half-pixel centers. Same-size input is copied verbatim.
pub fn resize_to_canonical<S: Scalar>(img: &ImageTensor<S>, height: usize, width: usize) -> Result<ImageTensor<S>> {
    check_dims(height, width)?;
    if img.height == height && img.width == width {
        return Ok(img.clone());
    }
    let c = img.channels;
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let axis = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..width).map(|x| axis(x, sx, img.width)).collect();
    let mut data = Vec::with_capacity(height * width * c);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sy, img.height);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = img.get(y0, x0, ch).as_f64() * (1.0 - fx) + img.get(y0, x1, ch).as_f64() * fx;
                let bot = img.get(y1, x0, ch).as_f64() * (1.0 - fx) + img.get(y1, x1, ch).as_f64() * fx;
                data.push(S::lit(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    // convex combinations stay in range up to rounding
    ImageTensor::from_clamped(height, width, c, img.range, data)
}

fn open_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let bad = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(bad("16-bit PNGs are not supported".into()));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    buf.truncate(info.line_size * info.height as usize);
    Ok((info, buf))
}

/// Reads an 8-bit gray or RGB PNG (alpha is dropped, palettes expanded) as a
/// unit-range image.
pub fn read_png(path: impl AsRef<Path>) -> Result<ImageTensor<f32>> {
    let path = path.as_ref();
    let (info, buf) = open_png(path)?;
    let (src_c, dst_c) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                reason: format!("unsupported color type {other:?}"),
            })
        }
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = Vec::with_capacity(h * w * dst_c);
    for row in buf.chunks_exact(info.line_size) {
        for px in row[..w * src_c].chunks_exact(src_c) {
            for &b in &px[..dst_c] {
                data.push(b as f32 / 255.0);
            }
        }
    }
    ImageTensor::new(h, w, dst_c, ValueRange::Unit, data)
}

fn write_raw(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a unit-range image as 8-bit gray or RGB.
pub fn write_png<S: Scalar>(path: impl AsRef<Path>, img: &ImageTensor<S>) -> Result<()> {
    img.expect_range(ValueRange::Unit, "write_png")?;
    let color = if img.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    };
    let bytes: Vec<u8> = img.data.iter().map(|v| quantize(v.as_f64())).collect();
    write_raw(path.as_ref(), img.width, img.height, color, png::BitDepth::Eight, &bytes)
}

/// Writes a mask as a 1-bit grayscale PNG (white = corroded).
pub fn write_mask_png(path: impl AsRef<Path>, mask: &MaskBitmap) -> Result<()> {
    let stride = mask.width.div_ceil(8);
    let mut bytes = vec![0u8; stride * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                bytes[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    write_raw(path.as_ref(), mask.width, mask.height, png::ColorType::Grayscale, png::BitDepth::One, &bytes)
}

/// Reads any gray PNG as a mask; values at or above mid-gray are set.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<MaskBitmap> {
    let img = read_png(path)?;
    let bits = img.luminance().iter().map(|&v| (v >= 0.5) as u8).collect();
    MaskBitmap::new(img.height(), img.width(), bits)
}

pub fn write_seg_png<S: Scalar>(path: impl AsRef<Path>, seg: &SegMap<S>) -> Result<()> {
    write_png(path, &seg.to_image())
}

pub fn read_seg_png(path: impl AsRef<Path>) -> Result<SegMap<f32>> {
    SegMap::from_image(&read_png(path)?)
}
