//! Image-quality and string-accuracy metrics.

use crate::error::{Error, Result};
use crate::imgcore::ImageTensor;
use crate::scalar::Scalar;

/// Reported when two images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape<S: Scalar>(a: &ImageTensor<S>, b: &ImageTensor<S>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all channels, for unit-range images.
pub fn psnr<S: Scalar>(a: &ImageTensor<S>, b: &ImageTensor<S>) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = k.iter().enumerate().map(|(i, kv)| kv * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean local SSIM on luminance with an 11x11 Gaussian window (sigma 1.5).
pub fn ssim<S: Scalar>(a: &ImageTensor<S>, b: &ImageTensor<S>) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (h, w, _) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidParam(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let la: Vec<f64> = a.luminance().iter().map(|v| v.as_f64()).collect();
    let lb: Vec<f64> = b.luminance().iter().map(|v| v.as_f64()).collect();
    let k = gaussian_kernel();
    let f = |v: &[f64]| filter_valid(v, h, w, &k);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (ma, mb) = (f(&la), f(&lb));
    let (saa, sbb, sab) = (f(&prod(&la, &la)), f(&prod(&lb, &lb)), f(&prod(&la, &lb)));
    let n = ma.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ua, ub) = (ma[i], mb[i]);
            let va = saa[i] - ua * ua;
            let vb = sbb[i] - ub * ub;
            let cov = sab[i] - ua * ub;
            ((2.0 * ua * ub + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ua * ua + ub * ub + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Levenshtein distance over characters.
pub fn edit_distance(p: &str, g: &str) -> usize {
    let p: Vec<char> = p.chars().collect();
    let g: Vec<char> = g.chars().collect();
    let mut prev: Vec<usize> = (0..=g.len()).collect();
    let mut cur = vec![0; g.len() + 1];
    for i in 1..=p.len() {
        cur[0] = i;
        for j in 1..=g.len() {
            let sub = prev[j - 1] + (p[i - 1] != g[j - 1]) as usize;
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[g.len()]
}

/// `1 - ED / max(len)` for one pair; two empty strings score 1.
pub fn pair_char_acc(p: &str, g: &str) -> f64 {
    let m = p.chars().count().max(g.chars().count());
    if m == 0 {
        return 1.0;
    }
    1.0 - edit_distance(p, g) as f64 / m as f64
}

fn check_lengths<A, B>(preds: &[A], gts: &[B]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::shape("accuracy lists", gts.len().to_string(), preds.len().to_string()));
    }
    Ok(())
}

/// Mean per-pair character accuracy, a fraction in `[0, 1]`. Case-insensitive
/// like [`word_acc`], so a perfect word score implies a perfect character score.
pub fn char_acc<P: AsRef<str>, G: AsRef<str>>(preds: &[P], gts: &[G]) -> Result<f64> {
    check_lengths(preds, gts)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| pair_char_acc(&p.as_ref().to_lowercase(), &g.as_ref().to_lowercase()))
        .sum();
    Ok(s / preds.len() as f64)
}

/// Case-insensitive exact-match rate, in percent.
pub fn word_acc<P: AsRef<str>, G: AsRef<str>>(preds: &[P], gts: &[G]) -> Result<f64> {
    check_lengths(preds, gts)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| p.as_ref().to_lowercase() == g.as_ref().to_lowercase())
        .count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::ValueRange;

    fn img(v: f64) -> ImageTensor<f64> {
        ImageTensor::filled(16, 16, 1, ValueRange::Unit, v).unwrap()
    }

    #[test]
    fn psnr_cases() {
        assert_eq!(psnr(&img(0.3), &img(0.3)).unwrap(), PSNR_CAP_DB);
        assert!((psnr(&img(0.3), &img(0.4)).unwrap() - 20.0).abs() < 1e-9);
        let rgb = ImageTensor::filled(16, 16, 3, ValueRange::Unit, 0.3).unwrap();
        assert!(psnr(&img(0.3), &rgb).is_err());
    }

    #[test]
    fn ssim_constant_images() {
        assert!((ssim(&img(0.0), &img(1.0)).unwrap() - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-9);
        assert!((ssim(&img(0.7), &img(0.7)).unwrap() - 1.0).abs() < 1e-9);
        let small = ImageTensor::filled(10, 40, 1, ValueRange::Unit, 0.5).unwrap();
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[10]);
    }

    #[test]
    fn string_metric_cases() {
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("abc", ""), 3);
        assert_eq!(edit_distance("", ""), 0);
        assert_eq!(pair_char_acc("", "abc"), 0.0);
        assert_eq!(pair_char_acc("", ""), 1.0);
        assert_eq!(word_acc(&["abc", "xyz"], &["abc", "xy"]).unwrap(), 50.0);
        assert_eq!(word_acc(&["ABC"], &["abc"]).unwrap(), 100.0);
        assert!(char_acc(&["a"], &["a", "b"]).is_err());
    }
}
