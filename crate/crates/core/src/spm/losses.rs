use super::features::FeatureExtractor;
use crate::error::{Error, Result};
use crate::imgcore::SegMap;
use crate::nnkit::Tensor;
use crate::scalar::Scalar;

/// Clamp applied to predictions inside the logarithms.
pub const SEG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub pix: f64,
    pub seg: f64,
    pub cha: f64,
    pub sty: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pix: 1.0,
            seg: 1.0,
            cha: 1.0,
            sty: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.pix, self.seg, self.cha, self.sty].iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidParam(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Positive-class weighting of the segmentation cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLossKind {
    /// `-(2 s ln p + (1 - s) ln(1 - p))`.
    #[default]
    Weighted,
    /// Plain binary cross-entropy.
    Standard,
}

impl SegLossKind {
    fn positive_weight(self) -> f64 {
        match self {
            SegLossKind::Weighted => 2.0,
            SegLossKind::Standard => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct SpmLossTerms {
    pub pix: f64,
    pub seg: f64,
    pub cha: f64,
    pub sty: f64,
    pub total: f64,
}

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// Mean absolute difference and its gradient with respect to `b`.
fn mae<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, context: &str) -> Result<(S, Tensor<S>)> {
    b.expect_shape(a.shape(), context)?;
    let n = S::from_usize_lossy(a.len());
    let loss = a.data().iter().zip(b.data()).map(|(&x, &y)| (y - x).abs()).sum::<S>() / n;
    let grad = b.zip_map(a, |y, x| sign(y - x) / n)?;
    Ok((loss, grad))
}

pub fn pix_term<S: Scalar>(s: &Tensor<S>, s_hat: &Tensor<S>) -> Result<(S, Tensor<S>)> {
    mae(s, s_hat, "loss_pix")
}

pub fn seg_term<S: Scalar>(s: &Tensor<S>, s_hat: &Tensor<S>, kind: SegLossKind) -> Result<(S, Tensor<S>)> {
    s_hat.expect_shape(s.shape(), "loss_seg")?;
    let n = S::from_usize_lossy(s.len());
    let (lo, hi) = (S::lit(SEG_CLAMP), S::lit(1.0 - SEG_CLAMP));
    let wpos = S::lit(kind.positive_weight());
    let mut loss = S::zero();
    let mut grad = Tensor::zeros(s.shape());
    for ((&t, &p), g) in s.data().iter().zip(s_hat.data()).zip(grad.data_mut()) {
        let pc = p.max(lo).min(hi);
        loss -= wpos * t * pc.ln() + (S::one() - t) * (S::one() - pc).ln();
        if p > lo && p < hi {
            *g = -(wpos * t / pc - (S::one() - t) / (S::one() - pc)) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Per-item `C x C` Gram matrices `F F^T / (C H W)`, as `[N, 1, C, C]`.
pub fn gram<S: Scalar>(features: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = features.shape();
    let z = S::one() / S::from_usize_lossy(c * h * w);
    let mut g = Tensor::zeros([n, 1, c, c]);
    for i in 0..n {
        let f = features.item(i);
        S::gemm(false, true, c, c, h * w, z, f, f, S::zero(), g.item_mut(i));
    }
    g
}

/// Gradient through `gram` given the upstream gradient on the Gram matrices.
fn gram_backward<S: Scalar>(features: &Tensor<S>, grad_gram: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = features.shape();
    let z = S::one() / S::from_usize_lossy(c * h * w);
    let mut out = Tensor::zeros(features.shape());
    for i in 0..n {
        let dg = grad_gram.item(i);
        let sym: Vec<S> = (0..c * c).map(|k| dg[k] + dg[(k % c) * c + k / c]).collect();
        S::gemm(false, false, c, h * w, c, z, &sym, features.item(i), S::zero(), out.item_mut(i));
    }
    out
}

/// Weighted sum of the four structure losses and its gradient with respect
/// to the prediction. Both inputs are `[N, 1, H, W]`.
pub fn spm_objective<S: Scalar>(
    s: &Tensor<S>,
    s_hat: &Tensor<S>,
    phi: &FeatureExtractor<S>,
    weights: &LossWeights,
    kind: SegLossKind,
) -> Result<(SpmLossTerms, Tensor<S>)> {
    weights.validate()?;
    let (pix, g_pix) = pix_term(s, s_hat)?;
    let (seg, g_seg) = seg_term(s, s_hat, kind)?;
    let f_s = phi.features(s)?;
    let (f_hat, cache) = phi.forward(s_hat)?;
    let (cha, mut g_feat) = mae(&f_s, &f_hat, "loss_cha")?;
    let (gram_s, gram_hat) = (gram(&f_s), gram(&f_hat));
    let (sty, g_gram) = mae(&gram_s, &gram_hat, "loss_sty")?;
    let g_sty = gram_backward(&f_hat, &g_gram);

    let w = |x: f64| S::lit(x);
    g_feat.scale(w(weights.cha));
    g_feat.add_assign(&{
        let mut g = g_sty;
        g.scale(w(weights.sty));
        g
    })?;
    let mut grad = phi.backward(&cache, &g_feat)?;
    for ((g, &a), &b) in grad.data_mut().iter_mut().zip(g_pix.data()).zip(g_seg.data()) {
        *g += w(weights.pix) * a + w(weights.seg) * b;
    }
    let terms = SpmLossTerms {
        pix: pix.as_f64(),
        seg: seg.as_f64(),
        cha: cha.as_f64(),
        sty: sty.as_f64(),
        total: weights.pix * pix.as_f64()
            + weights.seg * seg.as_f64()
            + weights.cha * cha.as_f64()
            + weights.sty * sty.as_f64(),
    };
    Ok((terms, grad))
}

fn pair<S: Scalar>(s: &SegMap<S>, s_hat: &SegMap<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    Ok((Tensor::from_segmaps(&[s])?, Tensor::from_segmaps(&[s_hat])?))
}

/// Pixel-level mean absolute error.
pub fn loss_pix<S: Scalar>(s: &SegMap<S>, s_hat: &SegMap<S>) -> Result<S> {
    let (a, b) = pair(s, s_hat)?;
    Ok(pix_term(&a, &b)?.0)
}

/// Segmentation cross-entropy with weight 2 on ink pixels; `s` is binary.
pub fn loss_seg<S: Scalar>(s: &SegMap<S>, s_hat: &SegMap<S>) -> Result<S> {
    loss_seg_with(s, s_hat, SegLossKind::Weighted)
}

pub fn loss_seg_with<S: Scalar>(s: &SegMap<S>, s_hat: &SegMap<S>, kind: SegLossKind) -> Result<S> {
    let (a, b) = pair(s, s_hat)?;
    Ok(seg_term(&a, &b, kind)?.0)
}

/// Mean absolute difference of perceptual features.
pub fn loss_cha<S: Scalar>(s: &SegMap<S>, s_hat: &SegMap<S>, phi: &FeatureExtractor<S>) -> Result<S> {
    let (a, b) = pair(s, s_hat)?;
    Ok(mae(&phi.features(&a)?, &phi.features(&b)?, "loss_cha")?.0)
}

/// Mean absolute difference of feature Gram matrices.
pub fn loss_sty<S: Scalar>(s: &SegMap<S>, s_hat: &SegMap<S>, phi: &FeatureExtractor<S>) -> Result<S> {
    let (a, b) = pair(s, s_hat)?;
    let ga = gram(&phi.features(&a)?);
    let gb = gram(&phi.features(&b)?);
    Ok(mae(&ga, &gb, "loss_sty")?.0)
}

pub fn loss_spm<S: Scalar>(
    s: &SegMap<S>,
    s_hat: &SegMap<S>,
    phi: &FeatureExtractor<S>,
    weights: &LossWeights,
) -> Result<S> {
    let (a, b) = pair(s, s_hat)?;
    let (terms, _) = spm_objective(&a, &b, phi, weights, SegLossKind::Weighted)?;
    Ok(S::lit(terms.total))
}
