//! 2-D convolution through im2col and GEMM.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Conv2dSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv2dSpec {
    /// `k x k` convolution, stride 1, "same" padding for odd `k`.
    pub fn same(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Conv2dSpec {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            groups: 1,
            bias: true,
        }
    }

    /// 3x3 convolution with dilation `d` that preserves spatial size.
    pub fn dilated(in_ch: usize, out_ch: usize, d: usize) -> Self {
        Conv2dSpec {
            padding: d,
            dilation: d,
            ..Self::same(in_ch, out_ch, 3)
        }
    }

    /// 3x3 stride-2 convolution that halves even spatial sizes.
    pub fn down(in_ch: usize, out_ch: usize) -> Self {
        Conv2dSpec {
            stride: 2,
            ..Self::same(in_ch, out_ch, 3)
        }
    }

    pub fn no_bias(self) -> Self {
        Conv2dSpec { bias: false, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::InvalidParam(format!(
                "conv kernel, stride, dilation and groups must be >= 1: {self:?}"
            )));
        }
        if self.in_ch % self.groups != 0 || self.out_ch % self.groups != 0 {
            return Err(Error::InvalidParam(format!(
                "groups {} must divide channels {} -> {}",
                self.groups, self.in_ch, self.out_ch
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch / self.groups, self.kernel, self.kernel]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let dim = |x: usize| {
            let padded = x + 2 * self.padding;
            (padded >= span).then(|| (padded - span) / self.stride + 1)
        };
        Some((dim(h)?, dim(w)?))
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn im2col<S: Scalar>(spec: &Conv2dSpec, g: &Geometry, x: &[S], group: usize, cols: &mut [S]) {
    let cin_g = spec.in_ch / spec.groups;
    let k = spec.kernel;
    let p = g.ho * g.wo;
    for ci in 0..cin_g {
        let plane = &x[(group * cin_g + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        *d = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { S::zero() };
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(spec: &Conv2dSpec, g: &Geometry, cols: &[S], group: usize, dx: &mut [S]) {
    let cin_g = spec.in_ch / spec.groups;
    let k = spec.kernel;
    let p = g.ho * g.wo;
    for ci in 0..cin_g {
        let plane = &mut dx[(group * cin_g + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..][..g.w];
                    for (ox, &v) in row[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn geometry(spec: &Conv2dSpec, x: &Tensor<impl Scalar>, context: &str) -> Result<Geometry> {
    let [_, c, h, w] = x.shape();
    if c != spec.in_ch {
        return Err(Error::shape(context, format!("{} input channels", spec.in_ch), format!("{:?}", x.shape())));
    }
    let (ho, wo) = spec
        .output_hw(h, w)
        .ok_or_else(|| Error::shape(context, "input at least as large as the dilated kernel", format!("{:?}", x.shape())))?;
    Ok(Geometry { c, h, w, ho, wo })
}

pub(crate) fn conv_forward<S: Scalar>(
    spec: &Conv2dSpec,
    weight: &[S],
    bias: Option<&[S]>,
    x: &Tensor<S>,
    context: &str,
) -> Result<Tensor<S>> {
    let g = geometry(spec, x, context)?;
    let n = x.n();
    let (cin_g, cout_g) = (spec.in_ch / spec.groups, spec.out_ch / spec.groups);
    let kk = cin_g * spec.kernel * spec.kernel;
    let p = g.ho * g.wo;
    let mut out = Tensor::zeros([n, spec.out_ch, g.ho, g.wo]);
    let item_out = spec.out_ch * p;
    out.data_mut()
        .par_chunks_mut(item_out)
        .enumerate()
        .for_each(|(i, o)| {
            let xi = x.item(i);
            let mut cols = vec![S::zero(); kk * p];
            for grp in 0..spec.groups {
                im2col(spec, &g, xi, grp, &mut cols);
                let wg = &weight[grp * cout_g * kk..(grp + 1) * cout_g * kk];
                let og = &mut o[grp * cout_g * p..(grp + 1) * cout_g * p];
                S::gemm(false, false, cout_g, p, kk, S::one(), wg, &cols, S::zero(), og);
            }
            if let Some(b) = bias {
                for (co, plane) in o.chunks_mut(p).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[co]);
                }
            }
        });
    debug_assert_eq!(g.c, spec.in_ch);
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`. Per-item partial weight
/// gradients are reduced in item order so results do not depend on the
/// thread count.
pub(crate) fn conv_backward<S: Scalar>(
    spec: &Conv2dSpec,
    weight: &[S],
    x: &Tensor<S>,
    grad_out: &Tensor<S>,
    context: &str,
) -> Result<(Tensor<S>, Vec<S>, Vec<S>)> {
    let g = geometry(spec, x, context)?;
    let n = x.n();
    grad_out.expect_shape([n, spec.out_ch, g.ho, g.wo], context)?;
    let (cin_g, cout_g) = (spec.in_ch / spec.groups, spec.out_ch / spec.groups);
    let kk = cin_g * spec.kernel * spec.kernel;
    let p = g.ho * g.wo;

    let partials: Vec<(Vec<S>, Vec<S>, Vec<S>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.item(i);
            let go = grad_out.item(i);
            let mut dx = vec![S::zero(); x.item_len()];
            let mut dw = vec![S::zero(); weight.len()];
            let mut cols = vec![S::zero(); kk * p];
            let mut dcols = vec![S::zero(); kk * p];
            for grp in 0..spec.groups {
                im2col(spec, &g, xi, grp, &mut cols);
                let gog = &go[grp * cout_g * p..(grp + 1) * cout_g * p];
                let wg = &weight[grp * cout_g * kk..(grp + 1) * cout_g * kk];
                let dwg = &mut dw[grp * cout_g * kk..(grp + 1) * cout_g * kk];
                S::gemm(false, true, cout_g, kk, p, S::one(), gog, &cols, S::zero(), dwg);
                S::gemm(true, false, kk, p, cout_g, S::one(), wg, gog, S::zero(), &mut dcols);
                col2im_add(spec, &g, &dcols, grp, &mut dx);
            }
            let db = go.chunks(p).map(|plane| plane.iter().copied().sum()).collect();
            (dx, dw, db)
        })
        .collect();

    let mut dx = Tensor::zeros(x.shape());
    let mut dw = vec![S::zero(); weight.len()];
    let mut db = vec![S::zero(); spec.out_ch];
    for (i, (pdx, pdw, pdb)) in partials.into_iter().enumerate() {
        dx.item_mut(i).copy_from_slice(&pdx);
        dw.iter_mut().zip(&pdw).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&pdb).for_each(|(a, &b)| *a += b);
    }
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(spec: &Conv2dSpec, w: &[f64], b: &[f64], x: &Tensor<f64>) -> Tensor<f64> {
        let [n, _, h, wd] = x.shape();
        let (ho, wo) = spec.output_hw(h, wd).unwrap();
        let (cin_g, cout_g) = (spec.in_ch / spec.groups, spec.out_ch / spec.groups);
        let k = spec.kernel;
        let mut out = Tensor::zeros([n, spec.out_ch, ho, wo]);
        let ow = out.shape();
        for ni in 0..n {
            for co in 0..spec.out_ch {
                let grp = co / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = if spec.bias { b[co] } else { 0.0 };
                        for ci in 0..cin_g {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let wv = w[((co * cin_g + ci) * k + ky) * k + kx];
                                    acc += wv * x.at(ni, grp * cin_g + ci, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.data_mut()[((ni * ow[1] + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let specs = [
            Conv2dSpec::dilated(3, 4, 2),
            Conv2dSpec::down(2, 3),
            Conv2dSpec { groups: 2, ..Conv2dSpec::same(4, 6, 3) },
            Conv2dSpec::same(2, 2, 1).no_bias(),
            Conv2dSpec { padding: 0, ..Conv2dSpec::same(1, 2, 3) },
        ];
        for spec in specs {
            let x = Tensor::<f64>::randn([2, spec.in_ch, 8, 8], 1.0, &mut rng);
            let wl: usize = spec.weight_shape().iter().product();
            let w = Tensor::<f64>::randn([1, 1, 1, wl], 1.0, &mut rng).into_data();
            let b = Tensor::<f64>::randn([1, 1, 1, spec.out_ch], 1.0, &mut rng).into_data();
            let fast = conv_forward(&spec, &w, spec.bias.then_some(&b[..]), &x, "t").unwrap();
            let slow = naive(&spec, &w, &b, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dilated_keeps_size() {
        let spec = Conv2dSpec::dilated(1, 1, 2);
        assert_eq!(spec.output_hw(8, 8), Some((8, 8)));
        assert_eq!(Conv2dSpec::down(1, 1).output_hw(32, 128), Some((16, 64)));
        assert_eq!(Conv2dSpec { padding: 0, ..spec }.output_hw(4, 4), None);
    }

    #[test]
    fn rejects_bad_groups() {
        assert!(Conv2dSpec { groups: 3, ..Conv2dSpec::same(4, 6, 3) }.validate().is_err());
        assert!(Conv2dSpec { dilation: 0, ..Conv2dSpec::same(4, 6, 3) }.validate().is_err());
    }
}
