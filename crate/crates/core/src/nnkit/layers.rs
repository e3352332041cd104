use rand::Rng;

use super::conv::{conv_backward, conv_forward, Conv2dSpec};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LayerSpec {
    Conv2d(Conv2dSpec),
    /// Fully connected over the flattened `C x H x W` item; output `[n, out, 1, 1]`.
    Linear { in_features: usize, out_features: usize },
    GroupNorm { groups: usize, channels: usize },
    BatchNorm { channels: usize },
    /// `alpha = 1`.
    Elu,
    Swish,
    Sigmoid,
    UpsampleNearest { factor: usize },
    /// Sum of two inputs; the second may be `[n, c, 1, 1]` and is broadcast
    /// over space.
    Residual,
    /// Channel concatenation of any number of inputs.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// BatchNorm normalizes with batch statistics.
    Train,
    /// BatchNorm normalizes with running statistics.
    Eval,
}

#[derive(Debug, Clone)]
enum Saved<S> {
    Input(Tensor<S>),
    Output(Tensor<S>),
    Norm {
        xhat: Tensor<S>,
        inv_std: Vec<S>,
        mean: Vec<S>,
        var: Vec<S>,
        batch_stats: bool,
    },
    Shape([usize; 4]),
    Residual { broadcast: bool, b_shape: [usize; 4] },
    Concat(Vec<[usize; 4]>),
}

/// What a backward pass needs from its forward pass. Tied to the producing
/// layer and to the optimizer step it was computed at.
#[derive(Debug, Clone)]
pub struct Cache<S> {
    layer: String,
    step: u64,
    saved: Saved<S>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Result<Self> {
        let layer = Layer { name: name.into(), spec };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        match self.spec {
            LayerSpec::Conv2d(c) => c.validate(),
            LayerSpec::GroupNorm { groups, channels } if groups == 0 || channels % groups != 0 => Err(
                Error::InvalidParam(format!("{}: groups {groups} must divide channels {channels}", self.name)),
            ),
            LayerSpec::UpsampleNearest { factor: 0 } => {
                Err(Error::InvalidParam(format!("{}: upsample factor must be >= 1", self.name)))
            }
            _ => Ok(()),
        }
    }

    fn p(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }

    /// Registers this layer's parameters with their default initialization.
    pub fn init_params<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        match self.spec {
            LayerSpec::Conv2d(c) => {
                let ws = c.weight_shape();
                let fan_in = ws[1] * ws[2] * ws[3];
                let w = Tensor::<S>::randn([1, 1, 1, ws.iter().product()], (2.0 / fan_in as f64).sqrt(), rng);
                store.insert(&self.p("weight"), &ws, w.into_data(), true)?;
                if c.bias {
                    store.insert(&self.p("bias"), &[c.out_ch], vec![S::zero(); c.out_ch], true)?;
                }
            }
            LayerSpec::Linear { in_features, out_features } => {
                let w = Tensor::<S>::randn([1, 1, out_features, in_features], (1.0 / in_features as f64).sqrt(), rng);
                store.insert(&self.p("weight"), &[out_features, in_features], w.into_data(), true)?;
                store.insert(&self.p("bias"), &[out_features], vec![S::zero(); out_features], true)?;
            }
            LayerSpec::GroupNorm { channels, .. } | LayerSpec::BatchNorm { channels } => {
                store.insert(&self.p("gamma"), &[channels], vec![S::one(); channels], true)?;
                store.insert(&self.p("beta"), &[channels], vec![S::zero(); channels], true)?;
                if matches!(self.spec, LayerSpec::BatchNorm { .. }) {
                    store.insert(&self.p("running_mean"), &[channels], vec![S::zero(); channels], false)?;
                    store.insert(&self.p("running_var"), &[channels], vec![S::one(); channels], false)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn cache<S>(&self, params: &ParamStore<S>, saved: Saved<S>) -> Cache<S> {
        Cache {
            layer: self.name.clone(),
            step: params.step,
            saved,
        }
    }

    fn single<'a, S>(&self, inputs: &[&'a Tensor<S>]) -> Result<&'a Tensor<S>> {
        match inputs {
            [x] => Ok(x),
            _ => Err(Error::Contract(format!("{} expects one input, got {}", self.name, inputs.len()))),
        }
    }

    fn expect_channels<S: Scalar>(&self, x: &Tensor<S>, c: usize) -> Result<()> {
        if x.c() != c {
            return Err(Error::shape(&self.name, format!("[_, {c}, _, _]"), format!("{:?}", x.shape())));
        }
        Ok(())
    }

    /// Pure forward pass.
    pub fn forward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        inputs: &[&Tensor<S>],
        mode: Mode,
    ) -> Result<(Tensor<S>, Cache<S>)> {
        match self.spec {
            LayerSpec::Conv2d(c) => {
                let x = self.single(inputs)?;
                let w = params.value(&self.p("weight"))?;
                let b = if c.bias { Some(params.value(&self.p("bias"))?) } else { None };
                let y = conv_forward(&c, w, b, x, &self.name)?;
                Ok((y, self.cache(params, Saved::Input(x.clone()))))
            }
            LayerSpec::Linear { in_features, out_features } => {
                let x = self.single(inputs)?;
                if x.item_len() != in_features {
                    return Err(Error::shape(&self.name, format!("{in_features} features"), format!("{:?}", x.shape())));
                }
                let w = params.value(&self.p("weight"))?;
                let b = params.value(&self.p("bias"))?;
                let n = x.n();
                let mut y = Tensor::zeros([n, out_features, 1, 1]);
                for row in y.data_mut().chunks_mut(out_features) {
                    row.copy_from_slice(b);
                }
                S::gemm(false, true, n, out_features, in_features, S::one(), x.data(), w, S::one(), y.data_mut());
                Ok((y, self.cache(params, Saved::Input(x.clone()))))
            }
            LayerSpec::GroupNorm { groups, channels } => {
                let x = self.single(inputs)?;
                self.expect_channels(x, channels)?;
                let units = group_units(x.shape(), groups);
                self.norm_forward(params, x, &units, None)
            }
            LayerSpec::BatchNorm { channels } => {
                let x = self.single(inputs)?;
                self.expect_channels(x, channels)?;
                let units = channel_units(x.shape());
                let running = if mode == Mode::Eval {
                    Some((params.value(&self.p("running_mean"))?, params.value(&self.p("running_var"))?))
                } else {
                    None
                };
                self.norm_forward(params, x, &units, running)
            }
            LayerSpec::Elu => {
                let x = self.single(inputs)?;
                let y = x.map(|v| if v > S::zero() { v } else { v.exp_m1() });
                Ok((y, self.cache(params, Saved::Input(x.clone()))))
            }
            LayerSpec::Swish => {
                let x = self.single(inputs)?;
                let y = x.map(|v| v * sigmoid(v));
                Ok((y, self.cache(params, Saved::Input(x.clone()))))
            }
            LayerSpec::Sigmoid => {
                let x = self.single(inputs)?;
                let y = x.map(sigmoid);
                Ok((y.clone(), self.cache(params, Saved::Output(y))))
            }
            LayerSpec::UpsampleNearest { factor: f } => {
                let x = self.single(inputs)?;
                let [n, c, h, w] = x.shape();
                let mut y = Tensor::zeros([n, c, h * f, w * f]);
                let (ho, wo) = (h * f, w * f);
                for (plane_out, plane_in) in y.data_mut().chunks_mut(ho * wo).zip(x.data().chunks(h * w)) {
                    for oy in 0..ho {
                        let src = &plane_in[(oy / f) * w..][..w];
                        for (ox, d) in plane_out[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                            *d = src[ox / f];
                        }
                    }
                }
                Ok((y, self.cache(params, Saved::Shape(x.shape()))))
            }
            LayerSpec::Residual => {
                let [a, b] = inputs else {
                    return Err(Error::Contract(format!("{} expects two inputs, got {}", self.name, inputs.len())));
                };
                let [n, c, h, w] = a.shape();
                let broadcast = b.shape() != a.shape();
                if broadcast && b.shape() != [n, c, 1, 1] {
                    return Err(Error::shape(&self.name, format!("{:?} or [{n}, {c}, 1, 1]", a.shape()), format!("{:?}", b.shape())));
                }
                let mut y = (*a).clone();
                if broadcast {
                    for (i, plane) in y.data_mut().chunks_mut(h * w).enumerate() {
                        let v = b.data()[i];
                        plane.iter_mut().for_each(|x| *x += v);
                    }
                } else {
                    y.add_assign(b)?;
                }
                let saved = Saved::Residual { broadcast, b_shape: b.shape() };
                Ok((y, self.cache(params, saved)))
            }
            LayerSpec::Concat => {
                let first = inputs
                    .first()
                    .ok_or_else(|| Error::Contract(format!("{} expects at least one input", self.name)))?;
                let [n, _, h, w] = first.shape();
                let mut shapes = Vec::with_capacity(inputs.len());
                for t in inputs {
                    let [tn, _, th, tw] = t.shape();
                    if (tn, th, tw) != (n, h, w) {
                        return Err(Error::shape(&self.name, format!("[{n}, _, {h}, {w}]"), format!("{:?}", t.shape())));
                    }
                    shapes.push(t.shape());
                }
                let c_total: usize = shapes.iter().map(|s| s[1]).sum();
                let mut data = Vec::with_capacity(n * c_total * h * w);
                for i in 0..n {
                    for t in inputs {
                        data.extend_from_slice(t.item(i));
                    }
                }
                let y = Tensor::from_vec([n, c_total, h, w], data)?;
                Ok((y, self.cache(params, Saved::Concat(shapes))))
            }
        }
    }

    fn norm_forward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        x: &Tensor<S>,
        units: &[Vec<std::ops::Range<usize>>],
        running: Option<(&[S], &[S])>,
    ) -> Result<(Tensor<S>, Cache<S>)> {
        let gamma = params.value(&self.p("gamma"))?;
        let beta = params.value(&self.p("beta"))?;
        let [_, c, h, w] = x.shape();
        let hw = h * w;
        let eps = S::lit(NORM_EPS);
        let mut xhat = Tensor::zeros(x.shape());
        let (mut means, mut vars, mut inv_stds) = (Vec::new(), Vec::new(), Vec::new());
        for (u, ranges) in units.iter().enumerate() {
            let (mean, var) = match running {
                Some((rm, rv)) => (rm[u], rv[u]),
                None => {
                    let m = S::from_usize_lossy(ranges.iter().map(|r| r.len()).sum());
                    let mean = ranges.iter().flat_map(|r| &x.data()[r.clone()]).copied().sum::<S>() / m;
                    let var = ranges
                        .iter()
                        .flat_map(|r| &x.data()[r.clone()])
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<S>()
                        / m;
                    (mean, var)
                }
            };
            let inv = S::one() / (var + eps).sqrt();
            for r in ranges {
                for i in r.clone() {
                    xhat.data_mut()[i] = (x.data()[i] - mean) * inv;
                }
            }
            means.push(mean);
            vars.push(var);
            inv_stds.push(inv);
        }
        let mut y = xhat.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = gamma[ch] * *v + beta[ch];
        }
        let saved = Saved::Norm {
            xhat,
            inv_std: inv_stds,
            mean: means,
            var: vars,
            batch_stats: running.is_none(),
        };
        Ok((y, self.cache(params, saved)))
    }

    /// Gradients with respect to each input; parameter gradients are added
    /// into `params`.
    pub fn backward<S: Scalar>(
        &self,
        params: &mut ParamStore<S>,
        cache: &Cache<S>,
        grad_out: &Tensor<S>,
    ) -> Result<Vec<Tensor<S>>> {
        if cache.layer != self.name {
            return Err(Error::Contract(format!(
                "{} received a cache produced by {}",
                self.name, cache.layer
            )));
        }
        if cache.step != params.step {
            return Err(Error::Contract(format!(
                "{}: stale cache from step {} used at step {}",
                self.name, cache.step, params.step
            )));
        }
        let mismatch = || Error::Contract(format!("{}: cache kind does not match layer kind", self.name));
        match (self.spec, &cache.saved) {
            (LayerSpec::Conv2d(c), Saved::Input(x)) => {
                let w = params.value(&self.p("weight"))?.to_vec();
                let (dx, dw, db) = conv_backward(&c, &w, x, grad_out, &self.name)?;
                params.accumulate(&self.p("weight"), &dw)?;
                if c.bias {
                    params.accumulate(&self.p("bias"), &db)?;
                }
                Ok(vec![dx])
            }
            (LayerSpec::Linear { in_features, out_features }, Saved::Input(x)) => {
                let n = x.n();
                grad_out.expect_shape([n, out_features, 1, 1], &self.name)?;
                let w = params.value(&self.p("weight"))?.to_vec();
                let mut dw = vec![S::zero(); out_features * in_features];
                S::gemm(true, false, out_features, in_features, n, S::one(), grad_out.data(), x.data(), S::zero(), &mut dw);
                let mut db = vec![S::zero(); out_features];
                for row in grad_out.data().chunks(out_features) {
                    db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
                let mut dx = Tensor::zeros(x.shape());
                S::gemm(false, false, n, in_features, out_features, S::one(), grad_out.data(), &w, S::zero(), dx.data_mut());
                params.accumulate(&self.p("weight"), &dw)?;
                params.accumulate(&self.p("bias"), &db)?;
                Ok(vec![dx])
            }
            (LayerSpec::GroupNorm { groups, .. }, Saved::Norm { xhat, inv_std, batch_stats, .. }) => {
                let units = group_units(xhat.shape(), groups);
                Ok(vec![self.norm_backward(params, xhat, inv_std, *batch_stats, &units, grad_out)?])
            }
            (LayerSpec::BatchNorm { .. }, Saved::Norm { xhat, inv_std, batch_stats, .. }) => {
                let units = channel_units(xhat.shape());
                Ok(vec![self.norm_backward(params, xhat, inv_std, *batch_stats, &units, grad_out)?])
            }
            (LayerSpec::Elu, Saved::Input(x)) => {
                let dx = x.zip_map(grad_out, |v, g| if v > S::zero() { g } else { g * v.exp() })?;
                Ok(vec![dx])
            }
            (LayerSpec::Swish, Saved::Input(x)) => {
                let dx = x.zip_map(grad_out, |v, g| {
                    let s = sigmoid(v);
                    g * (s + v * s * (S::one() - s))
                })?;
                Ok(vec![dx])
            }
            (LayerSpec::Sigmoid, Saved::Output(y)) => Ok(vec![y.zip_map(grad_out, |s, g| g * s * (S::one() - s))?]),
            (LayerSpec::UpsampleNearest { factor: f }, Saved::Shape(shape)) => {
                let [n, c, h, w] = *shape;
                let (ho, wo) = (h * f, w * f);
                grad_out.expect_shape([n, c, ho, wo], &self.name)?;
                let mut dx = Tensor::zeros(*shape);
                for (plane_in, plane_out) in dx.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(ho * wo)) {
                    for oy in 0..ho {
                        let dst = &mut plane_in[(oy / f) * w..][..w];
                        for (ox, &g) in plane_out[oy * wo..(oy + 1) * wo].iter().enumerate() {
                            dst[ox / f] += g;
                        }
                    }
                }
                Ok(vec![dx])
            }
            (LayerSpec::Residual, Saved::Residual { broadcast, b_shape }) => {
                let db = if *broadcast {
                    let plane = grad_out.h() * grad_out.w();
                    let sums = grad_out.data().chunks(plane).map(|p| p.iter().copied().sum()).collect();
                    Tensor::from_vec(*b_shape, sums)?
                } else {
                    grad_out.clone()
                };
                Ok(vec![grad_out.clone(), db])
            }
            (LayerSpec::Concat, Saved::Concat(shapes)) => {
                let [n, c_total, h, w] = grad_out.shape();
                let c_sum: usize = shapes.iter().map(|s| s[1]).sum();
                if c_sum != c_total || shapes.iter().any(|s| (s[0], s[2], s[3]) != (n, h, w)) {
                    return Err(Error::shape(&self.name, format!("[{n}, {c_sum}, {h}, {w}]"), format!("{:?}", grad_out.shape())));
                }
                let mut grads: Vec<Tensor<S>> = shapes.iter().map(|&s| Tensor::zeros(s)).collect();
                for i in 0..n {
                    let mut off = 0;
                    let item = grad_out.item(i);
                    for g in grads.iter_mut() {
                        let l = g.item_len();
                        g.item_mut(i).copy_from_slice(&item[off..off + l]);
                        off += l;
                    }
                }
                Ok(grads)
            }
            _ => Err(mismatch()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward<S: Scalar>(
        &self,
        params: &mut ParamStore<S>,
        xhat: &Tensor<S>,
        inv_std: &[S],
        batch_stats: bool,
        units: &[Vec<std::ops::Range<usize>>],
        grad_out: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        grad_out.expect_shape(xhat.shape(), &self.name)?;
        let [_, c, h, w] = xhat.shape();
        let hw = h * w;
        let gamma = params.value(&self.p("gamma"))?.to_vec();
        let mut dgamma = vec![S::zero(); c];
        let mut dbeta = vec![S::zero(); c];
        let mut dxhat = Tensor::zeros(xhat.shape());
        for (i, ((&g, &xh), d)) in grad_out.data().iter().zip(xhat.data()).zip(dxhat.data_mut()).enumerate() {
            let ch = (i / hw) % c;
            dgamma[ch] += g * xh;
            dbeta[ch] += g;
            *d = g * gamma[ch];
        }
        let mut dx = Tensor::zeros(xhat.shape());
        for (u, ranges) in units.iter().enumerate() {
            let inv = inv_std[u];
            if !batch_stats {
                for r in ranges {
                    for i in r.clone() {
                        dx.data_mut()[i] = dxhat.data()[i] * inv;
                    }
                }
                continue;
            }
            let m = S::from_usize_lossy(ranges.iter().map(|r| r.len()).sum());
            let (mut s1, mut s2) = (S::zero(), S::zero());
            for r in ranges {
                for i in r.clone() {
                    s1 += dxhat.data()[i];
                    s2 += dxhat.data()[i] * xhat.data()[i];
                }
            }
            for r in ranges {
                for i in r.clone() {
                    dx.data_mut()[i] = inv / m * (m * dxhat.data()[i] - s1 - xhat.data()[i] * s2);
                }
            }
        }
        params.accumulate(&self.p("gamma"), &dgamma)?;
        params.accumulate(&self.p("beta"), &dbeta)?;
        Ok(dx)
    }

    /// Folds the batch statistics of a training-mode BatchNorm forward into
    /// the running estimates. No-op for every other layer kind.
    pub fn update_running_stats<S: Scalar>(&self, params: &mut ParamStore<S>, cache: &Cache<S>) -> Result<()> {
        let (LayerSpec::BatchNorm { .. }, Saved::Norm { mean, var, batch_stats: true, xhat, .. }) = (self.spec, &cache.saved)
        else {
            return Ok(());
        };
        let [n, _, h, w] = xhat.shape();
        let m = (n * h * w) as f64;
        let unbias = S::lit(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
        let mom = S::lit(BN_MOMENTUM);
        let keep = S::one() - mom;
        let rm = params.get_mut(&self.p("running_mean"))?;
        rm.value.iter_mut().zip(mean).for_each(|(r, &v)| *r = keep * *r + mom * v);
        let rv = params.get_mut(&self.p("running_var"))?;
        rv.value.iter_mut().zip(var).for_each(|(r, &v)| *r = keep * *r + mom * v * unbias);
        Ok(())
    }
}

/// One statistics unit per (item, group): a contiguous span.
fn group_units(shape: [usize; 4], groups: usize) -> Vec<Vec<std::ops::Range<usize>>> {
    let [n, c, h, w] = shape;
    let span = c / groups * h * w;
    (0..n * groups).map(|u| vec![u * span..(u + 1) * span]).collect()
}

/// One statistics unit per channel, spanning the batch.
fn channel_units(shape: [usize; 4]) -> Vec<Vec<std::ops::Range<usize>>> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    (0..c)
        .map(|ch| (0..n).map(|i| (i * c + ch) * hw..(i * c + ch + 1) * hw).collect())
        .collect()
}
