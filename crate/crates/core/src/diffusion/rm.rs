//! Reconstruction network: a five-level U-Net over `[x_t, c, s, s, s]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nnkit::{norm_groups, Cache, Conv2dSpec, Layer, LayerSpec, Mode, ParamStore, Seq, SeqCache, Tensor};
use crate::scalar::Scalar;

pub const RM_IN_CHANNELS: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RmArch {
    pub widths: Vec<usize>,
    /// Sinusoidal embedding size; the embedding MLP is twice as wide.
    pub time_dim: usize,
    pub res_per_block: usize,
}

impl RmArch {
    pub fn desk() -> Self {
        RmArch {
            widths: vec![16, 32, 64, 64, 64],
            time_dim: 32,
            res_per_block: 2,
        }
    }

    /// Inputs must survive `levels - 1` halvings.
    pub fn divisor(&self) -> usize {
        1 << (self.widths.len().saturating_sub(1))
    }

    fn hidden(&self) -> usize {
        2 * self.time_dim
    }
}

/// `sin`/`cos` features of the step at geometric frequencies, `[n, dim, 1, 1]`.
pub fn timestep_embedding<S: Scalar>(ts: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let a = t as f64 * freq;
            data.push(S::lit(if i < half { a.sin() } else { a.cos() }));
        }
    }
    Tensor::from_vec([ts.len(), dim, 1, 1], data).expect("embedding shape")
}

fn pre_act(name: &str, cin: usize, cout: usize) -> Result<Seq> {
    let mut s = Seq::new();
    s.push(format!("{name}.norm"), LayerSpec::GroupNorm { groups: norm_groups(cin), channels: cin })?
        .push(format!("{name}.act"), LayerSpec::Swish)?
        .push(format!("{name}.conv"), LayerSpec::Conv2d(Conv2dSpec::same(cin, cout, 3)))?;
    Ok(s)
}

/// `x + conv(swish(gn(conv(swish(gn(x))) + W e)))` with the step embedding `e`.
#[derive(Debug, Clone, PartialEq)]
struct ResSub {
    first: Seq,
    temb: Layer,
    add_t: Layer,
    second: Seq,
    add_res: Layer,
}

#[derive(Debug)]
struct ResSubCache<S> {
    first: SeqCache<S>,
    temb: Cache<S>,
    add_t: Cache<S>,
    second: SeqCache<S>,
    add_res: Cache<S>,
}

impl ResSub {
    fn new(name: &str, c: usize, emb: usize) -> Result<Self> {
        Ok(ResSub {
            first: pre_act(&format!("{name}.m1"), c, c)?,
            temb: Layer::new(format!("{name}.temb"), LayerSpec::Linear { in_features: emb, out_features: c })?,
            add_t: Layer::new(format!("{name}.add_t"), LayerSpec::Residual)?,
            second: pre_act(&format!("{name}.m2"), c, c)?,
            add_res: Layer::new(format!("{name}.add"), LayerSpec::Residual)?,
        })
    }

    fn init<S: Scalar>(&self, p: &mut ParamStore<S>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.first.init_params(p, rng)?;
        self.temb.init_params(p, rng)?;
        self.second.init_params(p, rng)
    }

    fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: &Tensor<S>, e: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, ResSubCache<S>)> {
        let (h, first) = self.first.forward(p, x, mode)?;
        let (te, temb) = self.temb.forward(p, &[e], mode)?;
        let (h, add_t) = self.add_t.forward(p, &[&h, &te], mode)?;
        let (h, second) = self.second.forward(p, &h, mode)?;
        let (y, add_res) = self.add_res.forward(p, &[x, &h], mode)?;
        Ok((
            y,
            ResSubCache {
                first,
                temb,
                add_t,
                second,
                add_res,
            },
        ))
    }

    /// Returns the input gradient and adds the embedding gradient into `ge`.
    fn backward<S: Scalar>(&self, p: &mut ParamStore<S>, c: &ResSubCache<S>, g: &Tensor<S>, ge: &mut Tensor<S>) -> Result<Tensor<S>> {
        let mut parts = self.add_res.backward(p, &c.add_res, g)?;
        let gh = parts.pop().expect("two inputs");
        let mut gx = parts.pop().expect("two inputs");
        let gh = self.second.backward(p, &c.second, &gh)?;
        let mut parts = self.add_t.backward(p, &c.add_t, &gh)?;
        let gte = parts.pop().expect("two inputs");
        let gh = parts.pop().expect("two inputs");
        ge.add_assign(&self.temb.backward(p, &c.temb, &gte)?[0])?;
        gx.add_assign(&self.first.backward(p, &c.first, &gh)?)?;
        Ok(gx)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncBlock {
    conv: Layer,
    subs: Vec<ResSub>,
}

#[derive(Debug, Clone, PartialEq)]
struct DecBlock {
    up: Layer,
    cat: Layer,
    conv: Layer,
    subs: Vec<ResSub>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmNet {
    pub arch: RmArch,
    temb: Seq,
    enc: Vec<EncBlock>,
    dec: Vec<DecBlock>,
    head: Seq,
}

#[derive(Debug)]
struct BlockCache<S> {
    pre: Vec<Cache<S>>,
    subs: Vec<ResSubCache<S>>,
}

#[derive(Debug)]
pub struct RmCache<S> {
    temb: SeqCache<S>,
    emb_shape: [usize; 4],
    enc: Vec<BlockCache<S>>,
    dec: Vec<BlockCache<S>>,
    head: SeqCache<S>,
}

impl RmNet {
    pub fn new(arch: RmArch) -> Result<Self> {
        if arch.widths.len() < 2 || arch.widths.contains(&0) || arch.time_dim < 2 {
            return Err(Error::InvalidParam(format!("invalid reconstruction architecture {arch:?}")));
        }
        let w = &arch.widths;
        let eh = arch.hidden();
        let mut temb = Seq::new();
        temb.push("rm.temb.fc1", LayerSpec::Linear { in_features: arch.time_dim, out_features: eh })?
            .push("rm.temb.act1", LayerSpec::Swish)?
            .push("rm.temb.fc2", LayerSpec::Linear { in_features: eh, out_features: eh })?
            .push("rm.temb.act2", LayerSpec::Swish)?;
        let subs = |name: &str, c: usize| -> Result<Vec<ResSub>> {
            (0..arch.res_per_block).map(|i| ResSub::new(&format!("{name}.res{i}"), c, eh)).collect()
        };
        let mut enc = Vec::new();
        for (k, &c) in w.iter().enumerate() {
            let spec = if k == 0 {
                Conv2dSpec::same(RM_IN_CHANNELS, c, 3)
            } else {
                Conv2dSpec::down(w[k - 1], c)
            };
            enc.push(EncBlock {
                conv: Layer::new(format!("rm.enc{k}.conv"), LayerSpec::Conv2d(spec))?,
                subs: subs(&format!("rm.enc{k}"), c)?,
            });
        }
        let mut dec = Vec::new();
        for k in (0..w.len() - 1).rev() {
            dec.push(DecBlock {
                up: Layer::new(format!("rm.dec{k}.up"), LayerSpec::UpsampleNearest { factor: 2 })?,
                cat: Layer::new(format!("rm.dec{k}.cat"), LayerSpec::Concat)?,
                conv: Layer::new(format!("rm.dec{k}.conv"), LayerSpec::Conv2d(Conv2dSpec::same(w[k + 1] + w[k], w[k], 3)))?,
                subs: subs(&format!("rm.dec{k}"), w[k])?,
            });
        }
        let head = pre_act("rm.head", w[0], 3)?;
        Ok(RmNet { arch, temb, enc, dec, head })
    }

    pub fn init_params<S: Scalar>(&self, p: &mut ParamStore<S>, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.temb.init_params(p, &mut rng)?;
        for b in &self.enc {
            b.conv.init_params(p, &mut rng)?;
            b.subs.iter().try_for_each(|s| s.init(p, &mut rng))?;
        }
        for b in &self.dec {
            b.conv.init_params(p, &mut rng)?;
            b.subs.iter().try_for_each(|s| s.init(p, &mut rng))?;
        }
        self.head.init_params(p, &mut rng)
    }

    fn check_input<S: Scalar>(&self, x: &Tensor<S>, ts: &[usize]) -> Result<()> {
        let [n, c, h, w] = x.shape();
        let d = self.arch.divisor();
        if c != RM_IN_CHANNELS {
            return Err(Error::Contract(format!(
                "reconstruction network expects {RM_IN_CHANNELS} input channels, got {c}"
            )));
        }
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::shape("reconstruction network input", format!("spatial size divisible by {d}"), format!("{h}x{w}")));
        }
        if ts.len() != n {
            return Err(Error::shape("reconstruction network steps", n, ts.len()));
        }
        Ok(())
    }

    fn run_subs<S: Scalar>(subs: &[ResSub], p: &ParamStore<S>, mut h: Tensor<S>, e: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, Vec<ResSubCache<S>>)> {
        let mut caches = Vec::with_capacity(subs.len());
        for s in subs {
            let (y, c) = s.forward(p, &h, e, mode)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    /// `x` is the 9-channel stack; `ts` holds one step per batch item.
    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: &Tensor<S>, ts: &[usize], mode: Mode) -> Result<(Tensor<S>, RmCache<S>)> {
        self.check_input(x, ts)?;
        let (e, temb) = self.temb.forward(p, &timestep_embedding(ts, self.arch.time_dim), mode)?;
        let mut h = x.clone();
        let mut skips = Vec::new();
        let mut enc = Vec::new();
        for b in &self.enc {
            let (y, cc) = b.conv.forward(p, &[&h], mode)?;
            let (y, subs) = Self::run_subs(&b.subs, p, y, &e, mode)?;
            enc.push(BlockCache { pre: vec![cc], subs });
            skips.push(y.clone());
            h = y;
        }
        skips.pop();
        let mut dec = Vec::new();
        for b in &self.dec {
            let skip = skips.pop().expect("one skip per decoder block");
            let (u, cu) = b.up.forward(p, &[&h], mode)?;
            let (cat, ccat) = b.cat.forward(p, &[&u, &skip], mode)?;
            let (y, cc) = b.conv.forward(p, &[&cat], mode)?;
            let (y, subs) = Self::run_subs(&b.subs, p, y, &e, mode)?;
            dec.push(BlockCache { pre: vec![cu, ccat, cc], subs });
            h = y;
        }
        let (y, head) = self.head.forward(p, &h, mode)?;
        Ok((
            y,
            RmCache {
                temb,
                emb_shape: e.shape(),
                enc,
                dec,
                head,
            },
        ))
    }

    /// Returns the gradient with respect to the 9-channel input.
    pub fn backward<S: Scalar>(&self, p: &mut ParamStore<S>, cache: &RmCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let mut ge = Tensor::zeros(cache.emb_shape);
        let mut g = self.head.backward(p, &cache.head, grad_out)?;
        let mut skip_grads = Vec::new();
        for (b, c) in self.dec.iter().zip(&cache.dec).rev() {
            for (s, sc) in b.subs.iter().zip(&c.subs).rev() {
                g = s.backward(p, sc, &g, &mut ge)?;
            }
            g = b.conv.backward(p, &c.pre[2], &g)?.swap_remove(0);
            let mut parts = b.cat.backward(p, &c.pre[1], &g)?;
            skip_grads.push(parts.pop().expect("two inputs"));
            g = b.up.backward(p, &c.pre[0], &parts.pop().expect("two inputs"))?.swap_remove(0);
        }
        // skip_grads is ordered shallowest level first
        for (k, (b, c)) in self.enc.iter().zip(&cache.enc).enumerate().rev() {
            if k < skip_grads.len() {
                g.add_assign(&skip_grads[k])?;
            }
            for (s, sc) in b.subs.iter().zip(&c.subs).rev() {
                g = s.backward(p, sc, &g, &mut ge)?;
            }
            g = b.conv.backward(p, &c.pre[0], &g)?.swap_remove(0);
        }
        self.temb.backward(p, &cache.temb, &ge)?;
        Ok(g)
    }
}

/// Stacks `[x_t, c, s, s, s]` along channels.
pub fn rm_input<S: Scalar>(x_t: &Tensor<S>, c: &Tensor<S>, s_hat: &Tensor<S>) -> Result<Tensor<S>> {
    let [n, _, h, w] = x_t.shape();
    x_t.expect_shape([n, 3, h, w], "rm input x_t")?;
    c.expect_shape([n, 3, h, w], "rm input c")?;
    s_hat.expect_shape([n, 1, h, w], "rm input segmentation")?;
    let mut data = Vec::with_capacity(n * 9 * h * w);
    for i in 0..n {
        data.extend_from_slice(x_t.item(i));
        data.extend_from_slice(c.item(i));
        for _ in 0..3 {
            data.extend_from_slice(s_hat.item(i));
        }
    }
    Tensor::from_vec([n, 9, h, w], data)
}
