use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imgcore::{ImageTensor, SegMap, ValueRange};
use crate::nnkit::{norm_groups, Conv2dSpec, Layer, LayerSpec, Mode, ParamStore, Seq, SeqCache, Tensor};
use crate::scalar::Scalar;

/// Batch sizes below this train with GroupNorm instead of BatchNorm.
pub const MIN_BATCHNORM_BATCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Group,
}

impl NormKind {
    pub fn for_batch_size(batch: usize) -> Self {
        if batch < MIN_BATCHNORM_BATCH {
            NormKind::Group
        } else {
            NormKind::Batch
        }
    }

    fn spec(self, channels: usize) -> LayerSpec {
        match self {
            NormKind::Batch => LayerSpec::BatchNorm { channels },
            NormKind::Group => LayerSpec::GroupNorm {
                groups: norm_groups(channels),
                channels,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpmArch {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub norm: NormKind,
    pub dilation: usize,
}

impl SpmArch {
    pub fn desk(in_channels: usize, norm: NormKind) -> Self {
        SpmArch {
            in_channels,
            widths: [8, 16, 32],
            norm,
            dilation: 2,
        }
    }

    /// Spatial sizes must survive three halvings.
    pub const DIVISOR: usize = 8;
}

/// Encoder: stem, then per level a dilated pair (the skip) and a stride-2
/// conv. Decoder: per level nearest upsampling + conv, skip concat, dilated
/// pair. Head: conv to one channel and a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpmNet {
    pub arch: SpmArch,
    stem: Seq,
    enc: Vec<Seq>,
    down: Vec<Seq>,
    up: Vec<Seq>,
    cat: Vec<Layer>,
    dec: Vec<Seq>,
    head: Seq,
}

pub struct SpmCache<S> {
    stem: SeqCache<S>,
    enc: Vec<SeqCache<S>>,
    down: Vec<SeqCache<S>>,
    up: Vec<SeqCache<S>>,
    cat: Vec<crate::nnkit::Cache<S>>,
    dec: Vec<SeqCache<S>>,
    head: SeqCache<S>,
}

fn unit(seq: &mut Seq, name: &str, conv: Conv2dSpec, norm: NormKind) -> Result<()> {
    let c = conv.out_ch;
    seq.push(format!("{name}.conv"), LayerSpec::Conv2d(conv.no_bias()))?
        .push(format!("{name}.norm"), norm.spec(c))?
        .push(format!("{name}.act"), LayerSpec::Elu)?;
    Ok(())
}

fn dilated_pair(name: &str, cin: usize, cout: usize, arch: &SpmArch) -> Result<Seq> {
    let mut s = Seq::new();
    unit(&mut s, &format!("{name}.a"), Conv2dSpec::dilated(cin, cout, arch.dilation), arch.norm)?;
    unit(&mut s, &format!("{name}.b"), Conv2dSpec::dilated(cout, cout, arch.dilation), arch.norm)?;
    Ok(s)
}

impl SpmNet {
    pub fn new(arch: SpmArch) -> Result<Self> {
        let [w0, w1, w2] = arch.widths;
        if arch.widths.contains(&0) || arch.dilation == 0 || !(arch.in_channels == 1 || arch.in_channels == 3) {
            return Err(Error::InvalidParam(format!("invalid structure-network architecture {arch:?}")));
        }
        let level = [w0, w1, w2];
        let next = [w1, w2, w2];
        let mut stem = Seq::new();
        unit(&mut stem, "spm.stem", Conv2dSpec::same(arch.in_channels, w0, 3), arch.norm)?;
        let (mut enc, mut down, mut up, mut cat, mut dec) = (vec![], vec![], vec![], vec![], vec![]);
        for k in 0..3 {
            enc.push(dilated_pair(&format!("spm.enc{k}"), level[k], level[k], &arch)?);
            let mut d = Seq::new();
            unit(&mut d, &format!("spm.down{k}"), Conv2dSpec::down(level[k], next[k]), arch.norm)?;
            down.push(d);
            let mut u = Seq::new();
            u.push(format!("spm.up{k}.resample"), LayerSpec::UpsampleNearest { factor: 2 })?;
            unit(&mut u, &format!("spm.up{k}"), Conv2dSpec::same(next[k], level[k], 3), arch.norm)?;
            up.push(u);
            cat.push(Layer::new(format!("spm.cat{k}"), LayerSpec::Concat)?);
            dec.push(dilated_pair(&format!("spm.dec{k}"), 2 * level[k], level[k], &arch)?);
        }
        let mut head = Seq::new();
        head.push("spm.head.conv", LayerSpec::Conv2d(Conv2dSpec::same(w0, 1, 3)))?
            .push("spm.head.act", LayerSpec::Sigmoid)?;
        Ok(SpmNet {
            arch,
            stem,
            enc,
            down,
            up,
            cat,
            dec,
            head,
        })
    }

    fn seqs(&self) -> impl Iterator<Item = &Seq> {
        std::iter::once(&self.stem)
            .chain(&self.enc)
            .chain(&self.down)
            .chain(&self.up)
            .chain(&self.dec)
            .chain(std::iter::once(&self.head))
    }

    pub fn init_params<S: Scalar>(&self, params: &mut ParamStore<S>, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in self.seqs() {
            s.init_params(params, &mut rng)?;
        }
        Ok(())
    }

    fn check_input<S: Scalar>(&self, x: &Tensor<S>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.arch.in_channels || h % SpmArch::DIVISOR != 0 || w % SpmArch::DIVISOR != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "structure network input",
                format!("[_, {}, 8k, 8m]", self.arch.in_channels),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(&self, params: &ParamStore<S>, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, SpmCache<S>)> {
        self.check_input(x)?;
        let (mut h, stem) = self.stem.forward(params, x, mode)?;
        let (mut skips, mut enc, mut down) = (vec![], vec![], vec![]);
        for k in 0..3 {
            let (s, ce) = self.enc[k].forward(params, &h, mode)?;
            let (d, cd) = self.down[k].forward(params, &s, mode)?;
            skips.push(s);
            enc.push(ce);
            down.push(cd);
            h = d;
        }
        let (mut up, mut cat, mut dec) = (vec![], vec![], vec![]);
        for k in (0..3).rev() {
            let (u, cu) = self.up[k].forward(params, &h, mode)?;
            let (c, cc) = self.cat[k].forward(params, &[&u, &skips[k]], mode)?;
            let (d, cd) = self.dec[k].forward(params, &c, mode)?;
            up.push(cu);
            cat.push(cc);
            dec.push(cd);
            h = d;
        }
        // decoder caches are stored level 0 first
        up.reverse();
        cat.reverse();
        dec.reverse();
        let (y, head) = self.head.forward(params, &h, mode)?;
        Ok((
            y,
            SpmCache {
                stem,
                enc,
                down,
                up,
                cat,
                dec,
                head,
            },
        ))
    }

    /// Returns the gradient with respect to the input image.
    pub fn backward<S: Scalar>(&self, params: &mut ParamStore<S>, cache: &SpmCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = self.head.backward(params, &cache.head, grad_out)?;
        let mut skip_grads = Vec::with_capacity(3);
        for k in 0..3 {
            g = self.dec[k].backward(params, &cache.dec[k], &g)?;
            let mut parts = self.cat[k].backward(params, &cache.cat[k], &g)?;
            skip_grads.push(parts.pop().expect("two concat inputs"));
            let gu = parts.pop().expect("two concat inputs");
            g = self.up[k].backward(params, &cache.up[k], &gu)?;
        }
        for k in (0..3).rev() {
            g = self.down[k].backward(params, &cache.down[k], &g)?;
            g.add_assign(&skip_grads[k])?;
            g = self.enc[k].backward(params, &cache.enc[k], &g)?;
        }
        self.stem.backward(params, &cache.stem, &g)
    }

    pub fn update_running_stats<S: Scalar>(&self, params: &mut ParamStore<S>, cache: &SpmCache<S>) -> Result<()> {
        self.stem.update_running_stats(params, &cache.stem)?;
        for k in 0..3 {
            self.enc[k].update_running_stats(params, &cache.enc[k])?;
            self.down[k].update_running_stats(params, &cache.down[k])?;
            self.up[k].update_running_stats(params, &cache.up[k])?;
            self.dec[k].update_running_stats(params, &cache.dec[k])?;
        }
        self.head.update_running_stats(params, &cache.head)
    }
}

/// Structure prediction network with its parameters.
#[derive(Debug, Clone)]
pub struct SpmModel<S = f32> {
    pub net: SpmNet,
    pub params: ParamStore<S>,
}

impl<S: Scalar> SpmModel<S> {
    pub fn new(arch: SpmArch, seed: u64) -> Result<Self> {
        let net = SpmNet::new(arch)?;
        let mut params = ParamStore::new();
        net.init_params(&mut params, seed)?;
        Ok(SpmModel { net, params })
    }

    /// Batched inference on model-range images `[N, C, H, W]`.
    pub fn predict_tensor(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.net.forward(&self.params, x, Mode::Eval)?.0)
    }
}

/// Predicted ink map of a corrupted image (either value range).
pub fn spm_predict<S: Scalar>(model: &SpmModel<S>, c: &ImageTensor<f32>) -> Result<SegMap<f32>> {
    let c = match c.range() {
        ValueRange::Unit => c.to_model_range()?,
        ValueRange::Model => c.clone(),
    };
    let x = Tensor::<S>::from_images(&[&c])?;
    model.predict_tensor(&x)?.to_segmap(0)
}
