//! Finite-difference suite over every layer kind and both toy networks.

use inpaint_core::diffusion::{RmArch, RmNet};
use inpaint_core::nnkit::{
    finite_diff_gradcheck, randomize_params, Conv2dSpec, GradcheckReport, Layer, LayerObjective, LayerSpec, Mode,
    Objective, ParamStore, Tensor,
};
use inpaint_core::spm::{NormKind, SpmArch, SpmNet};
use inpaint_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRADCHECK_EPS: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteOptions {
    /// Seeds per layer kind.
    pub layer_seeds: u64,
    /// Seeds per toy network.
    pub net_seeds: u64,
    pub base_seed: u64,
    /// Negates every analytic gradient: a broken backward pass the suite
    /// must reject.
    pub mutate: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            layer_seeds: 20,
            net_seeds: 2,
            base_seed: 0,
            mutate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub worst: f64,
    pub checked: usize,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.worst).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.checked > 0 && e.worst <= self.tolerance)
    }

    pub fn failures(&self) -> Vec<&SuiteEntry> {
        self.entries.iter().filter(|e| e.checked == 0 || e.worst > self.tolerance).collect()
    }
}

/// One representative configuration per layer kind, with its input shapes.
pub fn layer_cases() -> Vec<(&'static str, LayerSpec, Vec<[usize; 4]>, Mode)> {
    vec![
        ("conv3x3", LayerSpec::Conv2d(Conv2dSpec::same(2, 3, 3)), vec![[2, 2, 6, 6]], Mode::Train),
        ("conv_dilated", LayerSpec::Conv2d(Conv2dSpec::dilated(2, 2, 2).no_bias()), vec![[1, 2, 7, 6]], Mode::Train),
        ("conv_stride2", LayerSpec::Conv2d(Conv2dSpec::down(2, 3)), vec![[2, 2, 6, 8]], Mode::Train),
        (
            "conv_grouped",
            LayerSpec::Conv2d(Conv2dSpec { groups: 2, ..Conv2dSpec::same(4, 2, 3) }),
            vec![[1, 4, 5, 5]],
            Mode::Train,
        ),
        ("linear", LayerSpec::Linear { in_features: 12, out_features: 5 }, vec![[3, 3, 2, 2]], Mode::Train),
        ("group_norm", LayerSpec::GroupNorm { groups: 2, channels: 4 }, vec![[2, 4, 3, 3]], Mode::Train),
        ("batch_norm", LayerSpec::BatchNorm { channels: 3 }, vec![[4, 3, 3, 2]], Mode::Train),
        ("batch_norm_eval", LayerSpec::BatchNorm { channels: 3 }, vec![[2, 3, 3, 2]], Mode::Eval),
        ("elu", LayerSpec::Elu, vec![[2, 3, 4, 4]], Mode::Train),
        ("swish", LayerSpec::Swish, vec![[2, 3, 4, 4]], Mode::Train),
        ("sigmoid", LayerSpec::Sigmoid, vec![[2, 3, 4, 4]], Mode::Train),
        ("upsample", LayerSpec::UpsampleNearest { factor: 2 }, vec![[2, 2, 3, 4]], Mode::Train),
        ("residual", LayerSpec::Residual, vec![[2, 3, 4, 4], [2, 3, 4, 4]], Mode::Train),
        ("residual_broadcast", LayerSpec::Residual, vec![[2, 3, 4, 4], [2, 3, 1, 1]], Mode::Train),
        ("concat", LayerSpec::Concat, vec![[2, 1, 3, 3], [2, 2, 3, 3], [2, 3, 3, 3]], Mode::Train),
    ]
}

struct Mutated<'a, O: ?Sized>(&'a O);

impl<O: Objective + ?Sized> Objective for Mutated<'_, O> {
    fn loss(&self, params: &ParamStore<f64>) -> Result<f64> {
        self.0.loss(params)
    }

    fn loss_and_grad(&self, params: &mut ParamStore<f64>) -> Result<f64> {
        let loss = self.0.loss_and_grad(params)?;
        for (_, e) in params.iter_mut() {
            e.grad.iter_mut().for_each(|g| *g = -*g);
        }
        Ok(loss)
    }
}

fn check<O: Objective>(obj: &O, params: &mut ParamStore<f64>, mutate: bool, per_entry: Option<usize>) -> Result<GradcheckReport> {
    if mutate {
        finite_diff_gradcheck(&Mutated(obj), params, GRADCHECK_EPS, per_entry)
    } else {
        finite_diff_gradcheck(obj, params, GRADCHECK_EPS, per_entry)
    }
}

/// A network under a random output projection `sum(r * y)`. The training
/// objectives are poor probes here: L1 terms are not differentiable at zero and
/// mean reductions push deep-entry gradients down into rounding noise.
struct Projected<F> {
    forward: F,
    r: Tensor<f64>,
}

impl<F> Projected<F> {
    fn value(&self, y: &Tensor<f64>) -> Result<f64> {
        Ok(y.zip_map(&self.r, |a, b| a * b)?.sum())
    }
}

struct SpmNetObjective {
    net: SpmNet,
    x: Tensor<f64>,
}

impl Objective for Projected<SpmNetObjective> {
    fn loss(&self, p: &ParamStore<f64>) -> Result<f64> {
        let (y, _) = self.forward.net.forward(p, &self.forward.x, Mode::Train)?;
        self.value(&y)
    }

    fn loss_and_grad(&self, p: &mut ParamStore<f64>) -> Result<f64> {
        let (y, cache) = self.forward.net.forward(p, &self.forward.x, Mode::Train)?;
        self.forward.net.backward(p, &cache, &self.r)?;
        self.value(&y)
    }
}

struct RmNetObjective {
    net: RmNet,
    x: Tensor<f64>,
    ts: Vec<usize>,
}

impl Objective for Projected<RmNetObjective> {
    fn loss(&self, p: &ParamStore<f64>) -> Result<f64> {
        let f = &self.forward;
        let (y, _) = f.net.forward(p, &f.x, &f.ts, Mode::Train)?;
        self.value(&y)
    }

    fn loss_and_grad(&self, p: &mut ParamStore<f64>) -> Result<f64> {
        let f = &self.forward;
        let (y, cache) = f.net.forward(p, &f.x, &f.ts, Mode::Train)?;
        f.net.backward(p, &cache, &self.r)?;
        self.value(&y)
    }
}

/// Toy reconstruction U-Net: three levels keep a 4x4 bottleneck on 16x16
/// inputs, where group statistics stay smooth enough for eps = 1e-4.
pub fn toy_rm_arch() -> RmArch {
    RmArch {
        widths: vec![4, 8, 8],
        time_dim: 4,
        res_per_block: 1,
    }
}

/// Toy structure network: four channels give two-channel norm groups.
pub fn toy_spm_arch(norm: NormKind) -> SpmArch {
    SpmArch {
        in_channels: 3,
        widths: [4, 4, 4],
        norm,
        dilation: 2,
    }
}

pub fn spm_case(seed: u64, norm: NormKind, batch: usize, mutate: bool) -> Result<GradcheckReport> {
    let net = SpmNet::new(toy_spm_arch(norm))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::<f64>::new();
    net.init_params(&mut p, seed)?;
    randomize_params(&mut p, 0.6, &mut rng);
    let x = Tensor::randn([batch, 3, 8, 16], 1.0, &mut rng);
    let obj = Projected {
        forward: SpmNetObjective { net, x },
        r: Tensor::randn([batch, 1, 8, 16], 1.0, &mut rng),
    };
    check(&obj, &mut p, mutate, None)
}

pub fn rm_case(seed: u64, mutate: bool) -> Result<GradcheckReport> {
    let net = RmNet::new(toy_rm_arch())?;
    let mut p = ParamStore::<f64>::new();
    net.init_params(&mut p, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(10));
    let x = Tensor::randn([2, 9, 16, 16], 1.0, &mut rng);
    let obj = Projected {
        forward: RmNetObjective { net, x, ts: vec![3, 150] },
        r: Tensor::randn([2, 3, 16, 16], 1.0, &mut rng),
    };
    check(&obj, &mut p, mutate, Some(64))
}

fn fold(name: &str, reports: &[GradcheckReport]) -> SuiteEntry {
    let entry = SuiteEntry {
        name: name.to_string(),
        worst: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
        checked: reports.iter().map(|r| r.checked).sum(),
        runs: reports.len(),
    };
    log::info!("{name}: {} runs, {} coords, worst {:.3e}", entry.runs, entry.checked, entry.worst);
    entry
}

/// Runs every check; entries keep a fixed order so repeated runs print
/// identical reports.
pub fn run_gradient_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut entries = Vec::new();
    for (name, spec, shapes, mode) in layer_cases() {
        let reports = (0..opts.layer_seeds)
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.base_seed + k);
                let layer = Layer::new("l", spec)?;
                let (obj, mut params) = LayerObjective::setup(layer, shapes.clone(), mode, &mut rng)?;
                check(&obj, &mut params, opts.mutate, None)
            })
            .collect::<Result<Vec<_>>>()?;
        entries.push(fold(name, &reports));
    }
    let spm = (0..opts.net_seeds)
        .flat_map(|k| {
            let seed = opts.base_seed + k;
            [(NormKind::Group, 1), (NormKind::Group, 2), (NormKind::Batch, 2)]
                .map(|(norm, batch)| spm_case(seed, norm, batch, opts.mutate))
        })
        .collect::<Result<Vec<_>>>()?;
    entries.push(fold("spm_toy_net", &spm));
    let rm = (0..opts.net_seeds)
        .map(|k| rm_case(opts.base_seed + k, opts.mutate))
        .collect::<Result<Vec<_>>>()?;
    entries.push(fold("rm_toy_net", &rm));
    Ok(SuiteReport {
        entries,
        tolerance: GRADCHECK_TOL,
    })
}
