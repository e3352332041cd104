//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use super::layers::{Layer, Mode};
use super::params::ParamStore;
use super::seq::Seq;
use super::tensor::Tensor;
use crate::error::Result;

/// A scalar loss over a parameter store. Inputs that should be checked too
/// are stored as trainable entries.
pub trait Objective {
    fn loss(&self, params: &ParamStore<f64>) -> Result<f64>;
    /// Same loss; adds analytic gradients into `params`.
    fn loss_and_grad(&self, params: &mut ParamStore<f64>) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Entry name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with `(L(w+eps) - L(w-eps)) / 2eps` for every
/// trainable coordinate, or at most `max_per_entry` evenly spaced ones per entry.
pub fn finite_diff_gradcheck<O: Objective + ?Sized>(
    objective: &O,
    params: &mut ParamStore<f64>,
    eps: f64,
    max_per_entry: Option<usize>,
) -> Result<GradcheckReport> {
    params.zero_grad();
    objective.loss_and_grad(params)?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, e)| (n.to_string(), e.grad.clone()))
        .collect();
    params.zero_grad();

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    for (name, grads) in analytic {
        let len = grads.len();
        let stride = match max_per_entry {
            Some(k) if k > 0 && len > k => len.div_ceil(k),
            _ => 1,
        };
        for i in (0..len).step_by(stride) {
            let orig = params.value(&name)?[i];
            params.get_mut(&name)?.value[i] = orig + eps;
            let up = objective.loss(params)?;
            params.get_mut(&name)?.value[i] = orig - eps;
            let down = objective.loss(params)?;
            params.get_mut(&name)?.value[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(grads[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), i));
                report.analytic_at_worst = grads[i];
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// Replaces every value of every entry with `N(0, std^2)` noise; useful
/// before a check so that ones/zeros initializations do not hide errors.
pub fn randomize_params<R: Rng + ?Sized>(params: &mut ParamStore<f64>, std: f64, rng: &mut R) {
    for (_, e) in params.iter_mut() {
        let t = Tensor::<f64>::randn([1, 1, 1, e.len()], std, rng);
        e.value.copy_from_slice(t.data());
    }
}

fn input_name(i: usize) -> String {
    format!("__input{i}")
}

fn projection_loss(y: &Tensor<f64>, r: &Tensor<f64>) -> Result<f64> {
    Ok(y.zip_map(r, |a, b| a * b)?.sum())
}

/// Loss `sum(r * layer(inputs))` with the inputs held in the store so their
/// gradients are checked alongside the layer parameters.
pub struct LayerObjective {
    pub layer: Layer,
    pub input_shapes: Vec<[usize; 4]>,
    pub projection: Tensor<f64>,
    pub mode: Mode,
}

impl LayerObjective {
    /// Registers layer parameters and random inputs, and draws the projection.
    pub fn setup<R: Rng + ?Sized>(
        layer: Layer,
        input_shapes: Vec<[usize; 4]>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Self, ParamStore<f64>)> {
        let mut params = ParamStore::new();
        layer.init_params(&mut params, rng)?;
        randomize_params(&mut params, 0.5, rng);
        if let Ok(rv) = params.get_mut(&format!("{}.running_var", layer.name)) {
            rv.value.iter_mut().for_each(|v| *v = v.abs() + 0.5);
        }
        let mut inputs = Vec::new();
        for (i, &s) in input_shapes.iter().enumerate() {
            let x = Tensor::<f64>::randn(s, 1.0, rng);
            params.insert(&input_name(i), &s, x.clone().into_data(), true)?;
            inputs.push(x);
        }
        let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
        let (y, _) = layer.forward(&params, &refs, mode)?;
        let projection = Tensor::randn(y.shape(), 1.0, rng);
        Ok((
            LayerObjective {
                layer,
                input_shapes,
                projection,
                mode,
            },
            params,
        ))
    }

    fn inputs(&self, params: &ParamStore<f64>) -> Result<Vec<Tensor<f64>>> {
        self.input_shapes
            .iter()
            .enumerate()
            .map(|(i, &s)| Tensor::from_vec(s, params.value(&input_name(i))?.to_vec()))
            .collect()
    }
}

impl Objective for LayerObjective {
    fn loss(&self, params: &ParamStore<f64>) -> Result<f64> {
        let inputs = self.inputs(params)?;
        let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
        let (y, _) = self.layer.forward(params, &refs, self.mode)?;
        projection_loss(&y, &self.projection)
    }

    fn loss_and_grad(&self, params: &mut ParamStore<f64>) -> Result<f64> {
        let inputs = self.inputs(params)?;
        let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
        let (y, cache) = self.layer.forward(params, &refs, self.mode)?;
        let grads = self.layer.backward(params, &cache, &self.projection)?;
        for (i, g) in grads.iter().enumerate() {
            params.accumulate(&input_name(i), g.data())?;
        }
        projection_loss(&y, &self.projection)
    }
}

/// `sum(r * seq(x))` for a layer chain; `flip_sign` negates the backward
/// signal, a mutation any working check must catch.
pub struct SeqObjective {
    pub seq: Seq,
    pub input_shape: [usize; 4],
    pub projection: Tensor<f64>,
    pub mode: Mode,
    pub flip_sign: bool,
}

impl SeqObjective {
    pub fn setup<R: Rng + ?Sized>(
        seq: Seq,
        input: Tensor<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Self, ParamStore<f64>)> {
        let mut params = ParamStore::new();
        seq.init_params(&mut params, rng)?;
        params.insert(&input_name(0), &input.shape(), input.data().to_vec(), true)?;
        let (y, _) = seq.forward(&params, &input, mode)?;
        let projection = Tensor::randn(y.shape(), 1.0, rng);
        Ok((
            SeqObjective {
                seq,
                input_shape: input.shape(),
                projection,
                mode,
                flip_sign: false,
            },
            params,
        ))
    }

    fn input(&self, params: &ParamStore<f64>) -> Result<Tensor<f64>> {
        Tensor::from_vec(self.input_shape, params.value(&input_name(0))?.to_vec())
    }
}

impl Objective for SeqObjective {
    fn loss(&self, params: &ParamStore<f64>) -> Result<f64> {
        let (y, _) = self.seq.forward(params, &self.input(params)?, self.mode)?;
        projection_loss(&y, &self.projection)
    }

    fn loss_and_grad(&self, params: &mut ParamStore<f64>) -> Result<f64> {
        let x = self.input(params)?;
        let (y, cache) = self.seq.forward(params, &x, self.mode)?;
        let g = if self.flip_sign {
            let mut r = self.projection.clone();
            r.scale(-1.0);
            r
        } else {
            self.projection.clone()
        };
        let gx = self.seq.backward(params, &cache, &g)?;
        params.accumulate(&input_name(0), gx.data())?;
        projection_loss(&y, &self.projection)
    }
}
