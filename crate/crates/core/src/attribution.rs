//! Additive attributions over the units of one layer.
//!
//! A [`LayerModel`] exposes the attributed activation `a` of a fixed input and the map
//! from `a` to the model outputs. Every method returns one score per unit.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::cohort::Sample;
use crate::error::{Error, Result};
use crate::rng;
use crate::surrogate::{argmax, Classifier, EmbeddedInput};

/// A model cut at the attributed layer, bound to one input.
pub trait LayerModel {
    /// Attributed activation at the actual input.
    fn activation(&self) -> &[f64];

    /// Output vector computed from an activation `[1, d]` placed on `tape`.
    fn outputs<'t>(&self, tape: &'t Tape, a: Var<'t>) -> Result<Var<'t>>;

    /// Attributed activation when the model input is moved along the straight line from
    /// its input-space baseline (`alpha = 0`) to the actual input (`alpha = 1`).
    fn activation_on_input_path(&self, alpha: f64) -> Result<Vec<f64>>;

    fn dim(&self) -> usize {
        self.activation().len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Ablation,
    Activation,
    GradTimesAct,
    GradShap,
    IntegratedGrad,
    Conductance,
    Shapley,
}

impl Method {
    /// The six methods aggregated by the pipeline, in channel order.
    pub const SIX: [Method; 6] = [
        Method::Ablation,
        Method::Activation,
        Method::GradTimesAct,
        Method::GradShap,
        Method::IntegratedGrad,
        Method::Conductance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ablation => "ablation",
            Method::Activation => "activation",
            Method::GradTimesAct => "grad_x_act",
            Method::GradShap => "gradient_shap",
            Method::IntegratedGrad => "integrated_gradients",
            Method::Conductance => "conductance",
            Method::Shapley => "shapley",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Method::Shapley]
            .iter()
            .chain(Method::SIX.iter())
            .copied()
            .find(|m| m.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Layer,
    SaeFeature,
    Token,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Layer => "layer",
            Level::SaeFeature => "sae_feature",
            Level::Token => "token",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub values: Vec<f64>,
    pub method: Method,
    pub level: Level,
    pub target_class: usize,
    pub sample_id: Option<usize>,
    /// Set when every gradient the method used was exactly zero.
    pub zero_gradient: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Baseline {
    Zero,
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Baseline {
    pub fn resolve(&self, d: usize) -> Result<Vec<f64>> {
        let v = match self {
            Baseline::Zero => vec![0.0; d],
            Baseline::Scalar(x) => vec![*x; d],
            Baseline::Vector(v) if v.len() == d => v.clone(),
            Baseline::Vector(v) => {
                return Err(Error::Contract(format!(
                    "baseline has {} values, layer has {d}",
                    v.len()
                )))
            }
        };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Contract("baseline must be finite".into()));
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Uniform,
    /// Every draw uses α = 1/2.
    Midpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub baseline: Baseline,
    pub ig_steps: usize,
    pub conductance_steps: usize,
    pub shap_samples: usize,
    /// Noise scale of the Gradient SHAP baselines; `None` means 0.1 · std(a).
    pub shap_sigma: Option<f64>,
    pub shap_alpha: AlphaMode,
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            baseline: Baseline::Zero,
            ig_steps: 32,
            conductance_steps: 32,
            shap_samples: 64,
            shap_sigma: None,
            shap_alpha: AlphaMode::Uniform,
            seed: 0,
        }
    }
}

fn row(a: &[f64]) -> Tensor {
    Tensor::matrix(1, a.len(), a.to_vec()).expect("row of width d")
}

/// Output component `target` at activation `a`.
pub fn output_at(m: &dyn LayerModel, a: &[f64], target: usize) -> Result<f64> {
    let tape = Tape::new();
    let out = m.outputs(&tape, tape.constant(row(a)))?;
    out.value()
        .data()
        .get(target)
        .copied()
        .ok_or_else(|| Error::Contract(format!("target {target} outside {} outputs", out.numel())))
}

/// All outputs at activation `a`.
pub fn outputs_at(m: &dyn LayerModel, a: &[f64]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    Ok(m.outputs(&tape, tape.constant(row(a)))?
        .value()
        .data()
        .to_vec())
}

/// Output component `target` and its gradient with respect to the activation.
pub fn output_grad(m: &dyn LayerModel, a: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let av = tape.leaf(row(a));
    let out = m.outputs(&tape, av)?;
    let n = out.numel();
    if target >= n {
        return Err(Error::Contract(format!(
            "target {target} outside {n} outputs"
        )));
    }
    let mut seed = Tensor::zeros(out.shape());
    seed.data_mut()[target] = 1.0;
    let g = tape.vjp(out, &seed, &[av])?;
    Ok((out.value().data()[target], g[0].data().to_vec()))
}

/// Predicted class at the model's own activation (lowest index on ties).
pub fn predicted_class(m: &dyn LayerModel) -> Result<usize> {
    Ok(argmax(&outputs_at(m, m.activation())?))
}

fn vector(
    values: Vec<f64>,
    method: Method,
    target: usize,
    zero_gradient: bool,
) -> AttributionVector {
    AttributionVector {
        values,
        method,
        level: Level::Layer,
        target_class: target,
        sample_id: None,
        zero_gradient,
    }
}

fn all_zero(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

pub fn activation(m: &dyn LayerModel, target: usize) -> AttributionVector {
    vector(m.activation().to_vec(), Method::Activation, target, false)
}

pub fn grad_times_act(m: &dyn LayerModel, target: usize) -> Result<AttributionVector> {
    let a = m.activation();
    let (_, g) = output_grad(m, a, target)?;
    let zero = all_zero(&g);
    let phi = a.iter().zip(&g).map(|(x, y)| x * y).collect();
    Ok(vector(phi, Method::GradTimesAct, target, zero))
}

fn require_steps(steps: usize, what: &str) -> Result<()> {
    if steps == 0 {
        return Err(Error::Config(format!("{what} needs at least one step")));
    }
    Ok(())
}

/// Midpoint-rule path integral from `baseline` to the activation.
pub fn integrated_gradients(
    m: &dyn LayerModel,
    baseline: &Baseline,
    steps: usize,
    target: usize,
) -> Result<AttributionVector> {
    require_steps(steps, "integrated gradients")?;
    let a = m.activation();
    let b = baseline.resolve(a.len())?;
    let mut mean_grad = vec![0.0; a.len()];
    let mut zero = true;
    for s in 1..=steps {
        let alpha = (s as f64 - 0.5) / steps as f64;
        let point: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y + alpha * (x - y)).collect();
        let (_, g) = output_grad(m, &point, target)?;
        zero &= all_zero(&g);
        mean_grad
            .iter_mut()
            .zip(&g)
            .for_each(|(acc, v)| *acc += v / steps as f64);
    }
    let phi = a
        .iter()
        .zip(&b)
        .zip(&mean_grad)
        .map(|((x, y), g)| (x - y) * g)
        .collect();
    Ok(vector(phi, Method::IntegratedGrad, target, zero))
}

pub fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt()
}

/// Expected gradients against Gaussian-perturbed baselines.
#[allow(clippy::too_many_arguments)]
pub fn gradient_shap(
    m: &dyn LayerModel,
    baseline: &Baseline,
    sigma: Option<f64>,
    n_samples: usize,
    alpha_mode: AlphaMode,
    seed: u64,
    target: usize,
) -> Result<AttributionVector> {
    if n_samples == 0 {
        return Err(Error::Config(
            "gradient SHAP needs at least one draw".into(),
        ));
    }
    let a = m.activation();
    let b = baseline.resolve(a.len())?;
    let sigma = sigma.unwrap_or_else(|| 0.1 * std_dev(a));
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!(
            "noise scale must be nonnegative, got {sigma}"
        )));
    }
    let mut r = rng::rng(rng::derive(seed, 0x5ba9));
    let mut phi = vec![0.0; a.len()];
    let mut zero = true;
    for _ in 0..n_samples {
        let bp: Vec<f64> = b.iter().map(|y| y + sigma * rng::normal(&mut r)).collect();
        let alpha = match alpha_mode {
            AlphaMode::Uniform => rand::Rng::gen::<f64>(&mut r),
            AlphaMode::Midpoint => 0.5,
        };
        let point: Vec<f64> = a
            .iter()
            .zip(&bp)
            .map(|(x, y)| y + alpha * (x - y))
            .collect();
        let (_, g) = output_grad(m, &point, target)?;
        zero &= all_zero(&g);
        for i in 0..a.len() {
            phi[i] += (a[i] - bp[i]) * g[i] / n_samples as f64;
        }
    }
    Ok(vector(phi, Method::GradShap, target, zero))
}

/// `φ_S = f(a with S set to the baseline) − f(a)`, reported on every member of `S`.
///
/// `groups` must partition the units; `None` means one group per unit.
pub fn feature_ablation(
    m: &dyn LayerModel,
    baseline: &Baseline,
    groups: Option<&[Vec<usize>]>,
    target: usize,
) -> Result<AttributionVector> {
    let a = m.activation();
    let d = a.len();
    let b = baseline.resolve(d)?;
    let singletons: Vec<Vec<usize>>;
    let groups = match groups {
        Some(g) => g,
        None => {
            singletons = (0..d).map(|i| vec![i]).collect();
            &singletons
        }
    };
    let mut seen = vec![false; d];
    for g in groups {
        for &i in g {
            if i >= d {
                return Err(Error::Contract(format!(
                    "group member {i} outside {d} units"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!(
                    "unit {i} appears in more than one group"
                )));
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Contract("groups do not cover every unit".into()));
    }
    let f0 = output_at(m, a, target)?;
    let mut phi = vec![0.0; d];
    for g in groups {
        if g.iter().all(|&i| a[i] == b[i]) {
            continue;
        }
        let mut ablated = a.to_vec();
        for &i in g {
            ablated[i] = b[i];
        }
        let delta = output_at(m, &ablated, target)? - f0;
        for &i in g {
            phi[i] = delta;
        }
    }
    Ok(vector(phi, Method::Ablation, target, false))
}

/// Neuron conductance along the straight input path, midpoint rule.
///
/// Step `s` contributes `∂f/∂a` at the midpoint of the segment times the change of `a`
/// across the segment, so the scores sum to `f(a(1)) − f(a(0))` as the steps refine.
pub fn conductance(m: &dyn LayerModel, steps: usize, target: usize) -> Result<AttributionVector> {
    require_steps(steps, "conductance")?;
    let d = m.dim();
    let mut phi = vec![0.0; d];
    let mut zero = true;
    let mut prev = m.activation_on_input_path(0.0)?;
    for s in 1..=steps {
        let mid = m.activation_on_input_path((s as f64 - 0.5) / steps as f64)?;
        let next = m.activation_on_input_path(s as f64 / steps as f64)?;
        let (_, g) = output_grad(m, &mid, target)?;
        zero &= all_zero(&g);
        for i in 0..d {
            phi[i] += g[i] * (next[i] - prev[i]);
        }
        prev = next;
    }
    Ok(vector(phi, Method::Conductance, target, zero))
}

pub const MAX_SHAPLEY_UNITS: usize = 12;

/// Exact Shapley values over all coalitions; absent units take the baseline value.
pub fn shapley_exact(
    m: &dyn LayerModel,
    baseline: &Baseline,
    target: usize,
) -> Result<AttributionVector> {
    let a = m.activation();
    let d = a.len();
    if d > MAX_SHAPLEY_UNITS {
        return Err(Error::Scale(format!(
            "exact Shapley enumerates 2^{d} coalitions; use gradient SHAP above {MAX_SHAPLEY_UNITS} units"
        )));
    }
    let b = baseline.resolve(d)?;
    let n = 1usize << d;
    let mut value = vec![0.0; n];
    let mut point = vec![0.0; d];
    for (mask, v) in value.iter_mut().enumerate() {
        for i in 0..d {
            point[i] = if mask >> i & 1 == 1 { a[i] } else { b[i] };
        }
        *v = output_at(m, &point, target)?;
    }
    // weight of a coalition of size s that excludes unit i: s!(d-s-1)!/d!
    let mut fact = vec![1.0f64; d + 1];
    for k in 1..=d {
        fact[k] = fact[k - 1] * k as f64;
    }
    let weight: Vec<f64> = (0..d)
        .map(|s| fact[s] * fact[d - s - 1] / fact[d])
        .collect();
    let mut phi = vec![0.0; d];
    for mask in 0..n {
        let size = mask.count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            if mask >> i & 1 == 0 {
                *p += weight[size] * (value[mask | 1 << i] - value[mask]);
            }
        }
    }
    Ok(vector(phi, Method::Shapley, target, false))
}

/// Runs one method with the settings in `cfg`.
pub fn attribute(
    m: &dyn LayerModel,
    method: Method,
    target: usize,
    cfg: &AttributionConfig,
) -> Result<AttributionVector> {
    match method {
        Method::Activation => Ok(activation(m, target)),
        Method::GradTimesAct => grad_times_act(m, target),
        Method::IntegratedGrad => integrated_gradients(m, &cfg.baseline, cfg.ig_steps, target),
        Method::GradShap => gradient_shap(
            m,
            &cfg.baseline,
            cfg.shap_sigma,
            cfg.shap_samples,
            cfg.shap_alpha,
            cfg.seed,
            target,
        ),
        Method::Ablation => feature_ablation(m, &cfg.baseline, None, target),
        Method::Conductance => conductance(m, cfg.conductance_steps, target),
        Method::Shapley => shapley_exact(m, &cfg.baseline, target),
    }
}

/// The classifier cut at its final block for one sample.
///
/// The input-space baseline of the conductance path is the all-zero token-embedding
/// matrix; positional embeddings stay in place along the path. Path activations are
/// memoized per α, since perturbed and SAE-wrapped copies of the layer reuse them.
pub struct SurrogateLayer<'m> {
    pub model: &'m Classifier,
    pub input: EmbeddedInput,
    activation: Vec<f64>,
    path: RefCell<HashMap<u64, Vec<f64>>>,
}

impl<'m> SurrogateLayer<'m> {
    pub fn new(model: &'m Classifier, sample: &Sample) -> Result<Self> {
        Self::from_input(model, model.embed(sample))
    }

    pub fn from_input(model: &'m Classifier, input: EmbeddedInput) -> Result<Self> {
        let activation = model.activation_from_embeddings(&input.embeddings, &input.positions)?;
        Ok(Self {
            model,
            input,
            activation,
            path: RefCell::new(HashMap::new()),
        })
    }
}

impl LayerModel for SurrogateLayer<'_> {
    fn activation(&self) -> &[f64] {
        &self.activation
    }

    fn outputs<'t>(&self, tape: &'t Tape, a: Var<'t>) -> Result<Var<'t>> {
        let p = self.model.bind(tape, false);
        self.model.head_probs(&p, a)
    }

    fn activation_on_input_path(&self, alpha: f64) -> Result<Vec<f64>> {
        if let Some(v) = self.path.borrow().get(&alpha.to_bits()) {
            return Ok(v.clone());
        }
        let scaled = self.input.embeddings.map(|x| alpha * x);
        let v = self
            .model
            .activation_from_embeddings(&scaled, &self.input.positions)?;
        self.path.borrow_mut().insert(alpha.to_bits(), v.clone());
        Ok(v)
    }
}

/// Writes `sample_id,method,level,unit_index,value` rows.
pub fn write_csv(path: &Path, vectors: &[AttributionVector]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(crate::cohort::csv_err)?;
    w.write_record(["sample_id", "method", "level", "unit_index", "value"])
        .map_err(crate::cohort::csv_err)?;
    for v in vectors {
        let id = v.sample_id.map(|i| i.to_string()).unwrap_or_default();
        for (i, x) in v.values.iter().enumerate() {
            w.write_record([
                id.as_str(),
                v.method.name(),
                v.level.name(),
                &i.to_string(),
                &format!("{x:e}"),
            ])
            .map_err(crate::cohort::csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear {
        w: Vec<f64>,
        a: Vec<f64>,
    }

    impl LayerModel for Linear {
        fn activation(&self) -> &[f64] {
            &self.a
        }
        fn outputs<'t>(&self, tape: &'t Tape, a: Var<'t>) -> Result<Var<'t>> {
            let w = tape.constant(Tensor::matrix(self.w.len(), 1, self.w.clone())?);
            a.matmul(w)
        }
        fn activation_on_input_path(&self, alpha: f64) -> Result<Vec<f64>> {
            Ok(self.a.iter().map(|x| alpha * x).collect())
        }
    }

    #[test]
    fn step_counts_must_be_positive() {
        let m = Linear {
            w: vec![1.0],
            a: vec![2.0],
        };
        assert!(matches!(
            integrated_gradients(&m, &Baseline::Zero, 0, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(conductance(&m, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn overlapping_groups_are_rejected() {
        let m = Linear {
            w: vec![1.0, 2.0],
            a: vec![2.0, 1.0],
        };
        let groups = vec![vec![0, 1], vec![1]];
        assert!(matches!(
            feature_ablation(&m, &Baseline::Zero, Some(&groups), 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_weight_flags_zero_gradient() {
        let m = Linear {
            w: vec![0.0, 0.0],
            a: vec![2.0, 1.0],
        };
        assert!(grad_times_act(&m, 0).unwrap().zero_gradient);
    }
}
