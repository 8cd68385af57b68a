//! Sparse autoencoders over layer activations.
//!
//! Row-vector convention throughout: `pre = (x − b_dec) W_enc + b_enc`, `x̂ = a W_dec + b_dec`.
//! Row `i` of `W_dec` is dictionary atom `i`.

use std::cell::OnceCell;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{matmul, Tape, Tensor, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::optim::{AdamW, Params};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SaeVariant {
    Standard,
    TopK,
    JumpReLU,
    Gated,
}

impl SaeVariant {
    pub const ALL: [SaeVariant; 4] = [
        SaeVariant::Standard,
        SaeVariant::TopK,
        SaeVariant::JumpReLU,
        SaeVariant::Gated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SaeVariant::Standard => "standard",
            SaeVariant::TopK => "topk",
            SaeVariant::JumpReLU => "jumprelu",
            SaeVariant::Gated => "gated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
    }

    fn has_threshold(self) -> bool {
        matches!(self, SaeVariant::JumpReLU | SaeVariant::Gated)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    pub variant: SaeVariant,
    pub d: usize,
    pub expansion: usize,
    /// Active features kept by TopK.
    pub k: usize,
    /// Initial threshold of JumpReLU and Gated.
    pub theta_init: f64,
    pub seed: u64,
}

impl SaeConfig {
    pub fn new(variant: SaeVariant, d: usize, seed: u64) -> Self {
        Self {
            variant,
            d,
            expansion: 32,
            k: 16,
            theta_init: 0.01,
            seed,
        }
    }

    pub fn n_features(&self) -> usize {
        self.d * self.expansion
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.expansion == 0 {
            return Err(Error::Config("SAE needs d ≥ 1 and expansion ≥ 1".into()));
        }
        if self.variant == SaeVariant::TopK && (self.k == 0 || self.k > self.n_features()) {
            return Err(Error::Config(format!(
                "K = {} must lie in 1..={}",
                self.k,
                self.n_features()
            )));
        }
        if !(self.theta_init >= 0.0) {
            return Err(Error::Config("threshold must be nonnegative".into()));
        }
        Ok(())
    }
}

/// How the step function inside JumpReLU and Gated is differentiated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepGrad {
    /// Box estimator of width `eps` and height `1/eps` (training).
    Straight(f64),
    /// The step is a constant mask, giving the almost-everywhere exact Jacobian.
    Frozen,
}

/// Default width of the straight-through window.
pub const STE_EPS: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct Sae {
    pub config: SaeConfig,
    params: Params,
    /// Constant copies of the parameters handed to tapes without cloning; cleared on update.
    shared: OnceCell<Vec<Rc<Tensor>>>,
}

impl PartialEq for Sae {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

const W_ENC: usize = 0;
const B_ENC: usize = 1;
const W_DEC: usize = 2;
const B_DEC: usize = 3;
const THETA: usize = 4;
const W_GATE: usize = 5;
const B_GATE: usize = 6;

fn param_names(variant: SaeVariant) -> &'static [&'static str] {
    match variant {
        SaeVariant::Standard | SaeVariant::TopK => &["w_enc", "b_enc", "w_dec", "b_dec"],
        SaeVariant::JumpReLU => &["w_enc", "b_enc", "w_dec", "b_dec", "theta"],
        SaeVariant::Gated => &[
            "w_mag", "b_mag", "w_dec", "b_dec", "theta", "w_gate", "b_gate",
        ],
    }
}

fn step(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Indices of the `k` largest values, ties to the lowest index.
fn top_k_mask(row: &[f64], k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let k = k.min(row.len());
    if k < row.len() {
        idx.select_nth_unstable_by(k, |&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
    }
    let mut mask = vec![0.0; row.len()];
    for &i in &idx[..k] {
        mask[i] = 1.0;
    }
    mask
}

impl Sae {
    /// Random unit-norm dictionary, encoder initialized to its transpose, zero biases.
    pub fn new(config: SaeConfig) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d, config.n_features());
        let mut r = rng::rng(rng::derive(config.seed, 0x5ae));
        let mut w_dec = Tensor::matrix(f, d, rng::normals(&mut r, f * d))?;
        normalize_rows(&mut w_dec, 0.0);
        let w_enc = w_dec.transpose2()?;
        let mut params = Params::new();
        let names = param_names(config.variant);
        params.push(names[W_ENC], w_enc.clone());
        params.push(names[B_ENC], Tensor::zeros(vec![f]));
        params.push(names[W_DEC], w_dec);
        params.push(names[B_DEC], Tensor::zeros(vec![d]));
        if config.variant.has_threshold() {
            params.push(names[THETA], Tensor::full(vec![f], config.theta_init));
        }
        if config.variant == SaeVariant::Gated {
            params.push(names[W_GATE], w_enc);
            params.push(names[B_GATE], Tensor::zeros(vec![f]));
        }
        Ok(Self {
            config,
            params,
            shared: OnceCell::new(),
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn n_features(&self) -> usize {
        self.config.n_features()
    }

    pub fn variant(&self) -> SaeVariant {
        self.config.variant
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Replaces a parameter by name; the shape must not change.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self.params.index_of(name).ok_or_else(|| {
            Error::Contract(format!(
                "{} SAE has no parameter {name}",
                self.variant().name()
            ))
        })?;
        if self.params.get(i).shape() != t.shape() {
            return Err(Error::Contract(format!(
                "{name} has shape {:?}, got {:?}",
                self.params.get(i).shape(),
                t.shape()
            )));
        }
        *self.params.get_mut(i) = t;
        self.shared = OnceCell::new();
        Ok(())
    }

    pub fn decoder(&self) -> &Tensor {
        self.params.get(W_DEC)
    }

    pub fn decoder_bias(&self) -> &Tensor {
        self.params.get(B_DEC)
    }

    pub fn encoder(&self) -> &Tensor {
        self.params.get(W_ENC)
    }

    fn affine(&self, x: &Tensor, w: usize, b: usize) -> Result<Tensor> {
        let centered = x.zip_rows(self.params.get(B_DEC), |v, c| v - c)?;
        let mut pre = matmul(&centered, self.params.get(w))?;
        pre = pre.zip_rows(self.params.get(b), |v, c| v + c)?;
        Ok(pre)
    }

    /// Encoder pre-activation `(x − b_dec) W_enc + b_enc` for a batch `[n, d]`.
    pub fn pre_activation(&self, x: &Tensor) -> Result<Tensor> {
        self.affine(x, W_ENC, B_ENC)
    }

    /// Feature activations for a batch `[n, d]`, returning `[n, F]`.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.d() || !x.is_finite() {
            return Err(Error::Contract(format!(
                "encode expects finite rows of width {}",
                self.d()
            )));
        }
        let pre = self.pre_activation(x)?;
        let f = self.n_features();
        let mut out = pre.clone();
        match self.variant() {
            SaeVariant::Standard => out = out.map(|v| v.max(0.0)),
            SaeVariant::TopK => {
                for (row, src) in out.data_mut().chunks_mut(f).zip(pre.data().chunks(f)) {
                    let mask = top_k_mask(src, self.config.k);
                    for (v, m) in row.iter_mut().zip(mask) {
                        *v = if m == 1.0 { v.max(0.0) } else { 0.0 };
                    }
                }
            }
            SaeVariant::JumpReLU => {
                let theta = self.params.get(THETA).data();
                for row in out.data_mut().chunks_mut(f) {
                    for (v, t) in row.iter_mut().zip(theta) {
                        *v *= step(*v - t);
                    }
                }
            }
            SaeVariant::Gated => {
                let gate = self.affine(x, W_GATE, B_GATE)?;
                let theta = self.params.get(THETA).data();
                for (row, g) in out.data_mut().chunks_mut(f).zip(gate.data().chunks(f)) {
                    for ((v, gv), t) in row.iter_mut().zip(g).zip(theta) {
                        *v *= step(gv - t);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .encode_batch(&Tensor::matrix(1, x.len(), x.to_vec())?)?
            .into_data())
    }

    /// `a W_dec + b_dec` for a batch `[n, F]`.
    pub fn decode_batch(&self, a: &Tensor) -> Result<Tensor> {
        if a.cols() != self.n_features() || !a.is_finite() {
            return Err(Error::Contract(format!(
                "decode expects finite rows of width {}",
                self.n_features()
            )));
        }
        matmul(a, self.params.get(W_DEC))?.zip_rows(self.params.get(B_DEC), |v, c| v + c)
    }

    pub fn decode(&self, a: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .decode_batch(&Tensor::matrix(1, a.len(), a.to_vec())?)?
            .into_data())
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        if trainable {
            self.params.bind(tape)
        } else {
            let shared = self
                .shared
                .get_or_init(|| self.params.tensors().iter().cloned().map(Rc::new).collect());
            shared
                .iter()
                .map(|t| tape.constant_rc(Rc::clone(t)))
                .collect()
        }
    }

    /// Encoder on the tape; `x` is `[n, d]`.
    pub fn encode_on_tape<'t>(&self, p: &[Var<'t>], x: Var<'t>, grad: StepGrad) -> Result<Var<'t>> {
        let tape = x.tape();
        let centered = x.sub(p[B_DEC])?;
        let pre = centered.matmul(p[W_ENC])?.add(p[B_ENC])?;
        let gate_of = |z: Var<'t>| -> Result<Var<'t>> {
            let shifted = z.sub(p[THETA])?;
            match grad {
                StepGrad::Straight(eps) => shifted.heaviside_ste(eps),
                StepGrad::Frozen => Ok(tape.constant(shifted.value().map(step))),
            }
        };
        match self.variant() {
            SaeVariant::Standard => pre.relu(),
            SaeVariant::TopK => {
                let f = self.n_features();
                let v = pre.value();
                let mask: Vec<f64> = v
                    .data()
                    .chunks(f)
                    .flat_map(|row| top_k_mask(row, self.config.k))
                    .collect();
                pre.mul(tape.constant(Tensor::new(v.shape().to_vec(), mask)?))?
                    .relu()
            }
            SaeVariant::JumpReLU => pre.mul(gate_of(pre)?),
            SaeVariant::Gated => {
                let gate = centered.matmul(p[W_GATE])?.add(p[B_GATE])?;
                pre.mul(gate_of(gate)?)
            }
        }
    }

    pub fn decode_on_tape<'t>(&self, p: &[Var<'t>], a: Var<'t>) -> Result<Var<'t>> {
        a.matmul(p[W_DEC])?.add(p[B_DEC])
    }

    /// Mean squared reconstruction error over all entries of `x`.
    pub fn reconstruction_mse(&self, x: &Tensor) -> Result<f64> {
        let xh = self.decode_batch(&self.encode_batch(x)?)?;
        Ok(x.data()
            .iter()
            .zip(xh.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / x.numel() as f64)
    }

    /// Per-neuron and per-feature counts of decoder weights above `tau` in magnitude.
    pub fn polysemanticity(&self, tau: f64) -> Result<Polysemanticity> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!(
                "threshold must be positive, got {tau}"
            )));
        }
        let (d, f) = (self.d(), self.n_features());
        let w = self.decoder().data();
        let mut neuron_counts = vec![0; d];
        let mut feature_counts = vec![0; f];
        for i in 0..f {
            for j in 0..d {
                if w[i * d + j].abs() > tau {
                    neuron_counts[j] += 1;
                    feature_counts[i] += 1;
                }
            }
        }
        let monosemantic = neuron_counts.iter().map(|&c| c <= 1).collect();
        Ok(Polysemanticity {
            neuron_counts,
            feature_counts,
            monosemantic,
        })
    }

    pub fn decoder_norms(&self) -> Vec<f64> {
        self.decoder()
            .data()
            .chunks(self.d())
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    fn meta(&self) -> serde_json::Value {
        json!({
            "kind": "sae",
            "variant": self.variant().name(),
            "d": self.d(),
            "F": self.n_features(),
            "K": self.config.k,
            "expansion": self.config.expansion,
            "theta_init": self.config.theta_init,
            "seed": self.config.seed,
        })
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(&self.meta(), &self.params)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, params) = checkpoint::from_bytes(bytes)?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Validation(format!("SAE checkpoint lacks {k}")))
        };
        let variant = field("variant")?
            .as_str()
            .and_then(SaeVariant::parse)
            .ok_or_else(|| Error::Validation("unknown SAE variant".into()))?;
        let int = |k: &str| -> Result<usize> {
            field(k)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Validation(format!("{k} is not an integer")))
        };
        let config = SaeConfig {
            variant,
            d: int("d")?,
            expansion: int("expansion")?,
            k: int("K")?,
            theta_init: field("theta_init")?.as_f64().unwrap_or(0.0),
            seed: field("seed")?.as_u64().unwrap_or(0),
        };
        let fresh = Sae::new(config.clone())?;
        if fresh.params.shapes() != params.shapes() {
            return Err(Error::Validation(
                "SAE checkpoint tensors do not match its header".into(),
            ));
        }
        Ok(Self {
            config,
            params,
            shared: OnceCell::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

/// Rescales rows whose norm is off unit by more than `tol`.
fn normalize_rows(w: &mut Tensor, tol: f64) {
    let d = w.cols();
    for row in w.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 && (n - 1.0).abs() > tol {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Polysemanticity {
    /// Features with a large weight on neuron `j`.
    pub neuron_counts: Vec<usize>,
    /// Neurons a feature's atom loads on.
    pub feature_counts: Vec<usize>,
    pub monosemantic: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainConfig {
    pub variant: SaeVariant,
    pub expansion: usize,
    pub k: usize,
    pub l1: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub theta_init: f64,
    pub ste_eps: f64,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            variant: SaeVariant::TopK,
            expansion: 32,
            k: 16,
            l1: 1e-3,
            lr: 1e-3,
            steps: 500,
            batch_size: 64,
            theta_init: 0.01,
            ste_eps: STE_EPS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SaeCurves {
    /// Training objective per step.
    pub loss: Vec<f64>,
    /// Reconstruction MSE over the whole dataset before training and after each step.
    pub mse: Vec<f64>,
}

/// Trains on the rows of `data` (`[n, d]`). The decoder bias starts at the data mean.
pub fn train_sae(data: &Tensor, cfg: &SaeTrainConfig) -> Result<(Sae, SaeCurves)> {
    if cfg.lr < 0.0 || cfg.batch_size == 0 || cfg.l1 < 0.0 || !(cfg.ste_eps > 0.0) {
        return Err(Error::Config(
            "SAE training needs lr ≥ 0, l1 ≥ 0, batch ≥ 1, eps > 0".into(),
        ));
    }
    let (n, d) = (data.rows(), data.cols());
    if n == 0 {
        return Err(Error::EmptyCohort);
    }
    let mut sae = Sae::new(SaeConfig {
        variant: cfg.variant,
        d,
        expansion: cfg.expansion,
        k: cfg.k,
        theta_init: cfg.theta_init,
        seed: cfg.seed,
    })?;
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| data.get2(i, j)).sum::<f64>() / n as f64)
        .collect();
    sae.set("b_dec", Tensor::vector(mean))?;
    let mut curves = SaeCurves {
        loss: Vec::with_capacity(cfg.steps),
        mse: vec![sae.reconstruction_mse(data)?],
    };
    let mut opt = AdamW::new(cfg.lr, 0.0);
    let mut r = rng::rng(rng::derive(cfg.seed, 0xba7c));
    let batch = cfg.batch_size.min(n);
    for step in 0..cfg.steps {
        let rows: Vec<Option<usize>> = (0..batch)
            .map(|_| Some(rand::Rng::gen_range(&mut r, 0..n)))
            .collect();
        let fail = |e: Error| Error::Training {
            step,
            detail: e.to_string(),
        };
        let tape = Tape::new();
        let p = sae.bind(&tape, true);
        let x = tape
            .constant(data.clone())
            .gather_rows(&rows)
            .map_err(fail)?;
        let a = sae
            .encode_on_tape(&p, x, StepGrad::Straight(cfg.ste_eps))
            .map_err(fail)?;
        let xh = sae.decode_on_tape(&p, a).map_err(fail)?;
        let mut loss = xh
            .sub(x)
            .and_then(|e| e.square())
            .and_then(|e| e.sum())
            .map_err(fail)?
            .scale(1.0 / batch as f64)
            .map_err(fail)?;
        if cfg.variant == SaeVariant::Standard && cfg.l1 > 0.0 {
            let l1 = a
                .abs()
                .and_then(|v| v.sum())
                .and_then(|v| v.scale(cfg.l1 / batch as f64))
                .map_err(fail)?;
            loss = loss.add(l1).map_err(fail)?;
        }
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                detail: "loss is not finite".into(),
            });
        }
        let grads = tape.gradients(loss, &p).map_err(fail)?;
        sae.shared = OnceCell::new();
        opt.step(&mut sae.params, &grads);
        normalize_rows(sae.params.get_mut(W_DEC), 1e-12);
        if cfg.variant.has_threshold() {
            sae.params
                .get_mut(THETA)
                .data_mut()
                .iter_mut()
                .for_each(|t| *t = t.max(0.0));
        }
        if !sae.params.is_finite() {
            return Err(Error::Training {
                step,
                detail: "parameters became non-finite".into(),
            });
        }
        curves.loss.push(value);
        curves.mse.push(sae.reconstruction_mse(data)?);
    }
    Ok((sae, curves))
}

/// Sparse nonnegative mixtures of `n_atoms` random unit directions in `d` dimensions.
pub fn synthetic_activations(
    seed: u64,
    n: usize,
    d: usize,
    n_atoms: usize,
    active: usize,
) -> Tensor {
    let mut r = rng::rng(seed);
    let mut atoms =
        Tensor::matrix(n_atoms, d, rng::normals(&mut r, n_atoms * d)).expect("atom shape");
    normalize_rows(&mut atoms, 0.0);
    let mut out = vec![0.0; n * d];
    for row in out.chunks_mut(d) {
        for _ in 0..active {
            let i = rand::Rng::gen_range(&mut r, 0..n_atoms);
            let c = 0.5 + rng::normal(&mut r).abs();
            row.iter_mut()
                .zip(atoms.row(i))
                .for_each(|(v, a)| *v += c * a);
        }
    }
    Tensor::matrix(n, d, out).expect("data shape")
}

/// Writes `feature_id,top_tokens,decoder_norm`; `top_tokens[i]` is joined with spaces.
pub fn write_feature_dictionary(path: &Path, sae: &Sae, top_tokens: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(crate::cohort::csv_err)?;
    w.write_record(["feature_id", "top_tokens", "decoder_norm"])
        .map_err(crate::cohort::csv_err)?;
    for (i, norm) in sae.decoder_norms().iter().enumerate() {
        let tokens = top_tokens.get(i).map(|t| t.join(" ")).unwrap_or_default();
        w.write_record([i.to_string(), tokens, format!("{norm:.12}")])
            .map_err(crate::cohort::csv_err)?;
    }
    w.flush()?;
    Ok(())
}
