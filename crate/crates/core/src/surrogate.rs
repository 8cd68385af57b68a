//! Small pre-norm transformer classifier reading the `[CLS]` position.
//!
//! The attributed layer is the residual stream of the final block at `[CLS]`; the head
//! applies a parameter-free layer norm and one linear map. Pad positions are dropped
//! before attention, which is equivalent to masking them out of every key set.

use std::rc::Rc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint;
use crate::cohort::{self, Cohort, Sample, PAD};
use crate::error::{Error, Result};
use crate::optim::{init_normal, AdamW, Params};
use crate::rng;

const PER_LAYER: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn new(n_classes: usize, seed: u64) -> Self {
        Self {
            vocab: cohort::VOCAB_SIZE,
            seq_len: cohort::SEQ_LEN,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            n_classes,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.d_model % self.n_heads != 0
            || self.n_classes < 2
        {
            return Err(Error::Config(format!("invalid classifier shape {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    params: Params,
    shared: Vec<Rc<Tensor>>,
}

impl PartialEq for Classifier {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Class probabilities and the argmax label (lowest index on ties).
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Token embedding rows of a sample's non-pad tokens, with their positions.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedInput {
    pub embeddings: Tensor,
    pub positions: Vec<usize>,
}

impl Classifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(rng::derive(config.seed, 0xc1a5));
        let d = config.d_model;
        let mut p = Params::new();
        // token rows start smaller than position rows so early attention keys are mostly positional
        p.push("tok_emb", init_normal(&mut r, &[config.vocab, d], 0.3));
        p.push("pos_emb", init_normal(&mut r, &[config.seq_len, d], 1.0));
        let lin =
            |r: &mut rng::Rng, i: usize, o: usize| init_normal(r, &[i, o], 1.0 / (i as f64).sqrt());
        for l in 0..config.n_layers {
            for name in ["q", "k", "v", "o"] {
                p.push(format!("l{l}.w{name}"), lin(&mut r, d, d));
                p.push(format!("l{l}.b{name}"), Tensor::zeros(vec![d]));
            }
            p.push(format!("l{l}.w1"), lin(&mut r, d, config.d_ff));
            p.push(format!("l{l}.b1"), Tensor::zeros(vec![config.d_ff]));
            p.push(format!("l{l}.w2"), lin(&mut r, config.d_ff, d));
            p.push(format!("l{l}.b2"), Tensor::zeros(vec![d]));
        }
        // a zero head gives every input the uniform distribution at initialization
        p.push("head.w", Tensor::zeros(vec![d, config.n_classes]));
        p.push("head.b", Tensor::zeros(vec![config.n_classes]));
        Ok(Self::from_params(config, p))
    }

    fn from_params(config: ClassifierConfig, params: Params) -> Self {
        let shared = params.tensors().iter().cloned().map(Rc::new).collect();
        Self {
            config,
            params,
            shared,
        }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Index of the attributed layer: always the final block.
    /// Replaces parameter `i`; the shape must not change.
    pub fn set_param(&mut self, i: usize, t: Tensor) -> Result<()> {
        if i >= self.params.len() || self.params.get(i).shape() != t.shape() {
            return Err(Error::Contract(format!(
                "parameter {i} cannot take shape {:?}",
                t.shape()
            )));
        }
        self.shared[i] = Rc::new(t.clone());
        *self.params.get_mut(i) = t;
        Ok(())
    }

    pub fn layer_of_interest(&self) -> usize {
        self.config.n_layers - 1
    }

    /// Dimension of the attributed layer.
    pub fn d(&self) -> usize {
        self.config.d_model
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        if trainable {
            self.params.bind(tape)
        } else {
            self.shared
                .iter()
                .map(|t| tape.constant_rc(Rc::clone(t)))
                .collect()
        }
    }

    pub fn embed(&self, sample: &Sample) -> EmbeddedInput {
        let positions: Vec<usize> = (0..sample.tokens.len().min(self.config.seq_len))
            .filter(|&i| sample.tokens[i] != PAD)
            .collect();
        let d = self.config.d_model;
        let table = self.params.get(0);
        let mut data = Vec::with_capacity(positions.len() * d);
        for &p in &positions {
            data.extend_from_slice(table.row(sample.tokens[p] as usize));
        }
        EmbeddedInput {
            embeddings: Tensor::matrix(positions.len(), d, data).expect("rows of width d"),
            positions,
        }
    }

    /// Token embeddings looked up on the tape so gradients reach the table.
    pub fn embed_on_tape<'t>(
        &self,
        p: &[Var<'t>],
        sample: &Sample,
    ) -> Result<(Var<'t>, Vec<usize>)> {
        let positions: Vec<usize> = (0..sample.tokens.len().min(self.config.seq_len))
            .filter(|&i| sample.tokens[i] != PAD)
            .collect();
        let rows: Vec<Option<usize>> = positions
            .iter()
            .map(|&i| Some(sample.tokens[i] as usize))
            .collect();
        Ok((p[0].gather_rows(&rows)?, positions))
    }

    fn attention<'t>(
        &self,
        p: &[Var<'t>],
        base: usize,
        q_in: Var<'t>,
        kv_in: Var<'t>,
    ) -> Result<Var<'t>> {
        let q = q_in.matmul(p[base])?.add(p[base + 1])?;
        let k = kv_in.matmul(p[base + 2])?.add(p[base + 3])?;
        let v = kv_in.matmul(p[base + 4])?.add(p[base + 5])?;
        let dh = self.config.d_model / self.config.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(lo, hi)?;
            let kh = k.slice_cols(lo, hi)?;
            let vh = v.slice_cols(lo, hi)?;
            let w = qh.matmul(kh.transpose()?)?.scale(scale)?.softmax()?;
            heads.push(w.matmul(vh)?);
        }
        Var::concat_cols(&heads)?
            .matmul(p[base + 6])?
            .add(p[base + 7])
    }

    /// Residual sum of the final block at `[CLS]`, shape `[1, d]`; the head normalizes it.
    ///
    /// `emb` holds the token embeddings of the non-pad `positions`; the positional table
    /// is added here. Blocks normalize after each residual sum, so attention reads the raw
    /// embeddings and a shift of one token's embedding reaches the output.
    pub fn activation_from<'t>(
        &self,
        p: &[Var<'t>],
        emb: Var<'t>,
        positions: &[usize],
    ) -> Result<Var<'t>> {
        if positions.first() != Some(&0) {
            return Err(Error::Contract(
                "input must start with the [CLS] position".into(),
            ));
        }
        let pos_rows: Vec<Option<usize>> = positions.iter().map(|&i| Some(i)).collect();
        let mut h = emb.add(p[1].gather_rows(&pos_rows)?)?;
        let last = self.config.n_layers - 1;
        for l in 0..self.config.n_layers {
            let base = 2 + l * PER_LAYER;
            // only the [CLS] row of the last block feeds the head
            let q_in = if l == last {
                h.gather_rows(&[Some(0)])?
            } else {
                h
            };
            let h1 = q_in.add(self.attention(p, base, q_in, h)?)?.layernorm()?;
            let f = h1
                .matmul(p[base + 8])?
                .add(p[base + 9])?
                .relu()?
                .matmul(p[base + 10])?
                .add(p[base + 11])?;
            h = h1.add(f)?;
            if l != last {
                h = h.layernorm()?;
            }
        }
        Ok(h)
    }

    /// Class logits from an attributed-layer activation `[1, d]`.
    pub fn head_logits<'t>(&self, p: &[Var<'t>], a: Var<'t>) -> Result<Var<'t>> {
        let n = p.len();
        a.layernorm()?.matmul(p[n - 2])?.add(p[n - 1])
    }

    pub fn head_probs<'t>(&self, p: &[Var<'t>], a: Var<'t>) -> Result<Var<'t>> {
        self.head_logits(p, a)?.softmax()
    }

    pub fn layer_activations(&self, sample: &Sample) -> Result<Vec<f64>> {
        let e = self.embed(sample);
        self.activation_from_embeddings(&e.embeddings, &e.positions)
    }

    pub fn activation_from_embeddings(
        &self,
        emb: &Tensor,
        positions: &[usize],
    ) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let a = self.activation_from(&p, tape.constant(emb.clone()), positions)?;
        Ok(a.value().data().to_vec())
    }

    /// Head output for a given activation vector.
    pub fn probs_from_activation(&self, a: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let av = tape.constant(Tensor::matrix(1, a.len(), a.to_vec())?);
        Ok(self.head_probs(&p, av)?.value().data().to_vec())
    }

    pub fn predict_from_embeddings(&self, emb: &Tensor, positions: &[usize]) -> Result<Prediction> {
        let a = self.activation_from_embeddings(emb, positions)?;
        let probs = self.probs_from_activation(&a)?;
        Ok(Prediction {
            label: argmax(&probs),
            probs,
        })
    }

    pub fn predict(&self, sample: &Sample) -> Result<Prediction> {
        let e = self.embed(sample);
        self.predict_from_embeddings(&e.embeddings, &e.positions)
    }

    pub fn accuracy(&self, cohort: &Cohort) -> Result<f64> {
        if cohort.is_empty() {
            return Err(Error::EmptyCohort);
        }
        let mut hits = 0;
        for s in &cohort.samples {
            if self.predict(s)?.label == s.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / cohort.len() as f64)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let meta = json!({
            "kind": "classifier",
            "architecture": self.config,
            "seed": self.config.seed,
            "vocab_hash": cohort::vocab().hash(),
        });
        checkpoint::to_bytes(&meta, &self.params)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, params) = checkpoint::from_bytes(bytes)?;
        if meta["kind"] != "classifier" {
            return Err(Error::Validation("not a classifier checkpoint".into()));
        }
        let config: ClassifierConfig = serde_json::from_value(meta["architecture"].clone())?;
        let fresh = Classifier::new(config.clone())?;
        if fresh.params.shapes() != params.shapes() {
            return Err(Error::Validation(
                "checkpoint tensors do not match the architecture".into(),
            ));
        }
        Ok(Self::from_params(config, params))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub patience: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            patience: 10,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub steps: usize,
}

fn cross_entropy<'t>(logits: Var<'t>, label: usize) -> Result<Var<'t>> {
    let m = logits
        .value()
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.shift(-m)?.exp()?.sum()?.log()?.shift(m)?;
    let n = logits.numel();
    let picked = logits
        .reshape(vec![n])?
        .gather(vec![Some(label)], vec![1])?
        .sum()?;
    lse.sub(picked)
}

fn mean_loss(model: &Classifier, cohort: &Cohort) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut hits = 0;
    for s in &cohort.samples {
        let tape = Tape::new();
        let p = model.bind(&tape, false);
        let e = model.embed(s);
        let a = model.activation_from(&p, tape.constant(e.embeddings), &e.positions)?;
        let logits = model.head_logits(&p, a)?;
        loss += cross_entropy(logits, s.label)?.item();
        if argmax(logits.value().data()) == s.label {
            hits += 1;
        }
    }
    let n = cohort.len().max(1) as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Trains with AdamW on `train`, keeping the parameters with the lowest validation loss.
pub fn train_classifier(
    train: &Cohort,
    val: &Cohort,
    model_config: ClassifierConfig,
    config: &TrainConfig,
) -> Result<(Classifier, TrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let mut model = Classifier::new(model_config)?;
    let mut report = TrainReport::default();
    if config.epochs == 0 {
        return Ok((model, report));
    }
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut r = rng::rng(rng::derive(config.seed, 0x7a1));
    let (mut best_loss, _) = if val.is_empty() {
        (f64::INFINITY, 0.0)
    } else {
        mean_loss(&model, val)?
    };
    let mut best = model.params.clone();
    let mut since_best = 0;
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut r);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads: Option<Vec<Tensor>> = None;
            for &i in batch {
                let s = &train.samples[i];
                let tape = Tape::new();
                let p = model.bind(&tape, true);
                let fail = |e: Error| Error::Training {
                    step,
                    detail: e.to_string(),
                };
                let (emb, positions) = model.embed_on_tape(&p, s).map_err(fail)?;
                let a = model.activation_from(&p, emb, &positions).map_err(fail)?;
                let loss = cross_entropy(model.head_logits(&p, a).map_err(fail)?, s.label)
                    .map_err(fail)?;
                epoch_loss += loss.item();
                let g = tape.gradients(loss, &p).map_err(fail)?;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.axpy(1.0, b)),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            opt.step(&mut model.params, &grads);
            if !model.params.is_finite() {
                return Err(Error::Training {
                    step,
                    detail: "parameters became non-finite".into(),
                });
            }
            step += 1;
        }
        model.shared = model
            .params
            .tensors()
            .iter()
            .cloned()
            .map(Rc::new)
            .collect();
        report.train_loss.push(epoch_loss / train.len() as f64);
        if val.is_empty() {
            best = model.params.clone();
            report.best_epoch = epoch;
            continue;
        }
        let (vl, va) = mean_loss(&model, val)?;
        report.val_loss.push(vl);
        report.val_accuracy.push(va);
        if vl < best_loss {
            best_loss = vl;
            best = model.params.clone();
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    report.steps = step;
    Ok((Classifier::from_params(model.config.clone(), best), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, ClassSet, Distribution};

    #[test]
    fn untrained_model_is_uniform() {
        let c = generate_cohort(1, 20, ClassSet::Binary, Distribution::Iid).unwrap();
        let m = Classifier::new(ClassifierConfig::new(2, 3)).unwrap();
        let p = m.predict(&c.samples[0]).unwrap();
        assert!((p.probs[0] - 0.5).abs() < 1e-12);
        assert_eq!(p.label, 0);
    }

    #[test]
    fn activation_shape_is_d() {
        let c = generate_cohort(1, 20, ClassSet::Binary, Distribution::Iid).unwrap();
        let m = Classifier::new(ClassifierConfig::new(2, 3)).unwrap();
        let a = m.layer_activations(&c.samples[0]).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a, m.layer_activations(&c.samples[0]).unwrap());
    }
}
