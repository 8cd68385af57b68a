//! Explanation optimizers that turn stacked per-method token attributions into one
//! reconstructed explanation.

pub mod deo;
pub mod loss;
pub mod teo;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::rng;

pub use deo::{Deo, DeoConfig, Schedule};
pub use loss::{
    ExplanationItem, LossComponents, LossConfig, LossOrientation, LossWeights, NeighborStack,
};
pub use teo::{Teo, TeoConfig, STACK_CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Teo,
    Deo,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "teo" => Some(Self::Teo),
            "deo" => Some(Self::Deo),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Teo => "teo",
            Self::Deo => "deo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// Items per step; a value ≥ the dataset size uses every item every step.
    pub batch_size: usize,
    pub loss: LossConfig,
    /// Feed the aggregate to the decoder during training instead of zeros.
    pub teacher_forcing: bool,
    /// Stop after this many steps without a new best total.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.0,
            steps: 200,
            batch_size: 16,
            loss: LossConfig::default(),
            teacher_forcing: false,
            patience: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub total: f64,
    pub ris_term: f64,
    pub ros_term: f64,
    pub sparse_term: f64,
    pub sim_term: f64,
    pub umap_term: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub rows: Vec<CurveRow>,
}

impl LossCurve {
    fn push(&mut self, step: usize, c: &LossComponents) {
        self.rows.push(CurveRow {
            step,
            total: c.total,
            ris_term: c.ris_term,
            ros_term: c.ros_term,
            sparse_term: c.sparse_term,
            sim_term: c.sim_term,
            umap_term: c.umap_term,
        });
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.total).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(crate::cohort::csv_err)?;
        for r in &self.rows {
            w.serialize(r).map_err(crate::cohort::csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_training(cfg: &TrainConfig, items: &[ExplanationItem]) -> Result<()> {
    if !(cfg.lr >= 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config(
            "optimizer training needs lr ≥ 0 and batch ≥ 1".into(),
        ));
    }
    cfg.loss.weights.validate()?;
    if items.is_empty() {
        return Err(Error::EmptyCohort);
    }
    Ok(())
}

/// Item indices per step: everything when the batch covers the data, otherwise consecutive
/// slices of seeded shuffles.
fn batches(n: usize, cfg: &TrainConfig) -> impl FnMut() -> Vec<usize> {
    let full = cfg.batch_size >= n;
    let size = cfg.batch_size.min(n);
    let mut r = rng::rng(rng::derive(cfg.seed, 0xba7));
    let mut order: Vec<usize> = Vec::new();
    move || {
        if full {
            return (0..n).collect();
        }
        if order.len() < size {
            let mut fresh: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(fresh.as_mut_slice(), &mut r);
            order.extend(fresh);
        }
        order.drain(..size).collect()
    }
}

fn column(v: &[f64]) -> Result<Tensor> {
    Tensor::matrix(v.len(), 1, v.to_vec())
}

/// Trains `model` in place under the composite loss and returns the per-step curve.
pub fn train_teo(
    model: &mut Teo,
    items: &[ExplanationItem],
    cfg: &TrainConfig,
    umap_residual: f64,
) -> Result<LossCurve> {
    check_training(cfg, items)?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut next = batches(items.len(), cfg);
    let mut curve = LossCurve::default();
    let (mut best, mut since) = (f64::INFINITY, 0);
    for step in 0..cfg.steps {
        let fail = |e: Error| Error::Training {
            step,
            detail: e.to_string(),
        };
        let tape = Tape::new();
        let p = model.bind(&tape, true);
        let mut per_item = Vec::new();
        for &i in &next() {
            let item = &items[i];
            let target = if cfg.teacher_forcing {
                Some(tape.constant(column(&item.target)?))
            } else {
                None
            };
            let out = model
                .forward_on_tape(
                    &p,
                    tape.constant(item.stack.clone()),
                    &item.positions,
                    target,
                )
                .map_err(fail)?;
            let mut nbs = Vec::new();
            for nb in item.retained() {
                nbs.push(model.forward_on_tape(
                    &p,
                    tape.constant(nb.stack.clone()),
                    &item.positions,
                    None,
                )?);
            }
            per_item.push(
                loss::item_loss_on_tape(out, &nbs, item, &cfg.loss, umap_residual).map_err(fail)?,
            );
        }
        let l = loss::mean_loss(per_item)?;
        let values = l.values();
        if !values.total.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("loss diverged to {}", values.total),
            });
        }
        curve.push(step, &values);
        let grads = tape.gradients(l.total, &p).map_err(fail)?;
        opt.step(model.params_mut(), &grads);
        if values.total < best {
            best = values.total;
            since = 0;
        } else {
            since += 1;
            if cfg.patience.is_some_and(|p| since >= p) {
                break;
            }
        }
    }
    Ok(curve)
}

/// Clean diffusion target of an item: the aggregate in channel 0, the six method channels after it.
pub fn deo_stack(item: &ExplanationItem) -> Result<Tensor> {
    let n = item.positions.len();
    let mut data = Vec::with_capacity(n * STACK_CHANNELS);
    for r in 0..n {
        data.push(item.target[r]);
        data.extend_from_slice(&item.stack.row(r)[..STACK_CHANNELS - 1]);
    }
    Tensor::matrix(n, STACK_CHANNELS, data)
}

/// Trains the noise predictor on the simplified loss weighted by the similarity weight.
pub fn train_deo(
    model: &mut Deo,
    items: &[ExplanationItem],
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    check_training(cfg, items)?;
    let clean = items.iter().map(deo_stack).collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut next = batches(items.len(), cfg);
    let mut curve = LossCurve::default();
    for step in 0..cfg.steps {
        let batch: Vec<Tensor> = next().into_iter().map(|i| clean[i].clone()).collect();
        let draws = deo::draw_noise(&model.schedule, &batch, rng::derive(cfg.seed, step as u64))?;
        let tape = Tape::new();
        let p = model.bind(&tape, true);
        let total = model
            .simple_loss_on_tape(&p, &draws)?
            .scale(cfg.loss.weights.sim)?;
        let value = total.item();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("loss diverged to {value}"),
            });
        }
        curve.push(
            step,
            &LossComponents {
                sim_term: value,
                total: value,
                ..Default::default()
            },
        );
        let grads = tape.gradients(total, &p)?;
        opt.step(model.params_mut(), &grads);
    }
    Ok(curve)
}

/// Reconstructed explanation of the item rows from a trained optimizer.
pub enum Explainer<'a> {
    Teo(&'a Teo),
    Deo(&'a Deo, u64),
}

impl Explainer<'_> {
    pub fn explain(&self, item: &ExplanationItem) -> Result<Vec<f64>> {
        self.explain_stack(&item.stack, &item.positions, item.sample_id)
    }

    pub fn explain_stack(
        &self,
        stack: &Tensor,
        positions: &[usize],
        sample_id: usize,
    ) -> Result<Vec<f64>> {
        match self {
            Explainer::Teo(m) => {
                let tape = Tape::new();
                let p = m.bind(&tape, false);
                let out = m.forward_on_tape(&p, tape.constant(stack.clone()), positions, None)?;
                Ok(out.value().data().to_vec())
            }
            Explainer::Deo(m, seed) => {
                let n = positions.len();
                let mut data = Vec::with_capacity(n * STACK_CHANNELS);
                for r in 0..n {
                    data.push(0.0);
                    data.extend_from_slice(&stack.row(r)[..STACK_CHANNELS - 1]);
                }
                let known: Vec<bool> = (0..STACK_CHANNELS).map(|c| c > 0).collect();
                let out = m.sample(
                    &Tensor::matrix(n, STACK_CHANNELS, data)?,
                    &known,
                    rng::derive(*seed, sample_id as u64),
                )?;
                Ok((0..n).map(|r| out.get2(r, 0)).collect())
            }
        }
    }
}
