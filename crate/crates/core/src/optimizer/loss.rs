//! Composite optimizer objective: inverse stability terms, sparseness, similarity to the
//! aggregated explanation and the embedding penalty.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::pnorm;
use crate::surrogate::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ris: f64,
    pub ros: f64,
    pub sparse: f64,
    pub sim: f64,
    pub umap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ris: 0.1,
            ros: 0.3,
            sparse: 0.1,
            sim: 0.5,
            umap: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ris, self.ros, self.sparse, self.sim, self.umap];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and ≥ 0, got {all:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossOrientation {
    /// `λ₁/RIS + λ₂/ROS + λ₃·sparseness + λ₄·MSE`.
    Literal,
    /// `λ₁·RIS + λ₂·ROS − λ₃·sparseness + λ₄·MSE`.
    GoalAligned,
}

impl LossOrientation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "literal" => Some(Self::Literal),
            "goal_aligned" => Some(Self::GoalAligned),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Literal => "literal",
            Self::GoalAligned => "goal_aligned",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub orientation: LossOrientation,
    /// Log-sum-exp temperature of the smooth max.
    pub temperature: f64,
    pub eps: f64,
    /// Length the squared error is averaged over; positions past the stack rows count as 0.
    pub seq_len: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            orientation: LossOrientation::Literal,
            temperature: 10.0,
            eps: 1e-8,
            seq_len: 512,
        }
    }
}

/// Perturbed copy of an item: activation, class probabilities and rebuilt stack.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborStack {
    pub x: Vec<f64>,
    pub fx: Vec<f64>,
    pub stack: Tensor,
}

/// One explanation to optimize: stacked channels of the non-pad rows and the aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationItem {
    pub sample_id: usize,
    /// `[n, 7]` rows for `positions`.
    pub stack: Tensor,
    pub positions: Vec<usize>,
    pub target: Vec<f64>,
    pub x: Vec<f64>,
    pub fx: Vec<f64>,
    pub neighbors: Vec<NeighborStack>,
}

impl ExplanationItem {
    /// Neighbors that keep the predicted class.
    pub fn retained(&self) -> Vec<&NeighborStack> {
        let label = argmax(&self.fx);
        self.neighbors
            .iter()
            .filter(|n| argmax(&n.fx) == label)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ris_term: f64,
    pub ros_term: f64,
    pub sparse_term: f64,
    pub sim_term: f64,
    pub umap_term: f64,
    pub total: f64,
    pub guarded: bool,
}

pub struct LossVars<'t> {
    pub ris_term: Var<'t>,
    pub ros_term: Var<'t>,
    pub sparse_term: Var<'t>,
    pub sim_term: Var<'t>,
    pub umap_term: Var<'t>,
    pub total: Var<'t>,
    pub guarded: bool,
}

impl LossVars<'_> {
    pub fn values(&self) -> LossComponents {
        LossComponents {
            ris_term: self.ris_term.item(),
            ros_term: self.ros_term.item(),
            sparse_term: self.sparse_term.item(),
            sim_term: self.sim_term.item(),
            umap_term: self.umap_term.item(),
            total: self.total.item(),
            guarded: self.guarded,
        }
    }
}

/// `max + log Σ exp(τ (v − max)) / τ`; lies in `[max, max + ln N / τ]`.
pub fn smooth_max(values: &[f64], tau: f64) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + values
        .iter()
        .map(|v| (tau * (v - m)).exp())
        .sum::<f64>()
        .ln()
        / tau
}

pub fn smooth_max_on_tape<'t>(values: &[Var<'t>], tau: f64) -> Result<Var<'t>> {
    let m = values
        .iter()
        .map(|v| v.item())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut acc: Option<Var<'t>> = None;
    for v in values {
        let e = v.shift(-m)?.scale(tau)?.exp()?;
        acc = Some(match acc {
            Some(a) => a.add(e)?,
            None => e,
        });
    }
    let acc = acc.ok_or(Error::EmptyNeighborhood)?;
    acc.log()?.scale(1.0 / tau)?.shift(m)
}

fn norm<'t>(v: Var<'t>) -> Result<Var<'t>> {
    // the shift keeps the derivative finite at an exact zero without moving the value
    v.square()?.sum()?.shift(1e-300)?.sqrt()
}

fn floor<'t>(v: Var<'t>, eps: f64, guarded: &mut bool) -> Var<'t> {
    if v.item() < eps {
        *guarded = true;
        v.tape().scalar(eps)
    } else {
        v
    }
}

/// Gini index of `|v|` with the sorting permutation held fixed.
pub fn gini_on_tape<'t>(v: Var<'t>, eps: f64, guarded: &mut bool) -> Result<Var<'t>> {
    let a = v.abs()?;
    let vals = a.value();
    let n = vals.numel();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals.data()[i].total_cmp(&vals.data()[j]).then(i.cmp(&j)));
    let sorted = a.gather(order.into_iter().map(Some).collect(), vec![1, n])?;
    let w: Vec<f64> = (0..n)
        .map(|k| (n - k) as f64 - 0.5)
        .map(|x| x / n as f64)
        .collect();
    let s = sorted
        .mul(v.tape().constant(Tensor::matrix(1, n, w)?))?
        .sum()?;
    let l1 = floor(a.sum()?, eps, guarded);
    s.div(l1)?.scale(-2.0)?.shift(1.0)
}

/// `Σ (Φ̂ − φ̄)² / len`.
pub fn teo_similarity_loss(phi_hat: &[f64], target: &[f64]) -> Result<f64> {
    if phi_hat.len() != target.len() || phi_hat.is_empty() {
        return Err(Error::Contract(
            "similarity needs equal, nonempty lengths".into(),
        ));
    }
    Ok(phi_hat
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / phi_hat.len() as f64)
}

/// `Σ (u₁ − u₂)²` over embedding coordinates.
pub fn diagonal_residual(coords: &[(f64, f64)]) -> f64 {
    coords.iter().map(|(a, b)| (a - b).powi(2)).sum()
}

/// Loss of one item. `out` is `[n, 1]`; `neighbor_outs` follow `item.retained()`.
pub fn item_loss_on_tape<'t>(
    out: Var<'t>,
    neighbor_outs: &[Var<'t>],
    item: &ExplanationItem,
    cfg: &LossConfig,
    umap_residual: f64,
) -> Result<LossVars<'t>> {
    cfg.weights.validate()?;
    let tape = out.tape();
    let retained = item.retained();
    if retained.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    if retained.len() != neighbor_outs.len() {
        return Err(Error::Contract(
            "one output per retained neighbor is required".into(),
        ));
    }
    let eps = cfg.eps;
    let mut guarded = false;
    let phi_norm = floor(norm(out)?, eps, &mut guarded);
    let mut in_ratios = Vec::with_capacity(retained.len());
    let mut out_ratios = Vec::with_capacity(retained.len());
    for (nb, &o) in retained.iter().zip(neighbor_outs) {
        let change = norm(out.sub(o)?)?;
        let dx: Vec<f64> = item.x.iter().zip(&nb.x).map(|(a, b)| a - b).collect();
        let df: Vec<f64> = item.fx.iter().zip(&nb.fx).map(|(a, b)| a - b).collect();
        let (nx, nf) = (pnorm(&dx, 2.0), pnorm(&df, 2.0));
        if nx < eps || nf < eps {
            guarded = true;
        }
        in_ratios.push(change.scale(1.0 / nx.max(eps))?);
        out_ratios.push(change.scale(1.0 / nf.max(eps))?);
    }
    let ris = tape
        .scalar(pnorm(&item.x, 2.0))
        .div(phi_norm)?
        .mul(smooth_max_on_tape(&in_ratios, cfg.temperature)?)?;
    let ros = tape
        .scalar(pnorm(&item.fx, 2.0))
        .div(phi_norm)?
        .mul(smooth_max_on_tape(&out_ratios, cfg.temperature)?)?;
    let sparse = gini_on_tape(out, eps, &mut guarded)?;
    let target = tape.constant(Tensor::matrix(item.target.len(), 1, item.target.clone())?);
    let mse = out
        .sub(target)?
        .square()?
        .sum()?
        .scale(1.0 / cfg.seq_len as f64)?;
    let w = cfg.weights;
    let (ris_term, ros_term, sparse_term) = match cfg.orientation {
        LossOrientation::Literal => (
            tape.scalar(w.ris).div(floor(ris, eps, &mut guarded))?,
            tape.scalar(w.ros).div(floor(ros, eps, &mut guarded))?,
            sparse.scale(w.sparse)?,
        ),
        LossOrientation::GoalAligned => (
            ris.scale(w.ris)?,
            ros.scale(w.ros)?,
            sparse.scale(-w.sparse)?,
        ),
    };
    let sim_term = mse.scale(w.sim)?;
    let umap_term = tape.scalar(w.umap * umap_residual);
    let total = ris_term
        .add(ros_term)?
        .add(sparse_term)?
        .add(sim_term)?
        .add(umap_term)?;
    Ok(LossVars {
        ris_term,
        ros_term,
        sparse_term,
        sim_term,
        umap_term,
        total,
        guarded,
    })
}

/// Batch mean of each component; the total is the sum of the averaged components.
pub fn mean_loss<'t>(items: Vec<LossVars<'t>>) -> Result<LossVars<'t>> {
    let n = items.len();
    let first = items.first().ok_or(Error::EmptyCohort)?;
    let tape = first.total.tape();
    let guarded = items.iter().any(|l| l.guarded);
    let avg = |f: &dyn Fn(&LossVars<'t>) -> Var<'t>| -> Result<Var<'t>> {
        let mut acc = tape.scalar(0.0);
        for l in &items {
            acc = acc.add(f(l))?;
        }
        acc.scale(1.0 / n as f64)
    };
    let ris_term = avg(&|l| l.ris_term)?;
    let ros_term = avg(&|l| l.ros_term)?;
    let sparse_term = avg(&|l| l.sparse_term)?;
    let sim_term = avg(&|l| l.sim_term)?;
    let umap_term = avg(&|l| l.umap_term)?;
    let total = ris_term
        .add(ros_term)?
        .add(sparse_term)?
        .add(sim_term)?
        .add(umap_term)?;
    Ok(LossVars {
        ris_term,
        ros_term,
        sparse_term,
        sim_term,
        umap_term,
        total,
        guarded,
    })
}

/// Loss of fixed outputs (no model parameters involved).
pub fn total_loss(
    phi_hat: &[f64],
    neighbor_outs: &[Vec<f64>],
    item: &ExplanationItem,
    cfg: &LossConfig,
    umap_coords: Option<&[(f64, f64)]>,
) -> Result<LossComponents> {
    let tape = Tape::new();
    let col = |v: &[f64]| Tensor::matrix(v.len(), 1, v.to_vec());
    let out = tape.constant(col(phi_hat)?);
    let nbs = neighbor_outs
        .iter()
        .map(|v| Ok(tape.constant(col(v)?)))
        .collect::<Result<Vec<_>>>()?;
    let residual = umap_coords.map(diagonal_residual).unwrap_or(0.0);
    Ok(item_loss_on_tape(out, &nbs, item, cfg, residual)?.values())
}
