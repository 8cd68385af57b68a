//! Explanation quality (sparseness, relative stability), aggregation across methods and
//! paired significance tests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::attribution::{outputs_at, LayerModel};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::surrogate::argmax;

/// Gini index of `|φ|`: 0 for equal magnitudes, `1 − 1/d` for a one-hot vector.
pub fn gini(phi: &[f64]) -> Result<f64> {
    let mut v: Vec<f64> = phi.iter().map(|x| x.abs()).collect();
    let l1: f64 = v.iter().sum();
    if v.is_empty() || l1 == 0.0 || !l1.is_finite() {
        return Err(Error::UndefinedMetric(
            "sparseness of an all-zero attribution".into(),
        ));
    }
    v.sort_by(f64::total_cmp);
    let d = v.len() as f64;
    let s: f64 = v
        .iter()
        .enumerate()
        .map(|(k, x)| x / l1 * ((d - (k + 1) as f64 + 0.5) / d))
        .sum();
    Ok(1.0 - 2.0 * s)
}

pub fn pnorm(v: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        return v.iter().fold(0.0, |m, x| m.max(x.abs()));
    }
    v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
}

fn diff_norm(a: &[f64], b: &[f64], p: f64) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    pnorm(&d, p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub p: f64,
    pub n_perturbations: usize,
    /// Perturbation scale relative to `‖x‖₂ / √dim`.
    pub noise_scale: f64,
    pub seed: u64,
    pub eps: f64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            p: 2.0,
            n_perturbations: 16,
            noise_scale: 0.05,
            seed: 0,
            eps: 1e-8,
        }
    }
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_perturbations == 0
            || !(self.noise_scale > 0.0)
            || !(self.eps > 0.0)
            || !(self.p >= 1.0)
        {
            return Err(Error::Config(
                "stability needs N ≥ 1, σ > 0, ε > 0 and p ≥ 1".into(),
            ));
        }
        Ok(())
    }

    /// Gaussian offsets `σ z_j`, `σ = noise_scale · ‖x‖₂ / √dim`. The first `N` draws of a
    /// larger `N` are the same, so neighborhoods nest.
    pub fn perturbations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let sigma = self.noise_scale * pnorm(x, 2.0) / (x.len() as f64).sqrt();
        let mut r = rng::rng(rng::derive(self.seed, 0x57ab));
        (0..self.n_perturbations)
            .map(|_| {
                rng::normals(&mut r, x.len())
                    .into_iter()
                    .map(|z| sigma * z)
                    .collect()
            })
            .collect()
    }
}

/// One point of the neighborhood, already evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub x: Vec<f64>,
    pub fx: Vec<f64>,
    pub phi: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub ris: f64,
    pub ros: f64,
    /// Neighbors that kept the prediction.
    pub retained: usize,
    /// Some denominator fell below ε and was clamped.
    pub guarded: bool,
}

/// RIS and ROS of `phi` at `x` over the neighbors that keep the predicted class.
pub fn stability_from(
    x: &[f64],
    fx: &[f64],
    phi: &[f64],
    neighbors: &[Neighbor],
    cfg: &StabilityConfig,
) -> Result<Stability> {
    cfg.validate()?;
    let label = argmax(fx);
    let (p, eps) = (cfg.p, cfg.eps);
    let mut guarded = false;
    let mut guard = |v: f64| {
        if v < eps {
            guarded = true;
            eps
        } else {
            v
        }
    };
    let (mut in_max, mut out_max, mut retained) = (0.0f64, 0.0f64, 0);
    for nb in neighbors.iter().filter(|nb| argmax(&nb.fx) == label) {
        retained += 1;
        let num = diff_norm(phi, &nb.phi, p);
        in_max = in_max.max(num / guard(diff_norm(x, &nb.x, p)));
        out_max = out_max.max(num / guard(diff_norm(fx, &nb.fx, p)));
    }
    if retained == 0 {
        return Err(Error::EmptyNeighborhood);
    }
    let phi_norm = guard(pnorm(phi, p));
    Ok(Stability {
        ris: pnorm(x, p) / phi_norm * in_max,
        ros: pnorm(fx, p) / phi_norm * out_max,
        retained,
        guarded,
    })
}

/// The wrapped layer with its activation moved by `delta`; the input path ends at the
/// moved point.
pub struct Shifted<'a> {
    pub inner: &'a dyn LayerModel,
    pub delta: Vec<f64>,
    activation: Vec<f64>,
}

impl<'a> Shifted<'a> {
    pub fn new(inner: &'a dyn LayerModel, delta: Vec<f64>) -> Self {
        let activation = inner
            .activation()
            .iter()
            .zip(&delta)
            .map(|(a, d)| a + d)
            .collect();
        Self {
            inner,
            delta,
            activation,
        }
    }
}

impl LayerModel for Shifted<'_> {
    fn activation(&self) -> &[f64] {
        &self.activation
    }
    fn outputs<'t>(&self, tape: &'t Tape, a: Var<'t>) -> Result<Var<'t>> {
        self.inner.outputs(tape, a)
    }
    fn activation_on_input_path(&self, alpha: f64) -> Result<Vec<f64>> {
        let base = self.inner.activation_on_input_path(alpha)?;
        Ok(base
            .iter()
            .zip(&self.delta)
            .map(|(b, d)| b + alpha * d)
            .collect())
    }
}

/// RIS and ROS of an attribution function, perturbing the attributed activation.
pub fn stability(
    model: &dyn LayerModel,
    attr: &dyn Fn(&dyn LayerModel) -> Result<Vec<f64>>,
    cfg: &StabilityConfig,
) -> Result<Stability> {
    let x = model.activation().to_vec();
    let fx = outputs_at(model, &x)?;
    let phi = attr(model)?;
    let mut neighbors = Vec::with_capacity(cfg.n_perturbations);
    for delta in cfg.perturbations(&x) {
        let moved = Shifted::new(model, delta);
        let fx2 = outputs_at(&moved, moved.activation())?;
        let phi2 = if argmax(&fx2) == argmax(&fx) {
            attr(&moved)?
        } else {
            Vec::new()
        };
        neighbors.push(Neighbor {
            x: moved.activation().to_vec(),
            fx: fx2,
            phi: phi2,
        });
    }
    stability_from(&x, &fx, &phi, &neighbors, cfg)
}

pub fn ris(
    model: &dyn LayerModel,
    attr: &dyn Fn(&dyn LayerModel) -> Result<Vec<f64>>,
    cfg: &StabilityConfig,
) -> Result<f64> {
    Ok(stability(model, attr, cfg)?.ris)
}

pub fn ros(
    model: &dyn LayerModel,
    attr: &dyn Fn(&dyn LayerModel) -> Result<Vec<f64>>,
    cfg: &StabilityConfig,
) -> Result<f64> {
    Ok(stability(model, attr, cfg)?.ros)
}

/// Rescales to `[0, 1]`; a constant vector maps to zeros.
pub fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

fn check_simplex(w: &[f64]) -> Result<()> {
    let s: f64 = w.iter().sum();
    if w.iter().any(|&x| !(x >= 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "weights must be nonnegative and sum to 1, got {w:?}"
        )));
    }
    Ok(())
}

/// `Σ w_k · minmax(φ_k)`; each entry sums its terms in ascending order so the result does
/// not depend on the order of the methods.
pub fn aggregate_weighted(phis: &[Vec<f64>], w: &[f64]) -> Result<Vec<f64>> {
    if phis.is_empty() || phis.len() != w.len() {
        return Err(Error::Config(format!(
            "{} vectors but {} weights",
            phis.len(),
            w.len()
        )));
    }
    check_simplex(w)?;
    let n = phis[0].len();
    if phis.iter().any(|p| p.len() != n) {
        return Err(Error::Contract(
            "attribution vectors differ in length".into(),
        ));
    }
    let normed: Vec<Vec<f64>> = phis.iter().map(|p| min_max(p)).collect();
    let mut terms = vec![0.0; phis.len()];
    Ok((0..n)
        .map(|i| {
            for (k, t) in terms.iter_mut().enumerate() {
                *t = w[k] * normed[k][i];
            }
            terms.sort_by(f64::total_cmp);
            terms.iter().sum()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    /// Mean of inverse ranks on RIS (low is good), ROS (low) and sparseness (high).
    RankComposite,
}

impl Weighting {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(Weighting::Uniform),
            "rank_composite" => Some(Weighting::RankComposite),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Weighting::Uniform => "uniform",
            Weighting::RankComposite => "rank_composite",
        }
    }
}

/// 1-based ranks, best first, ties to the lower index.
fn ranks(v: &[f64], lower_is_better: bool) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| {
        let c = v[i].total_cmp(&v[j]);
        (if lower_is_better { c } else { c.reverse() }).then(i.cmp(&j))
    });
    let mut r = vec![0.0; v.len()];
    for (pos, &i) in idx.iter().enumerate() {
        r[i] = (pos + 1) as f64;
    }
    r
}

/// Method weights from per-method mean RIS, ROS and sparseness.
pub fn method_weights(scheme: Weighting, ris: &[f64], ros: &[f64], sparseness: &[f64]) -> Vec<f64> {
    let k = ris.len();
    match scheme {
        Weighting::Uniform => vec![1.0 / k as f64; k],
        Weighting::RankComposite => {
            let (a, b, c) = (ranks(ris, true), ranks(ros, true), ranks(sparseness, false));
            let score: Vec<f64> = (0..k)
                .map(|i| (1.0 / a[i] + 1.0 / b[i] + 1.0 / c[i]) / 3.0)
                .collect();
            let total: f64 = score.iter().sum();
            score.iter().map(|s| s / total).collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn check_pairs(a: &[f64], b: &[f64], min: usize) -> Result<Vec<f64>> {
    if a.len() != b.len() || a.len() < min {
        return Err(Error::Contract(format!(
            "paired samples need equal lengths of at least {min}, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Two-sided paired t-test. Identical samples give `t = 0, p = 1`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    let d = check_pairs(a, b, 2)?;
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        };
        return Ok(TTest { t, df, p });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|_| Error::Numeric { op: "student t" })?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0);
    Ok(TTest { t, df, p })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W−)`.
    pub w: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub p: f64,
    pub exact: bool,
}

/// Largest sample size that uses the exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Average ranks of `|d|` (1-based).
fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Wilcoxon signed-rank test, two-sided; zero differences are dropped.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    let d: Vec<f64> = check_pairs(a, b, 1)?
        .into_iter()
        .filter(|&x| x != 0.0)
        .collect();
    let n = d.len();
    if n == 0 {
        return Ok(Wilcoxon {
            w_plus: 0.0,
            w_minus: 0.0,
            w: 0.0,
            n,
            p: 1.0,
            exact: true,
        });
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let r = midranks(&abs);
    let w_plus: f64 = d
        .iter()
        .zip(&r)
        .filter(|(x, _)| **x > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);
    if n <= WILCOXON_EXACT_MAX {
        // ranks doubled so tied half-ranks stay integral
        let twice: Vec<usize> = r.iter().map(|x| (2.0 * x).round() as usize).collect();
        let max: usize = twice.iter().sum();
        let mut counts = vec![0.0f64; max + 1];
        counts[0] = 1.0;
        let mut reach = 0;
        for &t in &twice {
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + t] += counts[s];
                }
            }
            reach += t;
        }
        let limit = (2.0 * w).round() as usize;
        let tail: f64 = counts[..=limit].iter().sum();
        let p = (2.0 * tail / 2f64.powi(n as i32)).min(1.0);
        return Ok(Wilcoxon {
            w_plus,
            w_minus,
            w,
            n,
            p,
            exact: true,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * (1.0 - normal.cdf(z))).min(1.0);
    Ok(Wilcoxon {
        w_plus,
        w_minus,
        w,
        n,
        p,
        exact: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub t_stat: f64,
    pub t_p: f64,
    pub wilcoxon_w: f64,
    pub wilcoxon_p: f64,
}

/// Paired t and Wilcoxon tests on at least five pairs.
pub fn paired_compare(a: &[f64], b: &[f64]) -> Result<PairedComparison> {
    let d = check_pairs(a, b, 5)?;
    if d.iter().all(|&x| x == 0.0) {
        return Err(Error::DegenerateTest(
            "every paired difference is zero".into(),
        ));
    }
    let t = paired_t_test(a, b)?;
    let w = wilcoxon_signed_rank(a, b)?;
    Ok(PairedComparison {
        t_stat: t.t,
        t_p: t.p,
        wilcoxon_w: w.w,
        wilcoxon_p: w.p,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdrResult {
    pub adjusted: Vec<f64>,
    pub rejected: Vec<bool>,
}

/// Benjamini–Hochberg step-up adjustment at level `q`.
pub fn bh_fdr(p: &[f64], q: f64) -> Result<FdrResult> {
    if let Some(bad) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Validation(format!("p-value {bad} outside [0, 1]")));
    }
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&i, &j| p[i].total_cmp(&p[j]).then(i.cmp(&j)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in idx.iter().enumerate().rev() {
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        adjusted[i] = running;
    }
    let rejected = adjusted.iter().map(|&a| a <= q).collect();
    Ok(FdrResult { adjusted, rejected })
}

/// Per-sample scores of one explanation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub class: usize,
    pub sample_id: usize,
    pub sparseness: f64,
    pub ris: f64,
    pub ros: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub class: usize,
    pub n: usize,
    pub sparseness_mean: f64,
    pub sparseness_std: f64,
    pub ris_mean: f64,
    pub ris_std: f64,
    pub ros_mean: f64,
    pub ros_std: f64,
}

/// Sample mean and standard deviation (`n − 1`; zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    (
        mean,
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt(),
    )
}

/// Mean ± std per (method, class), methods in first-seen order, classes ascending.
pub fn summarize(records: &[MetricRecord]) -> Vec<MetricRow> {
    let mut methods: Vec<&str> = Vec::new();
    for r in records {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut rows = Vec::new();
    for m in methods {
        let mut classes: Vec<usize> = records
            .iter()
            .filter(|r| r.method == m)
            .map(|r| r.class)
            .collect();
        classes.sort_unstable();
        classes.dedup();
        for c in classes {
            let sel: Vec<&MetricRecord> = records
                .iter()
                .filter(|r| r.method == m && r.class == c)
                .collect();
            let col = |f: fn(&MetricRecord) -> f64| {
                mean_std(&sel.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let (sm, ss) = col(|r| r.sparseness);
            let (im, is) = col(|r| r.ris);
            let (om, os) = col(|r| r.ros);
            rows.push(MetricRow {
                method: m.to_string(),
                class: c,
                n: sel.len(),
                sparseness_mean: sm,
                sparseness_std: ss,
                ris_mean: im,
                ris_std: is,
                ros_mean: om,
                ros_std: os,
            });
        }
    }
    rows
}

/// Writes `task,setting,method,class,sparseness_mean,...,ros_std`.
pub fn write_metric_csv(path: &Path, task: &str, setting: &str, rows: &[MetricRow]) -> Result<()> {
    write_metric_table(path, task, &[(setting, rows)])
}

/// One table over several settings, blocks in the given order.
pub fn write_metric_table(path: &Path, task: &str, blocks: &[(&str, &[MetricRow])]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(crate::cohort::csv_err)?;
    w.write_record([
        "task",
        "setting",
        "method",
        "class",
        "sparseness_mean",
        "sparseness_std",
        "ris_mean",
        "ris_std",
        "ros_mean",
        "ros_std",
    ])
    .map_err(crate::cohort::csv_err)?;
    for (setting, rows) in blocks {
        for r in *rows {
            let f = |x: f64| format!("{x:.6}");
            w.write_record([
                task.to_string(),
                setting.to_string(),
                r.method.clone(),
                r.class.to_string(),
                f(r.sparseness_mean),
                f(r.sparseness_std),
                f(r.ris_mean),
                f(r.ris_std),
                f(r.ros_mean),
                f(r.ros_std),
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

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn min_max_of_constant_is_zero() {
        assert_eq!(min_max(&[2.0, 2.0]), vec![0.0, 0.0]);
        assert_eq!(min_max(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }
}
