//! Cohort-level analysis of attribution matrices: feature-wise UMAP with the diagonal
//! penalty, PCA, and subgroup selection on the first component.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::cohort::{csv_err, SubgroupTag};
use crate::error::{Error, Result};
use crate::metrics::min_max;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UmapConfig {
    pub n_neighbors: usize,
    pub a: f64,
    pub b: f64,
    pub epochs: usize,
    /// Initial step size, decayed linearly to 0 over the epochs.
    pub learning_rate: f64,
    /// Std of the seeded offsets added to the diagonal start.
    pub init_noise: f64,
    pub seed: u64,
    pub var_floor: f64,
    /// Weight of `Σ (u₁ − u₂)²`.
    pub lambda5: f64,
}

impl Default for UmapConfig {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            a: 1.577,
            b: 0.895,
            epochs: 200,
            learning_rate: 1.0,
            init_noise: 0.05,
            seed: 0,
            var_floor: 1e-4,
            lambda5: 0.0,
        }
    }
}

impl UmapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_neighbors < 2 {
            return Err(Error::Config("UMAP needs n_neighbors ≥ 2".into()));
        }
        let positive = [self.a, self.b, self.var_floor];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "UMAP needs a, b and the variance floor > 0".into(),
            ));
        }
        let nonneg = [self.learning_rate, self.init_noise, self.lambda5];
        if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "UMAP learning rate, init noise and λ₅ must be ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResult {
    /// `n` points in `[0, 1]²`.
    pub coords: Vec<(f64, f64)>,
    pub residual: f64,
    /// `(1/n) Σ ‖uᵢ − ū‖²` of the returned coordinates.
    pub variance: f64,
    /// Coincident input points were separated by jitter.
    pub jittered: bool,
}

/// `Σ (u₁ − u₂)²`.
pub fn residual(coords: &[(f64, f64)]) -> f64 {
    coords.iter().map(|(a, b)| (a - b).powi(2)).sum()
}

pub fn variance(coords: &[(f64, f64)]) -> f64 {
    let n = coords.len() as f64;
    let (mx, my) = coords
        .iter()
        .fold((0.0, 0.0), |(x, y), (a, b)| (x + a, y + b));
    let (mx, my) = (mx / n, my / n);
    coords
        .iter()
        .map(|(a, b)| (a - mx).powi(2) + (b - my).powi(2))
        .sum::<f64>()
        / n
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Bandwidth with `Σ_k exp(−d²/σ²) = log₂ k`, by bisection on `ln σ`.
fn bandwidth(sq: &[f64], target: f64) -> f64 {
    let mass = |s: f64| sq.iter().map(|d| (-d / (s * s)).exp()).sum::<f64>();
    let (mut lo, mut hi) = ((1e-15f64).ln(), (1e8f64).ln());
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if mass(mid.exp()) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Symmetrized membership matrix of the k-nearest-neighbor graph.
fn memberships(points: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = points.len();
    let target = (k as f64).log2();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (sq_dist(&points[i], &points[j]), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(k);
        let sigma = bandwidth(&d.iter().map(|x| x.0).collect::<Vec<_>>(), target);
        for (sq, j) in d {
            p[i][j] = (-sq / (sigma * sigma)).exp();
        }
    }
    let mut sym = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            sym[i][j] = 0.5 * (p[i][j] + p[j][i]);
        }
    }
    sym
}

/// Joint min–max over both coordinates, so points on the diagonal stay on it.
fn normalize(u: &[[f64; 2]]) -> Vec<(f64, f64)> {
    let lo = u.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let hi = u
        .iter()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    u.iter()
        .map(|p| {
            if range > 0.0 {
                (
                    ((p[0] - lo) / range).clamp(0.0, 1.0),
                    ((p[1] - lo) / range).clamp(0.0, 1.0),
                )
            } else {
                (0.0, 0.0)
            }
        })
        .collect()
}

const INIT_SPAN: f64 = 10.0;
const STEP_CLIP: f64 = 4.0;

/// Embeds `n` points of dimension `D` into `[0, 1]²`.
pub fn umap_fit(points: &[Vec<f64>], cfg: &UmapConfig) -> Result<EmbeddingResult> {
    cfg.validate()?;
    let n = points.len();
    let k = cfg.n_neighbors;
    if n <= k {
        return Err(Error::Config(format!(
            "UMAP with k = {k} needs more than {k} points, got {n}"
        )));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Contract(
            "UMAP points must share one nonzero dimension".into(),
        ));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { op: "umap input" });
    }
    let mut r = rng::rng(rng::derive(cfg.seed, 0x0a9));
    let mut pts = points.to_vec();
    let duplicate = (0..n).any(|i| (i + 1..n).any(|j| pts[i] == pts[j]));
    if duplicate {
        for p in pts.iter_mut() {
            for v in p.iter_mut() {
                *v += 1e-9 * (2.0 * rng::uniform(&mut r) - 1.0);
            }
        }
    }
    let p = memberships(&pts, k);

    let first: Vec<f64> = pts.iter().map(|p| p[0]).collect();
    let mut u: Vec<[f64; 2]> = min_max(&first)
        .into_iter()
        .map(|v| {
            let s = INIT_SPAN * v;
            [
                s + cfg.init_noise * rng::normal(&mut r),
                s + cfg.init_noise * rng::normal(&mut r),
            ]
        })
        .collect();

    let (a, b) = (cfg.a, cfg.b);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let alpha = cfg.learning_rate * (1.0 - epoch as f64 / cfg.epochs as f64);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        for &i in &order {
            let mut g = [0.0; 2];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d = [u[i][0] - u[j][0], u[i][1] - u[j][1]];
                let sq = d[0] * d[0] + d[1] * d[1];
                let q = 1.0 / (1.0 + a * sq.powf(b));
                let w = (p[i][j] - q) / (sq + 1e-3);
                g[0] += w * d[0];
                g[1] += w * d[1];
            }
            for c in 0..2 {
                u[i][c] -= alpha * g[c].clamp(-STEP_CLIP, STEP_CLIP);
            }
        }
        if cfg.lambda5 > 0.0 {
            // exact minimizer of the step's quadratic penalty; stable for any α·λ₅
            let shrink = 1.0 / (1.0 + 4.0 * alpha * cfg.lambda5);
            for p in u.iter_mut() {
                let (m, h) = (0.5 * (p[0] + p[1]), 0.5 * (p[0] - p[1]) * shrink);
                *p = [m + h, m - h];
            }
        }
        let pairs: Vec<(f64, f64)> = u.iter().map(|p| (p[0], p[1])).collect();
        let var = variance(&pairs);
        if var < cfg.var_floor {
            let (mx, my) = pairs.iter().fold((0.0, 0.0), |(x, y), (a, b)| {
                (x + a / n as f64, y + b / n as f64)
            });
            let s = if var > 0.0 {
                (cfg.var_floor / var).sqrt()
            } else {
                1.0
            };
            for p in u.iter_mut() {
                *p = [mx + s * (p[0] - mx), my + s * (p[1] - my)];
            }
        }
    }
    if u.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "umap optimization",
        });
    }
    let coords = normalize(&u);
    Ok(EmbeddingResult {
        residual: residual(&coords),
        variance: variance(&coords),
        coords,
        jittered: duplicate,
    })
}

/// Seed of one feature-wise run, derived from the column values.
pub fn feature_seed(seed: u64, column: &[f64]) -> u64 {
    column.iter().fold(rng::derive(seed, 0xfea7), |s, v| {
        rng::derive(s, v.to_bits())
    })
}

/// One 1-D UMAP per column of the `M × T` matrix, each column min–max normalized first.
///
/// Each run's seed is derived from the column's values, so permuting columns permutes the
/// result blocks.
pub fn featurewise_umap(matrix: &Tensor, cfg: &UmapConfig) -> Result<Vec<EmbeddingResult>> {
    cfg.validate()?;
    if matrix.shape().len() != 2 {
        return Err(Error::Contract("cohort matrix must be M × T".into()));
    }
    let (m, t) = (matrix.rows(), matrix.cols());
    if m <= cfg.n_neighbors {
        return Err(Error::Config(format!(
            "feature-wise UMAP with k = {} needs more than {} samples, got {m}",
            cfg.n_neighbors, cfg.n_neighbors
        )));
    }
    let columns: Vec<Vec<f64>> = (0..t)
        .map(|j| (0..m).map(|i| matrix.get2(i, j)).collect())
        .collect();
    let run = |col: &Vec<f64>| -> Result<EmbeddingResult> {
        let pts: Vec<Vec<f64>> = min_max(col).into_iter().map(|v| vec![v]).collect();
        let c = UmapConfig {
            seed: feature_seed(cfg.seed, col),
            ..cfg.clone()
        };
        umap_fit(&pts, &c)
    };
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(t.max(1));
    let chunk = t.div_ceil(threads).max(1);
    let mut out: Vec<Result<EmbeddingResult>> = Vec::with_capacity(t);
    std::thread::scope(|s| {
        let handles: Vec<_> = columns
            .chunks(chunk)
            .map(|cols| s.spawn(move || cols.iter().map(run).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            out.extend(h.join().expect("UMAP worker panicked"));
        }
    });
    out.into_iter().collect()
}

/// `T × M × 2` tensor of feature-wise coordinates.
pub fn stack_coords(blocks: &[EmbeddingResult]) -> Result<Tensor> {
    let m = blocks.first().map_or(0, |b| b.coords.len());
    if blocks.iter().any(|b| b.coords.len() != m) {
        return Err(Error::Contract(
            "feature blocks differ in sample count".into(),
        ));
    }
    let data = blocks
        .iter()
        .flat_map(|b| b.coords.iter().flat_map(|&(x, y)| [x, y]))
        .collect();
    Tensor::new(vec![blocks.len(), m, 2], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Orthonormal rows of length `T`.
    pub components: Vec<Vec<f64>>,
    pub explained_ratio: Vec<f64>,
    /// `M` rows, one score per component.
    pub scores: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub rank: usize,
    /// Fewer components than requested were available.
    pub rank_deficient: bool,
}

impl PcaResult {
    /// `scores · components + mean`.
    pub fn reconstruct(&self) -> Vec<Vec<f64>> {
        self.scores
            .iter()
            .map(|s| {
                let mut row = self.mean.clone();
                for (c, &w) in self.components.iter().zip(s) {
                    for (r, v) in row.iter_mut().zip(c) {
                        *r += w * v;
                    }
                }
                row
            })
            .collect()
    }
}

/// Column-centered PCA keeping up to `max_components` nonzero directions.
pub fn pca(matrix: &Tensor, max_components: usize) -> Result<PcaResult> {
    if matrix.shape().len() != 2 || matrix.rows() < 2 || matrix.cols() == 0 {
        return Err(Error::Contract(
            "PCA needs an M × T matrix with M ≥ 2".into(),
        ));
    }
    if !matrix.is_finite() {
        return Err(Error::Numeric { op: "pca input" });
    }
    let (m, t) = (matrix.rows(), matrix.cols());
    let mean: Vec<f64> = (0..t)
        .map(|j| (0..m).map(|i| matrix.get2(i, j)).sum::<f64>() / m as f64)
        .collect();
    let x = DMatrix::from_fn(m, t, |i, j| matrix.get2(i, j) - mean[j]);
    let svd = x.clone().svd(false, true);
    let vt = svd.v_t.ok_or(Error::Numeric { op: "pca svd" })?;
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let total: f64 = s.iter().map(|v| v * v).sum();
    let tol = s.iter().cloned().fold(0.0, f64::max) * (m.max(t) as f64) * f64::EPSILON * 16.0;
    let rank = s.iter().filter(|&&v| v > tol).count();
    let keep = max_components.min(rank);
    let mut components = Vec::with_capacity(keep);
    let mut explained_ratio = Vec::with_capacity(keep);
    for &k in order.iter().take(keep) {
        let mut c: Vec<f64> = vt.row(k).iter().cloned().collect();
        let lead = (0..t).fold(
            0,
            |best, j| if c[j].abs() > c[best].abs() { j } else { best },
        );
        if c[lead] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        explained_ratio.push(if total > 0.0 {
            s[k] * s[k] / total
        } else {
            0.0
        });
    }
    let scores = (0..m)
        .map(|i| {
            components
                .iter()
                .map(|c| c.iter().enumerate().map(|(j, v)| v * x[(i, j)]).sum())
                .collect()
        })
        .collect();
    Ok(PcaResult {
        components,
        explained_ratio,
        scores,
        mean,
        rank,
        rank_deficient: keep < max_components,
    })
}

/// Top eight components of an `M × T` attribution matrix with `M ≥ 9`.
pub fn pca_top8(matrix: &Tensor) -> Result<PcaResult> {
    if matrix.shape().len() == 2 && matrix.rows() < 9 {
        return Err(Error::Contract(format!(
            "PCA top-8 needs at least 9 samples, got {}",
            matrix.rows()
        )));
    }
    pca(matrix, 8)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    /// Feature indices with normalized first-component loading ≥ τ.
    pub selected: Vec<usize>,
    pub counts: [usize; 9],
    /// Share of selected tagged features per subgroup; zeros when none were selected.
    pub fractions: [f64; 9],
}

impl SubgroupReport {
    /// Subgroup with the largest fraction, ties to the earlier tag.
    pub fn top(&self) -> Option<SubgroupTag> {
        let best = (0..9).fold(0, |b, i| {
            if self.fractions[i] > self.fractions[b] {
                i
            } else {
                b
            }
        });
        (self.fractions[best] > 0.0).then_some(SubgroupTag::ALL[best])
    }
}

/// Selects features whose min–max normalized |first-component loading| is at least `tau`
/// and tallies them by subgroup. `tags[j]` is the subgroup of feature `j`, if any.
pub fn threshold_select(
    pca: &PcaResult,
    tags: &[Option<SubgroupTag>],
    tau: f64,
) -> Result<SubgroupReport> {
    let first = pca.components.first().ok_or_else(|| {
        Error::Contract("threshold selection needs at least one component".into())
    })?;
    if first.len() != tags.len() {
        return Err(Error::Contract(
            "one subgroup tag per feature is required".into(),
        ));
    }
    let strength = min_max(&first.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let selected: Vec<usize> = (0..strength.len())
        .filter(|&j| strength[j] >= tau)
        .collect();
    let mut counts = [0usize; 9];
    for &j in &selected {
        if let Some(t) = tags[j] {
            counts[t.index()] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let mut fractions = [0.0; 9];
    if total > 0 {
        for i in 0..9 {
            fractions[i] = counts[i] as f64 / total as f64;
        }
    }
    Ok(SubgroupReport {
        selected,
        counts,
        fractions,
    })
}

pub fn write_embedding_csv(
    path: &Path,
    blocks: &[EmbeddingResult],
    sample_ids: &[usize],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["feature_index", "sample_id", "u1", "u2"])
        .map_err(csv_err)?;
    for (f, b) in blocks.iter().enumerate() {
        if b.coords.len() != sample_ids.len() {
            return Err(Error::Contract(
                "one sample id per embedded point is required".into(),
            ));
        }
        for (&(u1, u2), id) in b.coords.iter().zip(sample_ids) {
            w.write_record([
                f.to_string(),
                id.to_string(),
                format!("{u1:.6}"),
                format!("{u2:.6}"),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_pca_csv(path: &Path, pca: &PcaResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["component", "feature_index", "loading"])
        .map_err(csv_err)?;
    for (c, comp) in pca.components.iter().enumerate() {
        for (f, v) in comp.iter().enumerate() {
            w.write_record([c.to_string(), f.to_string(), format!("{v:.6}")])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_pca_scores_csv(path: &Path, pca: &PcaResult, sample_ids: &[usize]) -> Result<()> {
    if pca.scores.len() != sample_ids.len() {
        return Err(Error::Contract(
            "one sample id per score row is required".into(),
        ));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["sample_id", "component", "score"])
        .map_err(csv_err)?;
    for (row, id) in pca.scores.iter().zip(sample_ids) {
        for (c, v) in row.iter().enumerate() {
            w.write_record([id.to_string(), c.to_string(), format!("{v:.6}")])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per named group with the nine subgroup fractions.
pub fn write_subgroup_csv(path: &Path, rows: &[(String, SubgroupReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["group".to_string()];
    header.extend(SubgroupTag::ALL.iter().map(|t| t.heading().to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for (name, r) in rows {
        let mut rec = vec![name.clone()];
        rec.extend(r.fractions.iter().map(|f| format!("{f:.4}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
