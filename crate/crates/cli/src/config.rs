//! Plain-text `key = value` run configuration.

use std::path::{Path, PathBuf};

use monosem::attribution::AttributionConfig;
use monosem::cohort::{ClassSet, Distribution};
use monosem::embedding::UmapConfig;
use monosem::metrics::{StabilityConfig, Weighting};
use monosem::optimizer::{LossConfig, LossOrientation, LossWeights, OptimizerKind, TrainConfig};
use monosem::sae::{SaeTrainConfig, SaeVariant};
use monosem::surrogate;

use crate::PipelineError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: ClassSet,
    pub distribution: Distribution,
    pub seed: u64,
    pub n_samples: usize,
    pub out_dir: PathBuf,
    pub classifier_epochs: usize,
    pub sae_variant: SaeVariant,
    pub sae_expansion: usize,
    pub sae_k: usize,
    pub sae_steps: usize,
    pub optimizer_kind: OptimizerKind,
    pub optimizer_steps: usize,
    pub optimizer_lr: f64,
    pub optimizer_batch_size: usize,
    pub optimizer_neighbors: usize,
    pub weights: LossWeights,
    pub orientation: LossOrientation,
    pub weighting: Weighting,
    pub n_perturbations: usize,
    pub noise_scale: f64,
    pub norm_p: f64,
    pub ig_steps: usize,
    pub conductance_steps: usize,
    pub shap_samples: usize,
    pub umap_neighbors: usize,
    pub umap_epochs: usize,
    pub pca_threshold: f64,
    pub export_fraction: f64,
    pub fdr_q: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            task: ClassSet::Binary,
            distribution: Distribution::Iid,
            seed: 1,
            n_samples: 200,
            out_dir: PathBuf::from("runs/default"),
            classifier_epochs: 30,
            sae_variant: SaeVariant::TopK,
            sae_expansion: 32,
            sae_k: 16,
            sae_steps: 500,
            optimizer_kind: OptimizerKind::Teo,
            optimizer_steps: 200,
            optimizer_lr: 2e-4,
            optimizer_batch_size: 8,
            optimizer_neighbors: 4,
            weights: w,
            orientation: LossOrientation::Literal,
            weighting: Weighting::Uniform,
            n_perturbations: 16,
            noise_scale: 0.05,
            norm_p: 2.0,
            ig_steps: 32,
            conductance_steps: 32,
            shap_samples: 64,
            umap_neighbors: 15,
            umap_epochs: 200,
            pca_threshold: 0.6,
            export_fraction: 0.5,
            fdr_q: 0.05,
        }
    }
}

fn bad(key: &str, value: &str) -> PipelineError {
    PipelineError::Config(format!("invalid value '{value}' for {key}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, PipelineError> {
    value.parse().map_err(|_| bad(key, value))
}

fn task_name(t: ClassSet) -> &'static str {
    match t {
        ClassSet::Binary => "binary",
        ClassSet::ThreeClass => "three_class",
    }
}

pub fn distribution_name(d: Distribution) -> &'static str {
    match d {
        Distribution::Iid => "iid",
        Distribution::Ood => "ood",
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 33] = [
        "task",
        "distribution",
        "seed",
        "n_samples",
        "out_dir",
        "classifier.epochs",
        "sae.variant",
        "sae.expansion",
        "sae.k",
        "sae.steps",
        "optimizer.kind",
        "optimizer.steps",
        "optimizer.lr",
        "optimizer.batch_size",
        "optimizer.neighbors",
        "loss.lambda1",
        "loss.lambda2",
        "loss.lambda3",
        "loss.lambda4",
        "loss.lambda5",
        "loss.orientation",
        "aggregation.weighting",
        "metrics.n_perturbations",
        "metrics.noise_scale",
        "metrics.p",
        "attribution.ig_steps",
        "attribution.conductance_steps",
        "attribution.shap_samples",
        "umap.n_neighbors",
        "umap.epochs",
        "pca.threshold",
        "export.fraction",
        "stats.fdr_q",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let v = value.trim();
        match key.trim() {
            "task" => {
                self.task = match v {
                    "binary" => ClassSet::Binary,
                    "three_class" => ClassSet::ThreeClass,
                    _ => return Err(bad(key, v)),
                }
            }
            "distribution" => {
                self.distribution = match v {
                    "iid" => Distribution::Iid,
                    "ood" => Distribution::Ood,
                    _ => return Err(bad(key, v)),
                }
            }
            "seed" => self.seed = num(key, v)?,
            "n_samples" => self.n_samples = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "classifier.epochs" => self.classifier_epochs = num(key, v)?,
            "sae.variant" => self.sae_variant = SaeVariant::parse(v).ok_or_else(|| bad(key, v))?,
            "sae.expansion" => self.sae_expansion = num(key, v)?,
            "sae.k" => self.sae_k = num(key, v)?,
            "sae.steps" => self.sae_steps = num(key, v)?,
            "optimizer.kind" => {
                self.optimizer_kind = OptimizerKind::parse(v).ok_or_else(|| bad(key, v))?
            }
            "optimizer.steps" => self.optimizer_steps = num(key, v)?,
            "optimizer.lr" => self.optimizer_lr = num(key, v)?,
            "optimizer.batch_size" => self.optimizer_batch_size = num(key, v)?,
            "optimizer.neighbors" => self.optimizer_neighbors = num(key, v)?,
            "loss.lambda1" => self.weights.ris = num(key, v)?,
            "loss.lambda2" => self.weights.ros = num(key, v)?,
            "loss.lambda3" => self.weights.sparse = num(key, v)?,
            "loss.lambda4" => self.weights.sim = num(key, v)?,
            "loss.lambda5" => self.weights.umap = num(key, v)?,
            "loss.orientation" => {
                self.orientation = LossOrientation::parse(v).ok_or_else(|| bad(key, v))?
            }
            "aggregation.weighting" => {
                self.weighting = Weighting::parse(v).ok_or_else(|| bad(key, v))?
            }
            "metrics.n_perturbations" => self.n_perturbations = num(key, v)?,
            "metrics.noise_scale" => self.noise_scale = num(key, v)?,
            "metrics.p" => {
                self.norm_p = if v == "inf" {
                    f64::INFINITY
                } else {
                    num(key, v)?
                };
            }
            "attribution.ig_steps" => self.ig_steps = num(key, v)?,
            "attribution.conductance_steps" => self.conductance_steps = num(key, v)?,
            "attribution.shap_samples" => self.shap_samples = num(key, v)?,
            "umap.n_neighbors" => self.umap_neighbors = num(key, v)?,
            "umap.epochs" => self.umap_epochs = num(key, v)?,
            "pca.threshold" => self.pca_threshold = num(key, v)?,
            "export.fraction" => self.export_fraction = num(key, v)?,
            "stats.fdr_q" => self.fdr_q = num(key, v)?,
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown config key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("line {}: expected key = value", n + 1))
            })?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: &str| Err(PipelineError::Config(m.into()));
        if !(self.export_fraction > 0.0 && self.export_fraction <= 1.0) {
            return fail("export.fraction must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.fdr_q) {
            return fail("stats.fdr_q must lie in [0, 1]");
        }
        if self.optimizer_neighbors == 0 || self.optimizer_neighbors > self.n_perturbations {
            return fail("optimizer.neighbors must lie in 1..=metrics.n_perturbations");
        }
        self.weights
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.stability(0)
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.umap()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    /// Every key with its resolved value, in declaration order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let w = self.weights;
        let values = [
            task_name(self.task).to_string(),
            distribution_name(self.distribution).to_string(),
            self.seed.to_string(),
            self.n_samples.to_string(),
            self.out_dir.display().to_string(),
            self.classifier_epochs.to_string(),
            self.sae_variant.name().to_string(),
            self.sae_expansion.to_string(),
            self.sae_k.to_string(),
            self.sae_steps.to_string(),
            self.optimizer_kind.name().to_string(),
            self.optimizer_steps.to_string(),
            self.optimizer_lr.to_string(),
            self.optimizer_batch_size.to_string(),
            self.optimizer_neighbors.to_string(),
            w.ris.to_string(),
            w.ros.to_string(),
            w.sparse.to_string(),
            w.sim.to_string(),
            w.umap.to_string(),
            self.orientation.name().to_string(),
            self.weighting.name().to_string(),
            self.n_perturbations.to_string(),
            self.noise_scale.to_string(),
            if self.norm_p.is_infinite() {
                "inf".into()
            } else {
                self.norm_p.to_string()
            },
            self.ig_steps.to_string(),
            self.conductance_steps.to_string(),
            self.shap_samples.to_string(),
            self.umap_neighbors.to_string(),
            self.umap_epochs.to_string(),
            self.pca_threshold.to_string(),
            self.export_fraction.to_string(),
            self.fdr_q.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// The settings that decide the IID checkpoints; an OOD run must match them.
    pub fn training_fingerprint(&self) -> String {
        const POST_HOC: [&str; 6] = [
            "distribution",
            "out_dir",
            "umap.",
            "pca.",
            "export.",
            "stats.",
        ];
        self.entries()
            .into_iter()
            .filter(|(k, _)| !POST_HOC.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k}={v};"))
            .collect()
    }

    pub fn task_name(&self) -> &'static str {
        task_name(self.task)
    }

    pub fn classifier_train(&self) -> surrogate::TrainConfig {
        surrogate::TrainConfig {
            epochs: self.classifier_epochs,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn sae_train(&self) -> SaeTrainConfig {
        SaeTrainConfig {
            variant: self.sae_variant,
            expansion: self.sae_expansion,
            k: self.sae_k,
            steps: self.sae_steps,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn attribution(&self) -> AttributionConfig {
        AttributionConfig {
            ig_steps: self.ig_steps,
            conductance_steps: self.conductance_steps,
            shap_samples: self.shap_samples,
            seed: self.seed,
            ..Default::default()
        }
    }

    /// Stability settings of one sample; each sample draws its own perturbations.
    pub fn stability(&self, sample_seed: u64) -> StabilityConfig {
        StabilityConfig {
            p: self.norm_p,
            n_perturbations: self.n_perturbations,
            noise_scale: self.noise_scale,
            seed: sample_seed,
            ..Default::default()
        }
    }

    pub fn optimizer_train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.optimizer_lr,
            steps: self.optimizer_steps,
            batch_size: self.optimizer_batch_size,
            loss: LossConfig {
                weights: self.weights,
                orientation: self.orientation,
                ..Default::default()
            },
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn umap(&self) -> UmapConfig {
        UmapConfig {
            n_neighbors: self.umap_neighbors,
            epochs: self.umap_epochs,
            seed: self.seed,
            lambda5: self.weights.umap,
            ..Default::default()
        }
    }
}
