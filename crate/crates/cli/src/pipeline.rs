//! Pipeline stages. Each stage reads what earlier stages left in the run directory, so the
//! subcommands can run one at a time or all together.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use monosem::attribution::{attribute, outputs_at, LayerModel, Method, SurrogateLayer};
use monosem::cohort::{self, generate_cohort, Cohort, Distribution, Sample, SubgroupTag};
use monosem::embedding::{self, pca_top8, threshold_select, SubgroupReport};
use monosem::metrics::{self, gini, stability_from, MetricRecord, Neighbor, Shifted, Weighting};
use monosem::optimizer::{
    self, Deo, DeoConfig, Explainer, ExplanationItem, NeighborStack, OptimizerKind, Teo, TeoConfig,
};
use monosem::propagation::{attribute_in_sae_space, sae_pullback, SurrogateEncoder, TokenJacobian};
use monosem::sae::{train_sae, Sae};
use monosem::surrogate::{argmax, train_classifier, Classifier, ClassifierConfig};
use monosem::{rng, Tensor};

use crate::config::{distribution_name, RunConfig};
use crate::render::{export_highlight_csv, render_heatmap, HighlightRow};
use crate::{PipelineError, Result};

pub const STAGES: [&str; 9] = [
    "generate",
    "train-classifier",
    "train-sae",
    "attribute",
    "train-optimizer",
    "evaluate",
    "embed",
    "export",
    "report",
];

/// The two attribution spaces: the layer itself and the SAE features pulled back to it.
pub const SETTINGS: [&str; 2] = ["layer", "sae"];

/// A run directory: `manifest.json` at the root, one subdirectory per distribution.
pub struct Run {
    pub cfg: RunConfig,
    pub root: PathBuf,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Settings the IID models were trained with.
    pub training: Option<String>,
    /// Relative checkpoint path → SHA-256 of its bytes.
    pub checkpoints: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn precondition(msg: impl Into<String>) -> PipelineError {
    PipelineError::Precondition(msg.into())
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.out_dir.clone();
        let dir = root.join(distribution_name(cfg.distribution));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.resolved.txt"), cfg.to_text())?;
        Ok(Self { cfg, root, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn iid(&self, name: &str) -> PathBuf {
        self.root.join("iid").join(name)
    }

    fn is_iid(&self) -> bool {
        self.cfg.distribution == Distribution::Iid
    }

    fn require_iid(&self, what: &str) -> Result<()> {
        if self.is_iid() {
            Ok(())
        } else {
            Err(precondition(format!(
                "{what} runs on the IID cohort only; OOD reuses the IID models"
            )))
        }
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let p = self.root.join("manifest.json");
        if !p.exists() {
            return Ok(Manifest::default());
        }
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }

    fn save_manifest(&self, m: &Manifest) -> Result<()> {
        fs::write(
            self.root.join("manifest.json"),
            serde_json::to_string_pretty(m)? + "\n",
        )?;
        Ok(())
    }

    /// Writes an IID checkpoint and records its hash.
    fn record_checkpoint(&self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.iid(name), bytes)?;
        let mut m = self.manifest()?;
        m.training = Some(self.cfg.training_fingerprint());
        m.checkpoints
            .insert(format!("iid/{name}"), sha256_hex(bytes));
        self.save_manifest(&m)
    }

    /// Bytes of an IID checkpoint whose hash matches the manifest.
    fn checkpoint(&self, name: &str) -> Result<Vec<u8>> {
        let key = format!("iid/{name}");
        let m = self.manifest()?;
        let want = m.checkpoints.get(&key).ok_or_else(|| {
            precondition(format!(
                "no IID checkpoint {key} recorded in the run manifest"
            ))
        })?;
        if m.training.as_deref() != Some(self.cfg.training_fingerprint().as_str()) {
            return Err(precondition(
                "IID checkpoints were trained under different settings",
            ));
        }
        let bytes = fs::read(self.iid(name))
            .map_err(|_| precondition(format!("checkpoint {key} is missing")))?;
        if &sha256_hex(&bytes) != want {
            return Err(precondition(format!(
                "checkpoint {key} does not match its recorded hash"
            )));
        }
        Ok(bytes)
    }

    fn classifier(&self) -> Result<Classifier> {
        Ok(Classifier::from_checkpoint_bytes(
            &self.checkpoint("classifier.ckpt")?,
        )?)
    }

    fn sae(&self) -> Result<Sae> {
        Ok(Sae::from_checkpoint_bytes(&self.checkpoint("sae.ckpt")?)?)
    }

    fn optimizer_name(&self, setting: &str) -> String {
        let kind = self.cfg.optimizer_kind.name();
        if setting == "sae" {
            format!("{kind}_sae")
        } else {
            kind.to_string()
        }
    }

    fn cohort(&self) -> Result<Cohort> {
        let p = self.path("cohort.csv");
        if !p.exists() {
            return Err(precondition(format!(
                "{} has no cohort; run generate first",
                self.dir.display()
            )));
        }
        Ok(cohort::ingest_csv(&p)?)
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str, stage: &str) -> Result<T> {
        let p = self.path(name);
        let text = fs::read_to_string(&p)
            .map_err(|_| precondition(format!("{} is missing; run {stage} first", p.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        fs::write(self.path(name), serde_json::to_string(value)? + "\n")?;
        Ok(())
    }
}

pub fn generate(run: &Run) -> Result<()> {
    let c = &run.cfg;
    let cohort = generate_cohort(c.seed, c.n_samples, c.task, c.distribution)?;
    cohort::export_csv(&cohort, &run.path("cohort.csv"))?;
    Ok(())
}

pub fn train_classifier_stage(run: &Run) -> Result<()> {
    run.require_iid("classifier training")?;
    let cohort = run.cohort()?;
    let part = cohort.partition(run.cfg.seed);
    let train = cohort.subset(&part.train, cohort::Split::Train);
    let val = cohort.subset(&part.val, cohort::Split::Val);
    let model_cfg = ClassifierConfig::new(run.cfg.task.n_classes(), run.cfg.seed);
    let (model, report) = train_classifier(&train, &val, model_cfg, &run.cfg.classifier_train())?;
    let test = cohort.subset(&part.test, cohort::Split::Test);
    let summary = serde_json::json!({
        "best_epoch": report.best_epoch,
        "val_accuracy": report.val_accuracy,
        "test_accuracy": model.accuracy(&test)?,
    });
    run.write_json("classifier_report.json", &summary)?;
    run.record_checkpoint("classifier.ckpt", &model.checkpoint_bytes()?)
}

pub fn train_sae_stage(run: &Run) -> Result<()> {
    run.require_iid("SAE training")?;
    let model = run.classifier()?;
    let cohort = run.cohort()?;
    let part = cohort.partition(run.cfg.seed);
    let rows = part
        .train
        .iter()
        .map(|&i| model.layer_activations(&cohort.samples[i]))
        .collect::<monosem::Result<Vec<_>>>()?;
    let (sae, curves) = train_sae(&Tensor::from_rows(&rows)?, &run.cfg.sae_train())?;
    let mut w = csv::Writer::from_path(run.path("sae_curve.csv"))
        .map_err(|e| PipelineError::Io(e.into()))?;
    w.write_record(["step", "loss", "mse"])
        .map_err(|e| PipelineError::Io(e.into()))?;
    for (s, (l, m)) in curves.loss.iter().zip(&curves.mse[1..]).enumerate() {
        w.write_record([s.to_string(), format!("{l:.6e}"), format!("{m:.6e}")])
            .map_err(|e| PipelineError::Io(e.into()))?;
    }
    w.flush()?;
    run.record_checkpoint("sae.ckpt", &sae.checkpoint_bytes()?)
}

/// Attributions of one evaluated point (the sample or a perturbed copy) in both spaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMaps {
    pub x: Vec<f64>,
    pub fx: Vec<f64>,
    /// The perturbed point keeps the predicted class; maps are empty otherwise.
    pub kept: bool,
    /// Per method, token scores over the non-pad positions.
    pub layer: Vec<Vec<f64>>,
    pub sae: Vec<Vec<f64>>,
}

impl PointMaps {
    pub fn maps(&self, setting: &str) -> &[Vec<f64>] {
        if setting == "sae" {
            &self.sae
        } else {
            &self.layer
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleAttributions {
    pub split: String,
    pub sample_id: usize,
    pub label: usize,
    pub predicted: usize,
    pub positions: Vec<usize>,
    pub tokens: Vec<u32>,
    /// The sample first, then its perturbed copies.
    pub points: Vec<PointMaps>,
}

fn sample_seed(seed: u64, sample_id: usize) -> u64 {
    rng::derive(seed, 0x5a_0000 + sample_id as u64)
}

/// Six method maps of `m` at token level, in the layer and in SAE space.
fn token_maps(
    m: &dyn LayerModel,
    sae: &Sae,
    jac: &TokenJacobian,
    positions: &[usize],
    target: usize,
    cfg: &RunConfig,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let acfg = cfg.attribution();
    let pick = |full: Vec<f64>| positions.iter().map(|&p| full[p]).collect::<Vec<_>>();
    let (mut layer, mut feat) = (Vec::with_capacity(6), Vec::with_capacity(6));
    for method in Method::SIX {
        let phi = attribute(m, method, target, &acfg)?.values;
        layer.push(pick(jac.apply(&phi)?));
        let psi = attribute_in_sae_space(m, sae, method, target, &acfg)?.values;
        feat.push(pick(jac.apply(&sae_pullback(
            sae,
            m.activation(),
            &psi,
        )?)?));
    }
    Ok((layer, feat))
}

pub fn attribute_sample(
    model: &Classifier,
    sae: &Sae,
    sample: &Sample,
    sample_id: usize,
    split: &str,
    n_neighbors: usize,
    cfg: &RunConfig,
) -> Result<SampleAttributions> {
    let layer = SurrogateLayer::new(model, sample)?;
    let jac = TokenJacobian::new(&SurrogateEncoder::new(model, sample))?;
    let positions = layer.input.positions.clone();
    let x = layer.activation().to_vec();
    let fx = outputs_at(&layer, &x)?;
    let target = argmax(&fx);
    let (l, s) = token_maps(&layer, sae, &jac, &positions, target, cfg)?;
    let mut points = vec![PointMaps {
        x: x.clone(),
        fx,
        kept: true,
        layer: l,
        sae: s,
    }];
    let stab = cfg.stability(sample_seed(cfg.seed, sample_id));
    for delta in stab.perturbations(&x).into_iter().take(n_neighbors) {
        let moved = Shifted::new(&layer, delta);
        let fx2 = outputs_at(&moved, moved.activation())?;
        let kept = argmax(&fx2) == target;
        let (l, s) = if kept {
            token_maps(&moved, sae, &jac, &positions, target, cfg)?
        } else {
            (Vec::new(), Vec::new())
        };
        points.push(PointMaps {
            x: moved.activation().to_vec(),
            fx: fx2,
            kept,
            layer: l,
            sae: s,
        });
    }
    Ok(SampleAttributions {
        split: split.to_string(),
        sample_id,
        label: sample.label,
        predicted: target,
        tokens: positions.iter().map(|&p| sample.tokens[p]).collect(),
        positions,
        points,
    })
}

pub fn attribute_stage(run: &Run) -> Result<()> {
    let model = run.classifier()?;
    let sae = run.sae()?;
    let cohort = run.cohort()?;
    let part = cohort.partition(run.cfg.seed);
    let mut jobs: Vec<(&str, usize, usize)> = part
        .test
        .iter()
        .map(|&i| ("test", i, run.cfg.n_perturbations))
        .collect();
    if run.is_iid() {
        let train_items = part
            .val
            .iter()
            .map(|&i| ("val", i, run.cfg.optimizer_neighbors));
        jobs.splice(0..0, train_items);
    }
    let mut out = Vec::with_capacity(jobs.len());
    for (split, i, n) in jobs {
        out.push(attribute_sample(
            &model,
            &sae,
            &cohort.samples[i],
            i,
            split,
            n,
            &run.cfg,
        )?);
    }
    run.write_json("attributions.json", &out)?;

    let mut rows = Vec::new();
    for sa in out.iter().filter(|s| s.split == "test") {
        for setting in SETTINGS {
            for (k, m) in Method::SIX.iter().enumerate() {
                let v = &sa.points[0].maps(setting)[k];
                for (j, &p) in sa.positions.iter().enumerate() {
                    rows.push([
                        sa.sample_id.to_string(),
                        setting.to_string(),
                        m.name().to_string(),
                        p.to_string(),
                        cohort::vocab().word(sa.tokens[j]).to_string(),
                        format!("{:.6e}", v[j]),
                    ]);
                }
            }
        }
    }
    let mut w = csv::Writer::from_path(run.path("token_attributions.csv"))
        .map_err(|e| PipelineError::Io(e.into()))?;
    w.write_record([
        "sample_id",
        "setting",
        "method",
        "token_index",
        "char",
        "value",
    ])
    .map_err(|e| PipelineError::Io(e.into()))?;
    for r in rows {
        w.write_record(&r)
            .map_err(|e| PipelineError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Stack rows `[n, 7]`: min–max normalized `|Φ_k|` per method, then the scaled token id.
pub fn stack_of(maps: &[Vec<f64>], tokens: &[u32]) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let norms: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| metrics::min_max(&m.iter().map(|v| v.abs()).collect::<Vec<_>>()))
        .collect();
    let scale = (cohort::VOCAB_SIZE - 1) as f64;
    let mut data = Vec::with_capacity(tokens.len() * optimizer::STACK_CHANNELS);
    for (r, &t) in tokens.iter().enumerate() {
        data.extend(norms.iter().map(|n| n[r]));
        data.push(t as f64 / scale);
    }
    Ok((
        Tensor::matrix(tokens.len(), optimizer::STACK_CHANNELS, data)?,
        norms,
    ))
}

struct Scores {
    sparseness: f64,
    ris: f64,
    ros: f64,
}

fn scores(
    phi: &[f64],
    sa: &SampleAttributions,
    neighbor_phi: &dyn Fn(usize) -> Result<Vec<f64>>,
    cfg: &RunConfig,
) -> Result<Option<Scores>> {
    let mut neighbors = Vec::new();
    for (i, p) in sa.points.iter().enumerate().skip(1) {
        neighbors.push(Neighbor {
            x: p.x.clone(),
            fx: p.fx.clone(),
            phi: if p.kept { neighbor_phi(i)? } else { Vec::new() },
        });
    }
    let first = &sa.points[0];
    let stab = match stability_from(&first.x, &first.fx, phi, &neighbors, &cfg.stability(0)) {
        Ok(s) => s,
        Err(monosem::Error::EmptyNeighborhood) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let sparseness = match gini(phi) {
        Ok(g) => g,
        Err(monosem::Error::UndefinedMetric(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    Ok(Some(Scores {
        sparseness,
        ris: stab.ris,
        ros: stab.ros,
    }))
}

/// Aggregation weights of the six methods for one sample.
fn method_weights(sa: &SampleAttributions, setting: &str, cfg: &RunConfig) -> Result<Vec<f64>> {
    if cfg.weighting == Weighting::Uniform {
        return Ok(vec![1.0 / 6.0; 6]);
    }
    let (mut ris, mut ros, mut sp) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..6 {
        let phi = &sa.points[0].maps(setting)[k];
        match scores(phi, sa, &|i| Ok(sa.points[i].maps(setting)[k].clone()), cfg)? {
            Some(s) => {
                ris.push(s.ris);
                ros.push(s.ros);
                sp.push(s.sparseness);
            }
            None => return Ok(vec![1.0 / 6.0; 6]),
        }
    }
    Ok(metrics::method_weights(cfg.weighting, &ris, &ros, &sp))
}

pub fn explanation_item(
    sa: &SampleAttributions,
    setting: &str,
    cfg: &RunConfig,
) -> Result<ExplanationItem> {
    let first = &sa.points[0];
    let (stack, norms) = stack_of(first.maps(setting), &sa.tokens)?;
    let target = metrics::aggregate_weighted(&norms, &method_weights(sa, setting, cfg)?)?;
    let mut neighbors = Vec::new();
    for p in &sa.points[1..] {
        let stack = if p.kept {
            stack_of(p.maps(setting), &sa.tokens)?.0
        } else {
            Tensor::zeros(vec![sa.tokens.len(), optimizer::STACK_CHANNELS])
        };
        neighbors.push(NeighborStack {
            x: p.x.clone(),
            fx: p.fx.clone(),
            stack,
        });
    }
    Ok(ExplanationItem {
        sample_id: sa.sample_id,
        stack,
        positions: sa.positions.clone(),
        target,
        x: first.x.clone(),
        fx: first.fx.clone(),
        neighbors,
    })
}

enum Optimizer {
    Teo(Teo),
    Deo(Deo),
}

impl Optimizer {
    fn explainer(&self, seed: u64) -> Explainer<'_> {
        match self {
            Optimizer::Teo(m) => Explainer::Teo(m),
            Optimizer::Deo(m) => Explainer::Deo(m, seed),
        }
    }
}

pub fn train_optimizer_stage(run: &Run) -> Result<()> {
    run.require_iid("optimizer training")?;
    let bundle: Vec<SampleAttributions> = run.read_json("attributions.json", "attribute")?;
    let train_cfg = run.cfg.optimizer_train();
    for setting in SETTINGS {
        let mut items = Vec::new();
        for sa in bundle.iter().filter(|s| s.split == "val") {
            let item = explanation_item(sa, setting, &run.cfg)?;
            // an item whose neighbors all change the prediction has no stability terms
            if !item.retained().is_empty() {
                items.push(item);
            }
        }
        let name = run.optimizer_name(setting);
        let (curve, bytes) = match run.cfg.optimizer_kind {
            OptimizerKind::Teo => {
                let mut m = Teo::new(TeoConfig {
                    seed: run.cfg.seed,
                    ..Default::default()
                })?;
                let curve = optimizer::train_teo(&mut m, &items, &train_cfg, 0.0)?;
                (curve, m.checkpoint_bytes()?)
            }
            OptimizerKind::Deo => {
                let mut m = Deo::new(DeoConfig {
                    seed: run.cfg.seed,
                    ..Default::default()
                })?;
                let curve = optimizer::train_deo(&mut m, &items, &train_cfg)?;
                (curve, m.checkpoint_bytes()?)
            }
        };
        curve.write_csv(&run.path(&format!("{name}_curve.csv")))?;
        run.record_checkpoint(&format!("{name}.ckpt"), &bytes)?;
    }
    Ok(())
}

fn load_optimizer(run: &Run, setting: &str) -> Result<Optimizer> {
    let bytes = run.checkpoint(&format!("{}.ckpt", run.optimizer_name(setting)))?;
    Ok(match run.cfg.optimizer_kind {
        OptimizerKind::Teo => Optimizer::Teo(Teo::from_checkpoint_bytes(&bytes)?),
        OptimizerKind::Deo => Optimizer::Deo(Deo::from_checkpoint_bytes(&bytes)?),
    })
}

/// Per-sample scores of one explanation, with its ground-truth recovery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub setting: String,
    pub method: String,
    pub class: usize,
    pub sample_id: usize,
    pub sparseness: f64,
    pub ris: f64,
    pub ros: f64,
    /// AUC of `|Φ|` against the planted signal positions.
    pub auc: Option<f64>,
}

/// Optimizer output on the non-pad positions of one test sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub sample_id: usize,
    pub label: usize,
    pub positions: Vec<usize>,
    pub tokens: Vec<u32>,
    pub layer: Vec<f64>,
    pub sae: Vec<f64>,
}

/// Probability that a random positive outranks a random negative, ties counting one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(positive)
        .filter(|p| *p.1)
        .map(|p| *p.0)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(positive)
        .filter(|p| !*p.1)
        .map(|p| *p.0)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for a in &pos {
        for b in &neg {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

pub fn evaluate_stage(run: &Run) -> Result<()> {
    let bundle: Vec<SampleAttributions> = run.read_json("attributions.json", "attribute")?;
    let cohort = run.cohort()?;
    let mask = cohort.plant.map(|p| p.signal_mask());
    let optimizers = [load_optimizer(run, "layer")?, load_optimizer(run, "sae")?];
    let mut records = Vec::new();
    let mut explanations = Vec::new();
    for sa in bundle.iter().filter(|s| s.split == "test") {
        let truth: Option<Vec<bool>> = mask
            .as_ref()
            .map(|m| sa.positions.iter().map(|&p| m[p]).collect());
        let mut record = |setting: &str, method: String, phi: &[f64], s: Option<Scores>| {
            if let Some(s) = s {
                records.push(EvalRecord {
                    setting: setting.to_string(),
                    method,
                    class: sa.label,
                    sample_id: sa.sample_id,
                    sparseness: s.sparseness,
                    ris: s.ris,
                    ros: s.ros,
                    auc: truth
                        .as_ref()
                        .and_then(|t| auc(&phi.iter().map(|v| v.abs()).collect::<Vec<_>>(), t)),
                });
            }
        };
        let mut outs = Vec::with_capacity(2);
        for (si, setting) in SETTINGS.iter().enumerate() {
            for (k, m) in Method::SIX.iter().enumerate() {
                let phi = &sa.points[0].maps(setting)[k];
                let s = scores(
                    phi,
                    sa,
                    &|i| Ok(sa.points[i].maps(setting)[k].clone()),
                    &run.cfg,
                )?;
                record(setting, m.name().to_string(), phi, s);
            }
            let ex = optimizers[si].explainer(sample_seed(run.cfg.seed, sa.sample_id));
            let stack_at = |i: usize| stack_of(sa.points[i].maps(setting), &sa.tokens).map(|s| s.0);
            let phi = ex.explain_stack(&stack_at(0)?, &sa.positions, sa.sample_id)?;
            let s = scores(
                &phi,
                sa,
                &|i| Ok(ex.explain_stack(&stack_at(i)?, &sa.positions, sa.sample_id)?),
                &run.cfg,
            )?;
            record(setting, run.cfg.optimizer_kind.name().to_string(), &phi, s);
            outs.push(phi);
        }
        let sae = outs.pop().unwrap_or_default();
        let layer = outs.pop().unwrap_or_default();
        explanations.push(Explanation {
            sample_id: sa.sample_id,
            label: sa.label,
            positions: sa.positions.clone(),
            tokens: sa.tokens.clone(),
            layer,
            sae,
        });
    }
    let mut w =
        csv::Writer::from_path(run.path("records.csv")).map_err(|e| PipelineError::Io(e.into()))?;
    w.write_record([
        "setting",
        "method",
        "class",
        "sample_id",
        "sparseness",
        "ris",
        "ros",
        "auc",
    ])
    .map_err(|e| PipelineError::Io(e.into()))?;
    for r in &records {
        w.write_record([
            r.setting.clone(),
            r.method.clone(),
            r.class.to_string(),
            r.sample_id.to_string(),
            format!("{:.6e}", r.sparseness),
            format!("{:.6e}", r.ris),
            format!("{:.6e}", r.ros),
            r.auc.map(|a| format!("{a:.6}")).unwrap_or_default(),
        ])
        .map_err(|e| PipelineError::Io(e.into()))?;
    }
    w.flush()?;
    run.write_json("records.json", &records)?;
    run.write_json("explanations.json", &explanations)
}

/// `M × T` matrix of one setting's optimized explanations, zero at pads.
pub fn explanation_matrix(ex: &[&Explanation], setting: &str) -> Result<Tensor> {
    let t = cohort::SEQ_LEN;
    let mut data = vec![0.0; ex.len() * t];
    for (i, e) in ex.iter().enumerate() {
        let v = if setting == "sae" { &e.sae } else { &e.layer };
        for (&p, &x) in e.positions.iter().zip(v) {
            data[i * t + p] = x;
        }
    }
    Ok(Tensor::matrix(ex.len(), t, data)?)
}

/// Subgroup of each sequence position in the fixed section layout.
pub fn position_tags(sample: &Sample) -> Vec<Option<SubgroupTag>> {
    (0..cohort::SEQ_LEN).map(|p| sample.tag_at(p)).collect()
}

pub fn embed_stage(run: &Run) -> Result<()> {
    let explanations: Vec<Explanation> = run.read_json("explanations.json", "evaluate")?;
    let cohort = run.cohort()?;
    let tags = position_tags(&cohort.samples[0]);
    let all: Vec<&Explanation> = explanations.iter().collect();
    let ids: Vec<usize> = all.iter().map(|e| e.sample_id).collect();
    let mut reports: Vec<(String, SubgroupReport)> = Vec::new();
    for setting in SETTINGS {
        let name = run.optimizer_name(setting);
        let matrix = explanation_matrix(&all, setting)?;
        let blocks = embedding::featurewise_umap(&matrix, &run.cfg.umap())?;
        embedding::write_embedding_csv(&run.path(&format!("embedding_{name}.csv")), &blocks, &ids)?;
        let residuals: Vec<f64> = blocks.iter().map(|b| b.residual).collect();
        run.write_json(&format!("embedding_{name}_residuals.json"), &residuals)?;
        let pca = pca_top8(&matrix)?;
        embedding::write_pca_csv(&run.path(&format!("pca_{name}.csv")), &pca)?;
        embedding::write_pca_scores_csv(&run.path(&format!("pca_scores_{name}.csv")), &pca, &ids)?;
        reports.push((
            name.clone(),
            threshold_select(&pca, &tags, run.cfg.pca_threshold)?,
        ));
        for c in 0..run.cfg.task.n_classes() {
            let sel: Vec<&Explanation> = explanations.iter().filter(|e| e.label == c).collect();
            if sel.len() < 9 {
                continue;
            }
            let pca = pca_top8(&explanation_matrix(&sel, setting)?)?;
            reports.push((
                format!("{name} class {c}"),
                threshold_select(&pca, &tags, run.cfg.pca_threshold)?,
            ));
        }
    }
    embedding::write_subgroup_csv(&run.path("subgroups.csv"), &reports)?;
    run.write_json("subgroups.json", &reports)
}

pub fn export_stage(run: &Run) -> Result<()> {
    let explanations: Vec<Explanation> = run.read_json("explanations.json", "evaluate")?;
    let bundle: Vec<SampleAttributions> = run.read_json("attributions.json", "attribute")?;
    let cohort = run.cohort()?;
    let vocab = cohort::vocab();
    let methods: Vec<String> = SETTINGS.iter().map(|s| run.optimizer_name(s)).collect();
    let heat = run.path("heatmaps");
    fs::create_dir_all(&heat)?;
    for c in 0..run.cfg.task.n_classes() {
        let mut rows = Vec::new();
        for e in explanations.iter().filter(|e| e.label == c) {
            let words: Vec<String> = e
                .tokens
                .iter()
                .map(|&t| vocab.word(t).to_string())
                .collect();
            rows.push(HighlightRow {
                text: cohort.samples[e.sample_id].chars.clone(),
                words,
                scores: vec![e.layer.clone(), e.sae.clone()],
            });
        }
        export_highlight_csv(
            &run.path(&format!("highlights_class{c}.csv")),
            &methods,
            &rows,
            run.cfg.export_fraction,
        )?;

        let Some(e) = explanations.iter().find(|e| e.label == c) else {
            continue;
        };
        let sa = bundle
            .iter()
            .find(|s| s.split == "test" && s.sample_id == e.sample_id)
            .ok_or_else(|| precondition("explanations and attributions disagree"))?;
        let words: Vec<String> = e
            .tokens
            .iter()
            .map(|&t| vocab.word(t).to_string())
            .collect();
        for (si, setting) in SETTINGS.iter().enumerate() {
            let mut maps: Vec<(String, &[f64])> = Method::SIX
                .iter()
                .zip(sa.points[0].maps(setting))
                .map(|(m, v)| (m.name().to_string(), v.as_slice()))
                .collect();
            maps.push((
                run.cfg.optimizer_kind.name().to_string(),
                if si == 0 { &e.layer } else { &e.sae },
            ));
            for (method, phi) in maps {
                let svg = render_heatmap(&words, phi)?;
                fs::write(
                    heat.join(format!("sample{}_{setting}_{method}.svg", e.sample_id)),
                    svg,
                )?;
            }
        }
    }
    Ok(())
}

fn stat_rows(records: &[EvalRecord], run: &Run) -> Result<Vec<Vec<String>>> {
    let opt = run.cfg.optimizer_kind.name();
    let mut tests = Vec::new();
    for setting in SETTINGS {
        let of = |method: &str| -> BTreeMap<usize, &EvalRecord> {
            records
                .iter()
                .filter(|r| r.setting == setting && r.method == method)
                .map(|r| (r.sample_id, r))
                .collect()
        };
        let mine = of(opt);
        for m in Method::SIX {
            let theirs = of(m.name());
            let shared: Vec<usize> = mine
                .keys()
                .filter(|k| theirs.contains_key(k))
                .copied()
                .collect();
            for (metric, f) in [
                (
                    "sparseness",
                    (|r: &EvalRecord| r.sparseness) as fn(&EvalRecord) -> f64,
                ),
                ("ris", |r: &EvalRecord| r.ris),
                ("ros", |r: &EvalRecord| r.ros),
            ] {
                let a: Vec<f64> = shared.iter().map(|k| f(mine[k])).collect();
                let b: Vec<f64> = shared.iter().map(|k| f(theirs[k])).collect();
                let cmp = match metrics::paired_compare(&a, &b) {
                    Ok(c) => Some(c),
                    Err(monosem::Error::DegenerateTest(_) | monosem::Error::Contract(_)) => None,
                    Err(e) => return Err(e.into()),
                };
                tests.push((setting, m.name(), metric, shared.len(), cmp));
            }
        }
    }
    let t_p: Vec<f64> = tests
        .iter()
        .filter_map(|t| t.4.as_ref().map(|c| c.t_p))
        .collect();
    let w_p: Vec<f64> = tests
        .iter()
        .filter_map(|t| t.4.as_ref().map(|c| c.wilcoxon_p))
        .collect();
    let t_fdr = metrics::bh_fdr(&t_p, run.cfg.fdr_q)?;
    let w_fdr = metrics::bh_fdr(&w_p, run.cfg.fdr_q)?;
    let mut rows = Vec::new();
    let mut j = 0;
    for (setting, method, metric, n, cmp) in tests {
        let mut row = vec![
            setting.to_string(),
            opt.to_string(),
            method.to_string(),
            metric.to_string(),
            n.to_string(),
        ];
        match cmp {
            Some(c) => {
                row.extend([
                    format!("{:.6}", c.t_stat),
                    format!("{:.6e}", c.t_p),
                    format!("{:.6e}", t_fdr.adjusted[j]),
                    format!("{:.1}", c.wilcoxon_w),
                    format!("{:.6e}", c.wilcoxon_p),
                    format!("{:.6e}", w_fdr.adjusted[j]),
                    w_fdr.rejected[j].to_string(),
                ]);
                j += 1;
            }
            None => row.extend(std::iter::repeat(String::new()).take(7)),
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn report_stage(run: &Run) -> Result<()> {
    let records: Vec<EvalRecord> = run.read_json("records.json", "evaluate")?;
    let mut blocks = Vec::new();
    for setting in SETTINGS {
        let rs: Vec<MetricRecord> = records
            .iter()
            .filter(|r| r.setting == setting)
            .map(|r| MetricRecord {
                method: r.method.clone(),
                class: r.class,
                sample_id: r.sample_id,
                sparseness: r.sparseness,
                ris: r.ris,
                ros: r.ros,
            })
            .collect();
        blocks.push((setting, metrics::summarize(&rs)));
    }
    let table: Vec<(&str, &[metrics::MetricRow])> =
        blocks.iter().map(|(s, r)| (*s, r.as_slice())).collect();
    metrics::write_metric_table(&run.path("metrics.csv"), run.cfg.task_name(), &table)?;

    let mut w =
        csv::Writer::from_path(run.path("stats.csv")).map_err(|e| PipelineError::Io(e.into()))?;
    w.write_record([
        "setting",
        "optimizer",
        "method",
        "metric",
        "n",
        "t_stat",
        "t_p",
        "t_q",
        "wilcoxon_w",
        "wilcoxon_p",
        "wilcoxon_q",
        "rejected",
    ])
    .map_err(|e| PipelineError::Io(e.into()))?;
    for row in stat_rows(&records, run)? {
        w.write_record(&row)
            .map_err(|e| PipelineError::Io(e.into()))?;
    }
    w.flush()?;

    let mut auc_by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &records {
        if let Some(a) = r.auc {
            auc_by
                .entry(format!("{}/{}", r.setting, r.method))
                .or_default()
                .push(a);
        }
    }
    let mean_auc: BTreeMap<String, f64> = auc_by
        .into_iter()
        .map(|(k, v)| (k, metrics::mean_std(&v).0))
        .collect();
    let subgroups: Vec<(String, SubgroupReport)> =
        run.read_json("subgroups.json", "embed").unwrap_or_default();
    let top: BTreeMap<String, Option<String>> = subgroups
        .iter()
        .map(|(g, r)| (g.clone(), r.top().map(|t| t.code().to_string())))
        .collect();
    let cohort = run.cohort()?;
    let summary = serde_json::json!({
        "task": run.cfg.task_name(),
        "distribution": distribution_name(run.cfg.distribution),
        "plant": cohort.plant,
        "mean_auc": mean_auc,
        "top_subgroup": top,
    });
    fs::write(
        run.path("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(())
}

fn stage_fn(name: &str) -> Option<fn(&Run) -> Result<()>> {
    Some(match name {
        "generate" => generate,
        "train-classifier" => train_classifier_stage,
        "train-sae" => train_sae_stage,
        "attribute" => attribute_stage,
        "train-optimizer" => train_optimizer_stage,
        "evaluate" => evaluate_stage,
        "embed" => embed_stage,
        "export" => export_stage,
        "report" => report_stage,
        _ => return None,
    })
}

/// Runs one stage; a failure is tagged with the stage and logged to `error.log`.
pub fn run_stage(run: &Run, name: &str) -> Result<()> {
    let (stage, f) = STAGES
        .iter()
        .find(|s| **s == name)
        .and_then(|s| stage_fn(s).map(|f| (*s, f)))
        .ok_or_else(|| PipelineError::Config(format!("unknown stage '{name}'")))?;
    f(run).map_err(|e| {
        let _ = fs::write(run.path("error.log"), format!("stage {stage}: {e}\n"));
        PipelineError::Stage {
            stage,
            source: Box::new(e),
        }
    })
}

/// Stages a distribution runs: everything on IID, no training on OOD.
pub fn stages_for(d: Distribution) -> Vec<&'static str> {
    STAGES
        .iter()
        .copied()
        .filter(|s| {
            d == Distribution::Iid
                || !matches!(*s, "train-classifier" | "train-sae" | "train-optimizer")
        })
        .collect()
}

/// All stages of the configured distribution, in order.
pub fn run_pipeline(cfg: RunConfig) -> Result<PathBuf> {
    let run = Run::new(cfg)?;
    let _ = fs::remove_file(run.path("error.log"));
    for stage in stages_for(run.cfg.distribution) {
        run_stage(&run, stage)?;
    }
    Ok(run.dir.clone())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
