use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use monosem::cohort::{generate_cohort, Distribution, Plant, SEQ_LEN};
use monosem::embedding::{pca_top8, threshold_select};
use monosem::metrics::mean_std;
use monosem::optimizer::loss::total_loss;
use monosem::optimizer::{Explainer, Teo};
use monosem::Tensor;
use monosem_cli::pipeline::{
    auc, explanation_item, file_sha256, position_tags, SampleAttributions,
};
use monosem_cli::{run_pipeline, RunConfig};

use crate::Verdict;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn config(seed: u64, root: &Path, distribution: Distribution) -> RunConfig {
    RunConfig {
        seed,
        distribution,
        out_dir: root.to_path_buf(),
        ..RunConfig::default()
    }
}

struct SeedResult {
    mean_auc: BTreeMap<String, f64>,
    top: Option<String>,
    top_sae: Option<String>,
    primary: String,
    /// Mean literal loss of the optimizer output and of the consensus target it is trained towards.
    loss_output: f64,
    loss_target: f64,
    target_auc: f64,
    /// Top-1 subgroup of the same PCA selection run on the consensus targets.
    target_top: Option<String>,
}

/// Replays the layer-setting optimizer on the test items and scores the literal objective of
/// its output against that of the consensus target; also runs the subgroup selection on the
/// consensus targets.
fn loss_probe(dir: &Path, cfg: &RunConfig, plant: &Plant) -> (f64, f64, f64, Option<String>) {
    let bundle: Vec<SampleAttributions> =
        serde_json::from_str(&fs::read_to_string(dir.join("attributions.json")).unwrap()).unwrap();
    let teo = Teo::load(&dir.join("teo.ckpt")).unwrap();
    let ex = Explainer::Teo(&teo);
    let loss = cfg.optimizer_train().loss;
    let mask = plant.signal_mask();
    let consensus = |stack: &monosem::Tensor| -> Vec<f64> {
        (0..stack.rows())
            .map(|r| stack.row(r)[..6].iter().sum::<f64>() / 6.0)
            .collect()
    };
    let (mut out_l, mut tgt_l, mut aucs) = (Vec::new(), Vec::new(), Vec::new());
    let mut targets = Vec::new();
    for sa in bundle.iter().filter(|s| s.split == "test") {
        let item = explanation_item(sa, "layer", cfg).unwrap();
        let kept = item.retained();
        if kept.is_empty() {
            continue;
        }
        let mut row = vec![0.0; SEQ_LEN];
        for (&p, &v) in item.positions.iter().zip(&item.target) {
            row[p] = v;
        }
        targets.extend(row);
        let out = ex.explain(&item).unwrap();
        let nb_out: Vec<Vec<f64>> = kept
            .iter()
            .map(|n| {
                ex.explain_stack(&n.stack, &item.positions, item.sample_id)
                    .unwrap()
            })
            .collect();
        let nb_tgt: Vec<Vec<f64>> = kept.iter().map(|n| consensus(&n.stack)).collect();
        out_l.push(total_loss(&out, &nb_out, &item, &loss, None).unwrap().total);
        tgt_l.push(
            total_loss(&item.target, &nb_tgt, &item, &loss, None)
                .unwrap()
                .total,
        );
        let truth: Vec<bool> = item.positions.iter().map(|&p| mask[p]).collect();
        if let Some(a) = auc(&item.target, &truth) {
            aucs.push(a);
        }
    }
    let cohort = generate_cohort(cfg.seed, cfg.n_samples, cfg.task, cfg.distribution).unwrap();
    let pca =
        pca_top8(&Tensor::matrix(targets.len() / SEQ_LEN, SEQ_LEN, targets).unwrap()).unwrap();
    let report =
        threshold_select(&pca, &position_tags(&cohort.samples[0]), cfg.pca_threshold).unwrap();
    let top = report.top().map(|t| t.code().to_string());
    (
        mean_std(&out_l).0,
        mean_std(&tgt_l).0,
        mean_std(&aucs).0,
        top,
    )
}

fn one_seed(seed: u64, root: &Path) -> SeedResult {
    let cfg = config(seed, root, Distribution::Iid);
    let dir = run_pipeline(cfg.clone()).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    let mean_auc: BTreeMap<String, f64> =
        serde_json::from_value(summary["mean_auc"].clone()).unwrap();
    let plant: Plant = serde_json::from_value(summary["plant"].clone()).unwrap();
    let top = |k: &str| summary["top_subgroup"][k].as_str().map(str::to_string);
    let (loss_output, loss_target, target_auc, target_top) = loss_probe(&dir, &cfg, &plant);
    SeedResult {
        mean_auc,
        top: top("teo"),
        top_sae: top("teo_sae"),
        primary: plant.primary.code().to_string(),
        loss_output,
        loss_target,
        target_auc,
        target_top,
    }
}

/// Mean AUC of the optimizer and of the worst classical method in one setting.
fn compare(results: &[SeedResult], setting: &str, optimizer: &str) -> (f64, String, f64) {
    let mut by_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in results {
        for (k, v) in &r.mean_auc {
            if let Some(m) = k.strip_prefix(&format!("{setting}/")) {
                by_method.entry(m).or_default().push(*v);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let opt = mean(&by_method.remove(optimizer).unwrap_or_default());
    let (worst, worst_auc) = by_method
        .iter()
        .map(|(m, v)| (m.to_string(), mean(v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    (opt, worst, worst_auc)
}

/// Criterion 11. Leaves the seed-1 run directory for the end-to-end check.
pub fn recovery(scratch: &Path, seed_one: &mut Option<(PathBuf, Duration)>) -> Verdict {
    let mut results = Vec::new();
    for seed in SEEDS {
        let root = scratch.join(format!("recovery_seed{seed}"));
        let t0 = Instant::now();
        let r = one_seed(seed, &root);
        let took = t0.elapsed();
        println!(
            "    seed {seed} ({took:.0?}): teo AUC {:.3}, worst classical {:.3}, consensus target AUC {:.3}; \
             literal loss of output {:.4} vs target {:.4}; top subgroup {:?}/{:?}, on targets {:?}, planted {}",
            r.mean_auc["layer/teo"],
            r.mean_auc.iter().filter(|(k, _)| k.starts_with("layer/") && *k != "layer/teo").map(|(_, v)| *v).fold(1.0, f64::min),
            r.target_auc,
            r.loss_output,
            r.loss_target,
            r.top,
            r.top_sae,
            r.target_top,
            r.primary
        );
        if seed == 1 {
            *seed_one = Some((root, took));
        }
        results.push(r);
    }
    let (opt, worst, worst_auc) = compare(&results, "layer", "teo");
    let (opt_sae, worst_sae, worst_sae_auc) = compare(&results, "sae", "teo");
    let matches = results
        .iter()
        .filter(|r| r.top.as_deref() == Some(r.primary.as_str()))
        .count();
    let matches_sae = results
        .iter()
        .filter(|r| r.top_sae.as_deref() == Some(r.primary.as_str()))
        .count();
    let target_matches = results
        .iter()
        .filter(|r| r.target_top.as_deref() == Some(r.primary.as_str()))
        .count();
    let costlier = results
        .iter()
        .filter(|r| r.loss_target > r.loss_output)
        .count();
    let recovery_ok = opt > worst_auc;
    let subgroup_ok = matches >= 4;
    let detail = format!(
        "[{}] teo AUC {opt:.3} vs worst classical {worst} {worst_auc:.3} (sae setting: {opt_sae:.3} vs {worst_sae} {worst_sae_auc:.3}); \
         [{}] PCA top-1 = planted in {matches}/5 seeds (sae setting {matches_sae}/5, consensus targets {target_matches}/5); \
         consensus target costs more than the optimizer output under the literal loss in {costlier}/5 seeds",
        if recovery_ok { "pass" } else { "FAIL" },
        if subgroup_ok { "pass" } else { "FAIL" },
    );
    Verdict {
        pass: recovery_ok && subgroup_ok,
        detail,
        // known only with evidence: the AUC miss counts when the literal objective prefers the
        // optimizer output over its own target; the subgroup miss counts when the consensus of the
        // classical maps (the target) misses the plant as well, i.e. upstream attributions miss it
        known: (recovery_ok || costlier >= 4) && (subgroup_ok || target_matches < 4),
    }
}

const COMMON: [&str; 15] = [
    "config.resolved.txt",
    "cohort.csv",
    "token_attributions.csv",
    "records.csv",
    "metrics.csv",
    "stats.csv",
    "summary.json",
    "embedding_teo.csv",
    "embedding_teo_sae.csv",
    "pca_teo.csv",
    "pca_teo_sae.csv",
    "subgroups.csv",
    "highlights_class0.csv",
    "highlights_class1.csv",
    "explanations.json",
];

const TRAINED: [&str; 7] = [
    "classifier.ckpt",
    "sae.ckpt",
    "teo.ckpt",
    "teo_sae.ckpt",
    "sae_curve.csv",
    "teo_curve.csv",
    "teo_sae_curve.csv",
];

fn missing(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut want: Vec<PathBuf> = vec![root.join("manifest.json")];
    for d in ["iid", "ood"] {
        want.extend(COMMON.iter().map(|f| root.join(d).join(f)));
    }
    want.extend(TRAINED.iter().map(|f| root.join("iid").join(f)));
    for p in want {
        if !p.is_file() {
            out.push(p.strip_prefix(root).unwrap().display().to_string());
        }
    }
    for d in ["iid", "ood"] {
        let svgs = fs::read_dir(root.join(d).join("heatmaps"))
            .map(|it| {
                it.filter_map(|e| e.ok())
                    .filter(|e| e.path().extension().is_some_and(|x| x == "svg"))
                    .count()
            })
            .unwrap_or(0);
        if svgs == 0 {
            out.push(format!("{d}/heatmaps/*.svg"));
        }
    }
    out
}

fn hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().display().to_string(),
                    file_sha256(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn iid_then_ood(root: &Path) -> (Duration, Duration) {
    let t0 = Instant::now();
    run_pipeline(config(1, root, Distribution::Iid)).unwrap();
    let iid = t0.elapsed();
    let t1 = Instant::now();
    run_pipeline(config(1, root, Distribution::Ood)).unwrap();
    (iid, t1.elapsed())
}

/// Criterion 12. Reuses the seed-1 IID run of criterion 11 when there is one.
pub fn end_to_end(scratch: &Path, seed_one: Option<(PathBuf, Duration)>) -> Verdict {
    let (root, iid, ood) = match seed_one {
        Some((root, iid)) => {
            let t = Instant::now();
            run_pipeline(config(1, &root, Distribution::Ood)).unwrap();
            (root, iid, t.elapsed())
        }
        None => {
            let root = scratch.join("end_to_end");
            let (iid, ood) = iid_then_ood(&root);
            (root, iid, ood)
        }
    };
    let total = iid + ood;
    let absent = missing(&root);
    let first = hashes(&root);
    fs::remove_dir_all(&root).unwrap();
    iid_then_ood(&root);
    let second = hashes(&root);
    let differing: Vec<&String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let fast = total < Duration::from_secs(300);
    let detail = format!(
        "iid {iid:.1?} + ood {ood:.1?} = {total:.1?} (limit 5 min); {} files, {} missing {:?}; rerun differs in {} file(s) {:?}",
        first.len(),
        absent.len(),
        absent,
        differing.len(),
        differing
    );
    if fast && absent.is_empty() && differing.is_empty() {
        Verdict::pass(detail)
    } else {
        Verdict::fail(detail)
    }
}
