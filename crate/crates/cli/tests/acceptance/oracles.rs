use std::time::{Duration, Instant};

use monosem::attribution::*;
use monosem::autodiff::{jacobian, Tape, Tensor, Var};
use monosem::cohort::{generate_cohort, ClassSet, Distribution, PAD};
use monosem::embedding::{pca, pca_top8, umap_fit, UmapConfig};
use monosem::metrics::{bh_fdr, gini, paired_t_test, wilcoxon_signed_rank};
use monosem::optimizer::deo::{draw_noise, simple_loss_value};
use monosem::optimizer::loss::{total_loss, LossConfig, LossWeights, NeighborStack};
use monosem::optimizer::{train_teo, ExplanationItem, Schedule, Teo, TeoConfig, TrainConfig};
use monosem::propagation::{
    chained_token_attribution, encoder_to_input, SurrogateEncoder, TokenEncoder,
};
use monosem::rng::{self, Rng};
use monosem::sae::{
    synthetic_activations, train_sae, Sae, SaeConfig, SaeTrainConfig, SaeVariant, StepGrad,
};
use monosem::surrogate::{Classifier, ClassifierConfig};
use monosem::Result;

use crate::{ensure, within, Check};

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Largest elementwise gap; infinite on a length mismatch or a NaN.
fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(
            0.0,
            |m, d| if d.is_nan() { f64::INFINITY } else { m.max(d) },
        )
}

// ---------------------------------------------------------------- autodiff

type OpFn = for<'t> fn(&'t Tape, Var<'t>) -> Result<Var<'t>>;

fn random(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    // stay off the kinks at 0
    let data = (0..n)
        .map(|_| loop {
            let v = lo + (hi - lo) * rng::uniform(r);
            if v.abs() > 1e-3 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error of the tape gradient of `Σ w ⊙ op(x)` against central differences.
fn grad_error(op: OpFn, x: &Tensor, seed: u64) -> f64 {
    let out_shape = {
        let tape = Tape::new();
        op(&tape, tape.constant(x.clone())).unwrap().shape()
    };
    let mut r = rng::rng(seed ^ 0xabcd);
    let w = random(&mut r, &out_shape, -1.0, 1.0);
    let value = |x: &Tensor| -> f64 {
        let tape = Tape::new();
        let y = op(&tape, tape.constant(x.clone())).unwrap();
        y.value()
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = op(&tape, xv).unwrap();
    let wv = tape.constant(w.clone().reshaped(y.shape()).unwrap());
    tape.backward(y.mul(wv).unwrap().sum().unwrap()).unwrap();
    let g = tape.grad(xv).unwrap();
    let h = 1e-5;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (value(&xp) - value(&xm)) / (2.0 * h);
        num += (fd - g.data()[i]).powi(2);
        da += fd * fd;
        db += g.data()[i].powi(2);
    }
    num.sqrt() / da.sqrt().max(db.sqrt()).max(1e-12)
}

fn ops() -> Vec<(&'static str, OpFn, Vec<usize>, (f64, f64))> {
    let any = (-2.0, 2.0);
    let positive = (0.5, 2.5);
    vec![
        (
            "matmul_left",
            |t, x| {
                let b = t.constant(
                    Tensor::from_rows(&[vec![0.5, -1.0], vec![1.5, 0.25], vec![-0.75, 2.0]])
                        .unwrap(),
                );
                x.matmul(b)
            },
            vec![4, 3],
            any,
        ),
        (
            "matmul_right",
            |t, x| {
                let a = t.constant(
                    Tensor::from_rows(&[vec![0.5, -1.0, 0.3], vec![1.5, 0.25, -0.6]]).unwrap(),
                );
                a.matmul(x)
            },
            vec![3, 2],
            any,
        ),
        (
            "matmul_self",
            |_, x| x.matmul(x.transpose()?),
            vec![3, 4],
            any,
        ),
        ("add", |_, x| x.add(x.mul(x)?), vec![3, 4], any),
        (
            "add_row",
            |_, x| x.add(x.col_sum()?.exp()?),
            vec![3, 4],
            any,
        ),
        ("add_col", |_, x| x.add(x.row_sum()?), vec![3, 4], any),
        ("sub_scalar", |_, x| x.sub(x.sum()?), vec![3, 4], any),
        ("mul", |_, x| x.mul(x.exp()?), vec![3, 4], any),
        ("mul_row", |_, x| x.mul(x.col_sum()?), vec![3, 4], any),
        (
            "div",
            |_, x| x.div(x.square()?.shift(1.0)?),
            vec![3, 4],
            any,
        ),
        (
            "div_col",
            |_, x| x.div(x.square()?.row_sum()?.shift(0.5)?),
            vec![3, 4],
            any,
        ),
        ("scale", |_, x| x.scale(-2.5), vec![5], any),
        ("shift", |_, x| x.shift(0.7)?.square(), vec![5], any),
        ("relu", |_, x| x.relu(), vec![3, 4], any),
        ("abs", |_, x| x.abs(), vec![3, 4], any),
        ("softmax", |_, x| x.softmax(), vec![3, 4], any),
        ("layernorm", |_, x| x.layernorm(), vec![3, 5], any),
        (
            "gather",
            |_, x| x.gather(vec![Some(3), None, Some(0), Some(3), Some(5)], vec![5]),
            vec![6],
            any,
        ),
        (
            "gather_rows",
            |_, x| x.gather_rows(&[Some(1), None, Some(1), Some(0)]),
            vec![2, 3],
            any,
        ),
        ("sum", |_, x| x.sum()?.square(), vec![3, 4], any),
        ("mean", |_, x| x.mean()?.square(), vec![3, 4], any),
        ("row_sum", |_, x| x.row_sum(), vec![3, 4], any),
        ("col_sum", |_, x| x.col_sum(), vec![3, 4], any),
        ("exp", |_, x| x.exp(), vec![3, 4], any),
        ("log", |_, x| x.log(), vec![3, 4], positive),
        ("sqrt", |_, x| x.sqrt(), vec![3, 4], positive),
        ("power_int", |_, x| x.powf(3.0), vec![3, 4], any),
        ("power_frac", |_, x| x.powf(-1.5), vec![3, 4], positive),
        ("transpose", |_, x| x.transpose(), vec![3, 4], any),
        ("reshape", |_, x| x.reshape(vec![2, 6]), vec![3, 4], any),
        ("slice_cols", |_, x| x.slice_cols(1, 3), vec![3, 4], any),
        (
            "concat_cols",
            |_, x| Var::concat_cols(&[x, x.exp()?, x.slice_cols(0, 1)?]),
            vec![3, 4],
            any,
        ),
        (
            "concat_rows",
            |_, x| Var::concat_rows(&[x.square()?, x]),
            vec![3, 4],
            any,
        ),
    ]
}

pub fn autodiff() -> Check {
    let t0 = Instant::now();
    let cases = ops();
    let mut worst = (0.0f64, "");
    for (name, op, shape, (lo, hi)) in &cases {
        for seed in 0..100u64 {
            let mut r = rng::rng(seed);
            let e = grad_error(*op, &random(&mut r, shape, *lo, *hi), seed);
            if e > worst.0 {
                worst = (e, name);
            }
        }
    }
    ensure!(worst.0 < 1e-6, "{}: relative error {:e}", worst.1, worst.0);
    let took = within(Duration::from_secs(30), t0.elapsed(), "gradient checks")?;
    Ok(format!(
        "{} ops x 100 seeds, worst rel err {:.1e} ({}), {took}",
        cases.len(),
        worst.0,
        worst.1
    ))
}

// ------------------------------------------------------------- attribution

struct Linear {
    w: Vec<f64>,
    a: Vec<f64>,
}

impl LayerModel for Linear {
    fn activation(&self) -> &[f64] {
        &self.a
    }
    fn outputs<'t>(&self, tape: &'t Tape, a: Var<'t>) -> Result<Var<'t>> {
        a.matmul(tape.constant(Tensor::matrix(self.w.len(), 1, self.w.clone())?))
    }
    fn activation_on_input_path(&self, alpha: f64) -> Result<Vec<f64>> {
        Ok(self.a.iter().map(|x| alpha * x).collect())
    }
}

/// softmax(W2 · exp(0.3 · W1 a)).
struct TwoLayer {
    w1: Tensor,
    w2: Tensor,
    a: Vec<f64>,
}

impl TwoLayer {
    fn new(seed: u64, d: usize) -> Self {
        let mut r = rng::rng(seed);
        let w1 = Tensor::matrix(d, 6, rng::normals(&mut r, d * 6))
            .unwrap()
            .map(|x| x / (d as f64).sqrt());
        let w2 = Tensor::matrix(6, 3, rng::normals(&mut r, 18)).unwrap();
        let a = rng::normals(&mut r, d);
        Self { w1, w2, a }
    }
}

impl LayerModel for TwoLayer {
    fn activation(&self) -> &[f64] {
        &self.a
    }
    fn outputs<'t>(&self, tape: &'t Tape, a: Var<'t>) -> Result<Var<'t>> {
        let h = a
            .matmul(tape.constant(self.w1.clone()))?
            .scale(0.3)?
            .exp()?;
        h.matmul(tape.constant(self.w2.clone()))?.softmax()
    }
    fn activation_on_input_path(&self, alpha: f64) -> Result<Vec<f64>> {
        Ok(self.a.iter().map(|x| alpha * x).collect())
    }
}

pub fn attribution_axioms() -> Check {
    let mut shapley_gap = 0.0f64;
    for seed in 0..5 {
        let m = TwoLayer::new(seed, 8);
        let phi = shapley_exact(&m, &Baseline::Scalar(-0.3), 2).unwrap();
        let gap = output_at(&m, &m.a, 2).unwrap() - output_at(&m, &[-0.3; 8], 2).unwrap();
        shapley_gap = shapley_gap.max((phi.values.iter().sum::<f64>() - gap).abs());
    }
    ensure!(shapley_gap < 1e-9, "Shapley efficiency gap {shapley_gap:e}");

    let mut ig_gap = 0.0f64;
    for seed in [7, 8, 9] {
        let m = TwoLayer::new(seed, 6);
        let gap = output_at(&m, &m.a, 0).unwrap() - output_at(&m, &[0.0; 6], 0).unwrap();
        let phi = integrated_gradients(&m, &Baseline::Zero, 256, 0).unwrap();
        ig_gap = ig_gap.max((phi.values.iter().sum::<f64>() - gap).abs());
    }
    ensure!(
        ig_gap < 1e-3,
        "integrated gradients completeness gap {ig_gap:e}"
    );

    let mut linear_gap = 0.0f64;
    for seed in 0..20 {
        let mut r = rng::rng(seed);
        let m = Linear {
            w: rng::normals(&mut r, 7),
            a: rng::normals(&mut r, 7),
        };
        let want: Vec<f64> = m.w.iter().zip(&m.a).map(|(w, a)| w * a).collect();
        let mut got = vec![
            grad_times_act(&m, 0).unwrap().values,
            shapley_exact(&m, &Baseline::Zero, 0).unwrap().values,
            gradient_shap(
                &m,
                &Baseline::Zero,
                Some(0.0),
                8,
                AlphaMode::Uniform,
                seed,
                0,
            )
            .unwrap()
            .values,
            feature_ablation(&m, &Baseline::Zero, None, 0)
                .unwrap()
                .values
                .iter()
                .map(|v| -v)
                .collect(),
        ];
        for s in [1, 3, 17, 32] {
            got.push(
                integrated_gradients(&m, &Baseline::Zero, s, 0)
                    .unwrap()
                    .values,
            );
            got.push(conductance(&m, s, 0).unwrap().values);
        }
        for g in &got {
            linear_gap = linear_gap.max(max_diff(g, &want));
        }
    }
    ensure!(
        linear_gap < 1e-12,
        "linear model: methods differ from w·a by {linear_gap:e}"
    );
    Ok(format!(
        "Shapley gap {shapley_gap:.1e} (<1e-9), IG@256 gap {ig_gap:.1e} (<1e-3), linear gap {linear_gap:.1e} (<1e-12)"
    ))
}

// -------------------------------------------------------------------- gini

pub fn gini_values() -> Check {
    let uniform = gini(&[0.3; 7]).unwrap();
    ensure!(uniform.abs() < 1e-12, "uniform gini {uniform}");
    let one_hot = gini(&[0.0, 0.0, 0.0, 1.0]).unwrap();
    ensure!((one_hot - 0.75).abs() < 1e-12, "one-hot gini {one_hot}");
    let mut r = rng::rng(3);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let v = rng::normals(&mut r, 2 + i % 60);
        let c = (rng::normal(&mut r) * 3.0).exp();
        let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
        worst = worst.max((gini(&v).unwrap() - gini(&scaled).unwrap()).abs());
    }
    ensure!(worst < 1e-12, "scale invariance broken by {worst:e}");
    Ok(format!(
        "uniform {uniform:.1e}, one-hot {one_hot}, 1000 rescalings within {worst:.1e}"
    ))
}

// --------------------------------------------------------------------- sae

pub fn sae_contracts() -> Check {
    let t0 = Instant::now();
    for seed in 0..200u64 {
        let k = 1 + (seed as usize % 19);
        let mut c = SaeConfig::new(SaeVariant::TopK, 8, seed);
        c.expansion = 4;
        c.k = k;
        let s = Sae::new(c).unwrap();
        let mut r = rng::rng(seed);
        let a = s
            .encode_batch(&Tensor::matrix(4, 8, rng::normals(&mut r, 32)).unwrap())
            .unwrap();
        for i in 0..4 {
            let active = a.row(i).iter().filter(|&&v| v != 0.0).count();
            ensure!(active <= k, "TopK seed {seed}: {active} active with K={k}");
        }
    }
    for seed in 0..200u64 {
        let mut c = SaeConfig::new(SaeVariant::JumpReLU, 8, seed);
        c.expansion = 4;
        let mut s = Sae::new(c).unwrap();
        let mut r = rng::rng(seed);
        let theta: Vec<f64> = (0..32).map(|_| rng::normal(&mut r).abs()).collect();
        s.set("theta", Tensor::vector(theta.clone())).unwrap();
        let a = s
            .encode_batch(&Tensor::matrix(8, 8, rng::normals(&mut r, 64)).unwrap())
            .unwrap();
        for i in 0..8 {
            for (v, t) in a.row(i).iter().zip(&theta) {
                ensure!(*v == 0.0 || v > t, "JumpReLU seed {seed}: {v} in (0, {t}]");
            }
        }
    }
    let small = synthetic_activations(9, 200, 8, 16, 2);
    for v in SaeVariant::ALL {
        for steps in 1..=12 {
            let cfg = SaeTrainConfig {
                variant: v,
                expansion: 4,
                steps,
                k: 4,
                batch_size: 16,
                seed: 2,
                ..SaeTrainConfig::default()
            };
            let (s, _) = train_sae(&small, &cfg).unwrap();
            let off = s
                .decoder_norms()
                .iter()
                .map(|n| (n - 1.0).abs())
                .fold(0.0, f64::max);
            ensure!(
                off < 1e-9,
                "{} after {steps} steps: decoder norm off by {off:e}",
                v.name()
            );
        }
    }
    let data = synthetic_activations(11, 512, 32, 64, 3);
    let cfg = SaeTrainConfig {
        seed: 11,
        ..SaeTrainConfig::default()
    };
    ensure!(
        cfg.steps == 500 && cfg.expansion == 32,
        "defaults drifted: {} steps, expansion {}",
        cfg.steps,
        cfg.expansion
    );
    let (_, curves) = train_sae(&data, &cfg).unwrap();
    let (first, last) = (curves.mse[0], *curves.mse.last().unwrap());
    ensure!(
        last < 0.5 * first,
        "MSE {first:.4} -> {last:.4}, not halved"
    );
    let took = within(Duration::from_secs(120), t0.elapsed(), "SAE checks")?;
    Ok(format!("TopK/JumpReLU contracts over 200 seeds, unit decoder rows after 1..12 steps, MSE {first:.4} -> {last:.4}, {took}"))
}

// ------------------------------------------------------------- propagation

/// x = Σ_r emb_r M; every third sequence position is a pad.
struct LinearStack {
    emb: Tensor,
    m: Tensor,
    positions: Vec<usize>,
    seq_len: usize,
}

impl LinearStack {
    fn new(seed: u64, rows: usize, e: usize, d: usize) -> Self {
        let mut r = rng::rng(seed);
        let positions: Vec<usize> = (0..).filter(|p| p % 3 != 2).take(rows).collect();
        Self {
            emb: Tensor::matrix(rows, e, rng::normals(&mut r, rows * e)).unwrap(),
            m: Tensor::matrix(e, d, rng::normals(&mut r, e * d)).unwrap(),
            seq_len: positions.last().unwrap() + 3,
            positions,
        }
    }
}

impl TokenEncoder for LinearStack {
    fn embeddings(&self) -> &Tensor {
        &self.emb
    }
    fn positions(&self) -> &[usize] {
        &self.positions
    }
    fn seq_len(&self) -> usize {
        self.seq_len
    }
    fn encode<'t>(&self, tape: &'t Tape, emb: Var<'t>) -> Result<Var<'t>> {
        let ones = tape.constant(Tensor::full(vec![1, emb.shape()[0]], 1.0));
        ones.matmul(emb)?.matmul(tape.constant(self.m.clone()))
    }
}

/// Standard SAE with every unit active on these inputs, hence affine.
fn linear_sae(seed: u64, d: usize, expansion: usize) -> Sae {
    let mut c = SaeConfig::new(SaeVariant::Standard, d, seed);
    c.expansion = expansion;
    let mut s = Sae::new(c).unwrap();
    s.set("b_enc", Tensor::full(vec![d * expansion], 1e3))
        .unwrap();
    s
}

/// Token scores from full Jacobians: seedᵀ (J_sae) J_model, summed per token.
fn explicit(enc: &dyn TokenEncoder, sae: Option<&Sae>, seed: &[f64]) -> Vec<f64> {
    let j_model = jacobian(enc.embeddings(), |t, x| enc.encode(t, x)).unwrap();
    let e = enc.embeddings().cols();
    let d = j_model.rows();
    let left: Vec<f64> = match sae {
        None => seed.to_vec(),
        Some(s) => {
            let tape = Tape::new();
            let x = enc
                .encode(&tape, tape.constant(enc.embeddings().clone()))
                .unwrap()
                .value()
                .data()
                .to_vec();
            let x = Tensor::matrix(1, d, x).unwrap();
            let j_sae = jacobian(&x, |t, v| {
                s.encode_on_tape(&s.bind(t, false), v, StepGrad::Frozen)
            })
            .unwrap();
            (0..d)
                .map(|j| (0..seed.len()).map(|i| seed[i] * j_sae.get2(i, j)).sum())
                .collect()
        }
    };
    let mut out = vec![0.0; enc.seq_len()];
    for (r, &pos) in enc.positions().iter().enumerate() {
        out[pos] = (0..e)
            .map(|k| {
                (0..d)
                    .map(|j| left[j] * j_model.get2(j, r * e + k))
                    .sum::<f64>()
            })
            .sum();
    }
    out
}

pub fn propagation() -> Check {
    let mut chain_gap = 0.0f64;
    let mut pads_ok = true;
    for seed in 0..10 {
        let enc = LinearStack::new(seed, 6, 4, 5);
        let mut r = rng::rng(seed + 50);
        let phi = rng::normals(&mut r, 5);
        let got = encoder_to_input(&enc, &phi).unwrap();
        chain_gap = chain_gap.max(max_diff(&got, &explicit(&enc, None, &phi)));
        let sae = linear_sae(seed, 5, 3);
        let psi = rng::normals(&mut r, 15);
        let chained = chained_token_attribution(&enc, &sae, &psi).unwrap();
        chain_gap = chain_gap.max(max_diff(&chained, &explicit(&enc, Some(&sae), &psi)));
        for p in (0..enc.seq_len).filter(|p| !enc.positions.contains(p)) {
            pads_ok &= got[p] == 0.0 && chained[p] == 0.0;
        }
    }
    ensure!(
        chain_gap < 1e-8,
        "chain differs from explicit Jacobians by {chain_gap:e}"
    );

    let enc = LinearStack::new(1, 7, 3, 4);
    let mut c = SaeConfig::new(SaeVariant::JumpReLU, 4, 6);
    c.expansion = 2;
    let sae = Sae::new(c).unwrap();
    let mut r = rng::rng(4);
    let mut lin_gap = 0.0f64;
    for _ in 0..50 {
        let (p1, p2) = (rng::normals(&mut r, 8), rng::normals(&mut r, 8));
        let (a, b) = (rng::normal(&mut r), rng::normal(&mut r));
        let mix: Vec<f64> = p1.iter().zip(&p2).map(|(x, y)| a * x + b * y).collect();
        let f = |p: &[f64]| chained_token_attribution(&enc, &sae, p).unwrap();
        let (f1, f2) = (f(&p1), f(&p2));
        let combined: Vec<f64> = f1.iter().zip(&f2).map(|(x, y)| a * x + b * y).collect();
        lin_gap = lin_gap.max(max_diff(&f(&mix), &combined));
    }
    ensure!(lin_gap < 1e-10, "linearity in psi broken by {lin_gap:e}");

    let cohort = generate_cohort(3, 20, ClassSet::Binary, Distribution::Iid).unwrap();
    let mut model = Classifier::new(ClassifierConfig::new(2, 7)).unwrap();
    let n = model.params().len();
    let mut r = rng::rng(1);
    model
        .set_param(
            n - 2,
            Tensor::matrix(32, 2, rng::normals(&mut r, 64)).unwrap(),
        )
        .unwrap();
    let mut pad_count = 0;
    for s in cohort.samples.iter().take(5) {
        let enc = SurrogateEncoder::new(&model, s);
        let got = encoder_to_input(&enc, &rng::normals(&mut r, 32)).unwrap();
        for (i, &t) in s.tokens.iter().enumerate() {
            if t == PAD {
                pad_count += 1;
                pads_ok &= got[i] == 0.0;
            }
        }
    }
    ensure!(pads_ok, "a pad position received a nonzero score");
    ensure!(pad_count > 0, "no pads exercised");
    Ok(format!("chain vs Jacobian {chain_gap:.1e} (<1e-8), linearity {lin_gap:.1e} (<1e-10), {pad_count} classifier pads exactly 0"))
}

// --------------------------------------------------------------- diffusion

pub fn diffusion() -> Check {
    let s = Schedule::linear(100, 1e-4, 2e-2).unwrap();
    for t in 1..=100 {
        ensure!(
            s.alpha_bar(t) < s.alpha_bar(t - 1),
            "alpha_bar not decreasing at t={t}"
        );
    }
    let x0 = [1.5, -0.5];
    let n = 10_000;
    let mut worst_var = 0.0f64;
    for t in [1, 10, 50, 100] {
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|i| s.q_sample(&x0, t, 1000 + i as u64).unwrap())
            .collect();
        let ab = s.alpha_bar(t);
        for (j, x) in x0.iter().enumerate() {
            let mean = draws.iter().map(|d| d[j]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sigma = ((1.0 - ab) / n as f64).sqrt();
            ensure!(
                (mean - ab.sqrt() * x).abs() < 3.0 * sigma + 1e-12,
                "t={t}: mean {mean} vs {}",
                ab.sqrt() * x
            );
            let rel = (var / (1.0 - ab) - 1.0).abs();
            ensure!(rel < 0.05, "t={t}: variance {var} vs {}", 1.0 - ab);
            worst_var = worst_var.max(rel);
        }
    }
    let mut r = rng::rng(4);
    let x0s: Vec<Tensor> = (0..64)
        .map(|_| Tensor::matrix(20, 7, rng::normals(&mut r, 140)).unwrap())
        .collect();
    let draws = draw_noise(&s, &x0s, 11).unwrap();
    let perfect: Vec<Tensor> = draws.iter().map(|d| d.eps.clone()).collect();
    let loss = simple_loss_value(&draws, &perfect).unwrap();
    ensure!(loss == 0.0, "perfect denoiser loss {loss}");
    Ok(format!("alpha_bar strictly decreasing, moments within 3σ / {:.1}% over 10^4 draws, perfect-denoiser loss 0", 100.0 * worst_var))
}

// ------------------------------------------------------------- transformer

type M = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> M {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mm(a: &M, b: &M) -> M {
    a.iter()
        .map(|r| {
            (0..b[0].len())
                .map(|j| r.iter().zip(b).map(|(x, row)| x * row[j]).sum())
                .collect()
        })
        .collect()
}

fn plus(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn softmax_rows(a: &M) -> M {
    a.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        })
        .collect()
}

fn attention(teo: &Teo, name: &str, q_in: &M, kv_in: &M, residual: bool) -> M {
    let w = |s: &str| mat(teo.params().by_name(&format!("{name}.{s}")).unwrap());
    let (q, k, v) = (
        mm(q_in, &w("w_q")),
        mm(kv_in, &w("w_k")),
        mm(kv_in, &w("w_v")),
    );
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    let kt: M = (0..k[0].len())
        .map(|j| k.iter().map(|r| r[j]).collect())
        .collect();
    let s: M = mm(&q, &kt)
        .iter()
        .map(|r| r.iter().map(|x| x * scale).collect())
        .collect();
    let out = mm(&softmax_rows(&s), &v);
    if residual {
        plus(q_in, &out)
    } else {
        out
    }
}

fn hand_trace(teo: &Teo, stack: &M, target: &[f64], residual: bool) -> Vec<f64> {
    let p = |s: &str| mat(teo.params().by_name(s).unwrap());
    let pos = p("pos");
    let mut h = plus(&mm(stack, &p("w_in")), &pos);
    for l in 0..teo.config.enc_layers {
        h = attention(teo, &format!("enc{l}"), &h, &h, residual);
    }
    let tgt: M = target.iter().map(|&v| vec![v]).collect();
    let mut y = plus(&mm(&tgt, &p("w_dec")), &pos);
    for l in 0..teo.config.dec_layers {
        y = attention(teo, &format!("dec_self{l}"), &y, &y, residual);
    }
    for l in 0..teo.config.dec_layers {
        y = attention(teo, &format!("dec_cross{l}"), &y, &h, residual);
    }
    mm(&y, &p("w_out")).into_iter().map(|r| r[0]).collect()
}

/// Items whose six method channels share a pattern, with perturbed neighbors.
fn synthetic_items(seed: u64, count: usize, n: usize, neighbors: usize) -> Vec<ExplanationItem> {
    let mut r = rng::rng(seed);
    (0..count)
        .map(|id| {
            let base: Vec<f64> = (0..n).map(|_| rng::uniform(&mut r).powi(3)).collect();
            let stack_from = |base: &[f64], r: &mut Rng| {
                let mut data = Vec::with_capacity(n * 7);
                for (i, b) in base.iter().enumerate() {
                    for _ in 0..6 {
                        data.push((b + 0.1 * rng::normal(r)).clamp(0.0, 1.0));
                    }
                    data.push(i as f64 / n as f64);
                }
                Tensor::matrix(n, 7, data).unwrap()
            };
            let stack = stack_from(&base, &mut r);
            let target: Vec<f64> = (0..n)
                .map(|i| stack.row(i)[..6].iter().sum::<f64>() / 6.0)
                .collect();
            let x = rng::normals(&mut r, 32);
            let fx = vec![0.85, 0.15];
            let nbs = (0..neighbors)
                .map(|_| {
                    let dx = rng::normals(&mut r, 32);
                    let shift = 0.02 * rng::normal(&mut r);
                    NeighborStack {
                        x: x.iter().zip(&dx).map(|(a, d)| a + 0.05 * d).collect(),
                        fx: vec![0.85 + shift, 0.15 - shift],
                        stack: stack_from(&base, &mut r),
                    }
                })
                .collect();
            ExplanationItem {
                sample_id: id,
                stack,
                positions: (0..n).collect(),
                target,
                x,
                fx,
                neighbors: nbs,
            }
        })
        .collect()
}

pub fn transformer() -> Check {
    let t0 = Instant::now();
    let mut trace_gap = 0.0f64;
    for residual in [false, true] {
        for seed in 0..5 {
            let cfg = TeoConfig {
                d_model: 8,
                n_heads: 1,
                enc_layers: 1,
                dec_layers: 1,
                seq_len: 4,
                residual,
                seed,
                ..TeoConfig::default()
            };
            let teo = Teo::new(cfg).unwrap();
            let mut r = rng::rng(seed + 100);
            let stack = Tensor::matrix(4, 7, rng::normals(&mut r, 28)).unwrap();
            let target = rng::normals(&mut r, 4);
            let got = teo.forward(&stack, Some(&target)).unwrap();
            trace_gap = trace_gap.max(max_diff(
                &got,
                &hand_trace(&teo, &mat(&stack), &target, residual),
            ));
        }
    }
    ensure!(
        trace_gap < 1e-12,
        "forward differs from the hand trace by {trace_gap:e}"
    );

    let mut sum_gap = 0.0f64;
    let items = synthetic_items(2, 4, 12, 4);
    let mut r = rng::rng(3);
    let cfg = LossConfig {
        seq_len: 12,
        weights: LossWeights {
            umap: 2.0,
            ..LossWeights::default()
        },
        ..LossConfig::default()
    };
    for item in &items {
        let out: Vec<f64> = (0..12).map(|_| rng::uniform(&mut r)).collect();
        let nbs: Vec<Vec<f64>> = (0..4)
            .map(|_| out.iter().map(|v| v + 0.01 * rng::normal(&mut r)).collect())
            .collect();
        let c = total_loss(&out, &nbs, item, &cfg, Some(&[(0.1, 0.3), (0.5, 0.5)])).unwrap();
        sum_gap = sum_gap.max(
            (c.ris_term + c.ros_term + c.sparse_term + c.sim_term + c.umap_term - c.total).abs(),
        );
    }
    ensure!(
        sum_gap < 1e-12,
        "loss components miss the total by {sum_gap:e}"
    );

    let cfg = TrainConfig {
        batch_size: 16,
        seed: 4,
        ..TrainConfig::default()
    };
    let w = cfg.loss.weights;
    ensure!(
        cfg.lr == 2e-4
            && cfg.steps == 200
            && (w.ris, w.ros, w.sparse, w.sim) == (0.1, 0.3, 0.1, 0.5),
        "training defaults drifted: lr {}, steps {}, weights {w:?}",
        cfg.lr,
        cfg.steps
    );
    let items = synthetic_items(21, 16, 46, 4);
    let mut teo = Teo::new(TeoConfig {
        seed: 4,
        ..TeoConfig::default()
    })
    .unwrap();
    let curve = train_teo(&mut teo, &items, &cfg, 0.0).unwrap();
    for row in &curve.rows {
        sum_gap = sum_gap.max(
            (row.ris_term + row.ros_term + row.sparse_term + row.sim_term + row.umap_term
                - row.total)
                .abs(),
        );
    }
    ensure!(
        sum_gap < 1e-12,
        "training curve components miss the total by {sum_gap:e}"
    );
    let (first, last) = (curve.rows[0].total, curve.rows.last().unwrap().total);
    ensure!(
        last <= 0.5 * first,
        "loss {first:.4} -> {last:.4}, reduced by only {:.1}%",
        100.0 * (1.0 - last / first)
    );
    let took = within(Duration::from_secs(180), t0.elapsed(), "transformer checks")?;
    Ok(format!(
        "hand trace {trace_gap:.1e}, component sum {sum_gap:.1e}, loss {first:.4} -> {last:.4} (-{:.1}%) in 200 steps, {took}",
        100.0 * (1.0 - last / first)
    ))
}

// -------------------------------------------------------------------- umap

fn line_points(seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut r = rng::rng(seed);
    (0..n).map(|_| vec![rng::uniform(&mut r)]).collect()
}

fn umap_config(lambda5: f64, seed: u64) -> UmapConfig {
    UmapConfig {
        n_neighbors: 8,
        epochs: 150,
        seed,
        lambda5,
        ..Default::default()
    }
}

pub fn umap_constraint() -> Check {
    for seed in 0..4 {
        let pts = line_points(seed, 40);
        let res: Vec<f64> = [0.0, 1.0, 10.0, 100.0]
            .iter()
            .map(|&l| umap_fit(&pts, &umap_config(l, seed)).unwrap().residual)
            .collect();
        ensure!(
            res.windows(2).all(|w| w[1] <= w[0]),
            "seed {seed}: residuals {res:?}"
        );
    }
    let n = 40;
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let e = umap_fit(&line_points(10 + seed, n), &umap_config(1e4, seed)).unwrap();
        worst = worst.max(e.residual);
    }
    ensure!(worst < 1e-3 * n as f64, "residual {worst} at lambda 1e4");
    for (seed, l) in [(0, 0.0), (1, 10.0), (2, 1e4)] {
        let cfg = umap_config(l, seed);
        let e = umap_fit(&line_points(seed, 30), &cfg).unwrap();
        ensure!(
            e.variance >= cfg.var_floor,
            "variance {} below floor {}",
            e.variance,
            cfg.var_floor
        );
    }
    Ok(format!("residual non-increasing over {{0,1,10,100}} on 4 seeds, {worst:.1e} < {:.0e} at 1e4, variance floor held", 1e-3 * n as f64))
}

// --------------------------------------------------------------------- pca

fn random_matrix(seed: u64, m: usize, t: usize) -> Tensor {
    let mut r = rng::rng(seed);
    Tensor::matrix(m, t, rng::normals(&mut r, m * t)).unwrap()
}

pub fn pca_checks() -> Check {
    let mut ortho = 0.0f64;
    for seed in 0..5 {
        let p = pca_top8(&random_matrix(seed, 20, 30)).unwrap();
        for (i, a) in p.components.iter().enumerate() {
            for (j, b) in p.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                ortho = ortho.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
    }
    ensure!(ortho < 1e-8, "orthonormality off by {ortho:e}");
    let mut r = rng::rng(2);
    let dir = rng::normals(&mut r, 16);
    let data: Vec<f64> = (0..12)
        .flat_map(|_| {
            let s = rng::normal(&mut r);
            dir.iter().map(move |d| 3.0 + s * d).collect::<Vec<_>>()
        })
        .collect();
    let ratio = pca_top8(&Tensor::matrix(12, 16, data).unwrap())
        .unwrap()
        .explained_ratio[0];
    ensure!(ratio > 0.999, "rank-1 first ratio {ratio}");
    let mut recon = 0.0f64;
    for seed in 0..5 {
        let x = random_matrix(seed, 5, 12);
        let p = pca(&x, 8).unwrap();
        for (i, row) in p.reconstruct().iter().enumerate() {
            recon = recon.max(max_diff(row, x.row(i)));
        }
    }
    ensure!(recon < 1e-8, "reconstruction off by {recon:e}");
    Ok(format!(
        "orthonormality {ortho:.1e}, rank-1 ratio {ratio:.6}, reconstruction {recon:.1e}"
    ))
}

// -------------------------------------------------------------- statistics

fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let t = x + 7.5;
    let a = G
        .iter()
        .enumerate()
        .skip(1)
        .fold(G[0], |a, (i, g)| a + g / (x + i as f64));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Two-sided Student t tail by Simpson integration of the density.
fn t_tail(t: f64, df: f64) -> f64 {
    let c = (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp()
        / (df * std::f64::consts::PI).sqrt();
    let f = |x: f64| c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let n = 20_000;
    let h = t.abs() / n as f64;
    let mut s = f(0.0) + f(t.abs());
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    1.0 - 2.0 * s * h / 3.0
}

/// Exact two-sided signed-rank p over every sign assignment.
fn wilcoxon_brute(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|v| *v != 0.0)
        .collect();
    let n = d.len();
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let wp: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(x, _)| **x > 0.0)
        .map(|(_, r)| r)
        .sum();
    let w = wp.min(ranks.iter().sum::<f64>() - wp);
    let hits = (0u64..1 << n)
        .filter(|mask| {
            (0..n)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum::<f64>()
                <= w + 1e-9
        })
        .count();
    (w, (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0))
}

/// Step-up rejections and adjusted values straight from the sorted list.
fn bh_brute(p: &[f64], q: f64) -> (Vec<bool>, Vec<f64>) {
    let m = p.len();
    let mut sorted = p.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cut = (1..=m)
        .filter(|&k| sorted[k - 1] <= k as f64 * q / m as f64)
        .map(|k| sorted[k - 1])
        .last();
    let rejected = p.iter().map(|&v| cut.is_some_and(|c| v <= c)).collect();
    let adjusted = p
        .iter()
        .map(|&v| {
            (0..m)
                .filter(|&j| sorted[j] >= v)
                .map(|j| sorted[j] * m as f64 / (j + 1) as f64)
                .fold(1.0f64, f64::min)
        })
        .collect();
    (rejected, adjusted)
}

pub fn statistics() -> Check {
    let before = [
        142.0, 140.0, 144.0, 144.0, 142.0, 146.0, 149.0, 150.0, 142.0, 148.0,
    ];
    let after = [
        138.0, 136.0, 147.0, 139.0, 143.0, 141.0, 143.0, 145.0, 136.0, 146.0,
    ];
    let d: Vec<f64> = before.iter().zip(&after).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / 10.0;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
    let t_hand = mean / (sd / 10f64.sqrt());
    let t = paired_t_test(&before, &after).unwrap();
    let p_oracle = t_tail(t_hand, 9.0);
    ensure!(
        (t.t - t_hand).abs() < 1e-12 && t.df == 9.0,
        "t {} vs {t_hand}",
        t.t
    );
    ensure!((t.p - p_oracle).abs() < 1e-8, "t p {} vs {p_oracle}", t.p);

    let mut cases: Vec<(Vec<f64>, Vec<f64>)> = vec![
        (before.to_vec(), after.to_vec()),
        (vec![2.0, 3.0, -3.0, 4.0, 5.0, 6.0, 7.0, 8.0], vec![0.0; 8]),
        (vec![1.0, 2.0, -3.0, 4.0, 5.0, 6.0, 7.0, 8.0], vec![0.0; 8]),
    ];
    let mut r = rng::rng(17);
    for n in 1..15 {
        let a: Vec<f64> = (0..n)
            .map(|_| (rng::normal(&mut r) * 2.0).round())
            .collect();
        let b: Vec<f64> = (0..n)
            .map(|_| (rng::normal(&mut r) * 2.0).round())
            .collect();
        cases.push((a, b));
    }
    for (a, b) in &cases {
        let got = wilcoxon_signed_rank(a, b).unwrap();
        let (w, p) = wilcoxon_brute(a, b);
        ensure!(
            got.w == w && (got.p - p).abs() < 1e-12,
            "wilcoxon {a:?}: ({}, {}) vs ({w}, {p})",
            got.w,
            got.p
        );
    }
    let table = wilcoxon_signed_rank(&cases[2].0, &cases[2].1).unwrap();
    ensure!(
        table.w == 3.0 && (table.p - 10.0 / 256.0).abs() < 1e-12,
        "n=8, W=3 table value: {} {}",
        table.w,
        table.p
    );

    let bh = bh_fdr(&[0.01, 0.04, 0.03, 0.005], 0.05).unwrap();
    ensure!(
        close(&bh.adjusted, &[0.02, 0.04, 0.04, 0.02], 1e-15),
        "BH textbook adjusted {:?}",
        bh.adjusted
    );
    for seed in 0..200 {
        let mut r = rng::rng(seed);
        let m = 1 + seed as usize % 29;
        let p: Vec<f64> = (0..m)
            .map(|i| {
                if i % 3 == 0 {
                    rng::normal(&mut r).abs() * 0.01
                } else {
                    rng::uniform(&mut r)
                }
            })
            .collect();
        let got = bh_fdr(&p, 0.05).unwrap();
        let (rej, adj) = bh_brute(&p, 0.05);
        ensure!(
            got.rejected == rej && close(&got.adjusted, &adj, 1e-12),
            "BH mismatch on seed {seed}"
        );
    }
    Ok(format!(
        "t={t_hand:.4} p={:.6} vs integrated {p_oracle:.6}; {} Wilcoxon cases match sign enumeration; BH textbook + 200 step-up oracles",
        t.p,
        cases.len()
    ))
}
