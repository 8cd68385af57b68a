//! Diffusion explanation optimizer: a linear-β DDPM over the stacked token channels with a
//! small 1-D U-Net noise predictor.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::optim::{init_normal, Params};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    /// `steps` betas spaced evenly from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every β must lie in (0, 1)".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `√ᾱ_t x₀ + √(1 − ᾱ_t) ε`.
    pub fn q_sample_with(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        if eps.len() != x0.len() {
            return Err(Error::Contract("noise and signal differ in length".into()));
        }
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    pub fn q_sample(&self, x0: &[f64], t: usize, seed: u64) -> Result<Vec<f64>> {
        let mut r = rng::rng(seed);
        let eps = rng::normals(&mut r, x0.len());
        self.q_sample_with(x0, t, &eps)
    }

    /// Mean and variance of `q(x_{t−1} | x_t, x₀)`; at `t = 1` this returns `x₀` exactly.
    pub fn posterior(&self, x_t: &[f64], x0: &[f64], t: usize) -> Result<(Vec<f64>, f64)> {
        self.check(t)?;
        if x_t.len() != x0.len() {
            return Err(Error::Contract("x_t and x₀ differ in length".into()));
        }
        let (ab, ab_prev, beta) = (self.alpha_bar(t), self.alpha_bar(t - 1), self.beta(t));
        if t == 1 {
            return Ok((x0.to_vec(), 0.0));
        }
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let mean = x0.iter().zip(x_t).map(|(a, b)| c0 * a + ct * b).collect();
        Ok((mean, (1.0 - ab_prev) / (1.0 - ab) * beta))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeoConfig {
    pub channels: usize,
    pub width: usize,
    pub t_diff: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub time_dim: usize,
    pub seed: u64,
}

impl Default for DeoConfig {
    fn default() -> Self {
        Self {
            channels: super::STACK_CHANNELS,
            width: 16,
            t_diff: 100,
            beta_start: 1e-4,
            beta_end: 2e-2,
            time_dim: 16,
            seed: 0,
        }
    }
}

/// Layers of the U-Net: (name, input channels, output channels, gets a time bias).
fn layers(c: usize, w: usize) -> Vec<(&'static str, usize, usize, bool)> {
    vec![
        ("enc1a", c, w, true),
        ("enc1b", w, w, false),
        ("enc2a", w, 2 * w, true),
        ("enc2b", 2 * w, 2 * w, false),
        ("mid", 2 * w, 2 * w, true),
        ("dec2", 4 * w, 2 * w, false),
        ("dec1", 3 * w, w, false),
        ("out", w, c, false),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Deo {
    pub config: DeoConfig,
    pub schedule: Schedule,
    params: Params,
}

/// Sinusoidal features of the timestep.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half.max(1) as f64).exp();
        out[k] = (t as f64 * freq).sin();
        out[half + k] = (t as f64 * freq).cos();
    }
    out
}

/// Kernel-3 convolution along rows with zero padding: `[L, C] → [L, C_out]`.
fn conv<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (l, c) = (x.shape()[0], x.shape()[1]);
    let mut idx = Vec::with_capacity(l * 3 * c);
    for i in 0..l {
        for o in [-1i64, 0, 1] {
            let r = i as i64 + o;
            for ch in 0..c {
                idx.push(if r >= 0 && (r as usize) < l {
                    Some(r as usize * c + ch)
                } else {
                    None
                });
            }
        }
    }
    x.gather(idx, vec![l, 3 * c])?.matmul(w)?.add(b)
}

fn downsample(x: Var<'_>) -> Result<Var<'_>> {
    let rows: Vec<Option<usize>> = (0..x.shape()[0]).step_by(2).map(Some).collect();
    x.gather_rows(&rows)
}

fn upsample(x: Var<'_>, len: usize) -> Result<Var<'_>> {
    let rows: Vec<Option<usize>> = (0..len).map(|i| Some(i / 2)).collect();
    x.gather_rows(&rows)
}

impl Deo {
    pub fn new(config: DeoConfig) -> Result<Self> {
        if config.channels == 0 || config.width == 0 || config.time_dim < 2 {
            return Err(Error::Config(
                "DEO needs channels, width ≥ 1 and time_dim ≥ 2".into(),
            ));
        }
        let schedule = Schedule::linear(config.t_diff, config.beta_start, config.beta_end)?;
        let mut r = rng::rng(rng::derive(config.seed, 0xde0));
        let mut params = Params::new();
        for (name, cin, cout, timed) in layers(config.channels, config.width) {
            params.push(
                format!("{name}.w"),
                init_normal(&mut r, &[3 * cin, cout], (2.0 / (3 * cin) as f64).sqrt()),
            );
            params.push(format!("{name}.b"), Tensor::zeros(vec![1, cout]));
            if timed {
                params.push(
                    format!("{name}.t"),
                    init_normal(&mut r, &[config.time_dim, cout], 0.1),
                );
            }
        }
        Ok(Self {
            config,
            schedule,
            params,
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        if trainable {
            self.params.bind(tape)
        } else {
            self.params.bind_const(tape)
        }
    }

    /// Predicted noise `[L, C]` for the noisy stack `x_t` (`[L, C]`).
    pub fn denoise_on_tape<'t>(&self, p: &[Var<'t>], x: Var<'t>, t: usize) -> Result<Var<'t>> {
        if x.shape().len() != 2 || x.shape()[1] != self.config.channels {
            return Err(Error::Contract(format!(
                "stack has shape {:?}, expected [L, {}]",
                x.shape(),
                self.config.channels
            )));
        }
        let tape = x.tape();
        let temb = tape.constant(Tensor::matrix(
            1,
            self.config.time_dim,
            time_embedding(t, self.config.time_dim),
        )?);
        let mut i = 0;
        let mut layer = |h: Var<'t>, timed: bool, act: bool| -> Result<Var<'t>> {
            let mut y = conv(h, p[i], p[i + 1])?;
            i += 2;
            if timed {
                y = y.add(temb.matmul(p[i])?)?;
                i += 1;
            }
            if act {
                y.relu()
            } else {
                Ok(y)
            }
        };
        let l = x.shape()[0];
        let h = layer(x, true, true)?;
        let s1 = layer(h, false, true)?;
        let d1 = downsample(s1)?;
        let h = layer(d1, true, true)?;
        let s2 = layer(h, false, true)?;
        let d2 = downsample(s2)?;
        let m = layer(d2, true, true)?;
        let u2 = Var::concat_cols(&[upsample(m, s2.shape()[0])?, s2])?;
        let h2 = layer(u2, false, true)?;
        let u1 = Var::concat_cols(&[upsample(h2, l)?, s1])?;
        let h1 = layer(u1, false, true)?;
        layer(h1, false, false)
    }

    pub fn denoise(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.schedule.check(t)?;
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let out = self.denoise_on_tape(&p, tape.constant(x.clone()), t)?;
        Ok((*out.value()).clone())
    }

    /// Simplified loss over a batch of clean stacks; see [`simple_loss_value`].
    pub fn simple_loss(&self, x0s: &[Tensor], seed: u64) -> Result<f64> {
        let draws = draw_noise(&self.schedule, x0s, seed)?;
        let preds = draws
            .iter()
            .map(|d| self.denoise(&d.x_t, d.t))
            .collect::<Result<Vec<_>>>()?;
        simple_loss_value(&draws, &preds)
    }

    pub fn simple_loss_on_tape<'t>(&self, p: &[Var<'t>], draws: &[NoiseDraw]) -> Result<Var<'t>> {
        let tape = p[0].tape();
        let mut total: Option<Var<'t>> = None;
        for d in draws {
            let pred = self.denoise_on_tape(p, tape.constant(d.x_t.clone()), d.t)?;
            let err = tape.constant(d.eps.clone()).sub(pred)?.square()?.sum()?;
            total = Some(match total {
                Some(acc) => acc.add(err)?,
                None => err,
            });
        }
        let total = total.ok_or(Error::EmptyCohort)?;
        total.scale(1.0 / (draws.len() * self.config.channels) as f64)
    }

    /// Ancestral sampling; channels marked `known` are re-noised from `known_x0` at every
    /// step so the free channels are generated consistent with them.
    pub fn sample(&self, known_x0: &Tensor, known: &[bool], seed: u64) -> Result<Tensor> {
        let c = self.config.channels;
        if known_x0.cols() != c || known.len() != c {
            return Err(Error::Contract(format!(
                "conditioning stack must have {c} channels"
            )));
        }
        let l = known_x0.rows();
        let mut r = rng::rng(seed);
        let mut x = Tensor::matrix(l, c, rng::normals(&mut r, l * c))?;
        let s = &self.schedule;
        let replace = |x: &mut Tensor, t: usize, r: &mut rng::Rng| -> Result<()> {
            let noisy = if t == 0 {
                known_x0.data().to_vec()
            } else {
                s.q_sample_with(known_x0.data(), t, &rng::normals(r, l * c))?
            };
            for (k, v) in x.data_mut().iter_mut().enumerate() {
                if known[k % c] {
                    *v = noisy[k];
                }
            }
            Ok(())
        };
        replace(&mut x, s.steps(), &mut r)?;
        for t in (1..=s.steps()).rev() {
            let eps = self.denoise(&x, t)?;
            let ab = s.alpha_bar(t);
            let x0: Vec<f64> = x
                .data()
                .iter()
                .zip(eps.data())
                .map(|(xt, e)| (xt - (1.0 - ab).sqrt() * e) / ab.sqrt())
                .collect();
            let (mean, var) = s.posterior(x.data(), &x0, t)?;
            let z = rng::normals(&mut r, l * c);
            x = Tensor::matrix(
                l,
                c,
                mean.iter()
                    .zip(&z)
                    .map(|(m, z)| m + var.sqrt() * z)
                    .collect(),
            )?;
            replace(&mut x, t - 1, &mut r)?;
        }
        Ok(x)
    }

    fn meta(&self) -> serde_json::Value {
        json!({ "kind": "deo", "config": self.config })
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(&self.meta(), &self.params)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, params) = checkpoint::from_bytes(bytes)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("deo") {
            return Err(Error::Validation("not a DEO checkpoint".into()));
        }
        let config: DeoConfig = serde_json::from_value(meta["config"].clone())?;
        let fresh = Deo::new(config)?;
        if fresh.params.shapes() != params.shapes() {
            return Err(Error::Validation(
                "DEO checkpoint tensors do not match its header".into(),
            ));
        }
        Ok(Self { params, ..fresh })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

/// One training draw: timestep, noise and the noised stack.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Tensor,
    pub x_t: Tensor,
}

/// Uniform timestep and Gaussian noise per batch element.
pub fn draw_noise(s: &Schedule, x0s: &[Tensor], seed: u64) -> Result<Vec<NoiseDraw>> {
    let mut r = rng::rng(seed);
    x0s.iter()
        .map(|x0| {
            let t = rand::Rng::gen_range(&mut r, 1..=s.steps());
            let eps = Tensor::new(x0.shape().to_vec(), rng::normals(&mut r, x0.numel()))?;
            let x_t = Tensor::new(
                x0.shape().to_vec(),
                s.q_sample_with(x0.data(), t, eps.data())?,
            )?;
            Ok(NoiseDraw { t, eps, x_t })
        })
        .collect()
}

/// `‖ε − ε̂‖²` summed over positions, averaged over channels and batch elements.
pub fn simple_loss_value(draws: &[NoiseDraw], preds: &[Tensor]) -> Result<f64> {
    if draws.is_empty() || draws.len() != preds.len() {
        return Err(Error::Contract(
            "one prediction per draw is required".into(),
        ));
    }
    let mut total = 0.0;
    for (d, p) in draws.iter().zip(preds) {
        if d.eps.shape() != p.shape() {
            return Err(Error::Contract(
                "prediction shape differs from the noise".into(),
            ));
        }
        total += d
            .eps
            .data()
            .iter()
            .zip(p.data())
            .map(|(e, q)| (e - q).powi(2))
            .sum::<f64>()
            / d.eps.cols() as f64;
    }
    Ok(total / draws.len() as f64)
}
