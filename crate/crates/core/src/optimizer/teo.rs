//! Transformer explanation optimizer: attention encoder over stacked token attributions,
//! attention decoder with cross-attention, scalar output per token.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::optim::{init_normal, Params};
use crate::rng;

/// Six method channels plus the input channel.
pub const STACK_CHANNELS: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeoConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub seq_len: usize,
    /// Adds each attention output to its input. `false` gives the bare layer composition.
    pub residual: bool,
    pub seed: u64,
}

impl Default for TeoConfig {
    fn default() -> Self {
        Self {
            d_in: STACK_CHANNELS,
            d_model: 32,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            seq_len: 512,
            residual: true,
            seed: 0,
        }
    }
}

impl TeoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_in == 0 || self.seq_len == 0 {
            return Err(Error::Config("TEO needs d_in ≥ 1 and seq_len ≥ 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

const W_IN: usize = 0;
const POS: usize = 1;
const W_DEC: usize = 2;
const W_OUT: usize = 3;
const FIRST_BLOCK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Teo {
    pub config: TeoConfig,
    params: Params,
}

impl Teo {
    pub fn new(config: TeoConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(rng::derive(config.seed, 0x7e0));
        let (din, d) = (config.d_in, config.d_model);
        let mut params = Params::new();
        params.push(
            "w_in",
            init_normal(&mut r, &[din, d], 1.0 / (din as f64).sqrt()),
        );
        params.push("pos", init_normal(&mut r, &[config.seq_len, d], 1.0));
        params.push("w_dec", init_normal(&mut r, &[1, d], 1.0));
        params.push("w_out", init_normal(&mut r, &[d, 1], 1.0 / d as f64));
        let scale = 1.0 / (d as f64).sqrt();
        let blocks = [
            ("enc", config.enc_layers),
            ("dec_self", config.dec_layers),
            ("dec_cross", config.dec_layers),
        ];
        for (name, n) in blocks {
            for l in 0..n {
                // query and key start equal so attention begins position-aligned
                let wq = init_normal(&mut r, &[d, d], scale);
                params.push(format!("{name}{l}.w_q"), wq.clone());
                params.push(format!("{name}{l}.w_k"), wq);
                params.push(
                    format!("{name}{l}.w_v"),
                    init_normal(&mut r, &[d, d], scale),
                );
            }
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("TEO has no parameter {name}")))?;
        if self.params.get(i).shape() != t.shape() {
            return Err(Error::Contract(format!("shape mismatch for {name}")));
        }
        *self.params.get_mut(i) = t;
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        if trainable {
            self.params.bind(tape)
        } else {
            self.params.bind_const(tape)
        }
    }

    fn block(&self, kind: usize, layer: usize) -> usize {
        let per = [0, self.config.enc_layers, 2 * self.config.enc_layers];
        let offset = match kind {
            0 => per[0] + layer,
            1 => per[1] + layer,
            _ => per[1] + self.config.dec_layers + layer,
        };
        FIRST_BLOCK + 3 * offset
    }

    fn attend<'t>(
        &self,
        p: &[Var<'t>],
        base: usize,
        q_in: Var<'t>,
        kv_in: Var<'t>,
    ) -> Result<Var<'t>> {
        let q = q_in.matmul(p[base])?;
        let k = kv_in.matmul(p[base + 1])?;
        let v = kv_in.matmul(p[base + 2])?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let w = q
                .slice_cols(lo, hi)?
                .matmul(k.slice_cols(lo, hi)?.transpose()?)?
                .scale(scale)?
                .softmax()?;
            heads.push(w.matmul(v.slice_cols(lo, hi)?)?);
        }
        let out = if heads.len() == 1 {
            heads[0]
        } else {
            Var::concat_cols(&heads)?
        };
        if self.config.residual {
            q_in.add(out)
        } else {
            Ok(out)
        }
    }

    /// Output `[n, 1]` for the stack rows `[n, d_in]` at sequence `positions`.
    pub fn forward_on_tape<'t>(
        &self,
        p: &[Var<'t>],
        stack: Var<'t>,
        positions: &[usize],
        target: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let shape = stack.shape();
        if shape.len() != 2 || shape[1] != self.config.d_in {
            return Err(Error::Contract(format!(
                "stack has shape {shape:?}, expected [n, {}]",
                self.config.d_in
            )));
        }
        if shape[0] != positions.len() || positions.iter().any(|&t| t >= self.config.seq_len) {
            return Err(Error::Contract(
                "positions do not match the stack rows".into(),
            ));
        }
        let rows: Vec<Option<usize>> = positions.iter().map(|&i| Some(i)).collect();
        let pos = p[POS].gather_rows(&rows)?;
        let mut h = stack.matmul(p[W_IN])?.add(pos)?;
        for l in 0..self.config.enc_layers {
            h = self.attend(p, self.block(0, l), h, h)?;
        }
        let tape = stack.tape();
        let target = match target {
            Some(t) => t,
            None => tape.constant(Tensor::zeros(vec![positions.len(), 1])),
        };
        let mut y = target.matmul(p[W_DEC])?.add(pos)?;
        for l in 0..self.config.dec_layers {
            y = self.attend(p, self.block(1, l), y, y)?;
        }
        for l in 0..self.config.dec_layers {
            y = self.attend(p, self.block(2, l), y, h)?;
        }
        y.matmul(p[W_OUT])
    }

    /// Full-length forward over every row of `stack` (`[T, d_in]`).
    pub fn forward(&self, stack: &Tensor, target: Option<&[f64]>) -> Result<Vec<f64>> {
        let positions: Vec<usize> = (0..stack.rows()).collect();
        self.forward_rows(stack, &positions, target)
    }

    fn forward_rows(
        &self,
        stack: &Tensor,
        positions: &[usize],
        target: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let t = match target {
            Some(t) => Some(tape.constant(Tensor::matrix(t.len(), 1, t.to_vec())?)),
            None => None,
        };
        let out = self.forward_on_tape(&p, tape.constant(stack.clone()), positions, t)?;
        Ok(out.value().data().to_vec())
    }

    /// Attends only among the `valid` rows and returns 0 elsewhere.
    pub fn forward_masked(&self, stack: &Tensor, valid: &[bool]) -> Result<Vec<f64>> {
        if valid.len() != stack.rows() {
            return Err(Error::Contract("mask length differs from the stack".into()));
        }
        let positions: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
        let rows: Vec<Vec<f64>> = positions.iter().map(|&i| stack.row(i).to_vec()).collect();
        let mut out = vec![0.0; valid.len()];
        if positions.is_empty() {
            return Ok(out);
        }
        let compact = Tensor::from_rows(&rows)?;
        for (v, &i) in self
            .forward_rows(&compact, &positions, None)?
            .into_iter()
            .zip(&positions)
        {
            out[i] = v;
        }
        Ok(out)
    }

    /// `B × T × 1` outputs for `B` stacks, each processed independently.
    pub fn forward_batch(&self, stacks: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        stacks.iter().map(|s| self.forward(s, None)).collect()
    }

    fn meta(&self) -> serde_json::Value {
        json!({ "kind": "teo", "config": self.config })
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(&self.meta(), &self.params)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, params) = checkpoint::from_bytes(bytes)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("teo") {
            return Err(Error::Validation("not a TEO checkpoint".into()));
        }
        let config: TeoConfig = serde_json::from_value(meta["config"].clone())?;
        let fresh = Teo::new(config.clone())?;
        if fresh.params.shapes() != params.shapes() {
            return Err(Error::Validation(
                "TEO checkpoint tensors do not match its header".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}
