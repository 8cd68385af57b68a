//! Named parameter sets and the AdamW update.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on the tape as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Places every parameter on the tape as a constant.
    pub fn bind_const<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().map(|t| t.shape().to_vec()))
            .collect()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.tensors.iter().flat_map(Tensor::to_le_bytes).collect()
    }

    pub fn from_le_bytes(shapes: &[(String, Vec<usize>)], bytes: &[u8]) -> Result<Self> {
        let mut out = Params::new();
        let mut off = 0;
        for (name, shape) in shapes {
            let n: usize = shape.iter().product::<usize>() * 8;
            if off + n > bytes.len() {
                return Err(Error::Validation(format!(
                    "parameter blob too short at {name}"
                )));
            }
            out.push(
                name.clone(),
                Tensor::from_le_bytes(shape.clone(), &bytes[off..off + n])?,
            );
            off += n;
        }
        if off != bytes.len() {
            return Err(Error::Validation("trailing bytes in parameter blob".into()));
        }
        Ok(out)
    }
}

/// Scaled Gaussian initializer, `N(0, scale²)`.
pub fn init_normal(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = rng::normals(rng, n)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Tensor]) {
        self.step_masked(params, grads, |_| true)
    }

    /// Updates only the parameters for which `train(i)` holds.
    pub fn step_masked(
        &mut self,
        params: &mut Params,
        grads: &[Tensor],
        train: impl Fn(usize) -> bool,
    ) {
        if self.m.is_empty() {
            self.m = params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            if !train(i) {
                continue;
            }
            let p = params.tensors[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut p = Params::new();
        p.push("x", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..500 {
            let g = p.get(0).map(|x| 2.0 * x);
            opt.step(&mut p, &[g]);
        }
        assert!(p.get(0).norm() < 1e-2);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut p = Params::new();
        p.push("x", Tensor::vector(vec![3.0, -2.0]));
        let before = p.clone();
        let mut opt = AdamW::new(0.0, 0.01);
        opt.step(&mut p, &[Tensor::vector(vec![1.0, 1.0])]);
        assert_eq!(p, before);
    }

    #[test]
    fn blob_round_trip() {
        let mut p = Params::new();
        p.push("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        p.push("b", Tensor::vector(vec![-1.0]));
        let q = Params::from_le_bytes(&p.shapes(), &p.to_le_bytes()).unwrap();
        assert_eq!(p, q);
    }
}
