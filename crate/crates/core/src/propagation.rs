//! Moving importance between SAE features, encoder units and input tokens.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::{self, AttributionConfig, AttributionVector, LayerModel, Level, Method};
use crate::autodiff::{Tape, Tensor, Var};
use crate::cohort::{vocab, Sample};
use crate::error::{Error, Result};
use crate::sae::{Sae, StepGrad};
use crate::surrogate::{Classifier, EmbeddedInput};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DualAttribution {
    pub psi: Vec<f64>,
    pub phi_enc: Option<Vec<f64>>,
    pub phi_input: Option<Vec<f64>>,
}

/// A differentiable map from the token-embedding rows of one input to the encoder layer.
pub trait TokenEncoder {
    /// Embedding rows `[n, e]` of the non-pad tokens.
    fn embeddings(&self) -> &Tensor;
    /// Sequence index of each embedding row.
    fn positions(&self) -> &[usize];
    fn seq_len(&self) -> usize;
    /// Encoder activation `[1, d]` from embedding rows on `tape`.
    fn encode<'t>(&self, tape: &'t Tape, emb: Var<'t>) -> Result<Var<'t>>;
}

/// The classifier's attributed layer as a function of one sample's token embeddings.
pub struct SurrogateEncoder<'m> {
    pub model: &'m Classifier,
    pub input: EmbeddedInput,
    seq_len: usize,
}

impl<'m> SurrogateEncoder<'m> {
    pub fn new(model: &'m Classifier, sample: &Sample) -> Self {
        Self {
            model,
            input: model.embed(sample),
            seq_len: sample.tokens.len(),
        }
    }
}

impl TokenEncoder for SurrogateEncoder<'_> {
    fn embeddings(&self) -> &Tensor {
        &self.input.embeddings
    }
    fn positions(&self) -> &[usize] {
        &self.input.positions
    }
    fn seq_len(&self) -> usize {
        self.seq_len
    }
    fn encode<'t>(&self, tape: &'t Tape, emb: Var<'t>) -> Result<Var<'t>> {
        let p = self.model.bind(tape, false);
        self.model.activation_from(&p, emb, &self.input.positions)
    }
}

/// `φ_enc = W ψ` with the decoder dictionary `W` (`d × F`).
pub fn feature_to_encoder(sae: &Sae, psi: &[f64]) -> Result<Vec<f64>> {
    let (d, f) = (sae.d(), sae.n_features());
    if psi.len() != f {
        return Err(Error::Contract(format!(
            "ψ has {} entries, SAE has {f} features",
            psi.len()
        )));
    }
    let w = sae.decoder().data();
    let mut out = vec![0.0; d];
    for (i, &p) in psi.iter().enumerate() {
        if p != 0.0 {
            out.iter_mut()
                .zip(&w[i * d..(i + 1) * d])
                .for_each(|(o, v)| *o += p * v);
        }
    }
    Ok(out)
}

/// Sums each embedding row and scatters the sums to sequence positions; pads stay 0.
fn token_scalars(enc: &dyn TokenEncoder, grad: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; enc.seq_len()];
    for (r, &pos) in enc.positions().iter().enumerate() {
        out[pos] = grad.row(r).iter().sum();
    }
    out
}

fn seeded_vjp(enc: &dyn TokenEncoder, seed: &[f64], through: Option<&Sae>) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let emb = tape.leaf(enc.embeddings().clone());
    let mut out = enc.encode(&tape, emb)?;
    if let Some(sae) = through {
        let p = sae.bind(&tape, false);
        out = sae.encode_on_tape(&p, out, StepGrad::Frozen)?;
    }
    if out.numel() != seed.len() {
        return Err(Error::Contract(format!(
            "seed has {} entries, layer has {}",
            seed.len(),
            out.numel()
        )));
    }
    let g = tape.vjp(out, &Tensor::new(out.shape(), seed.to_vec())?, &[emb])?;
    Ok(token_scalars(enc, &g[0]))
}

/// `Φ = (∂x/∂x_input)ᵀ φ_enc`, reduced to one signed score per token.
pub fn encoder_to_input(enc: &dyn TokenEncoder, phi_enc: &[f64]) -> Result<Vec<f64>> {
    seeded_vjp(enc, phi_enc, None)
}

/// `Φ_k = Σᵢ ψᵢ ∂aᵢ/∂x_input,k` through the SAE encoder Jacobian.
pub fn chained_token_attribution(
    enc: &dyn TokenEncoder,
    sae: &Sae,
    psi: &[f64],
) -> Result<Vec<f64>> {
    if psi.len() != sae.n_features() {
        return Err(Error::Contract(format!(
            "ψ has {} entries, SAE has {} features",
            psi.len(),
            sae.n_features()
        )));
    }
    seeded_vjp(enc, psi, Some(sae))
}

/// Per-token sensitivities `G[k][pos] = Σ_e ∂x_k/∂emb_{pos,e}` of every encoder unit, so
/// that token maps for many `φ_enc` cost one product each.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenJacobian {
    rows: Vec<Vec<f64>>,
}

impl TokenJacobian {
    pub fn new(enc: &dyn TokenEncoder) -> Result<Self> {
        let tape = Tape::new();
        let emb = tape.leaf(enc.embeddings().clone());
        let out = enc.encode(&tape, emb)?;
        let d = out.numel();
        let mut rows = Vec::with_capacity(d);
        for k in 0..d {
            let mut seed = Tensor::zeros(out.shape());
            seed.data_mut()[k] = 1.0;
            let g = tape.vjp(out, &seed, &[emb])?;
            rows.push(token_scalars(enc, &g[0]));
        }
        Ok(Self { rows })
    }

    pub fn d(&self) -> usize {
        self.rows.len()
    }

    /// Same result as [`encoder_to_input`] for the encoder this was built from.
    pub fn apply(&self, phi_enc: &[f64]) -> Result<Vec<f64>> {
        if phi_enc.len() != self.rows.len() {
            return Err(Error::Contract(format!(
                "φ has {} entries, layer has {}",
                phi_enc.len(),
                self.rows.len()
            )));
        }
        let mut out = vec![0.0; self.rows[0].len()];
        for (row, &p) in self.rows.iter().zip(phi_enc) {
            if p != 0.0 {
                out.iter_mut().zip(row).for_each(|(o, g)| *o += p * g);
            }
        }
        Ok(out)
    }
}

/// `(∂a/∂x)ᵀ ψ` for the SAE encoder at `x`, with frozen activation masks.
pub fn sae_pullback(sae: &Sae, x: &[f64], psi: &[f64]) -> Result<Vec<f64>> {
    if psi.len() != sae.n_features() || x.len() != sae.d() {
        return Err(Error::Contract(
            "pullback shapes do not match the SAE".into(),
        ));
    }
    let tape = Tape::new();
    let xv = tape.leaf(Tensor::matrix(1, x.len(), x.to_vec())?);
    let p = sae.bind(&tape, false);
    let a = sae.encode_on_tape(&p, xv, StepGrad::Frozen)?;
    let g = tape.vjp(a, &Tensor::matrix(1, psi.len(), psi.to_vec())?, &[xv])?;
    Ok(g[0].data().to_vec())
}

/// SAE features as the attributed layer of `head ∘ decode`, with the input path of the
/// wrapped layer pushed through the encoder.
pub struct SaeLayer<'a> {
    pub inner: &'a dyn LayerModel,
    pub sae: &'a Sae,
    features: Vec<f64>,
}

impl<'a> SaeLayer<'a> {
    pub fn new(inner: &'a dyn LayerModel, sae: &'a Sae) -> Result<Self> {
        let features = sae.encode(inner.activation())?;
        Ok(Self {
            inner,
            sae,
            features,
        })
    }
}

impl LayerModel for SaeLayer<'_> {
    fn activation(&self) -> &[f64] {
        &self.features
    }

    fn outputs<'t>(&self, tape: &'t Tape, a: Var<'t>) -> Result<Var<'t>> {
        let p = self.sae.bind(tape, false);
        let x = self.sae.decode_on_tape(&p, a)?;
        self.inner.outputs(tape, x)
    }

    fn activation_on_input_path(&self, alpha: f64) -> Result<Vec<f64>> {
        self.sae
            .encode(&self.inner.activation_on_input_path(alpha)?)
    }
}

/// Runs `method` with the SAE features as the attributed layer.
pub fn attribute_in_sae_space(
    inner: &dyn LayerModel,
    sae: &Sae,
    method: Method,
    target: usize,
    cfg: &AttributionConfig,
) -> Result<AttributionVector> {
    let layer = SaeLayer::new(inner, sae)?;
    let mut v = attribution::attribute(&layer, method, target, cfg)?;
    v.level = Level::SaeFeature;
    Ok(v)
}

/// Writes `sample_id,token_index,char,value,subgroup` for every non-pad token.
pub fn write_token_csv(path: &Path, rows: &[(usize, &Sample, &[f64])]) -> Result<()> {
    let v = vocab();
    let mut w = csv::Writer::from_path(path).map_err(crate::cohort::csv_err)?;
    w.write_record(["sample_id", "token_index", "char", "value", "subgroup"])
        .map_err(crate::cohort::csv_err)?;
    for &(id, sample, phi) in rows {
        for (i, (&tok, &val)) in sample.tokens.iter().zip(phi).enumerate() {
            if tok == crate::cohort::PAD {
                continue;
            }
            let tag = sample.tag_at(i).map(|t| t.code()).unwrap_or("");
            w.write_record([
                &id.to_string(),
                &i.to_string(),
                v.word(tok),
                &format!("{val:e}"),
                tag,
            ])
            .map_err(crate::cohort::csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
