//! Compact classifier: token + position embeddings, one single-head
//! self-attention block, a linear classifier over the `[CLS]` state and an
//! optional reconstruction head whose output projection is the embedding
//! matrix itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{GradTape, GradientMap, Tensor, Var, DEFAULT_LAYER_NORM_EPS};

const INIT_RANGE: f64 = 0.05;
const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    /// Sequence length including the `[CLS]` position.
    pub max_len: usize,
    pub reconstructor: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.embed_dim,
            self.hidden_dim,
            self.num_classes,
        ];
        if dims.contains(&0) || self.max_len < 2 {
            return Err(Error::Invalid(format!("invalid model config {self:?}")));
        }
        if self.embed_dim < 2 || self.hidden_dim < 2 {
            return Err(Error::Invalid(
                "layer norm needs embed_dim and hidden_dim of at least 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructorParams {
    /// `hidden_dim x embed_dim`
    pub ffn_weight: Tensor,
    pub ffn_bias: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `vocab_size x embed_dim`; also the reconstructor's output projection.
    pub embedding: Tensor,
    /// `max_len x embed_dim`
    pub position: Tensor,
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub ffn_weight: Tensor,
    pub ffn_bias: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    /// `num_classes x hidden_dim`, no bias.
    pub classifier: Tensor,
    pub reconstructor: Option<ReconstructorParams>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Weights `U(-0.05, 0.05)`, biases zero, layer-norm gains one. The
/// reconstructor is drawn last so base weights do not depend on it.
pub fn init_params(config: ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let ModelConfig {
        vocab_size: v,
        embed_dim: e,
        hidden_dim: h,
        num_classes: c,
        max_len: l,
        ..
    } = config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedding = uniform(&mut rng, &[v, e]);
    let position = uniform(&mut rng, &[l, e]);
    let query = uniform(&mut rng, &[e, h]);
    let key = uniform(&mut rng, &[e, h]);
    let value = uniform(&mut rng, &[e, h]);
    let ffn_weight = uniform(&mut rng, &[h, h]);
    let classifier = uniform(&mut rng, &[c, h]);
    let reconstructor = config.reconstructor.then(|| ReconstructorParams {
        ffn_weight: uniform(&mut rng, &[h, e]),
        ffn_bias: Tensor::zeros(&[e]),
        ln_gain: Tensor::full(&[e], 1.0),
        ln_bias: Tensor::zeros(&[e]),
    });
    Ok(ModelParams {
        config,
        embedding,
        position,
        query,
        key,
        value,
        ffn_weight,
        ffn_bias: Tensor::zeros(&[h]),
        ln_gain: Tensor::full(&[h], 1.0),
        ln_bias: Tensor::zeros(&[h]),
        classifier,
        reconstructor,
    })
}

impl ModelParams {
    /// Every trainable tensor with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("embedding", &self.embedding),
            ("position", &self.position),
            ("attn.query", &self.query),
            ("attn.key", &self.key),
            ("attn.value", &self.value),
            ("ffn.weight", &self.ffn_weight),
            ("ffn.bias", &self.ffn_bias),
            ("ln.gain", &self.ln_gain),
            ("ln.bias", &self.ln_bias),
            ("classifier", &self.classifier),
        ];
        if let Some(r) = &self.reconstructor {
            out.extend([
                ("recon.ffn.weight", &r.ffn_weight),
                ("recon.ffn.bias", &r.ffn_bias),
                ("recon.ln.gain", &r.ln_gain),
                ("recon.ln.bias", &r.ln_bias),
            ]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.embedding,
            &mut self.position,
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.ffn_weight,
            &mut self.ffn_bias,
            &mut self.ln_gain,
            &mut self.ln_bias,
            &mut self.classifier,
        ];
        if let Some(r) = &mut self.reconstructor {
            out.extend([
                &mut r.ffn_weight,
                &mut r.ffn_bias,
                &mut r.ln_gain,
                &mut r.ln_bias,
            ]);
        }
        out
    }

    /// Rebuilds parameters from named tensors, checking every shape against
    /// `config`.
    pub fn from_named(config: ModelConfig, mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let template = init_params(config, 0)?;
        let names: Vec<&str> = template.named().iter().map(|(n, _)| *n).collect();
        let mut out = template.clone();
        {
            let slots = out.tensors_mut();
            for (name, slot) in names.iter().zip(slots) {
                let pos = tensors
                    .iter()
                    .position(|(n, _)| n == name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
                let (_, t) = tensors.swap_remove(pos);
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name:?} has shape {:?}, config expects {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }
}

/// Gradients for every parameter tensor, aligned with [`ModelParams::named`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ParamGrads {
            tensors: params
                .named()
                .into_iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    /// Pulls the parameter entries out of a tape gradient map.
    pub fn from_map(grads: &mut GradientMap, pv: &ParamVars) -> Result<Self> {
        let tensors = pv
            .all()
            .iter()
            .map(|&v| grads.take(v).ok_or(Error::UnknownLeaf(v.index())))
            .collect::<Result<_>>()?;
        Ok(ParamGrads { tensors })
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, c: f64) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Invalid(
                "gradient sets cover different parameters".into(),
            ));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled_assign(b, c)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().map(Tensor::max_abs).fold(0.0, f64::max)
    }
}

/// Total scalar parameters. The tied output projection is the embedding
/// matrix and adds nothing.
pub fn param_count(params: &ModelParams) -> usize {
    params.named().iter().map(|(_, t)| t.numel()).sum()
}

#[derive(Debug, Clone, Copy)]
pub struct ReconstructorVars {
    pub ffn_weight: Var,
    pub ffn_bias: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

/// Parameter handles on a tape, aligned with [`ModelParams::named`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub embedding: Var,
    pub position: Var,
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub ffn_weight: Var,
    pub ffn_bias: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub classifier: Var,
    pub reconstructor: Option<ReconstructorVars>,
    all: Vec<Var>,
}

impl ParamVars {
    /// Puts every parameter on `tape`, as leaves when `trainable`, else as
    /// constants.
    pub fn register(tape: &mut GradTape, params: &ModelParams, trainable: bool) -> Self {
        let all: Vec<Var> = params
            .named()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ParamVars {
            embedding: all[0],
            position: all[1],
            query: all[2],
            key: all[3],
            value: all[4],
            ffn_weight: all[5],
            ffn_bias: all[6],
            ln_gain: all[7],
            ln_bias: all[8],
            classifier: all[9],
            reconstructor: (all.len() > 10).then(|| ReconstructorVars {
                ffn_weight: all[10],
                ffn_bias: all[11],
                ln_gain: all[12],
                ln_bias: all[13],
            }),
            all,
        }
    }

    pub fn all(&self) -> &[Var] {
        &self.all
    }
}

/// `E[id] + P[pos]` per position.
pub fn embed_on(tape: &mut GradTape, pv: &ParamVars, token_ids: &[usize]) -> Result<Var> {
    let max_len = tape.value(pv.position).rows();
    if token_ids.len() > max_len {
        return Err(Error::Invalid(format!(
            "sequence of {} tokens exceeds max_len {max_len}",
            token_ids.len()
        )));
    }
    let tokens = tape.gather_rows(pv.embedding, token_ids)?;
    let positions: Vec<usize> = (0..token_ids.len()).collect();
    let pos = tape.gather_rows(pv.position, &positions)?;
    tape.add(tokens, pos)
}

#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub token_hidden: Var,
    /// `1 x hidden_dim`, row 0 of `token_hidden`.
    pub sentence: Var,
}

/// Single-head attention with a value-space residual,
/// `H = V + softmax(Q K^T / sqrt(d) + mask) V`, then
/// `layer_norm(H + gelu(H W + b))`.
pub fn encode_on(
    tape: &mut GradTape,
    pv: &ParamVars,
    embeddings: Var,
    mask: &[bool],
) -> Result<EncodedVars> {
    let len = tape.value(embeddings).rows();
    if mask.len() != len || !mask.first().copied().unwrap_or(false) {
        return Err(Error::Invalid(
            "mask must cover every position and keep [CLS] (position 0)".into(),
        ));
    }
    let hidden = tape.value(pv.query).cols();
    let q = tape.matmul(embeddings, pv.query)?;
    let k = tape.matmul(embeddings, pv.key)?;
    let v = tape.matmul(embeddings, pv.value)?;
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let scores = tape.scale(raw, 1.0 / (hidden as f64).sqrt());
    let mut bias = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for (j, &keep) in mask.iter().enumerate() {
            if !keep {
                bias.data_mut()[i * len + j] = MASKED_LOGIT;
            }
        }
    }
    let bias = tape.constant(bias);
    let scores = tape.add(scores, bias)?;
    let attn = tape.softmax_rows(scores);
    let mixed = tape.matmul(attn, v)?;
    let h = tape.add(v, mixed)?;
    let ff = tape.matmul(h, pv.ffn_weight)?;
    let ff = tape.add_row_bias(ff, pv.ffn_bias)?;
    let ff = tape.gelu(ff);
    let out = tape.add(h, ff)?;
    let token_hidden = tape.layer_norm(out, pv.ln_gain, pv.ln_bias, DEFAULT_LAYER_NORM_EPS)?;
    let sentence = tape.gather_rows(token_hidden, &[0])?;
    Ok(EncodedVars {
        token_hidden,
        sentence,
    })
}

/// `W h` as a `1 x num_classes` row.
pub fn class_logits_on(tape: &mut GradTape, pv: &ParamVars, sentence: Var) -> Result<Var> {
    let wt = tape.transpose(pv.classifier)?;
    tape.matmul(sentence, wt)
}

/// FF1 -> GELU -> layer norm -> `E^T`, giving `len x vocab_size` logits.
pub fn reconstruct_logits_on(
    tape: &mut GradTape,
    pv: &ParamVars,
    token_hidden: Var,
) -> Result<Var> {
    let r = pv
        .reconstructor
        .ok_or_else(|| Error::Invalid("no reconstructor head".into()))?;
    let x = tape.matmul(token_hidden, r.ffn_weight)?;
    let x = tape.add_row_bias(x, r.ffn_bias)?;
    let x = tape.gelu(x);
    let x = tape.layer_norm(x, r.ln_gain, r.ln_bias, DEFAULT_LAYER_NORM_EPS)?;
    let et = tape.transpose(pv.embedding)?;
    tape.matmul(x, et)
}

/// Cross-entropy of the original tokens at real, non-`[CLS]` positions.
pub fn reconstruction_loss_on(
    tape: &mut GradTape,
    logits: Var,
    token_ids: &[usize],
    mask: &[bool],
) -> Result<Var> {
    let targets: Vec<bool> = mask.iter().enumerate().map(|(i, &m)| m && i != 0).collect();
    tape.cross_entropy(logits, token_ids, &targets)
}

/// Nodes produced by one full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub embedded: Var,
    pub encoded: EncodedVars,
    pub logits: Var,
}

/// Embeds, optionally adds a perturbation node, encodes and classifies.
pub fn forward_on(
    tape: &mut GradTape,
    pv: &ParamVars,
    token_ids: &[usize],
    mask: &[bool],
    delta: Option<Var>,
) -> Result<ForwardVars> {
    let clean = embed_on(tape, pv, token_ids)?;
    let embedded = match delta {
        Some(d) => tape.add(clean, d)?,
        None => clean,
    };
    let encoded = encode_on(tape, pv, embedded, mask)?;
    let logits = class_logits_on(tape, pv, encoded.sentence)?;
    Ok(ForwardVars {
        embedded,
        encoded,
        logits,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    /// `max_len x hidden_dim`
    pub token_hidden: Tensor,
    /// `hidden_dim`; equal to row 0 of `token_hidden`.
    pub sentence_rep: Tensor,
}

pub fn embed(token_ids: &[usize], params: &ModelParams) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let out = embed_on(&mut tape, &pv, token_ids)?;
    Ok(tape.value(out).clone())
}

pub fn encode(embeddings: &Tensor, mask: &[bool], params: &ModelParams) -> Result<EncodedExample> {
    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let e = tape.constant(embeddings.clone());
    let enc = encode_on(&mut tape, &pv, e, mask)?;
    let h = params.config.hidden_dim;
    Ok(EncodedExample {
        token_hidden: tape.value(enc.token_hidden).clone(),
        sentence_rep: tape.value(enc.sentence).clone().reshape(vec![h])?,
    })
}

/// `softmax(W h)`.
pub fn classify(sentence_rep: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let h = params.config.hidden_dim;
    let rep = tape.constant(sentence_rep.clone().reshape(vec![1, h])?);
    let logits = class_logits_on(&mut tape, &pv, rep)?;
    let probs = tape.softmax_rows(logits);
    tape.value(probs)
        .clone()
        .reshape(vec![params.config.num_classes])
}

pub fn reconstruct_logits(token_hidden: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let th = tape.constant(token_hidden.clone());
    let out = reconstruct_logits_on(&mut tape, &pv, th)?;
    Ok(tape.value(out).clone())
}

pub fn reconstruction_loss(logits: &Tensor, token_ids: &[usize], mask: &[bool]) -> Result<f64> {
    let mut tape = GradTape::new();
    let l = tape.constant(logits.clone());
    let loss = reconstruction_loss_on(&mut tape, l, token_ids, mask)?;
    Ok(tape.value(loss).item())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
