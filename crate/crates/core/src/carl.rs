//! Contrastive learning between clean and adversarial sentence
//! representations, with per-example memory banks supplying negatives.
//!
//! Everything stored or scored here is unit-normalized; scores are handled in
//! log space so small temperatures cannot overflow.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::adversary::{freelb_perturbation, FreeLbConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{embed, encode, ModelParams};
use crate::numerics::{GradTape, Tensor, Var};
use crate::rng::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarlConfig {
    /// Negatives sampled per anchor.
    pub m: usize,
    pub temperature: f64,
    /// Weight kept on the stored row when mixing in a new representation.
    pub momentum: f64,
    /// First step at which the contrastive term is active.
    pub start_step: usize,
    /// Adds the positive pair to the denominator (standard InfoNCE form).
    pub include_positive: bool,
}

impl Default for CarlConfig {
    fn default() -> Self {
        CarlConfig {
            m: 64,
            temperature: 0.07,
            momentum: 0.5,
            start_step: 500,
            include_positive: false,
        }
    }
}

impl CarlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || !(self.temperature > 0.0) || !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Invalid(format!(
                "invalid contrastive config {self:?}"
            )));
        }
        Ok(())
    }

    /// Checks that every class of `labels` has at least `m` negatives.
    pub fn check_negatives(&self, labels: &[usize], num_classes: usize) -> Result<()> {
        let mut counts = vec![0usize; num_classes];
        for &l in labels {
            counts[l] += 1;
        }
        for (class, &own) in counts.iter().enumerate() {
            let available = labels.len() - own;
            if available < self.m {
                return Err(Error::InsufficientNegatives {
                    class,
                    needed: self.m,
                    available,
                });
            }
        }
        Ok(())
    }
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}

/// `momentum * old + (1 - momentum) * new`, before renormalization.
pub fn momentum_mix(old: &[f64], new: &[f64], momentum: f64) -> Vec<f64> {
    old.iter()
        .zip(new)
        .map(|(o, n)| momentum * o + (1.0 - momentum) * n)
        .collect()
}

/// Clean and adversarial representation stores, one row per training example.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    orig: Tensor,
    adv: Tensor,
    momentum: f64,
    initialized: bool,
}

impl MemoryBank {
    /// An empty bank; it refuses reads and updates until filled.
    pub fn new(size: usize, dim: usize, momentum: f64) -> Self {
        MemoryBank {
            orig: Tensor::zeros(&[size, dim]),
            adv: Tensor::zeros(&[size, dim]),
            momentum,
            initialized: false,
        }
    }

    /// Builds an initialized bank, normalizing every row.
    pub fn from_rows(mut orig: Tensor, mut adv: Tensor, momentum: f64) -> Result<Self> {
        if orig.shape() != adv.shape() || orig.shape().len() != 2 {
            return Err(Error::shape("memory bank", orig.shape(), adv.shape()));
        }
        for t in [&mut orig, &mut adv] {
            for i in 0..t.rows() {
                let row = unit(t.row(i));
                t.row_mut(i).copy_from_slice(&row);
            }
        }
        Ok(MemoryBank {
            orig,
            adv,
            momentum,
            initialized: true,
        })
    }

    /// Rebuilds an initialized bank from rows exactly as stored, e.g. from a
    /// checkpoint.
    pub fn restore(orig: Tensor, adv: Tensor, momentum: f64) -> Result<Self> {
        if orig.shape() != adv.shape() || orig.shape().len() != 2 {
            return Err(Error::shape("memory bank", orig.shape(), adv.shape()));
        }
        Ok(MemoryBank {
            orig,
            adv,
            momentum,
            initialized: true,
        })
    }

    pub fn size(&self) -> usize {
        self.orig.rows()
    }

    pub fn dim(&self) -> usize {
        self.orig.cols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn orig(&self) -> &Tensor {
        &self.orig
    }

    pub fn adv(&self) -> &Tensor {
        &self.adv
    }

    fn check(&self, index: usize) -> Result<()> {
        if !self.initialized {
            return Err(Error::BankUninitialized);
        }
        if index >= self.size() {
            return Err(Error::BankIndex {
                index,
                size: self.size(),
            });
        }
        Ok(())
    }

    /// Mixes new representations into row `index` of both banks, then
    /// renormalizes.
    pub fn update(&mut self, index: usize, rep: &[f64], rep_adv: &[f64]) -> Result<()> {
        self.check(index)?;
        if rep.len() != self.dim() || rep_adv.len() != self.dim() {
            return Err(Error::shape(
                "bank update",
                &[self.dim()],
                &[rep.len(), rep_adv.len()],
            ));
        }
        let m = self.momentum;
        for (bank, new) in [(&mut self.orig, rep), (&mut self.adv, rep_adv)] {
            let mixed = unit(&momentum_mix(bank.row(index), &unit(new), m));
            bank.row_mut(index).copy_from_slice(&mixed);
        }
        Ok(())
    }

    /// Rows `indices` of the clean and adversarial banks.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut orig = Vec::with_capacity(indices.len() * self.dim());
        let mut adv = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            self.check(i)?;
            orig.extend_from_slice(self.orig.row(i));
            adv.extend_from_slice(self.adv.row(i));
        }
        let shape = vec![indices.len(), self.dim()];
        Ok((Tensor::new(shape.clone(), orig)?, Tensor::new(shape, adv)?))
    }
}

/// Fills both banks from a full pass over `dataset`: the clean sentence
/// representation and the one at the FreeLB perturbation, without any
/// parameter update. Example `i` draws its noise from `derive_rng(seed, [i])`.
pub fn bank_init(
    params: &ModelParams,
    dataset: &Dataset,
    freelb: &FreeLbConfig,
    momentum: f64,
    seed: u64,
) -> Result<MemoryBank> {
    let n = dataset.len();
    let d = params.config.hidden_dim;
    let mut orig = Tensor::zeros(&[n, d]);
    let mut adv = Tensor::zeros(&[n, d]);
    for ex in &dataset.examples {
        let mut rng = derive_rng(seed, &[ex.index as u64]);
        let delta = freelb_perturbation(ex, params, freelb, &mut rng)?;
        let clean = embed(&ex.token_ids, params)?;
        let mut perturbed = clean.clone();
        perturbed.add_assign(delta.values())?;
        let r = encode(&clean, &ex.mask, params)?.sentence_rep;
        let r_adv = encode(&perturbed, &ex.mask, params)?.sentence_rep;
        orig.row_mut(ex.index).copy_from_slice(r.data());
        adv.row_mut(ex.index).copy_from_slice(r_adv.data());
    }
    MemoryBank::from_rows(orig, adv, momentum)
}

/// `m` distinct indices, uniformly without replacement, among examples whose
/// label differs from `anchor_label`.
pub fn sample_negatives(
    labels: &[usize],
    anchor_label: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] != anchor_label)
        .collect();
    if candidates.len() < m {
        return Err(Error::InsufficientNegatives {
            class: anchor_label,
            needed: m,
            available: candidates.len(),
        });
    }
    Ok(sample(rng, candidates.len(), m)
        .into_iter()
        .map(|k| candidates[k])
        .collect())
}

pub fn score(x1: &[f64], x2: &[f64], temperature: f64) -> f64 {
    (dot(x1, x2) / temperature).exp()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// One anchored term: `-log(score(anchor, positive) / sum_j score(anchor, neg_j))`.
fn anchored_term(
    anchor: &[f64],
    positive: &[f64],
    negatives: &Tensor,
    temperature: f64,
    include_positive: bool,
) -> f64 {
    let pos = dot(anchor, positive) / temperature;
    let mut logits: Vec<f64> = (0..negatives.rows())
        .map(|j| dot(anchor, negatives.row(j)) / temperature)
        .collect();
    if include_positive {
        logits.push(pos);
    }
    log_sum_exp(&logits) - pos
}

/// The two anchored terms `(adversarial-anchored, clean-anchored)` on unit
/// representations.
pub fn contrastive_terms(
    rep: &[f64],
    rep_adv: &[f64],
    neg_orig: &Tensor,
    neg_adv: &Tensor,
    temperature: f64,
    include_positive: bool,
) -> Result<(f64, f64)> {
    let d = rep.len();
    if rep_adv.len() != d || neg_orig.cols() != d || neg_adv.shape() != neg_orig.shape() {
        return Err(Error::shape(
            "contrastive_loss",
            neg_orig.shape(),
            neg_adv.shape(),
        ));
    }
    if neg_orig.rows() == 0 {
        return Err(Error::Invalid(
            "contrastive loss needs at least one negative".into(),
        ));
    }
    Ok((
        anchored_term(rep_adv, rep, neg_orig, temperature, include_positive),
        anchored_term(rep, rep_adv, neg_adv, temperature, include_positive),
    ))
}

pub fn contrastive_loss(
    rep: &[f64],
    rep_adv: &[f64],
    neg_orig: &Tensor,
    neg_adv: &Tensor,
    temperature: f64,
    include_positive: bool,
) -> Result<f64> {
    let (a, o) = contrastive_terms(
        rep,
        rep_adv,
        neg_orig,
        neg_adv,
        temperature,
        include_positive,
    )?;
    Ok(a + o)
}

fn anchored_term_on(
    tape: &mut GradTape,
    anchor: Var,
    positive: Var,
    negatives: &Tensor,
    temperature: f64,
    include_positive: bool,
) -> Result<Var> {
    let m = negatives.rows();
    let pt = tape.transpose(positive)?;
    let pos = tape.matmul(anchor, pt)?;
    let pos = tape.scale(pos, 1.0 / temperature);
    let negs_t = tape.constant(negatives.transpose()?);
    let negs = tape.matmul(anchor, negs_t)?;
    let negs = tape.scale(negs, 1.0 / temperature);
    let row = if include_positive {
        // [pos, negs] assembled with constant selector matrices.
        let mut first = Tensor::zeros(&[1, m + 1]);
        first.data_mut()[0] = 1.0;
        let mut shift = Tensor::zeros(&[m, m + 1]);
        for j in 0..m {
            shift.data_mut()[j * (m + 1) + j + 1] = 1.0;
        }
        let first = tape.constant(first);
        let shift = tape.constant(shift);
        let a = tape.matmul(pos, first)?;
        let b = tape.matmul(negs, shift)?;
        tape.add(a, b)?
    } else {
        negs
    };
    let lse = tape.log_sum_exp_rows(row)?;
    tape.sub(lse, pos)
}

/// Contrastive loss on the tape. `rep` and `rep_adv` are raw `1 x d` sentence
/// representations, normalized here; negatives are constants.
pub fn contrastive_loss_on(
    tape: &mut GradTape,
    rep: Var,
    rep_adv: Var,
    neg_orig: &Tensor,
    neg_adv: &Tensor,
    temperature: f64,
    include_positive: bool,
) -> Result<Var> {
    let r = tape.l2_normalize_rows(rep);
    let ra = tape.l2_normalize_rows(rep_adv);
    let a = anchored_term_on(tape, ra, r, neg_orig, temperature, include_positive)?;
    let o = anchored_term_on(tape, r, ra, neg_adv, temperature, include_positive)?;
    let total = tape.add(a, o)?;
    Ok(tape.sum(total))
}
