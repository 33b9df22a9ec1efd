//! Clean and robust accuracy, representation drift under attack, per-token
//! perturbation norms, and reconstruction of attacked inputs.

use std::fmt;

use crate::adversary::{kpgd_attack, AttackConfig, Delta};
use crate::data::{tokenize, Dataset, TokenizedExample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{argmax, forward_on, reconstruct_logits_on, ModelParams, ParamVars};
use crate::numerics::{GradTape, Tensor};

/// Forward pass outputs at `E + delta`.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub token_hidden: Tensor,
    pub sentence_rep: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn forward(
    params: &ModelParams,
    example: &TokenizedExample,
    delta: Option<&Delta>,
) -> Result<ForwardOutput> {
    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let d = delta.map(|d| tape.constant(d.values().clone()));
    let f = forward_on(&mut tape, &pv, &example.token_ids, &example.mask, d)?;
    Ok(ForwardOutput {
        token_hidden: tape.value(f.encoded.token_hidden).clone(),
        sentence_rep: tape.value(f.encoded.sentence).data().to_vec(),
        logits: tape.value(f.logits).data().to_vec(),
    })
}

pub fn predict(
    params: &ModelParams,
    example: &TokenizedExample,
    delta: Option<&Delta>,
) -> Result<usize> {
    Ok(argmax(&forward(params, example, delta)?.logits))
}

fn non_empty(dataset: &Dataset) -> Result<()> {
    if dataset.examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

pub fn accuracy(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    non_empty(dataset)?;
    let mut correct = 0;
    for ex in &dataset.examples {
        if predict(params, ex, None)? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Accuracy with every example classified at its own k-PGD perturbation.
pub fn robust_accuracy(
    params: &ModelParams,
    dataset: &Dataset,
    attack: &AttackConfig,
) -> Result<f64> {
    Ok(robustness_report(params, dataset, attack)?
        .robust_accuracy
        .expect("attack ran"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceSummary {
    pub mean_cosine: f64,
    pub mean_euclidean: f64,
    /// Examples left out because a representation had zero norm.
    pub skipped: usize,
}

/// Mean cosine similarity and Euclidean distance between clean and attacked
/// sentence representations (raw, not normalized).
pub fn representation_distance(
    params: &ModelParams,
    dataset: &Dataset,
    attack: &AttackConfig,
) -> Result<DistanceSummary> {
    let r = robustness_report(params, dataset, attack)?;
    Ok(DistanceSummary {
        mean_cosine: r.mean_cosine.expect("attack ran"),
        mean_euclidean: r.mean_euclidean.expect("attack ran"),
        skipped: r.skipped,
    })
}

/// Euclidean norm of every row of `delta`; padded rows are zero.
pub fn per_token_perturbation_norms(delta: &Delta) -> Vec<f64> {
    let v = delta.values();
    (0..v.rows())
        .map(|i| {
            if delta.mask()[i] {
                v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub clean_accuracy: f64,
    pub robust_accuracy: Option<f64>,
    pub mean_cosine: Option<f64>,
    pub mean_euclidean: Option<f64>,
    pub skipped: usize,
    pub attack: Option<AttackConfig>,
}

impl RobustnessReport {
    pub const CSV_HEADER: &'static str = "clean_acc,robust_acc,mean_cos,mean_euc";

    pub fn clean_only(clean_accuracy: f64) -> Self {
        RobustnessReport {
            clean_accuracy,
            robust_accuracy: None,
            mean_cosine: None,
            mean_euclidean: None,
            skipped: 0,
            attack: None,
        }
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{}",
            self.clean_accuracy,
            opt(self.robust_accuracy),
            opt(self.mean_cosine),
            opt(self.mean_euclidean)
        )
    }
}

impl fmt::Display for RobustnessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "clean accuracy   {:.4}", self.clean_accuracy)?;
        if let Some(a) = &self.attack {
            writeln!(
                f,
                "attack           k={} alpha={} epsilon={} gamma={} seed={}",
                a.k_steps, a.alpha, a.epsilon, a.gamma, a.seed
            )?;
        }
        if let Some(r) = self.robust_accuracy {
            writeln!(f, "robust accuracy  {r:.4}")?;
        }
        if let (Some(c), Some(e)) = (self.mean_cosine, self.mean_euclidean) {
            writeln!(f, "mean cosine      {c:.4}")?;
            writeln!(f, "mean euclidean   {e:.4}")?;
            writeln!(f, "skipped          {}", self.skipped)?;
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Attacks every example once and derives every metric from that single
/// perturbation.
pub fn robustness_report(
    params: &ModelParams,
    dataset: &Dataset,
    attack: &AttackConfig,
) -> Result<RobustnessReport> {
    non_empty(dataset)?;
    let (mut clean_ok, mut robust_ok, mut skipped) = (0usize, 0usize, 0usize);
    let (mut cos_sum, mut euc_sum) = (0.0, 0.0);
    for ex in &dataset.examples {
        let clean = forward(params, ex, None)?;
        let delta = kpgd_attack(ex, params, attack)?;
        let adv = forward(params, ex, Some(&delta))?;
        clean_ok += (argmax(&clean.logits) == ex.label) as usize;
        robust_ok += (argmax(&adv.logits) == ex.label) as usize;
        let (r, ra) = (&clean.sentence_rep, &adv.sentence_rep);
        let (nr, na) = (norm(r), norm(ra));
        if nr == 0.0 || na == 0.0 {
            skipped += 1;
            continue;
        }
        let dot: f64 = r.iter().zip(ra).map(|(a, b)| a * b).sum();
        cos_sum += (dot / (nr * na)).clamp(-1.0, 1.0);
        euc_sum += r
            .iter()
            .zip(ra)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    let n = dataset.len() as f64;
    let counted = (dataset.len() - skipped) as f64;
    let mean = |s: f64| if counted > 0.0 { s / counted } else { f64::NAN };
    Ok(RobustnessReport {
        clean_accuracy: clean_ok as f64 / n,
        robust_accuracy: Some(robust_ok as f64 / n),
        mean_cosine: Some(mean(cos_sum)),
        mean_euclidean: Some(mean(euc_sum)),
        skipped,
        attack: Some(*attack),
    })
}

/// Reconstructor argmax ids at the real, non-`[CLS]` positions, read at
/// `E + delta`.
pub fn reconstruct_ids(
    params: &ModelParams,
    example: &TokenizedExample,
    delta: Option<&Delta>,
) -> Result<Vec<usize>> {
    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let d = delta.map(|d| tape.constant(d.values().clone()));
    let f = forward_on(&mut tape, &pv, &example.token_ids, &example.mask, d)?;
    let logits = reconstruct_logits_on(&mut tape, &pv, f.encoded.token_hidden)?;
    let logits = tape.value(logits);
    Ok(example
        .mask
        .iter()
        .enumerate()
        .filter(|&(i, &m)| m && i != 0)
        .map(|(i, _)| argmax(logits.row(i)))
        .collect())
}

/// Tokens recovered from the attacked input.
pub fn reconstruct_text(
    params: &ModelParams,
    example: &TokenizedExample,
    attack: &AttackConfig,
    vocab: &Vocabulary,
) -> Result<Vec<String>> {
    let delta = kpgd_attack(example, params, attack)?;
    Ok(reconstruct_ids(params, example, Some(&delta))?
        .into_iter()
        .map(|id| vocab.token(id).unwrap_or("[UNK]").to_string())
        .collect())
}

/// Fraction of real, non-`[CLS]` tokens the reconstructor recovers from the
/// attacked input.
pub fn reconstruction_accuracy(
    params: &ModelParams,
    dataset: &Dataset,
    attack: &AttackConfig,
) -> Result<f64> {
    non_empty(dataset)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in &dataset.examples {
        let delta = kpgd_attack(ex, params, attack)?;
        let ids = reconstruct_ids(params, ex, Some(&delta))?;
        let originals = ex
            .token_ids
            .iter()
            .zip(&ex.mask)
            .skip(1)
            .filter(|(_, &m)| m);
        for (&pred, (&orig, _)) in ids.iter().zip(originals) {
            hit += (pred == orig) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::NoPositions);
    }
    Ok(hit as f64 / total as f64)
}

/// One line of reconstruction output. Predictions come from a baseline
/// classifier applied to the original and to the reconstructed text.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionRow {
    pub original: String,
    pub reconstructed: String,
    pub predictions: Option<(usize, usize)>,
}

impl ReconstructionRow {
    pub fn to_tsv(&self) -> String {
        match self.predictions {
            Some((a, b)) => format!("{}\t{}\t{a}\t{b}", self.original, self.reconstructed),
            None => format!("{}\t{}", self.original, self.reconstructed),
        }
    }
}

pub fn reconstruction_rows(
    params: &ModelParams,
    dataset: &Dataset,
    attack: &AttackConfig,
    vocab: &Vocabulary,
    baseline: Option<&ModelParams>,
) -> Result<Vec<ReconstructionRow>> {
    let mut rows = Vec::with_capacity(dataset.len());
    for ex in &dataset.examples {
        let original = crate::data::detokenize(&ex.token_ids, &ex.mask, vocab);
        let reconstructed = reconstruct_text(params, ex, attack, vocab)?.join(" ");
        let predictions = match baseline {
            Some(b) => {
                let (ids, mask) = tokenize(&reconstructed, vocab, b.config.max_len);
                let recon_ex = TokenizedExample {
                    index: ex.index,
                    token_ids: ids,
                    mask,
                    label: ex.label,
                };
                Some((predict(b, ex, None)?, predict(b, &recon_ex, None)?))
            }
            None => None,
        };
        rows.push(ReconstructionRow {
            original,
            reconstructed,
            predictions,
        });
    }
    Ok(rows)
}
