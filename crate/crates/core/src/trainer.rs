//! Training loop: objective per mode, Adam, the delayed contrastive schedule
//! and memory-bank lifecycle, history and checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::adversary::{freelb_generate, perturbed_loss, Delta, FreeLbConfig};
use crate::carl::{bank_init, contrastive_loss_on, sample_negatives, CarlConfig, MemoryBank};
use crate::checkpoint::{model_checkpoint, model_from_checkpoint, Checkpoint};
use crate::data::{Dataset, TokenizedExample};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::model::{
    forward_on, init_params, reconstruct_logits_on, reconstruction_loss_on, ModelConfig,
    ModelParams, ParamGrads, ParamVars,
};
use crate::numerics::{GradTape, Tensor, Var};
use crate::rng::{derive_rng, derive_seed};

const STREAM_BATCH: u64 = 1;
const STREAM_FREELB: u64 = 2;
const STREAM_NEGATIVES: u64 = 3;
const STREAM_BANK: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Plain,
    FreeLb,
    Carl,
    Rar,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Plain, Mode::FreeLb, Mode::Carl, Mode::Rar];

    pub fn is_adversarial(self) -> bool {
        self != Mode::Plain
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Plain => "plain",
            Mode::FreeLb => "freelb",
            Mode::Carl => "carl",
            Mode::Rar => "rar",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Mode::Plain),
            "freelb" => Ok(Mode::FreeLb),
            "carl" => Ok(Mode::Carl),
            "rar" => Ok(Mode::Rar),
            other => Err(Error::Invalid(format!(
                "unknown mode {other:?} (expected plain, freelb, carl or rar)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub freelb: FreeLbConfig,
    /// Required when `mode` is [`Mode::Carl`].
    pub carl: Option<CarlConfig>,
    /// Weight of the reconstruction loss.
    pub w_r: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Plain,
            freelb: FreeLbConfig::SST2,
            carl: None,
            w_r: 0.1,
            learning_rate: 1e-5,
            batch_size: 32,
            max_steps: 1000,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Invalid(msg.to_string()));
        if !(self.w_r >= 0.0) {
            return bad("w_r must be non-negative");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive");
        }
        self.freelb.validate()?;
        match (self.mode, &self.carl) {
            (Mode::Carl, None) => bad("mode carl needs a contrastive config"),
            (_, Some(c)) => c.validate(),
            _ => Ok(()),
        }
    }

    /// Whether the contrastive term is part of the objective at `step`.
    pub fn contrastive_active(&self, step: usize) -> bool {
        self.mode == Mode::Carl && self.carl.is_some_and(|c| step >= c.start_step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub l_c: f64,
    pub l_d: Option<f64>,
    pub l_r: Option<f64>,
}

pub fn total_loss(c: &LossComponents, mode: Mode, step: usize, cfg: &TrainConfig) -> Result<f64> {
    match mode {
        Mode::Plain | Mode::FreeLb => Ok(c.l_c),
        Mode::Carl => {
            let carl = cfg
                .carl
                .ok_or(Error::MissingComponent("contrastive config"))?;
            if step < carl.start_step {
                Ok(c.l_c)
            } else {
                Ok(c.l_c + c.l_d.ok_or(Error::MissingComponent("contrastive loss"))?)
            }
        }
        Mode::Rar => Ok(c.l_c
            + cfg.w_r
                * c.l_r
                    .ok_or(Error::MissingComponent("reconstruction loss"))?),
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = ParamGrads::zeros_like(params).tensors;
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let mut slots = params.tensors_mut();
    if slots.len() != grads.tensors.len() || slots.len() != state.m.len() {
        return Err(Error::Invalid(
            "gradients do not cover every parameter".into(),
        ));
    }
    for ((p, g), m) in slots.iter().zip(&grads.tensors).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (((p, g), m), v) in slots
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub step: usize,
    pub l_c: f64,
    pub l_d: Option<f64>,
    pub l_r: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
    pub warnings: Vec<String>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "step,l_c,l_d,l_r,val_acc";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step,
                r.l_c,
                opt(r.l_d),
                opt(r.l_r),
                opt(r.val_acc)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Validation accuracies recorded so far, as `(step, accuracy)`.
    pub fn evaluations(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.val_acc.map(|a| (r.step, a)))
            .collect()
    }
}

/// Example positions for `step`: consecutive slices of a stream of per-epoch
/// permutations, each seeded by `(seed, epoch)`.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let start = step * batch_size;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (start..start + batch_size)
        .map(|p| {
            let epoch = p / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut derive_rng(seed, &[STREAM_BATCH, epoch as u64]));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("just filled").1[p % n]
        })
        .collect()
}

/// Everything an example's objective depends on besides the parameters:
/// the perturbations at which the classification loss is evaluated, the
/// final perturbation, and the sampled negatives.
#[derive(Debug, Clone)]
pub struct ExamplePlan {
    pub deltas: Vec<Delta>,
    pub final_delta: Delta,
    pub negatives: Option<(Tensor, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct ExampleGradients {
    pub components: LossComponents,
    pub grads: ParamGrads,
    pub plan: ExamplePlan,
    /// Clean and adversarial sentence representations, when the contrastive
    /// term is active.
    pub reps: Option<(Vec<f64>, Vec<f64>)>,
}

struct ExtraTerms {
    l_d: Option<Var>,
    l_r: Option<Var>,
    reps: Option<(Var, Var)>,
}

/// Builds the contrastive and reconstruction terms on `tape` at the final
/// perturbation.
fn extra_terms_on(
    tape: &mut GradTape,
    pv: &ParamVars,
    ex: &TokenizedExample,
    plan: &ExamplePlan,
    cfg: &TrainConfig,
    step: usize,
) -> Result<ExtraTerms> {
    let mut out = ExtraTerms {
        l_d: None,
        l_r: None,
        reps: None,
    };
    let need_carl = cfg.contrastive_active(step);
    let need_rar = cfg.mode == Mode::Rar;
    if !need_carl && !need_rar {
        return Ok(out);
    }
    let d = tape.constant(plan.final_delta.values().clone());
    let adv = forward_on(tape, pv, &ex.token_ids, &ex.mask, Some(d))?;
    if need_rar {
        let logits = reconstruct_logits_on(tape, pv, adv.encoded.token_hidden)?;
        out.l_r = Some(reconstruction_loss_on(
            tape,
            logits,
            &ex.token_ids,
            &ex.mask,
        )?);
    }
    if need_carl {
        let carl = cfg.carl.expect("contrastive_active implies config");
        let (neg_orig, neg_adv) = plan
            .negatives
            .as_ref()
            .ok_or(Error::MissingComponent("negatives"))?;
        let clean = forward_on(tape, pv, &ex.token_ids, &ex.mask, None)?;
        let (r, ra) = (clean.encoded.sentence, adv.encoded.sentence);
        out.l_d = Some(contrastive_loss_on(
            tape,
            r,
            ra,
            neg_orig,
            neg_adv,
            carl.temperature,
            carl.include_positive,
        )?);
        out.reps = Some((r, ra));
    }
    Ok(out)
}

/// The example's total objective with every perturbation and negative held
/// fixed, as a function of the parameters alone.
pub fn example_objective(
    params: &ModelParams,
    ex: &TokenizedExample,
    plan: &ExamplePlan,
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let mut l_c = 0.0;
    for delta in &plan.deltas {
        let d = tape.constant(delta.values().clone());
        let f = forward_on(&mut tape, &pv, &ex.token_ids, &ex.mask, Some(d))?;
        let loss = tape.cross_entropy(f.logits, &[ex.label], &[true])?;
        l_c += tape.value(loss).item();
    }
    let extra = extra_terms_on(&mut tape, &pv, ex, plan, cfg, step)?;
    let components = LossComponents {
        l_c: l_c / plan.deltas.len() as f64,
        l_d: extra.l_d.map(|v| tape.value(v).item()),
        l_r: extra.l_r.map(|v| tape.value(v).item()),
    };
    total_loss(&components, cfg.mode, step, cfg)
}

/// Mean of [`example_objective`] over a batch.
pub fn batch_objective(
    params: &ModelParams,
    examples: &[&TokenizedExample],
    plans: &[ExamplePlan],
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    for (ex, plan) in examples.iter().zip(plans) {
        sum += example_objective(params, ex, plan, cfg, step)?;
    }
    Ok(sum / examples.len() as f64)
}

/// Gradients of one example's objective. The classification part comes from
/// the FreeLB loop's accumulated gradients; the contrastive and
/// reconstruction parts from one extra pass at the final perturbation.
pub fn example_gradients(
    params: &ModelParams,
    ex: &TokenizedExample,
    cfg: &TrainConfig,
    step: usize,
    bank: Option<&MemoryBank>,
    labels: &[usize],
) -> Result<ExampleGradients> {
    let dim = params.config.embed_dim;
    let len = ex.token_ids.len();
    let (l_c, mut grads, deltas, final_delta) = if cfg.mode.is_adversarial() {
        let mut rng = derive_rng(cfg.seed, &[STREAM_FREELB, step as u64, ex.index as u64]);
        let out = freelb_generate(ex, params, &cfg.freelb, &mut rng)?;
        (out.mean_loss, out.grads, out.visited, out.delta)
    } else {
        let zero = Delta::zeros(len, dim, &ex.mask);
        let out = perturbed_loss(params, ex, &zero, true)?;
        let grads = out.param_grads.expect("requested");
        (out.loss, grads, vec![zero.clone()], zero)
    };

    let negatives = if cfg.contrastive_active(step) {
        let carl = cfg.carl.expect("active");
        let bank = bank.ok_or(Error::BankUninitialized)?;
        let mut rng = derive_rng(cfg.seed, &[STREAM_NEGATIVES, step as u64, ex.index as u64]);
        let idx = sample_negatives(labels, ex.label, carl.m, &mut rng)?;
        Some(bank.gather(&idx)?)
    } else {
        None
    };
    let plan = ExamplePlan {
        deltas,
        final_delta,
        negatives,
    };

    let mut components = LossComponents {
        l_c,
        ..Default::default()
    };
    let mut reps = None;
    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, params, true);
    let extra = extra_terms_on(&mut tape, &pv, ex, &plan, cfg, step)?;
    let weighted = match (extra.l_d, extra.l_r) {
        (Some(d), None) => Some(d),
        (None, Some(r)) => Some(tape.scale(r, cfg.w_r)),
        (None, None) => None,
        (Some(_), Some(_)) => unreachable!("contrastive and reconstruction modes are exclusive"),
    };
    if let Some(loss) = weighted {
        let mut g = tape.backward(loss, pv.all())?;
        grads.add_scaled(&ParamGrads::from_map(&mut g, &pv)?, 1.0)?;
        components.l_d = extra.l_d.map(|v| tape.value(v).item());
        components.l_r = extra.l_r.map(|v| tape.value(v).item());
        reps = extra.reps.map(|(r, ra)| {
            (
                tape.value(r).data().to_vec(),
                tape.value(ra).data().to_vec(),
            )
        });
    }
    Ok(ExampleGradients {
        components,
        grads,
        plan,
        reps,
    })
}

#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub indices: Vec<usize>,
    pub components: LossComponents,
    pub grads: ParamGrads,
    pub examples: Vec<ExampleGradients>,
}

/// Averages per-example gradients and loss components over `indices`.
pub fn batch_gradients(
    params: &ModelParams,
    train: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    step: usize,
    bank: Option<&MemoryBank>,
    labels: &[usize],
) -> Result<BatchGradients> {
    let mut grads = ParamGrads::zeros_like(params);
    let mut sum = LossComponents::default();
    let mut examples = Vec::with_capacity(indices.len());
    for &i in indices {
        let eg = example_gradients(params, &train.examples[i], cfg, step, bank, labels)?;
        grads.add_scaled(&eg.grads, 1.0)?;
        sum.l_c += eg.components.l_c;
        let acc = |s: Option<f64>, v: Option<f64>| v.map(|v| s.unwrap_or(0.0) + v).or(s);
        sum.l_d = acc(sum.l_d, eg.components.l_d);
        sum.l_r = acc(sum.l_r, eg.components.l_r);
        examples.push(eg);
    }
    let b = indices.len() as f64;
    grads.scale(1.0 / b);
    Ok(BatchGradients {
        indices: indices.to_vec(),
        components: LossComponents {
            l_c: sum.l_c / b,
            l_d: sum.l_d.map(|v| v / b),
            l_r: sum.l_r.map(|v| v / b),
        },
        grads,
        examples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestModel {
    pub step: usize,
    pub val_acc: f64,
    pub params: ModelParams,
}

/// Complete training state; stepping is a pure function of it and the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub bank: Option<MemoryBank>,
    /// Index of the next step to run.
    pub step: usize,
    pub best: Option<BestModel>,
    pub history: TrainHistory,
}

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        let model = ModelConfig {
            reconstructor: model.reconstructor || config.mode == Mode::Rar,
            ..model
        };
        Self::from_params(init_params(model, config.seed)?, config)
    }

    pub fn from_params(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.mode == Mode::Rar && params.reconstructor.is_none() {
            return Err(Error::Invalid(
                "mode rar needs a model with a reconstructor head".into(),
            ));
        }
        let mut history = TrainHistory::default();
        if let (Mode::Carl, Some(c)) = (config.mode, config.carl) {
            if c.start_step >= config.max_steps {
                history.warnings.push(format!(
                    "contrastive start step {} is not below max_steps {}; the contrastive term never activates",
                    c.start_step, config.max_steps
                ));
            }
        }
        Ok(Trainer {
            adam: AdamState::new(&params),
            config,
            params,
            bank: None,
            step: 0,
            best: None,
            history,
        })
    }

    fn check_dataset(&self, train: &Dataset) -> Result<()> {
        if train.examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some((pos, _)) = train
            .examples
            .iter()
            .enumerate()
            .find(|(i, e)| e.index != *i)
        {
            return Err(Error::Invalid(format!(
                "training example at position {pos} does not carry bank index {pos}"
            )));
        }
        if let (Mode::Carl, Some(c)) = (self.config.mode, self.config.carl) {
            c.check_negatives(&train.labels(), train.num_classes)?;
        }
        Ok(())
    }

    /// Runs one optimizer step; evaluates on `val` when the step closes an
    /// evaluation interval.
    pub fn step(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<HistoryRecord> {
        self.check_dataset(train)?;
        let step = self.step;
        let cfg = self.config;
        if let (Mode::Carl, Some(c)) = (cfg.mode, cfg.carl) {
            if step == c.start_step && self.bank.is_none() {
                let seed = derive_seed(cfg.seed, &[STREAM_BANK]);
                self.bank = Some(bank_init(
                    &self.params,
                    train,
                    &cfg.freelb,
                    c.momentum,
                    seed,
                )?);
            }
        }
        let labels = train.labels();
        let indices = batch_indices(train.len(), cfg.batch_size, cfg.seed, step);
        let batch = batch_gradients(
            &self.params,
            train,
            &indices,
            &cfg,
            step,
            self.bank.as_ref(),
            &labels,
        )?;
        adam_step(
            &mut self.params,
            &batch.grads,
            &mut self.adam,
            cfg.learning_rate,
        )?;
        if let Some(bank) = self.bank.as_mut() {
            for (i, eg) in indices.iter().zip(&batch.examples) {
                if let Some((r, ra)) = &eg.reps {
                    bank.update(*i, r, ra)?;
                }
            }
        }
        self.step += 1;

        let closes_interval = self.step % cfg.eval_every == 0 || self.step == cfg.max_steps;
        let val_acc = match val {
            Some(v) if closes_interval => {
                let acc = accuracy(&self.params, v)?;
                if self.best.as_ref().map_or(true, |b| acc > b.val_acc) {
                    self.best = Some(BestModel {
                        step,
                        val_acc: acc,
                        params: self.params.clone(),
                    });
                }
                Some(acc)
            }
            _ => None,
        };
        let record = HistoryRecord {
            step,
            l_c: batch.components.l_c,
            l_d: batch.components.l_d,
            l_r: batch.components.l_r,
            val_acc,
        };
        self.history.records.push(record.clone());
        Ok(record)
    }

    /// Steps until `max_steps`, calling `on_eval` after each evaluation.
    pub fn run(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        mut on_eval: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.config.max_steps {
            let record = self.step(train, val)?;
            if record.val_acc.is_some() {
                on_eval(self)?;
            }
        }
        Ok(())
    }

    /// Parameters, optimizer moments, banks, step counter and best model.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = model_checkpoint(&self.params);
        ck.set("trainer.step", self.step);
        ck.set("trainer.seed", self.config.seed);
        ck.set("trainer.mode", self.config.mode);
        ck.set("adam.t", self.adam.t);
        let names: Vec<&str> = self.params.named().into_iter().map(|(n, _)| n).collect();
        for (name, (m, v)) in names.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            ck.push(format!("adam.m.{name}"), m.clone());
            ck.push(format!("adam.v.{name}"), v.clone());
        }
        if let Some(bank) = &self.bank {
            ck.set("bank.momentum", bank.momentum());
            ck.push("bank.orig", bank.orig().clone());
            ck.push("bank.adv", bank.adv().clone());
        }
        if let Some(best) = &self.best {
            ck.set("best.step", best.step);
            ck.set("best.val_acc", best.val_acc);
            for (name, t) in best.params.named() {
                ck.push(format!("best.{name}"), t.clone());
            }
        }
        ck
    }

    /// Restores a trainer written by [`Trainer::to_checkpoint`]. History
    /// before the checkpoint is not carried over.
    pub fn from_checkpoint(mut ck: Checkpoint, config: TrainConfig) -> Result<Self> {
        let step: usize = ck.parse("trainer.step")?;
        let t: u64 = ck.parse("adam.t")?;
        let m = ck.take_prefixed("adam.m.");
        let v = ck.take_prefixed("adam.v.");
        let bank_rows = ck.take_prefixed("bank.");
        let best_tensors = ck.take_prefixed("best.");
        let params = model_from_checkpoint(&ck)?;
        let mut trainer = Trainer::from_params(params, config)?;
        let config_of = trainer.params.config;
        let ordered = |named: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
            Ok(ModelParams::from_named(config_of, named)?
                .named()
                .into_iter()
                .map(|(_, t)| t.clone())
                .collect())
        };
        trainer.adam = AdamState {
            m: ordered(m)?,
            v: ordered(v)?,
            t,
        };
        trainer.step = step;
        if !bank_rows.is_empty() {
            let get = |n: &str| {
                bank_rows
                    .iter()
                    .find(|(k, _)| k == n)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::Checkpoint(format!("missing bank tensor {n:?}")))
            };
            let momentum: f64 = ck.parse("bank.momentum")?;
            trainer.bank = Some(MemoryBank::restore(get("orig")?, get("adv")?, momentum)?);
        }
        if !best_tensors.is_empty() {
            trainer.best = Some(BestModel {
                step: ck.parse("best.step")?,
                val_acc: ck.parse("best.val_acc")?,
                params: ModelParams::from_named(config_of, best_tensors)?,
            });
        }
        Ok(trainer)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best: Option<BestModel>,
    pub bank: Option<MemoryBank>,
    pub history: TrainHistory,
}

pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    model: ModelConfig,
    config: TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, config)?;
    trainer.run(train_set, Some(val_set), |_| Ok(()))?;
    Ok(TrainOutcome {
        params: trainer.params,
        best: trainer.best,
        bank: trainer.bank,
        history: trainer.history,
    })
}
