//! Perturbations on the input embeddings: FreeLB generation for training
//! and k-step PGD for attacks.
//!
//! Norms are Frobenius over the whole `len x embed_dim` perturbation. Rows at
//! padded positions are held at exactly zero through every operation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::TokenizedExample;
use crate::error::{Error, Result};
use crate::model::{forward_on, ModelParams, ParamGrads, ParamVars};
use crate::numerics::{GradTape, Tensor};
use crate::rng::derive_rng;

/// Gradients below this norm are treated as zero and the ascent step is skipped.
const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeLbConfig {
    /// Frobenius norm of the random initial perturbation.
    pub gamma: f64,
    /// Ascent step size.
    pub alpha: f64,
    /// Radius of the feasible ball; 0 leaves the norm unbounded.
    pub epsilon: f64,
    pub n_steps: usize,
}

impl FreeLbConfig {
    pub const SST2: FreeLbConfig = FreeLbConfig {
        gamma: 0.6,
        alpha: 0.1,
        epsilon: 0.0,
        n_steps: 2,
    };
    pub const YAHOO: FreeLbConfig = FreeLbConfig {
        gamma: 0.0,
        alpha: 0.01,
        epsilon: 0.0,
        n_steps: 3,
    };
    pub const YELP: FreeLbConfig = FreeLbConfig {
        gamma: 0.5,
        alpha: 0.05,
        epsilon: 0.0,
        n_steps: 3,
    };
    pub const AG_NEWS: FreeLbConfig = FreeLbConfig {
        gamma: 0.0,
        alpha: 0.01,
        epsilon: 0.0,
        n_steps: 3,
    };

    pub const GAMMA_BOUNDS: (f64, f64) = (0.0, 0.8);
    pub const ALPHA_BOUNDS: (f64, f64) = (0.01, 0.2);
    pub const EPSILON_BOUNDS: (f64, f64) = (0.0, 0.5);
    pub const N_STEPS_BOUNDS: (usize, usize) = (2, 4);

    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || self.alpha <= 0.0 || self.epsilon < 0.0 || self.n_steps == 0 {
            return Err(Error::Invalid(format!("invalid FreeLB config {self:?}")));
        }
        Ok(())
    }

    /// Whether every field lies inside the hyperparameter search region.
    pub fn within_search_bounds(&self) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        inside(self.gamma, Self::GAMMA_BOUNDS)
            && inside(self.alpha, Self::ALPHA_BOUNDS)
            && inside(self.epsilon, Self::EPSILON_BOUNDS)
            && (Self::N_STEPS_BOUNDS.0..=Self::N_STEPS_BOUNDS.1).contains(&self.n_steps)
    }
}

impl Default for FreeLbConfig {
    fn default() -> Self {
        FreeLbConfig::SST2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub k_steps: usize,
    pub alpha: f64,
    pub epsilon: f64,
    /// Random-start magnitude.
    pub gamma: f64,
    /// Seed of the random start; only consulted when `gamma > 0`.
    pub seed: u64,
}

impl AttackConfig {
    pub fn null() -> Self {
        AttackConfig {
            k_steps: 0,
            alpha: 0.1,
            epsilon: 0.0,
            gamma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.epsilon < 0.0 || self.gamma < 0.0 {
            return Err(Error::Invalid(format!("invalid attack config {self:?}")));
        }
        Ok(())
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            k_steps: 3,
            alpha: 0.1,
            epsilon: 0.1,
            gamma: 0.0,
            seed: 0,
        }
    }
}

/// Perturbation added to one example's embedded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    values: Tensor,
    mask: Vec<bool>,
}

impl Delta {
    pub fn zeros(len: usize, dim: usize, mask: &[bool]) -> Self {
        assert_eq!(mask.len(), len, "mask length");
        Delta {
            values: Tensor::zeros(&[len, dim]),
            mask: mask.to_vec(),
        }
    }

    /// Wraps `values`, zeroing rows at masked-out positions.
    pub fn from_values(mut values: Tensor, mask: &[bool]) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() != mask.len() {
            return Err(Error::shape("delta", values.shape(), &[mask.len()]));
        }
        zero_masked_rows(&mut values, mask);
        Ok(Delta {
            values,
            mask: mask.to_vec(),
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn norm(&self) -> f64 {
        self.values.frobenius_norm()
    }

    /// Rescales onto the ball of radius `epsilon` when outside it; `epsilon = 0`
    /// means unbounded.
    pub fn project(mut self, epsilon: f64) -> Self {
        let norm = self.norm();
        if epsilon > 0.0 && norm > epsilon {
            let c = epsilon / norm;
            self.values.data_mut().iter_mut().for_each(|v| *v *= c);
        }
        self
    }
}

fn zero_masked_rows(t: &mut Tensor, mask: &[bool]) {
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            t.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Uniform `(-1, 1)` noise on real rows, rescaled to Frobenius norm `gamma`.
pub fn init_perturbation(
    len: usize,
    dim: usize,
    gamma: f64,
    mask: &[bool],
    rng: &mut ChaCha8Rng,
) -> Delta {
    let mut delta = Delta::zeros(len, dim, mask);
    if gamma == 0.0 {
        return delta;
    }
    for i in 0..len {
        let keep = mask[i];
        for v in delta.values.row_mut(i) {
            let draw: f64 = rng.gen_range(-1.0..1.0);
            if keep {
                *v = draw;
            }
        }
    }
    let norm = delta.norm();
    if norm > 0.0 {
        let c = gamma / norm;
        delta.values.data_mut().iter_mut().for_each(|v| *v *= c);
    }
    delta
}

/// `delta + alpha * g / ||g||`, then projection. A vanishing gradient leaves
/// `delta` unchanged.
pub fn ascent_step(delta: &Delta, grad: &Tensor, alpha: f64, epsilon: f64) -> Result<Delta> {
    if grad.shape() != delta.values.shape() {
        return Err(Error::shape(
            "ascent_step",
            delta.values.shape(),
            grad.shape(),
        ));
    }
    let mut g = grad.clone();
    zero_masked_rows(&mut g, &delta.mask);
    let norm = g.frobenius_norm();
    if norm < MIN_GRAD_NORM {
        return Ok(delta.clone());
    }
    let mut next = delta.clone();
    next.values.add_scaled_assign(&g, alpha / norm)?;
    Ok(next.project(epsilon))
}

/// Classification loss at `E + delta` with its gradient on `delta` and,
/// when requested, on every parameter.
#[derive(Debug, Clone)]
pub struct PerturbedLoss {
    pub loss: f64,
    pub delta_grad: Tensor,
    pub param_grads: Option<ParamGrads>,
}

pub fn perturbed_loss(
    params: &ModelParams,
    example: &TokenizedExample,
    delta: &Delta,
    with_params: bool,
) -> Result<PerturbedLoss> {
    let mut tape = GradTape::new();
    let pv = ParamVars::register(&mut tape, params, with_params);
    let d = tape.leaf(delta.values.clone());
    let f = forward_on(&mut tape, &pv, &example.token_ids, &example.mask, Some(d))?;
    let loss = tape.cross_entropy(f.logits, &[example.label], &[true])?;
    let mut leaves = vec![d];
    if with_params {
        leaves.extend_from_slice(pv.all());
    }
    let mut grads = tape.backward(loss, &leaves)?;
    let delta_grad = grads.take(d).expect("delta is a requested leaf");
    let param_grads = if with_params {
        Some(ParamGrads::from_map(&mut grads, &pv)?)
    } else {
        None
    };
    Ok(PerturbedLoss {
        loss: tape.value(loss).item(),
        delta_grad,
        param_grads,
    })
}

#[derive(Debug, Clone)]
pub struct FreeLbOutcome {
    /// Perturbation after the last ascent step.
    pub delta: Delta,
    /// Parameter gradients averaged over the ascent steps.
    pub grads: ParamGrads,
    /// Mean of the per-step adversarial losses.
    pub mean_loss: f64,
    pub losses: Vec<f64>,
    /// Perturbations at which each step's loss was evaluated.
    pub visited: Vec<Delta>,
}

/// Multi-step ascent that accumulates "free" parameter gradients at every
/// iteration without touching the parameters.
pub fn freelb_generate(
    example: &TokenizedExample,
    params: &ModelParams,
    cfg: &FreeLbConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FreeLbOutcome> {
    cfg.validate()?;
    let len = example.token_ids.len();
    let mut delta = init_perturbation(len, params.config.embed_dim, cfg.gamma, &example.mask, rng);
    let mut grads = ParamGrads::zeros_like(params);
    let mut losses = Vec::with_capacity(cfg.n_steps);
    let mut visited = Vec::with_capacity(cfg.n_steps);
    for _ in 0..cfg.n_steps {
        let step = perturbed_loss(params, example, &delta, true)?;
        grads.add_scaled(step.param_grads.as_ref().expect("requested"), 1.0)?;
        losses.push(step.loss);
        let next = ascent_step(&delta, &step.delta_grad, cfg.alpha, cfg.epsilon)?;
        visited.push(std::mem::replace(&mut delta, next));
    }
    let n = cfg.n_steps as f64;
    grads.scale(1.0 / n);
    Ok(FreeLbOutcome {
        delta,
        grads,
        mean_loss: losses.iter().sum::<f64>() / n,
        losses,
        visited,
    })
}

/// The perturbation `freelb_generate` would reach, without accumulating
/// parameter gradients. Consumes `rng` identically.
pub fn freelb_perturbation(
    example: &TokenizedExample,
    params: &ModelParams,
    cfg: &FreeLbConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Delta> {
    cfg.validate()?;
    let len = example.token_ids.len();
    let mut delta = init_perturbation(len, params.config.embed_dim, cfg.gamma, &example.mask, rng);
    for _ in 0..cfg.n_steps {
        let step = perturbed_loss(params, example, &delta, false)?;
        delta = ascent_step(&delta, &step.delta_grad, cfg.alpha, cfg.epsilon)?;
    }
    Ok(delta)
}

/// k-step projected gradient ascent on the classification loss, parameters
/// frozen.
pub fn kpgd_attack(
    example: &TokenizedExample,
    params: &ModelParams,
    cfg: &AttackConfig,
) -> Result<Delta> {
    cfg.validate()?;
    let len = example.token_ids.len();
    let mut delta = if cfg.gamma > 0.0 {
        let mut rng = derive_rng(cfg.seed, &[example.index as u64]);
        init_perturbation(
            len,
            params.config.embed_dim,
            cfg.gamma,
            &example.mask,
            &mut rng,
        )
        .project(cfg.epsilon)
    } else {
        Delta::zeros(len, params.config.embed_dim, &example.mask)
    };
    for _ in 0..cfg.k_steps {
        let step = perturbed_loss(params, example, &delta, false)?;
        delta = ascent_step(&delta, &step.delta_grad, cfg.alpha, cfg.epsilon)?;
    }
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CLS_ID, PAD_ID};
    use crate::model::{init_params, ModelConfig};
    use rand::SeedableRng;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            embed_dim: 6,
            hidden_dim: 6,
            num_classes: 2,
            max_len: 7,
            reconstructor: false,
        }
    }

    fn example() -> TokenizedExample {
        TokenizedExample {
            index: 3,
            token_ids: vec![CLS_ID, 5, 9, 12, 5, PAD_ID, PAD_ID],
            mask: vec![true, true, true, true, true, false, false],
            label: 1,
        }
    }

    fn params() -> ModelParams {
        let mut p = init_params(config(), 4).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
        p
    }

    fn assert_pad_rows_zero(d: &Delta) {
        for (i, &m) in d.mask().iter().enumerate() {
            if !m {
                assert!(d.values().row(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_perturbation_norms() {
        let mask = example().mask;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = init_perturbation(7, 6, 0.0, &mask, &mut rng);
        assert_eq!(d.values(), &Tensor::zeros(&[7, 6]));

        let d = init_perturbation(7, 6, FreeLbConfig::SST2.gamma, &mask, &mut rng);
        assert!((d.norm() - 0.6).abs() < 1e-12);
        assert_pad_rows_zero(&d);
    }

    #[test]
    fn ascent_step_normalizes_direction() {
        let mask = vec![true; 3];
        let d = Delta::zeros(3, 2, &mask);
        let mut g = Tensor::zeros(&[3, 2]);
        g.data_mut()[3] = 5.0;
        let next = ascent_step(&d, &g, 0.1, 0.0).unwrap();
        assert!((next.norm() - 0.1).abs() < 1e-15);
        assert!((next.values().data()[3] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ascent_step_projects_and_skips_zero_gradient() {
        let mask = example().mask;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = init_perturbation(7, 6, 0.3, &mask, &mut rng);
        let g = Tensor::full(&[7, 6], 2.0);
        let next = ascent_step(&d, &g, 0.2, 0.05).unwrap();
        assert!(next.norm() <= 0.05 + 1e-12);
        assert_pad_rows_zero(&next);

        let same = ascent_step(&d, &Tensor::zeros(&[7, 6]), 0.2, 0.05).unwrap();
        assert_eq!(same, d);
    }

    #[test]
    fn ascent_step_rejects_shape_mismatch() {
        let d = Delta::zeros(3, 2, &[true; 3]);
        assert!(ascent_step(&d, &Tensor::zeros(&[2, 3]), 0.1, 0.0).is_err());
    }

    #[test]
    fn gradient_only_on_pad_rows_is_degenerate() {
        let mask = example().mask;
        let d = Delta::zeros(7, 6, &mask);
        let mut g = Tensor::zeros(&[7, 6]);
        g.row_mut(6).iter_mut().for_each(|v| *v = 1.0);
        assert_eq!(ascent_step(&d, &g, 0.1, 0.0).unwrap(), d);
    }

    #[test]
    fn single_step_without_noise_gives_clean_gradients() {
        let p = params();
        let ex = example();
        let cfg = FreeLbConfig {
            gamma: 0.0,
            alpha: 0.1,
            epsilon: 0.0,
            n_steps: 1,
        };
        let out = freelb_generate(&ex, &p, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let clean = perturbed_loss(&p, &ex, &Delta::zeros(7, 6, &ex.mask), true).unwrap();
        assert_eq!(out.grads, clean.param_grads.unwrap());
        assert_eq!(out.mean_loss, clean.loss);
    }

    #[test]
    fn averaged_gradients_equal_per_step_mean() {
        let p = params();
        let ex = example();
        let cfg = FreeLbConfig {
            gamma: 0.4,
            alpha: 0.1,
            epsilon: 0.5,
            n_steps: 3,
        };
        let out = freelb_generate(&ex, &p, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out.visited.len(), 3);
        let mut sum = ParamGrads::zeros_like(&p);
        for d in &out.visited {
            let step = perturbed_loss(&p, &ex, d, true).unwrap();
            sum.add_scaled(step.param_grads.as_ref().unwrap(), 1.0)
                .unwrap();
        }
        sum.scale(1.0 / 3.0);
        assert_eq!(sum, out.grads);
        for d in out.visited.iter().chain([&out.delta]) {
            assert!(d.norm() <= 0.5 + 1e-12);
            assert_pad_rows_zero(d);
        }
    }

    #[test]
    fn perturbation_only_path_reaches_same_delta() {
        let p = params();
        let ex = example();
        let full = freelb_generate(
            &ex,
            &p,
            &FreeLbConfig::YELP,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let only = freelb_perturbation(
            &ex,
            &p,
            &FreeLbConfig::YELP,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert_eq!(full.delta, only);
    }

    #[test]
    fn freelb_is_deterministic() {
        let p = params();
        let ex = example();
        let run = || {
            let out = freelb_generate(
                &ex,
                &p,
                &FreeLbConfig::SST2,
                &mut ChaCha8Rng::seed_from_u64(9),
            )
            .unwrap();
            (out.delta, out.grads, out.losses)
        };
        assert_eq!(run(), run());
        assert_eq!(run().2.len(), 2);
    }

    #[test]
    fn kpgd_zero_steps_is_zero() {
        let p = params();
        let ex = example();
        let cfg = AttackConfig {
            k_steps: 0,
            gamma: 0.0,
            ..AttackConfig::default()
        };
        let d = kpgd_attack(&ex, &p, &cfg).unwrap();
        assert_eq!(d.values(), &Tensor::zeros(&[7, 6]));
    }

    #[test]
    fn kpgd_respects_radius_and_raises_loss() {
        let p = params();
        let ex = example();
        let cfg = AttackConfig {
            k_steps: 3,
            alpha: 0.05,
            epsilon: 0.1,
            gamma: 0.0,
            seed: 0,
        };
        let d = kpgd_attack(&ex, &p, &cfg).unwrap();
        assert!(d.norm() <= 0.1 + 1e-12);
        assert_pad_rows_zero(&d);
        let clean = perturbed_loss(&p, &ex, &Delta::zeros(7, 6, &ex.mask), false).unwrap();
        let attacked = perturbed_loss(&p, &ex, &d, false).unwrap();
        assert!(attacked.loss > clean.loss);

        let random_start = AttackConfig { gamma: 0.3, ..cfg };
        let a = kpgd_attack(&ex, &p, &random_start).unwrap();
        assert_eq!(a, kpgd_attack(&ex, &p, &random_start).unwrap());
        assert!(a.norm() <= 0.1 + 1e-12);
    }

    #[test]
    fn presets_match_search_region() {
        assert!(FreeLbConfig::SST2.within_search_bounds());
        assert!(FreeLbConfig::YELP.within_search_bounds());
        assert!(FreeLbConfig::YAHOO.within_search_bounds());
        assert!(!FreeLbConfig {
            n_steps: 5,
            ..FreeLbConfig::SST2
        }
        .within_search_bounds());
        assert!(!FreeLbConfig {
            gamma: 0.9,
            ..FreeLbConfig::SST2
        }
        .within_search_bounds());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn projection_is_idempotent_and_masks_hold(
                vals in prop::collection::vec(-1.0f64..1.0, 12),
                eps in 0.01f64..2.0,
                pad in 1usize..4,
            ) {
                let mask: Vec<bool> = (0..4).map(|i| i < 4 - pad).collect();
                let d = Delta::from_values(Tensor::new(vec![4, 3], vals).unwrap(), &mask).unwrap();
                let once = d.clone().project(eps);
                prop_assert!(once.norm() <= eps + 1e-12);
                let twice = once.clone().project(eps);
                for (a, b) in once.values().data().iter().zip(twice.values().data()) {
                    prop_assert!((a - b).abs() <= 1e-15);
                }
                for (i, &m) in mask.iter().enumerate() {
                    if !m {
                        prop_assert!(once.values().row(i).iter().all(|&v| v == 0.0));
                    }
                }
            }
        }
    }
}
