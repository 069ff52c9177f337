//! Training steps.
//!
//! Meta mode runs the three-step update per batch:
//!
//! 1. lookahead: `θ̂ = θ − α₁ Σ w_i g_i` with `w_i = W(h_2i, h_2i+1; Θ_c)`
//!    and `g_i = ∇_θ (1/2N) L_i`;
//! 2. `Θ_c ← Θ_c − α₂ ∇_{Θ_c} L_valid(θ̂)`;
//! 3. `θ ← θ − α₁ Σ w'_i g_i` with weights recomputed from the new `Θ_c`.
//!
//! `H` is held constant with respect to `Θ_c`, so `Θ_c` reaches the
//! validation loss only through the weights and the chain rule collapses to
//! `∇_{Θ_c} L_valid = Σ_i c_i ∇_{Θ_c} w_i` with
//! `c_i = −α₁ ⟨∇_θ L_valid(θ̂), g_i⟩`. Only first-order gradients are used.

use crate::error::{Error, Result};
use crate::loss::{pairwise_losses_on, validation_loss_on};
use crate::nets::{
    encode_on, images_to_tensor, project_on, split_pairs, weigh_batch, weigh_on, ArchConfig, ModelParams,
    WeightNetParams,
};
use crate::pairgen::PairBatch;
use crate::tensor::{ParamSet, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Meta,
    Plain,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Meta => "meta",
            Mode::Plain => "plain",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meta" => Ok(Mode::Meta),
            "plain" => Ok(Mode::Plain),
            _ => Err(Error::Config(format!("unknown mode {s:?}, expected meta or plain"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub mode: Mode,
    /// SGD step for Θ_m in meta mode.
    pub alpha1: f64,
    /// SGD step for Θ_c.
    pub alpha2: f64,
    /// Adam step for Θ_m in plain mode.
    pub adam_lr: f64,
    /// Decoupled weight decay, plain mode only.
    pub weight_decay: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            mode: Mode::Meta,
            alpha1: 0.1,
            alpha2: 6e-5,
            adam_lr: 1e-3,
            weight_decay: 1e-4,
            tau: 0.5,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("adam_lr", self.adam_lr),
            ("tau", self.tau),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl Adam {
    pub fn new(like: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn from_config(like: &ParamSet, cfg: &OptimConfig) -> Self {
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            ..Adam::new(like, cfg.adam_lr, cfg.weight_decay)
        }
    }

    /// Updates only the tensors whose index is in `active` (all when `None`).
    pub fn step_masked(&mut self, params: &mut ParamSet, grads: &ParamSet, active: Option<&[usize]>) -> Result<()> {
        params.dot(grads)?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if active.is_some_and(|a| !a.contains(&i)) {
                continue;
            }
            let g = grads.get(i).data();
            let m = self.m.tensor_mut(i).data_mut();
            for (mk, gk) in m.iter_mut().zip(g) {
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
            }
            let v = self.v.tensor_mut(i).data_mut();
            for (vk, gk) in v.iter_mut().zip(g) {
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
            }
            let (m, v) = (self.m.get(i).data(), self.v.get(i).data());
            let p = params.tensor_mut(i).data_mut();
            for k in 0..p.len() {
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[k]);
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "adam" });
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        self.step_masked(params, grads, None)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub arch: ArchConfig,
    pub theta_m: ModelParams,
    pub theta_c: WeightNetParams,
    pub step: u64,
    /// Plain-mode optimizer state for Θ_m.
    pub adam: Adam,
}

impl TrainState {
    pub fn new(arch: ArchConfig, theta_m: ModelParams, theta_c: WeightNetParams, cfg: &OptimConfig) -> Result<Self> {
        theta_m.check(&arch)?;
        theta_c.check(&arch)?;
        let adam = Adam::from_config(&theta_m.0, cfg);
        Ok(TrainState {
            arch,
            theta_m,
            theta_c,
            step: 0,
            adam,
        })
    }
}

/// Forward pass and the per-pair gradients of one batch.
#[derive(Clone, Debug)]
pub struct PerPairGrads {
    /// `[2N, D]`, rows in pair order.
    pub h: Tensor,
    /// `[2N, d]`.
    pub z: Tensor,
    /// `L_i` for every pair.
    pub losses: Vec<f64>,
    /// `∇_θ (1/2N) L_i` for every pair.
    pub grads: Vec<ParamSet>,
}

impl PerPairGrads {
    /// `Σ_i w_i g_i`.
    pub fn combine(&self, weights: &[f64]) -> Result<ParamSet> {
        if weights.len() != self.grads.len() {
            return Err(Error::ShapeMismatch {
                op: "combine",
                left: vec![self.grads.len()],
                right: vec![weights.len()],
            });
        }
        let mut out = self.grads[0].zeros_like();
        for (g, &w) in self.grads.iter().zip(weights) {
            out.axpy(w, g)?;
        }
        Ok(out)
    }

    pub fn unweighted_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / (2 * self.losses.len()) as f64
    }
}

/// One forward pass, then one backward pass per pair on `(1/2N) L_i`.
pub fn per_pair_gradients(
    arch: &ArchConfig,
    theta_m: &ModelParams,
    batch: &PairBatch,
    tau: f64,
) -> Result<PerPairGrads> {
    if batch.is_empty() {
        return Err(Error::invalid("empty pair batch"));
    }
    let n = batch.len();
    let mut tape = Tape::new();
    let m = theta_m.0.register(&mut tape, 0)?;
    let x = tape.constant(images_to_tensor(&batch.images())?);
    let h = encode_on(&mut tape, arch, &m, x)?;
    let z = project_on(&mut tape, arch, &m, h)?;
    let l = pairwise_losses_on(&mut tape, z, tau)?;
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let li = tape.slice(l, 0, i, i + 1)?;
        let scaled = tape.mul_scalar(li, 1.0 / (2 * n) as f64)?;
        let g = tape.backward(scaled)?;
        grads.push(theta_m.0.gradients_from(&g, 0)?);
    }
    Ok(PerPairGrads {
        h: tape.value(h)?.clone(),
        z: tape.value(z)?.clone(),
        losses: tape.value(l)?.data().to_vec(),
        grads,
    })
}

/// `θ − α Σ w_i g_i`.
pub fn weighted_sgd_step(theta_m: &ModelParams, pp: &PerPairGrads, weights: &[f64], alpha: f64) -> Result<ModelParams> {
    let mut next = theta_m.0.clone();
    next.axpy(-alpha, &pp.combine(weights)?)?;
    Ok(ModelParams(next))
}

#[derive(Clone, Debug)]
pub struct Lookahead {
    pub theta_hat: ModelParams,
    pub weights: Vec<f64>,
    pub per_pair: PerPairGrads,
}

pub fn lookahead_step(
    arch: &ArchConfig,
    theta_m: &ModelParams,
    theta_c: &WeightNetParams,
    batch: &PairBatch,
    alpha1: f64,
    tau: f64,
) -> Result<Lookahead> {
    let per_pair = per_pair_gradients(arch, theta_m, batch, tau)?;
    let weights = weigh_batch(theta_c, &per_pair.h)?;
    let theta_hat = weighted_sgd_step(theta_m, &per_pair, &weights, alpha1)?;
    Ok(Lookahead {
        theta_hat,
        weights,
        per_pair,
    })
}

/// Unweighted loss of `batch` under `theta_m` and its gradient.
pub fn loss_and_grad(arch: &ArchConfig, theta_m: &ModelParams, batch: &PairBatch, tau: f64) -> Result<(f64, ParamSet)> {
    let mut tape = Tape::new();
    let m = theta_m.0.register(&mut tape, 0)?;
    let x = tape.constant(images_to_tensor(&batch.images())?);
    let h = encode_on(&mut tape, arch, &m, x)?;
    let z = project_on(&mut tape, arch, &m, h)?;
    let loss = validation_loss_on(&mut tape, z, tau)?;
    let g = tape.backward(loss)?;
    Ok((tape.value(loss)?.item(), theta_m.0.gradients_from(&g, 0)?))
}

/// Unweighted loss only.
pub fn batch_loss(arch: &ArchConfig, theta_m: &ModelParams, batch: &PairBatch, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let m = theta_m.0.register_const(&mut tape);
    let x = tape.constant(images_to_tensor(&batch.images())?);
    let h = encode_on(&mut tape, arch, &m, x)?;
    let z = project_on(&mut tape, arch, &m, h)?;
    let loss = validation_loss_on(&mut tape, z, tau)?;
    Ok(tape.value(loss)?.item())
}

#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub grad: ParamSet,
    /// `c_i = −α₁ ⟨g_v, g_i⟩`.
    pub coeffs: Vec<f64>,
    /// `L_valid(θ̂)`.
    pub valid_loss: f64,
}

/// `∇_{Θ_c} Σ_i c_i w_i` with `H` fixed.
pub fn weight_net_vjp(theta_c: &WeightNetParams, h: &Tensor, coeffs: &[f64]) -> Result<ParamSet> {
    let mut tape = Tape::new();
    let c = theta_c.0.register(&mut tape, 0)?;
    let hv = tape.constant(h.clone());
    let (a, b) = split_pairs(&mut tape, hv)?;
    let w = weigh_on(&mut tape, &c, a, b)?;
    let n = tape.value(w)?.len();
    if coeffs.len() != n {
        return Err(Error::ShapeMismatch {
            op: "weight_net_vjp",
            left: vec![n],
            right: vec![coeffs.len()],
        });
    }
    let cv = tape.constant(Tensor::new(vec![n, 1], coeffs.to_vec())?);
    let prod = tape.mul(w, cv)?;
    let total = tape.sum(prod)?;
    let g = tape.backward(total)?;
    theta_c.0.gradients_from(&g, 0)
}

#[allow(clippy::too_many_arguments)]
pub fn meta_gradient(
    arch: &ArchConfig,
    theta_hat: &ModelParams,
    theta_c: &WeightNetParams,
    per_pair: &PerPairGrads,
    valid_batch: &PairBatch,
    alpha1: f64,
    tau: f64,
) -> Result<MetaGradient> {
    let (valid_loss, gv) = loss_and_grad(arch, theta_hat, valid_batch, tau)?;
    let coeffs = per_pair
        .grads
        .iter()
        .map(|g| gv.dot(g).map(|d| -alpha1 * d))
        .collect::<Result<Vec<_>>>()?;
    let grad = weight_net_vjp(theta_c, &per_pair.h, &coeffs)?;
    Ok(MetaGradient {
        grad,
        coeffs,
        valid_loss,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Unweighted loss of the training batch before the update.
    pub train_loss: f64,
    /// Validation loss at the lookahead parameters (meta mode).
    pub valid_loss: Option<f64>,
    /// Weights used for the final update (meta mode).
    pub weights: Vec<f64>,
}

pub fn meta_train_step(
    state: &mut TrainState,
    train_batch: &PairBatch,
    valid_batch: &PairBatch,
    cfg: &OptimConfig,
) -> Result<StepReport> {
    if cfg.mode != Mode::Meta {
        return Err(Error::invalid("meta_train_step called in plain mode"));
    }
    let arch = &state.arch;
    // (1) lookahead with the current weighting net
    let la = lookahead_step(arch, &state.theta_m, &state.theta_c, train_batch, cfg.alpha1, cfg.tau)?;
    // (2) weighting-net update through the lookahead
    let mg = meta_gradient(arch, &la.theta_hat, &state.theta_c, &la.per_pair, valid_batch, cfg.alpha1, cfg.tau)?;
    let mut theta_c = state.theta_c.0.clone();
    theta_c.axpy(-cfg.alpha2, &mg.grad)?;
    let theta_c = WeightNetParams(theta_c);
    // (3) main update with the new weights and the cached per-pair gradients
    let weights = weigh_batch(&theta_c, &la.per_pair.h)?;
    let theta_m = weighted_sgd_step(&state.theta_m, &la.per_pair, &weights, cfg.alpha1)?;

    state.theta_c = theta_c;
    state.theta_m = theta_m;
    state.step += 1;
    Ok(StepReport {
        step: state.step,
        train_loss: la.per_pair.unweighted_loss(),
        valid_loss: Some(mg.valid_loss),
        weights,
    })
}

/// One AdamW step on the unweighted loss.
pub fn plain_train_step(state: &mut TrainState, batch: &PairBatch, cfg: &OptimConfig) -> Result<StepReport> {
    if cfg.mode != Mode::Plain {
        return Err(Error::invalid("plain_train_step called in meta mode"));
    }
    let (loss, g) = loss_and_grad(&state.arch, &state.theta_m, batch, cfg.tau)?;
    state.adam.step(&mut state.theta_m.0, &g)?;
    state.step += 1;
    Ok(StepReport {
        step: state.step,
        train_loss: loss,
        valid_loss: None,
        weights: Vec::new(),
    })
}
