//! Training objectives: double-Q target and TD loss, reward and discount
//! regression, residual transition alignment, Gaussian-potential
//! uniformity and the consecutive-distance hinge, summed into one scalar.
//!
//! The Q-network sees a detached copy of the encoding, so the encoder is
//! shaped only by the model-based terms.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{rmsprop_step, AutodiffError, Mode, RmsPropState, Tape, Tensor, Var};
use crate::nets::{argmax, BoundMlp, ModelParams, NetError};
use crate::novelty::TransitionRecord;

pub const BATCH_SIZE: usize = 64;
pub const DEFAULT_C_D1: f64 = 5.0;
pub const DEFAULT_OMEGA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss: {0:?}")]
    NonFinite(LossReport),
}

/// Per-term multipliers; all 1 gives the plain sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub q: f64,
    pub reward: f64,
    pub discount: f64,
    pub transition: f64,
    pub uniformity: f64,
    pub csc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            q: 1.0,
            reward: 1.0,
            discount: 1.0,
            transition: 1.0,
            uniformity: 1.0,
            csc: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub c_d1: f64,
    pub omega: f64,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            c_d1: DEFAULT_C_D1,
            omega: DEFAULT_OMEGA,
            weights: LossWeights::default(),
        }
    }
}

/// Values of every term from one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_q: f64,
    pub l_r: f64,
    pub l_g: f64,
    pub l_tau: f64,
    pub l_d1: f64,
    pub l_csc: f64,
    pub total: f64,
    /// `l_tau` recomputed with dropout off; this is what the accuracy gate
    /// averages.
    #[serde(default)]
    pub l_tau_eval: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.l_q,
            self.l_r,
            self.l_g,
            self.l_tau,
            self.l_d1,
            self.l_csc,
            self.total,
            self.l_tau_eval,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Unweighted sum of the six components.
    pub fn component_sum(&self) -> f64 {
        self.l_r + self.l_g + self.l_tau + self.l_q + self.l_d1 + self.l_csc
    }
}

/// Which scalar to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Q,
    Reward,
    Discount,
    Transition,
    Uniformity,
    Csc,
    Total,
}

impl LossKind {
    pub const COMPONENTS: [LossKind; 6] = [
        LossKind::Q,
        LossKind::Reward,
        LossKind::Discount,
        LossKind::Transition,
        LossKind::Uniformity,
        LossKind::Csc,
    ];
}

fn stack(batch: &[&TransitionRecord], f: impl Fn(&TransitionRecord) -> &[f64]) -> Tensor {
    let width = f(batch[0]).len();
    let mut data = Vec::with_capacity(batch.len() * width);
    for r in batch {
        data.extend_from_slice(f(r));
    }
    Tensor::from_parts(vec![batch.len(), width], data)
}

fn column(batch: &[&TransitionRecord], f: impl Fn(&TransitionRecord) -> f64) -> Tensor {
    Tensor::from_parts(vec![batch.len(), 1], batch.iter().map(|r| f(r)).collect())
}

fn actions_one_hot(batch: &[&TransitionRecord], n_actions: usize) -> Tensor {
    let mut data = vec![0.0; batch.len() * n_actions];
    for (i, r) in batch.iter().enumerate() {
        data[i * n_actions + r.action] = 1.0;
    }
    Tensor::from_parts(vec![batch.len(), n_actions], data)
}

/// Double-Q targets `Y = r + gamma * Q_target(e_target(s'), argmax_a Q(e(s'), a))`
/// with `r = r_extr + r_intr`. Plain values: nothing here is differentiated.
pub fn ddqn_target(batch: &[&TransitionRecord], params: &ModelParams) -> Result<Vec<f64>, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let next = stack(batch, |r| &r.next_obs);
    let x_next = params.encode_batch(next.data(), batch.len())?;
    ddqn_target_with(batch, params, &next, &x_next)
}

/// [`ddqn_target`] given the stacked next observations and their live
/// encodings.
fn ddqn_target_with(
    batch: &[&TransitionRecord],
    params: &ModelParams,
    next: &Tensor,
    x_next: &[f64],
) -> Result<Vec<f64>, LossError> {
    let n = batch.len();
    let x_next_target = params.encode_target_batch(next.data(), n)?;
    let q_live = params.q_values_batch(x_next, n)?;
    let q_target = params.q_target_batch(&x_next_target, n)?;
    let n_a = params.n_actions();
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let best = argmax(&q_live[i * n_a..(i + 1) * n_a]);
            r.r_extr + r.r_intr + r.discount * q_target[i * n_a + best]
        })
        .collect())
}

/// `mean((pred - target)^2)` over all elements.
pub fn mse_term(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, LossError> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Mean over rows of `||pred - target||^2`.
pub fn transition_term(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, LossError> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    let rows = tape.row_sum(sq);
    Ok(tape.mean(rows))
}

fn transition_loss_eval(
    params: &ModelParams,
    tape: &Tape,
    x: Var,
    x_next: Var,
    xa: Var,
    rows: usize,
) -> Result<f64, LossError> {
    let delta = params.transition.forward_eval(tape.value(xa).data(), rows)?;
    let (x, x_next) = (tape.value(x).data(), tape.value(x_next).data());
    let err: f64 = (0..x.len())
        .map(|i| (x[i] + delta[i] - x_next[i]).powi(2))
        .sum();
    Ok(err / rows as f64)
}

/// Mean over rows of `exp(-c_d1 * ||x_i - x_perm(i)||^2)`.
pub fn uniformity_term(
    tape: &mut Tape,
    x: Var,
    perm: &[usize],
    c_d1: f64,
) -> Result<Var, LossError> {
    let shuffled = tape.permute_rows(x, perm)?;
    let diff = tape.sub(x, shuffled)?;
    let sq = tape.square(diff);
    let d2 = tape.row_sum(sq);
    let scaled = tape.scale(d2, -c_d1);
    let potential = tape.exp(scaled);
    Ok(tape.mean(potential))
}

/// Mean over rows of `max(||x_i - x'_i|| - omega, 0)`.
pub fn csc_term(tape: &mut Tape, x: Var, x_next: Var, omega: f64) -> Result<Var, LossError> {
    let diff = tape.sub(x, x_next)?;
    let sq = tape.square(diff);
    let d2 = tape.row_sum(sq);
    let d = tape.sqrt(d2);
    let hinge = tape.hinge(d, omega);
    Ok(tape.mean(hinge))
}

/// All loss nodes of one batch evaluation, plus the parameter handles of
/// the five trainable networks.
pub struct LossGraph {
    pub q: Var,
    pub reward: Var,
    pub discount: Var,
    pub transition: Var,
    pub uniformity: Var,
    pub csc: Var,
    pub total: Var,
    /// Transition loss of the same batch with dropout off.
    pub l_tau_eval: f64,
    pub bound: [BoundMlp; 5],
}

impl LossGraph {
    pub fn var(&self, kind: LossKind) -> Var {
        match kind {
            LossKind::Q => self.q,
            LossKind::Reward => self.reward,
            LossKind::Discount => self.discount,
            LossKind::Transition => self.transition,
            LossKind::Uniformity => self.uniformity,
            LossKind::Csc => self.csc,
            LossKind::Total => self.total,
        }
    }

    pub fn report(&self, tape: &Tape) -> LossReport {
        LossReport {
            l_q: tape.scalar(self.q),
            l_r: tape.scalar(self.reward),
            l_g: tape.scalar(self.discount),
            l_tau: tape.scalar(self.transition),
            l_d1: tape.scalar(self.uniformity),
            l_csc: tape.scalar(self.csc),
            total: tape.scalar(self.total),
            l_tau_eval: self.l_tau_eval,
        }
    }

    /// Parameter vars in the canonical [`ModelParams::live_params`] order.
    pub fn param_vars(&self) -> Vec<Var> {
        self.bound
            .iter()
            .flat_map(|b| b.vars.iter().flat_map(|&(w, bias)| [w, bias]))
            .collect()
    }
}

/// Records every loss of one batch on `tape`. `rng` drives transition
/// dropout (training mode) and the uniformity pairing shuffle.
pub fn build_loss_graph<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ModelParams,
    batch: &[&TransitionRecord],
    config: &LossConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<LossGraph, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = batch.len();

    let bound = [
        params.encoder.bind(tape, true),
        params.transition.bind(tape, true),
        params.reward.bind(tape, true),
        params.discount.bind(tape, true),
        params.q.bind(tape, true),
    ];
    let next = stack(batch, |r| &r.next_obs);
    let s = tape.constant(stack(batch, |r| &r.obs));
    let s_next = tape.constant(next.clone());
    let actions = tape.constant(actions_one_hot(batch, params.n_actions()));
    let r_extr = tape.constant(column(batch, |r| r.r_extr));
    let gamma = tape.constant(column(batch, |r| r.discount));

    let x = params.encoder.forward(tape, &bound[0], s, mode, rng)?;
    let x_next = params.encoder.forward(tape, &bound[0], s_next, mode, rng)?;
    // without encoder dropout the tape value is the live eval encoding of s'
    let targets = if params.encoder.dropout == 0.0 {
        ddqn_target_with(batch, params, &next, tape.value(x_next).data())?
    } else {
        ddqn_target(batch, params)?
    };
    let y = tape.constant(Tensor::from_parts(vec![n, 1], targets));
    let xa = tape.concat_cols(x, actions)?;

    let delta = params.transition.forward(tape, &bound[1], xa, mode, rng)?;
    let predicted = tape.add(x, delta)?;
    let transition = transition_term(tape, predicted, x_next)?;
    let l_tau_eval = match mode {
        Mode::Eval => tape.scalar(transition),
        Mode::Train => transition_loss_eval(params, tape, x, x_next, xa, n)?,
    };

    let r_hat = params.reward.forward(tape, &bound[2], xa, mode, rng)?;
    let reward = mse_term(tape, r_hat, r_extr)?;
    let g_hat = params.discount.forward(tape, &bound[3], xa, mode, rng)?;
    let discount = mse_term(tape, g_hat, gamma)?;

    let x_detached = tape.detach(x);
    let q_all = params.q.forward(tape, &bound[4], x_detached, mode, rng)?;
    let action_ids: Vec<usize> = batch.iter().map(|r| r.action).collect();
    let q_taken = tape.gather_cols(q_all, &action_ids)?;
    let q = mse_term(tape, q_taken, y)?;

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let uniformity = uniformity_term(tape, x, &perm, config.c_d1)?;
    let csc = csc_term(tape, x, x_next, config.omega)?;

    let w = config.weights;
    let mut total = tape.scale(q, w.q);
    for (var, weight) in [
        (reward, w.reward),
        (discount, w.discount),
        (transition, w.transition),
        (uniformity, w.uniformity),
        (csc, w.csc),
    ] {
        let term = tape.scale(var, weight);
        total = tape.add(total, term)?;
    }

    Ok(LossGraph {
        q,
        reward,
        discount,
        transition,
        uniformity,
        csc,
        total,
        l_tau_eval,
        bound,
    })
}

/// Evaluates all losses without differentiating. Transition dropout and
/// pairing are drawn from `seed`.
pub fn total_loss(
    params: &ModelParams,
    batch: &[&TransitionRecord],
    config: &LossConfig,
    mode: Mode,
    seed: u64,
) -> Result<LossReport, LossError> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = build_loss_graph(&mut tape, params, batch, config, mode, &mut rng)?;
    Ok(graph.report(&tape))
}

pub fn loss_q(params: &ModelParams, batch: &[&TransitionRecord]) -> Result<f64, LossError> {
    Ok(total_loss(params, batch, &LossConfig::default(), Mode::Eval, 0)?.l_q)
}

pub fn loss_reward_discount(
    params: &ModelParams,
    batch: &[&TransitionRecord],
) -> Result<(f64, f64), LossError> {
    let r = total_loss(params, batch, &LossConfig::default(), Mode::Eval, 0)?;
    Ok((r.l_r, r.l_g))
}

pub fn loss_transition(
    params: &ModelParams,
    batch: &[&TransitionRecord],
    mode: Mode,
    seed: u64,
) -> Result<f64, LossError> {
    Ok(total_loss(params, batch, &LossConfig::default(), mode, seed)?.l_tau)
}

pub fn loss_uniformity(
    params: &ModelParams,
    batch: &[&TransitionRecord],
    c_d1: f64,
    seed: u64,
) -> Result<f64, LossError> {
    let config = LossConfig {
        c_d1,
        ..LossConfig::default()
    };
    Ok(total_loss(params, batch, &config, Mode::Eval, seed)?.l_d1)
}

pub fn loss_csc(
    params: &ModelParams,
    batch: &[&TransitionRecord],
    omega: f64,
) -> Result<f64, LossError> {
    let config = LossConfig {
        omega,
        ..LossConfig::default()
    };
    Ok(total_loss(params, batch, &config, Mode::Eval, 0)?.l_csc)
}

/// Value and gradients (canonical parameter order) of one loss term.
pub fn loss_gradients(
    params: &ModelParams,
    batch: &[&TransitionRecord],
    config: &LossConfig,
    kind: LossKind,
    mode: Mode,
    seed: u64,
) -> Result<(f64, Vec<Tensor>), LossError> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = build_loss_graph(&mut tape, params, batch, config, mode, &mut rng)?;
    let out = graph.var(kind);
    let grads = tape.backward(out)?;
    let g = graph
        .param_vars()
        .into_iter()
        .map(|v| grads.get_or_zeros(v))
        .collect();
    Ok((tape.scalar(out), g))
}

/// One optimization step on the total loss: forward, one backward pass,
/// one RMSProp update over all trainable parameters, then target bookkeeping.
pub fn train_step<R: Rng + ?Sized>(
    params: &mut ModelParams,
    optimizer: &mut RmsPropState,
    batch: &[&TransitionRecord],
    config: &LossConfig,
    lr: f64,
    rng: &mut R,
) -> Result<LossReport, LossError> {
    let mut tape = Tape::new();
    let graph = build_loss_graph(&mut tape, params, batch, config, Mode::Train, rng)?;
    let report = graph.report(&tape);
    if !report.is_finite() {
        return Err(LossError::NonFinite(report));
    }
    let grads = tape.backward(graph.total)?;
    let g: Vec<Tensor> = graph
        .param_vars()
        .into_iter()
        .map(|v| grads.get_or_zeros(v))
        .collect();
    rmsprop_step(&mut params.live_params_mut(), &g, optimizer, lr)?;
    params.record_update();
    Ok(report)
}
