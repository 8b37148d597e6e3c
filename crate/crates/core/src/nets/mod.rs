//! The five learned functions of the agent (encoder, transition, reward,
//! discount, Q) and the frozen target copies used for double Q-learning.

mod checkpoint;
mod mlp;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Activation, AutodiffError, Mode, Tape, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use mlp::{BoundMlp, Dense, Mlp};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        source: AutodiffError,
    },
    #[error("{net}: expected input width {expected}, got {got}")]
    InputLength {
        net: String,
        expected: usize,
        got: usize,
    },
    #[error("action {action} out of range for {n_actions} actions")]
    Action { action: usize, n_actions: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A point in the learned representation space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbstractState(pub Vec<f64>);

impl AbstractState {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// One-hot action vector of length `n_actions`.
pub fn one_hot(action: usize, n_actions: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_actions];
    v[action] = 1.0;
    v
}

/// Predicted rewards are consumed clipped to `[-1, 1]`.
pub fn clip_reward(r: f64) -> f64 {
    r.clamp(-1.0, 1.0)
}

/// Predicted discounts are consumed clipped to `[0, 0.99]`.
pub fn clip_discount(g: f64) -> f64 {
    g.clamp(0.0, 0.99)
}

/// Layer sizes for every network. Defaults follow the feed-forward
/// architectures used for flattened grid observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub abstract_dim: usize,
    pub n_actions: usize,
    pub encoder_hidden: Vec<usize>,
    pub transition_hidden: Vec<usize>,
    pub transition_dropout: f64,
    pub reward_hidden: Vec<usize>,
    pub q_hidden: Vec<usize>,
}

impl Architecture {
    pub fn standard(input_dim: usize, abstract_dim: usize, n_actions: usize) -> Self {
        Self {
            input_dim,
            abstract_dim,
            n_actions,
            encoder_hidden: vec![200, 100, 50, 10],
            transition_hidden: vec![10, 30, 30, 10],
            transition_dropout: 0.1,
            reward_hidden: vec![10, 50, 20],
            q_hidden: vec![20, 50, 20],
        }
    }

    /// Small nets for gradient checks and hand-verifiable fixtures.
    pub fn tiny(input_dim: usize, abstract_dim: usize, n_actions: usize) -> Self {
        Self {
            input_dim,
            abstract_dim,
            n_actions,
            encoder_hidden: vec![5, 4],
            transition_hidden: vec![4],
            transition_dropout: 0.1,
            reward_hidden: vec![3],
            q_hidden: vec![4],
        }
    }
}

/// Live parameters of all five functions plus target snapshots of the
/// encoder and Q-network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub encoder: Mlp,
    pub transition: Mlp,
    pub reward: Mlp,
    pub discount: Mlp,
    pub q: Mlp,
    pub encoder_target: Mlp,
    pub q_target: Mlp,
    pub steps_since_sync: u64,
    pub sync_interval: u64,
}

/// Default number of gradient updates between target syncs.
pub const TARGET_SYNC_INTERVAL: u64 = 1000;

impl ModelParams {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let (n_x, n_a) = (arch.abstract_dim, arch.n_actions);
        let encoder = Mlp::new(
            "encoder",
            arch.input_dim,
            &arch.encoder_hidden,
            n_x,
            Activation::Tanh,
            0.0,
            rng,
        );
        let transition = Mlp::new(
            "transition",
            n_x + n_a,
            &arch.transition_hidden,
            n_x,
            Activation::Tanh,
            arch.transition_dropout,
            rng,
        );
        let reward = Mlp::new("reward", n_x + n_a, &arch.reward_hidden, 1, Activation::Tanh, 0.0, rng);
        let discount = Mlp::new(
            "discount",
            n_x + n_a,
            &arch.reward_hidden,
            1,
            Activation::Tanh,
            0.0,
            rng,
        );
        let q = Mlp::new("q", n_x, &arch.q_hidden, n_a, Activation::Relu, 0.0, rng);
        Self {
            encoder_target: encoder.clone(),
            q_target: q.clone(),
            arch,
            encoder,
            transition,
            reward,
            discount,
            q,
            steps_since_sync: 0,
            sync_interval: TARGET_SYNC_INTERVAL,
        }
    }

    pub fn abstract_dim(&self) -> usize {
        self.arch.abstract_dim
    }

    pub fn n_actions(&self) -> usize {
        self.arch.n_actions
    }

    /// Trainable networks in canonical order: encoder, transition, reward,
    /// discount, Q.
    pub fn live_nets(&self) -> [&Mlp; 5] {
        [
            &self.encoder,
            &self.transition,
            &self.reward,
            &self.discount,
            &self.q,
        ]
    }

    pub fn live_params(&self) -> Vec<&Tensor> {
        self.live_nets().into_iter().flat_map(Mlp::params).collect()
    }

    pub fn live_params_mut(&mut self) -> Vec<&mut Tensor> {
        let Self {
            encoder,
            transition,
            reward,
            discount,
            q,
            ..
        } = self;
        encoder
            .params_mut()
            .chain(transition.params_mut())
            .chain(reward.params_mut())
            .chain(discount.params_mut())
            .chain(q.params_mut())
            .collect()
    }

    fn check_action(&self, action: usize) -> Result<(), NetError> {
        if action >= self.n_actions() {
            return Err(NetError::Action {
                action,
                n_actions: self.n_actions(),
            });
        }
        Ok(())
    }

    pub fn encode(&self, obs: &[f64]) -> Result<AbstractState, NetError> {
        self.encoder.forward_eval(obs, 1).map(AbstractState)
    }

    /// Encodes `rows` observations stored back to back.
    pub fn encode_batch(&self, obs: &[f64], rows: usize) -> Result<Vec<f64>, NetError> {
        self.encoder.forward_eval(obs, rows)
    }

    pub fn encode_target_batch(&self, obs: &[f64], rows: usize) -> Result<Vec<f64>, NetError> {
        self.encoder_target.forward_eval(obs, rows)
    }

    fn state_action(&self, x: &[f64], action: usize) -> Result<Vec<f64>, NetError> {
        self.check_action(action)?;
        if x.len() != self.abstract_dim() {
            return Err(NetError::InputLength {
                net: "abstract state".into(),
                expected: self.abstract_dim(),
                got: x.len(),
            });
        }
        let mut input = x.to_vec();
        input.extend(one_hot(action, self.n_actions()));
        Ok(input)
    }

    /// Residual transition `x + tau(x, a)`. Dropout is only active in
    /// training mode.
    pub fn transition<R: Rng + ?Sized>(
        &self,
        x: &AbstractState,
        action: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<AbstractState, NetError> {
        let input = self.state_action(&x.0, action)?;
        let delta = match mode {
            Mode::Eval => self.transition.forward_eval(&input, 1)?,
            Mode::Train => {
                let mut tape = Tape::new();
                let bound = self.transition.bind(&mut tape, false);
                let n = input.len();
                let v = tape.constant(Tensor::from_parts(vec![1, n], input));
                let out = self.transition.forward(&mut tape, &bound, v, mode, rng)?;
                tape.value(out).data().to_vec()
            }
        };
        Ok(AbstractState(
            x.0.iter().zip(&delta).map(|(a, d)| a + d).collect(),
        ))
    }

    pub fn transition_eval(&self, x: &[f64], action: usize) -> Result<Vec<f64>, NetError> {
        let input = self.state_action(x, action)?;
        let delta = self.transition.forward_eval(&input, 1)?;
        Ok(x.iter().zip(&delta).map(|(a, d)| a + d).collect())
    }

    /// Raw reward head output; consumers apply [`clip_reward`].
    pub fn predict_reward(&self, x: &[f64], action: usize) -> Result<f64, NetError> {
        let input = self.state_action(x, action)?;
        Ok(self.reward.forward_eval(&input, 1)?[0])
    }

    /// Raw discount head output; consumers apply [`clip_discount`].
    pub fn predict_discount(&self, x: &[f64], action: usize) -> Result<f64, NetError> {
        let input = self.state_action(x, action)?;
        Ok(self.discount.forward_eval(&input, 1)?[0])
    }

    pub fn q_values(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        self.q.forward_eval(x, 1)
    }

    pub fn q_values_batch(&self, xs: &[f64], rows: usize) -> Result<Vec<f64>, NetError> {
        self.q.forward_eval(xs, rows)
    }

    pub fn q_target_batch(&self, xs: &[f64], rows: usize) -> Result<Vec<f64>, NetError> {
        self.q_target.forward_eval(xs, rows)
    }

    /// Counts one gradient update and syncs targets when due.
    pub fn record_update(&mut self) -> bool {
        self.steps_since_sync += 1;
        self.sync_targets()
    }

    /// Copies live encoder and Q parameters into the targets once
    /// `steps_since_sync` reaches the interval. Returns whether a copy
    /// happened.
    pub fn sync_targets(&mut self) -> bool {
        if self.steps_since_sync < self.sync_interval {
            return false;
        }
        self.encoder_target = self.encoder.clone();
        self.q_target = self.q.clone();
        self.steps_since_sync = 0;
        true
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64, arch: Architecture) -> ModelParams {
        ModelParams::new(arch, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn encoder_output_dimension() {
        let lab = params(0, Architecture::standard(2 * 21 * 21, 2, 4));
        let obs = vec![0.0; 882];
        assert_eq!(lab.encode(&obs).unwrap().dim(), 2);
        let maze = params(0, Architecture::standard(5 * 15 * 15, 3, 4));
        assert_eq!(maze.encode(&vec![0.0; 1125]).unwrap().dim(), 3);
        assert!(maze.encode(&obs).is_err());
    }

    #[test]
    fn identical_observations_identical_encodings() {
        let p = params(1, Architecture::tiny(6, 2, 4));
        let obs = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(p.encode(&obs).unwrap(), p.encode(&obs).unwrap());
    }

    #[test]
    fn zeroed_transition_output_is_identity() {
        let mut p = params(2, Architecture::tiny(6, 2, 4));
        p.transition.zero_output_layer();
        let x = AbstractState(vec![0.3, -1.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for a in 0..4 {
            assert_eq!(p.transition(&x, a, Mode::Eval, &mut rng).unwrap(), x);
            assert_eq!(p.transition(&x, a, Mode::Train, &mut rng).unwrap(), x);
        }
        assert!(p.transition(&x, 4, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn transition_matches_hand_forward_pass() {
        let mut p = params(3, Architecture::tiny(6, 2, 4));
        // 6 -> 1 (tanh) -> 2
        p.transition.layers = vec![
            Dense {
                weight: Tensor::matrix(6, 1, vec![0.5, -0.5, 1.0, 0.0, 0.0, 0.0]).unwrap(),
                bias: Tensor::new(vec![1], vec![0.1]).unwrap(),
            },
            Dense {
                weight: Tensor::matrix(1, 2, vec![2.0, -1.0]).unwrap(),
                bias: Tensor::new(vec![2], vec![0.0, 0.5]).unwrap(),
            },
        ];
        let x = [0.4, 0.2];
        let h = (0.5 * 0.4 - 0.5 * 0.2 + 1.0 + 0.1f64).tanh();
        let expected = [0.4 + 2.0 * h, 0.2 - h + 0.5];
        let got = p.transition_eval(&x, 0).unwrap();
        assert!((got[0] - expected[0]).abs() < 1e-12 && (got[1] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn zero_heads_predict_zero() {
        let mut p = params(4, Architecture::tiny(6, 2, 4));
        for net in [&mut p.reward, &mut p.discount, &mut p.q] {
            net.params_mut().for_each(|t| t.data_mut().fill(0.0));
        }
        assert_eq!(p.predict_reward(&[0.2, 0.1], 1).unwrap(), 0.0);
        assert_eq!(p.predict_discount(&[0.2, 0.1], 1).unwrap(), 0.0);
        assert_eq!(p.q_values(&[0.2, 0.1]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn clipping_at_consumption() {
        assert_eq!(clip_reward(1.7), 1.0);
        assert_eq!(clip_reward(-3.0), -1.0);
        assert_eq!(clip_discount(1.2), 0.99);
        assert_eq!(clip_discount(-0.1), 0.0);
    }

    #[test]
    fn argmax_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn target_sync_schedule() {
        let mut p = params(5, Architecture::tiny(6, 2, 4));
        p.encoder.params_mut().for_each(|t| t.data_mut()[0] += 1.0);
        p.steps_since_sync = 998;
        assert!(!p.record_update());
        assert_eq!(p.steps_since_sync, 999);
        assert_ne!(p.encoder_target, p.encoder);
        assert!(p.record_update());
        assert_eq!(p.encoder_target, p.encoder);
        assert_eq!(p.q_target, p.q);
        assert_eq!(p.steps_since_sync, 0);
        // snapshot semantics
        p.q.params_mut().for_each(|t| t.data_mut()[0] += 1.0);
        assert_ne!(p.q_target, p.q);
    }
}
