use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{rmsprop_step, Activation, Mode, RmsPropConfig, RmsPropState, Tape, Tensor};
use crate::envs::{Env, StateId};
use crate::losses::{mse_term, LossError};
use crate::metrics::CoverageTracker;
use crate::nets::{argmax, Mlp, NetError};
use crate::novelty::TransitionRecord;

/// Bonus `1 / sqrt(n + 1)` for a state or code seen `n` times.
pub fn count_bonus(n: u64) -> f64 {
    1.0 / ((n + 1) as f64).sqrt()
}

/// Greedy one-step choice over true successors by count bonus; ties are
/// broken uniformly at random. Returns the action and its bonus.
pub fn count_greedy_action<R: Rng + ?Sized>(
    env: &Env,
    state: StateId,
    counts: &CoverageTracker,
    rng: &mut R,
) -> (usize, f64) {
    let bonuses: Vec<f64> = (0..env.n_actions())
        .map(|a| {
            let next = env
                .successor(state, a)
                .expect("action index in range")
                .state;
            count_bonus(counts.count(next))
        })
        .collect();
    let best = bonuses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..bonuses.len()).filter(|&a| bonuses[a] == best).collect();
    let a = ties[rng.random_range(0..ties.len())];
    (a, bonuses[a])
}

/// Locality-sensitive hash `sign(A s)` with a fixed Gaussian matrix `A`.
#[derive(Clone, Debug)]
pub struct SimHash {
    bits: usize,
    dim: usize,
    matrix: Vec<f64>,
}

impl SimHash {
    pub fn new<R: Rng + ?Sized>(bits: usize, dim: usize, rng: &mut R) -> Self {
        assert!((1..=64).contains(&bits));
        let matrix = (0..bits * dim).map(|_| rng.sample(StandardNormal)).collect();
        Self { bits, dim, matrix }
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    /// Bit `i` is set when row `i` of `A` has a positive product with `obs`.
    pub fn code(&self, obs: &[f64]) -> u64 {
        assert_eq!(obs.len(), self.dim);
        let mut code = 0u64;
        for (i, row) in self.matrix.chunks(self.dim).enumerate() {
            let dot: f64 = obs
                .iter()
                .zip(row)
                .filter(|(&o, _)| o != 0.0)
                .map(|(o, w)| o * w)
                .sum();
            if dot > 0.0 {
                code |= 1 << i;
            }
        }
        code
    }
}

/// Visit counts over hash codes.
#[derive(Clone, Debug, Default)]
pub struct HashCounter {
    counts: HashMap<u64, u64>,
}

impl HashCounter {
    /// Bonus for `code` before counting this visit, then records the visit.
    pub fn visit(&mut self, code: u64) -> f64 {
        let n = self.counts.entry(code).or_insert(0);
        let bonus = count_bonus(*n);
        *n += 1;
        bonus
    }

    pub fn distinct_codes(&self) -> usize {
        self.counts.len()
    }
}

/// Double-Q learner acting directly on observations.
#[derive(Clone, Debug)]
pub struct ModelFreeQ {
    pub live: Mlp,
    pub target: Mlp,
    optimizer: RmsPropState,
    steps_since_sync: usize,
    sync_interval: usize,
}

pub const MODEL_FREE_HIDDEN: [usize; 4] = [500, 200, 50, 10];

impl ModelFreeQ {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        n_actions: usize,
        sync_interval: usize,
        rng: &mut R,
    ) -> Self {
        let live = Mlp::new("q_obs", input, hidden, n_actions, Activation::Tanh, 0.0, rng);
        let optimizer = RmsPropState::new(RmsPropConfig::default(), live.params());
        Self {
            target: live.clone(),
            live,
            optimizer,
            steps_since_sync: 0,
            sync_interval,
        }
    }

    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>, NetError> {
        self.live.forward_eval(obs, 1)
    }

    /// Targets `r_extr + r_intr + gamma * Q_target(s', argmax Q(s', .))`.
    pub fn targets(&self, batch: &[&TransitionRecord]) -> Result<Vec<f64>, NetError> {
        let n = batch.len();
        let next: Vec<f64> = batch.iter().flat_map(|r| r.next_obs.iter().copied()).collect();
        let live = self.live.forward_eval(&next, n)?;
        let target = self.target.forward_eval(&next, n)?;
        let na = self.live.output_dim();
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let a = argmax(&live[i * na..(i + 1) * na]);
                r.r_extr + r.r_intr + r.discount * target[i * na + a]
            })
            .collect())
    }

    /// One RMSProp step on the squared TD error; returns the loss.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[&TransitionRecord],
        lr: f64,
        rng: &mut R,
    ) -> Result<f64, LossError> {
        let n = batch.len();
        if n == 0 {
            return Err(LossError::EmptyBatch);
        }
        let y = self.targets(batch)?;
        let mut tape = Tape::new();
        let bound = self.live.bind(&mut tape, true);
        let dim = batch[0].obs.len();
        let obs: Vec<f64> = batch.iter().flat_map(|r| r.obs.iter().copied()).collect();
        let s = tape.constant(Tensor::matrix(n, dim, obs)?);
        let q = self.live.forward(&mut tape, &bound, s, Mode::Eval, rng)?;
        let actions: Vec<usize> = batch.iter().map(|r| r.action).collect();
        let taken = tape.gather_cols(q, &actions)?;
        let y = tape.constant(Tensor::matrix(n, 1, y)?);
        let loss = mse_term(&mut tape, taken, y)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(LossError::NonFinite(Default::default()));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = bound
            .vars
            .iter()
            .flat_map(|&(w, b)| [grads.get_or_zeros(w), grads.get_or_zeros(b)])
            .collect();
        let mut params: Vec<&mut Tensor> = self.live.params_mut().collect();
        rmsprop_step(&mut params, &g, &mut self.optimizer, lr)?;
        self.steps_since_sync += 1;
        if self.steps_since_sync >= self.sync_interval {
            self.target = self.live.clone();
            self.steps_since_sync = 0;
        }
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvKind, Layout, Observation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bonus_values() {
        assert_eq!(count_bonus(0), 1.0);
        assert_eq!(count_bonus(3), 0.5);
    }

    #[test]
    fn count_policy_prefers_the_frontier_on_a_chain() {
        // chain of three free cells; start in the middle
        let layout = Layout::parse("#####\n#.S.#\n#####\n").unwrap();
        let env = Env::from_layout(EnvKind::OpenLabyrinth, layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = CoverageTracker::new(&env);
        let mut state = env.start_state();
        for step in 0..50 {
            let frontier = (0..4).any(|a| {
                counts.count(env.successor(state, a).unwrap().state) == 0
            });
            let (a, bonus) = count_greedy_action(&env, state, &counts, &mut rng);
            state = env.successor(state, a).unwrap().state;
            if frontier {
                assert_eq!(bonus, 1.0, "step {step}");
                assert_eq!(counts.count(state), 0);
            }
            if step == 0 {
                assert!(state != env.start_state());
            }
            counts.visit(state);
        }
        assert_eq!(counts.unique_visited(), 3);
    }

    #[test]
    fn simhash_codes() {
        let env = Env::new(EnvKind::OpenLabyrinth);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = SimHash::new(16, env.obs_dim(), &mut rng);
        let s = env.start_state();
        let o = env.observation_for(s);
        assert_eq!(h.code(&o), h.code(&o.clone()));
        assert!(h.code(&o) < 1 << 16);
        assert_eq!(h.bits(), 16);
        let mut counter = HashCounter::default();
        assert_eq!(counter.visit(h.code(&o)), 1.0);
        assert!((counter.visit(h.code(&o)) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn model_free_q_learns_a_constant_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut q = ModelFreeQ::new(3, &[8], 2, 1_000_000, &mut rng);
        let rec = TransitionRecord {
            obs: Observation::from(vec![1.0, 0.0, 1.0]),
            action: 1,
            r_extr: 0.7,
            r_intr: 0.0,
            discount: 0.0,
            next_obs: Observation::from(vec![0.0, 1.0, 0.0]),
            state: 0,
            next_state: 1,
        };
        for _ in 0..2000 {
            q.train_step(&[&rec], 1e-3, &mut rng).unwrap();
        }
        let v = q.q_values(&rec.obs).unwrap()[1];
        assert!((v - 0.7).abs() < 0.02, "{v}");
    }
}
