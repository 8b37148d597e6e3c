//! Depth-limited rollouts through the learned model.
//!
//! `Q^0(x, a)` is the learned Q-value; deeper estimates are
//! `Q^d(x, a) = r(x, a) + g(x, a) * max_{a' in B(y)} Q^{d-1}(y, a')` with
//! `y = x + tau(x, a)` and `B(y)` the `b` actions ranked best by `Q(y, .)`.
//! Actions are scored by the sum `Q^0 + ... + Q^D`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::{argmax, clip_discount, clip_reward, ModelParams, NetError};
use crate::novelty::{novelty_score, NoveltyError};
use crate::par::Execution;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Novelty(#[from] NoveltyError),
    #[error("invalid plan config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub depth: usize,
    pub b: usize,
    pub epsilon: f64,
}

impl PlanConfig {
    pub fn validate(&self, n_actions: usize) -> Result<(), PlanError> {
        if self.b == 0 || self.b > n_actions {
            return Err(PlanError::Config(format!(
                "b must be in [1, {n_actions}], got {}",
                self.b
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(PlanError::Config(format!(
                "epsilon must be in [0, 1], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// What the planner needs from a model of the environment in abstract space.
pub trait PlanningModel: Sync {
    fn n_actions(&self) -> usize;

    fn q_values(&self, x: &[f64]) -> Result<Vec<f64>, PlanError>;

    /// Predicted `(next state, reward, discount)` for taking `a` in `x`.
    fn simulate(&self, x: &[f64], a: usize) -> Result<(Vec<f64>, f64, f64), PlanError>;
}

/// The learned networks plus the buffered next-state encodings used to
/// score novelty of simulated states. Without `points` the intrinsic part
/// of the reward is zero.
pub struct LearnedModel<'a> {
    pub params: &'a ModelParams,
    pub points: Option<&'a [f64]>,
    pub k: usize,
}

impl PlanningModel for LearnedModel<'_> {
    fn n_actions(&self) -> usize {
        self.params.n_actions()
    }

    fn q_values(&self, x: &[f64]) -> Result<Vec<f64>, PlanError> {
        Ok(self.params.q_values(x)?)
    }

    fn simulate(&self, x: &[f64], a: usize) -> Result<(Vec<f64>, f64, f64), PlanError> {
        let y = self.params.transition_eval(x, a)?;
        let intrinsic = match self.points {
            Some(points) if !points.is_empty() => {
                novelty_score(&y, points, self.params.abstract_dim(), self.k, None)?
            }
            _ => 0.0,
        };
        let reward = intrinsic + clip_reward(self.params.predict_reward(x, a)?);
        let discount = clip_discount(self.params.predict_discount(x, a)?);
        Ok((y, reward, discount))
    }
}

/// The `b` actions with the highest values, best first; ties keep the lower
/// index first.
pub fn best_actions(q: &[f64], b: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&i, &j| q[j].total_cmp(&q[i]).then(i.cmp(&j)));
    order.truncate(b);
    order
}

fn max_of(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(f64::NEG_INFINITY, f64::max)
}

/// Direct recursive evaluation of `Q^d(x, a)`, with no sharing between
/// subtrees.
pub fn q_hat_d<M: PlanningModel + ?Sized>(
    model: &M,
    x: &[f64],
    a: usize,
    d: usize,
    b: usize,
) -> Result<f64, PlanError> {
    if d == 0 {
        return Ok(model.q_values(x)?[a]);
    }
    let (y, r, g) = model.simulate(x, a)?;
    let expand = best_actions(&model.q_values(&y)?, b);
    let mut inner = Vec::with_capacity(expand.len());
    for &next in &expand {
        inner.push(q_hat_d(model, &y, next, d - 1, b)?);
    }
    Ok(r + g * max_of(inner.into_iter()))
}

/// `Q_plan` per action by the naive recursion.
pub fn q_plan_naive<M: PlanningModel + ?Sized>(
    model: &M,
    x: &[f64],
    config: &PlanConfig,
) -> Result<Vec<f64>, PlanError> {
    (0..model.n_actions())
        .map(|a| {
            let mut total = 0.0;
            for d in 0..=config.depth {
                total += q_hat_d(model, x, a, d, config.b)?;
            }
            Ok(total)
        })
        .collect()
}

/// One simulated node in a plan trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceNode {
    pub path: Vec<usize>,
    pub state: Vec<f64>,
    pub q: Vec<f64>,
    pub expanded: Vec<usize>,
    pub reward: Option<f64>,
    pub discount: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PlanTrace {
    pub nodes: Vec<TraceNode>,
}

struct Walk<'m, M: ?Sized> {
    model: &'m M,
    b: usize,
    simulations: usize,
    trace: Option<Vec<TraceNode>>,
}

impl<M: PlanningModel + ?Sized> Walk<'_, M> {
    /// For node `x` with `remaining` further levels, returns
    /// `[max_{a in B(x)} Q^d(x, a) for d in 0..=remaining]`.
    fn expand(
        &mut self,
        x: &[f64],
        remaining: usize,
        path: &mut Vec<usize>,
        reward: Option<f64>,
        discount: Option<f64>,
    ) -> Result<Vec<f64>, PlanError> {
        let q = self.model.q_values(x)?;
        let expand = best_actions(&q, self.b);
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceNode {
                path: path.clone(),
                state: x.to_vec(),
                q: q.clone(),
                expanded: if remaining > 0 { expand.clone() } else { Vec::new() },
                reward,
                discount,
            });
        }
        let mut per_action = Vec::with_capacity(expand.len());
        for &a in &expand {
            let mut values = Vec::with_capacity(remaining + 1);
            values.push(q[a]);
            if remaining > 0 {
                values.extend(self.child_values(x, a, remaining - 1, path)?);
            }
            per_action.push(values);
        }
        Ok((0..=remaining)
            .map(|d| max_of(per_action.iter().map(|v| v[d])))
            .collect())
    }

    /// `[Q^d(x, a) for d in 1..=levels + 1]`.
    fn child_values(
        &mut self,
        x: &[f64],
        a: usize,
        levels: usize,
        path: &mut Vec<usize>,
    ) -> Result<Vec<f64>, PlanError> {
        let (y, r, g) = self.model.simulate(x, a)?;
        self.simulations += 1;
        path.push(a);
        let below = self.expand(&y, levels, path, Some(r), Some(g));
        path.pop();
        Ok(below?.into_iter().map(|v| r + g * v).collect())
    }
}

/// Result of planning from one abstract state.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub q_plan: Vec<f64>,
    /// Model simulations per root action.
    pub simulations: Vec<usize>,
    pub trace: Option<PlanTrace>,
}

/// `Q_plan` per action with each simulated subtree evaluated once for all
/// depths. Root actions may be planned in parallel.
pub fn q_plan<M: PlanningModel + ?Sized>(
    model: &M,
    x: &[f64],
    config: &PlanConfig,
    exec: Execution,
    with_trace: bool,
) -> Result<Plan, PlanError> {
    let q = model.q_values(x)?;
    let roots = exec.map_range(model.n_actions(), |a| {
        let mut walk = Walk {
            model,
            b: config.b,
            simulations: 0,
            trace: with_trace.then(Vec::new),
        };
        let mut total = q[a];
        if config.depth > 0 {
            let mut path = Vec::new();
            for v in walk.child_values(x, a, config.depth - 1, &mut path)? {
                total += v;
            }
        }
        Ok::<_, PlanError>((total, walk.simulations, walk.trace))
    });
    let mut plan = Plan {
        q_plan: Vec::with_capacity(q.len()),
        simulations: Vec::with_capacity(q.len()),
        trace: with_trace.then(|| PlanTrace {
            nodes: vec![TraceNode {
                path: Vec::new(),
                state: x.to_vec(),
                q: q.clone(),
                expanded: (0..q.len()).collect(),
                reward: None,
                discount: None,
            }],
        }),
    };
    for root in roots {
        let (total, sims, nodes) = root?;
        plan.q_plan.push(total);
        plan.simulations.push(sims);
        if let (Some(trace), Some(nodes)) = (plan.trace.as_mut(), nodes) {
            trace.nodes.extend(nodes);
        }
    }
    Ok(plan)
}

/// Upper bound on simulations per root action: `sum_{d < D} b^d`.
pub fn simulation_bound(depth: usize, b: usize) -> usize {
    (0..depth).map(|d| b.pow(d as u32)).sum()
}

/// An action choice and how it was made.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub action: usize,
    pub explored: bool,
    pub plan: Option<Plan>,
}

/// Epsilon-greedy over `Q_plan`: a uniform random action with probability
/// `epsilon`, otherwise the argmax (lowest index on ties). Planning is
/// skipped for random actions.
pub fn select_action<M: PlanningModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &[f64],
    config: &PlanConfig,
    rng: &mut R,
    exec: Execution,
    with_trace: bool,
) -> Result<Decision, PlanError> {
    let n = model.n_actions();
    if config.epsilon > 0.0 && rng.random::<f64>() < config.epsilon {
        return Ok(Decision {
            action: rng.random_range(0..n),
            explored: true,
            plan: None,
        });
    }
    let plan = q_plan(model, x, config, exec, with_trace)?;
    Ok(Decision {
        action: argmax(&plan.q_plan),
        explored: false,
        plan: Some(plan),
    })
}
