//! Exploration runs: novelty search over a learned model and the baseline
//! explorers, with per-step logs.
//!
//! A run takes `n_init` uniformly random steps, then alternates training
//! (every `n_freq` steps, until the transition loss clears the accuracy
//! gate) with acting. Intrinsic rewards are scored before the new record
//! enters the buffer.

mod baselines;
mod config;

use std::collections::{HashMap, VecDeque};
use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{squared_distance, RmsPropConfig, RmsPropState};
use crate::envs::{Env, EnvError, EnvKind, Observation, StateId};
use crate::losses::{train_step, LossConfig, LossError, LossReport};
use crate::metrics::CoverageTracker;
use crate::nets::{argmax, Architecture, ModelParams, NetError};
use crate::novelty::{
    novelty_score, refresh_intrinsic_rewards, HistoryBuffer, NoveltyError, TransitionRecord,
};
use crate::par::Execution;
use crate::planner::{select_action, LearnedModel, PlanError, TraceNode};

pub use baselines::{
    count_bonus, count_greedy_action, HashCounter, ModelFreeQ, SimHash, MODEL_FREE_HIDDEN,
};
pub use config::{parse_config, parse_config_str, ConfigError, Policy, RawConfig, RunConfig};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Novelty(#[from] NoveltyError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("training diverged before step {step}: {report:?}")]
    NonFinite { step: usize, report: LossReport },
    #[error("training on an empty buffer")]
    EmptyBuffer,
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("run log line {line}: {message}")]
    Log { line: usize, message: String },
}

/// One environment step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Steps taken so far, including this one (1-based).
    pub t: usize,
    pub state: StateId,
    pub action: usize,
    pub next_state: StateId,
    pub r_extr: f64,
    pub r_intr: f64,
    pub discount: f64,
    /// The action was drawn at random rather than chosen by the policy.
    pub explored: bool,
    pub reached_goal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_plan: Option<Vec<f64>>,
    /// Training iterations run just before this step.
    pub iters_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub losses: Option<LossReport>,
    pub mean_r_intr: f64,
    pub unique_visited: usize,
    pub coverage_fraction: f64,
    pub visited_once_fraction: f64,
}

/// Losses of one training iteration, run before step `step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub step: usize,
    pub iteration: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Train(IterationRecord),
    Step(StepRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub env: EnvKind,
    pub policy: Policy,
    pub seed: u64,
    pub steps: usize,
    pub reachable_states: usize,
    pub unique_visited: usize,
    pub coverage_fraction: f64,
    pub visited_once_fraction: f64,
    pub mean_r_intr: f64,
    pub reached_goal: bool,
    pub steps_to_goal: Option<usize>,
    pub training_iterations: usize,
}

impl RunSummary {
    /// Numeric fields for aggregation, in output order. Missing values are
    /// left out.
    pub fn numeric_fields(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("steps", self.steps as f64),
            ("unique_visited", self.unique_visited as f64),
            ("coverage_fraction", self.coverage_fraction),
            ("visited_once_fraction", self.visited_once_fraction),
            ("mean_r_intr", self.mean_r_intr),
            ("reached_goal", f64::from(u8::from(self.reached_goal))),
            ("training_iterations", self.training_iterations as f64),
        ];
        if let Some(s) = self.steps_to_goal {
            out.push(("steps_to_goal", s as f64));
        }
        out
    }
}

/// Everything recorded during a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub iterations: Vec<IterationRecord>,
}

impl RunLog {
    /// Chronological lines: the training iterations before step `t`, then
    /// step `t`.
    pub fn lines(&self) -> Vec<LogLine> {
        let mut out = Vec::with_capacity(self.steps.len() + self.iterations.len());
        let mut it = self.iterations.iter().peekable();
        for s in &self.steps {
            while let Some(i) = it.next_if(|i| i.step <= s.t) {
                out.push(LogLine::Train(i.clone()));
            }
            out.push(LogLine::Step(s.clone()));
        }
        out.extend(it.cloned().map(LogLine::Train));
        out
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> io::Result<()> {
        for line in self.lines() {
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self, AgentError> {
        let mut log = RunLog::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line).map_err(|e| AgentError::Log {
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                LogLine::Train(it) => log.iterations.push(it),
                LogLine::Step(s) => {
                    if log.steps.last().is_some_and(|p| p.t >= s.t) {
                        return Err(AgentError::Log {
                            line: i + 1,
                            message: format!("step index {} is not increasing", s.t),
                        });
                    }
                    log.steps.push(s)
                }
            }
        }
        Ok(log)
    }

    pub fn arrivals(&self) -> Vec<StateId> {
        self.steps.iter().map(|s| s.next_state).collect()
    }

    pub fn summary(&self, config: &RunConfig, reachable_states: usize) -> RunSummary {
        let last = self.steps.last();
        let goal = self.steps.iter().find(|s| s.reached_goal).map(|s| s.t);
        RunSummary {
            env: config.env,
            policy: config.policy,
            seed: config.seed,
            steps: self.steps.len(),
            reachable_states,
            unique_visited: last.map_or(1, |s| s.unique_visited),
            coverage_fraction: last.map_or(1.0 / reachable_states as f64, |s| s.coverage_fraction),
            visited_once_fraction: last.map_or(1.0, |s| s.visited_once_fraction),
            mean_r_intr: last.map_or(0.0, |s| s.mean_r_intr),
            reached_goal: goal.is_some(),
            steps_to_goal: goal,
            training_iterations: self.iterations.len(),
        }
    }

    /// Coverage fraction after `t` steps (or at the end of a shorter run).
    pub fn coverage_at(&self, t: usize) -> f64 {
        let i = t.min(self.steps.len());
        if i == 0 {
            return 0.0;
        }
        self.steps[i - 1].coverage_fraction
    }

    /// Buffer mean intrinsic reward after `t` steps.
    pub fn mean_r_intr_at(&self, t: usize) -> Option<f64> {
        self.steps.get(t.checked_sub(1)?).map(|s| s.mean_r_intr)
    }
}

/// Accuracy-gated trainer. The window of recent transition losses persists
/// across training phases.
#[derive(Clone, Debug)]
pub struct Trainer {
    optimizer: RmsPropState,
    window: VecDeque<f64>,
    window_len: usize,
    gate: f64,
    n_iters: usize,
    batch_size: usize,
    lr: f64,
    losses: LossConfig,
    rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub reached_gate: bool,
}

impl TrainOutcome {
    pub fn iterations(&self) -> usize {
        self.reports.len()
    }
}

impl Trainer {
    pub fn new(config: &RunConfig, params: &ModelParams, rng: ChaCha8Rng) -> Self {
        Self {
            optimizer: RmsPropState::new(RmsPropConfig::default(), params.live_params()),
            window: VecDeque::with_capacity(config.gate_window),
            window_len: config.gate_window,
            gate: config.accuracy_gate(),
            n_iters: config.n_iters,
            batch_size: config.batch_size,
            lr: config.lr,
            losses: config.losses(),
            rng,
        }
    }

    pub fn gate(&self) -> f64 {
        self.gate
    }

    /// Mean transition loss over the recent window.
    pub fn window_mean(&self) -> Option<f64> {
        if self.window.is_empty() {
            return None;
        }
        Some(self.window.iter().sum::<f64>() / self.window.len() as f64)
    }

    /// Trains on uniform batches until the windowed transition loss is at
    /// most the gate, or `n_iters` iterations. Always runs at least one.
    pub fn train_until_accurate(
        &mut self,
        buffer: &HistoryBuffer,
        params: &mut ModelParams,
    ) -> Result<TrainOutcome, AgentError> {
        if buffer.is_empty() {
            return Err(AgentError::EmptyBuffer);
        }
        let mut reports = Vec::new();
        let mut reached_gate = false;
        while reports.len() < self.n_iters {
            let batch = buffer.sample(self.batch_size, &mut self.rng);
            let report = match train_step(
                params,
                &mut self.optimizer,
                &batch,
                &self.losses,
                self.lr,
                &mut self.rng,
            ) {
                Ok(r) => r,
                Err(LossError::NonFinite(report)) => {
                    return Err(AgentError::NonFinite { step: 0, report })
                }
                Err(e) => return Err(e.into()),
            };
            reports.push(report);
            if self.window.len() == self.window_len {
                self.window.pop_front();
            }
            self.window.push_back(report.l_tau_eval);
            if self.window_mean().is_some_and(|m| m <= self.gate) {
                reached_gate = true;
                break;
            }
        }
        Ok(TrainOutcome {
            reports,
            reached_gate,
        })
    }
}

/// `||x + tau(x, a) - x'||^2` for one record under the current model.
pub fn prediction_error(params: &ModelParams, record: &TransitionRecord) -> Result<f64, NetError> {
    let x = params.encode(&record.obs)?;
    let predicted = params.transition_eval(&x.0, record.action)?;
    let x_next = params.encode(&record.next_obs)?;
    Ok(squared_distance(&predicted, &x_next.0))
}

/// Recomputes every record's `r_intr` as its current prediction error.
/// Each distinct state is encoded once.
pub fn refresh_prediction_errors(
    buffer: &mut HistoryBuffer,
    params: &ModelParams,
    exec: Execution,
) -> Result<(), NetError> {
    let mut index: HashMap<StateId, usize> = HashMap::new();
    let mut unique: Vec<&Observation> = Vec::new();
    for r in buffer.iter() {
        for (id, obs) in [(r.state, &r.obs), (r.next_state, &r.next_obs)] {
            index.entry(id).or_insert_with(|| {
                unique.push(obs);
                unique.len() - 1
            });
        }
    }
    let encoded = exec
        .map_slice(&unique, |o| params.encode(o).map(|x| x.0))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let records: Vec<&TransitionRecord> = buffer.iter().collect();
    let errors = exec
        .map_slice(&records, |r| {
            let x = &encoded[index[&r.state]];
            let predicted = params.transition_eval(x, r.action)?;
            Ok(squared_distance(&predicted, &encoded[index[&r.next_state]]))
        })
        .into_iter()
        .collect::<Result<Vec<f64>, NetError>>()?;
    for (r, e) in buffer.iter_mut().zip(errors) {
        r.r_intr = e;
    }
    Ok(())
}

pub struct RunOptions<'a> {
    pub exec: Execution,
    /// Receives one NDJSON line per planned decision.
    pub plan_trace: Option<&'a mut dyn Write>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self {
            exec: Execution::default(),
            plan_trace: None,
        }
    }
}

pub struct RunOutput {
    pub log: RunLog,
    pub summary: RunSummary,
    pub buffer: HistoryBuffer,
    /// Learned model for the model-based policies.
    pub params: Option<ModelParams>,
}

/// A failed run with everything logged up to the failure.
#[derive(Debug, Error)]
#[error("run aborted after {} steps: {error}", log.steps.len())]
pub struct RunAbort {
    pub error: AgentError,
    pub log: RunLog,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    t: usize,
    q_plan: &'a [f64],
    nodes: &'a [TraceNode],
}

/// Independent random streams derived from the run seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_INIT: u64 = 0;
const STREAM_ACT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_HASH: u64 = 3;

struct Runner<'c> {
    config: &'c RunConfig,
    env: Env,
    obs: Observation,
    act_rng: ChaCha8Rng,
    tracker: CoverageTracker,
    buffer: HistoryBuffer,
    log: RunLog,
    done: bool,
}

struct Choice {
    action: usize,
    explored: bool,
    q_plan: Option<Vec<f64>>,
}

impl Choice {
    fn random(action: usize) -> Self {
        Self {
            action,
            explored: true,
            q_plan: None,
        }
    }
}

impl<'c> Runner<'c> {
    fn new(config: &'c RunConfig) -> Self {
        let mut env = Env::new(config.env)
            .with_discount(config.gamma)
            .with_max_steps(config.max_episode_steps);
        let obs = env.reset();
        Self {
            config,
            tracker: CoverageTracker::new(&env),
            obs,
            env,
            act_rng: stream(config.seed, STREAM_ACT),
            buffer: HistoryBuffer::new(config.buffer_capacity),
            log: RunLog::default(),
            done: false,
        }
    }

    fn t(&self) -> usize {
        self.log.steps.len()
    }

    fn finished(&self) -> bool {
        self.done || self.t() >= self.config.n_max
    }

    fn in_random_phase(&self) -> bool {
        self.t() < self.config.n_init
    }

    /// Training happens on the first learning step and every `n_freq`
    /// steps after it.
    fn training_due(&self) -> bool {
        (self.t() - self.config.n_init) % self.config.n_freq == 0
    }

    fn random_action(&mut self) -> usize {
        self.act_rng.random_range(0..self.env.n_actions())
    }

    fn record_training(&mut self, reports: &[LossReport]) {
        let step = self.t() + 1;
        self.log
            .iterations
            .extend(reports.iter().enumerate().map(|(i, &report)| IterationRecord {
                step,
                iteration: i + 1,
                report,
            }));
    }

    /// Steps the environment, scores the new record with `intrinsic` (before
    /// it enters the buffer) and logs it. Returns the stored record and
    /// whether the buffer evicted one.
    fn step(
        &mut self,
        choice: Choice,
        training: &[LossReport],
        intrinsic: impl FnOnce(&TransitionRecord, &CoverageTracker) -> Result<f64, AgentError>,
    ) -> Result<(TransitionRecord, bool), AgentError> {
        let state = self.env.state();
        let outcome = self.env.step(choice.action)?;
        let mut record = TransitionRecord {
            obs: self.obs.clone(),
            action: choice.action,
            r_extr: outcome.reward,
            r_intr: 0.0,
            discount: outcome.discount,
            next_obs: outcome.observation.clone(),
            state,
            next_state: self.env.state(),
        };
        record.r_intr = intrinsic(&record, &self.tracker)?;
        self.tracker.visit(record.next_state);
        let evicted = self.buffer.push(record.clone()).is_some();
        let t = self.t() + 1;
        let cov = self.tracker.snapshot(t, self.buffer.mean_r_intr());
        self.log.steps.push(StepRecord {
            t,
            state,
            action: choice.action,
            next_state: record.next_state,
            r_extr: record.r_extr,
            r_intr: record.r_intr,
            discount: record.discount,
            explored: choice.explored,
            reached_goal: outcome.reached_goal,
            q_plan: choice.q_plan,
            iters_used: training.len(),
            losses: training.last().copied(),
            mean_r_intr: cov.mean_r_intr,
            unique_visited: cov.unique_visited,
            coverage_fraction: cov.coverage_fraction,
            visited_once_fraction: cov.visited_once_fraction,
        });
        self.obs = outcome.observation;
        self.done = outcome.terminal;
        Ok((record, evicted))
    }

    fn run_random(&mut self) -> Result<(), AgentError> {
        while !self.finished() {
            let a = self.random_action();
            self.step(Choice::random(a), &[], |_, _| Ok(0.0))?;
        }
        Ok(())
    }

    fn run_count(&mut self) -> Result<(), AgentError> {
        let bonus = |r: &TransitionRecord, c: &CoverageTracker| Ok(count_bonus(c.count(r.next_state)));
        while !self.finished() {
            let choice = if self.in_random_phase() {
                Choice::random(self.random_action())
            } else {
                let state = self.env.state();
                let (a, _) = count_greedy_action(&self.env, state, &self.tracker, &mut self.act_rng);
                Choice {
                    action: a,
                    explored: false,
                    q_plan: None,
                }
            };
            self.step(choice, &[], bonus)?;
        }
        Ok(())
    }

    fn run_hash(&mut self) -> Result<(), AgentError> {
        let config = self.config;
        let dim = self.env.obs_dim();
        let hash = SimHash::new(config.hash_bits, dim, &mut stream(config.seed, STREAM_HASH));
        let mut counter = HashCounter::default();
        let mut init_rng = stream(config.seed, STREAM_INIT);
        let mut train_rng = stream(config.seed, STREAM_TRAIN);
        let mut q = ModelFreeQ::new(
            dim,
            &MODEL_FREE_HIDDEN,
            self.env.n_actions(),
            config.target_sync,
            &mut init_rng,
        );
        while !self.finished() {
            let mut reports = Vec::new();
            let choice = if self.in_random_phase() {
                Choice::random(self.random_action())
            } else {
                if self.training_due() {
                    for _ in 0..config.model_free_iters {
                        let batch = self.buffer.sample(config.batch_size, &mut train_rng);
                        let l_q = q.train_step(&batch, config.lr, &mut train_rng)?;
                        reports.push(LossReport {
                            l_q,
                            total: l_q,
                            ..LossReport::default()
                        });
                    }
                    self.record_training(&reports);
                }
                if config.epsilon > 0.0 && self.act_rng.random::<f64>() < config.epsilon {
                    Choice::random(self.random_action())
                } else {
                    let values = q.q_values(&self.obs)?;
                    Choice {
                        action: argmax(&values),
                        explored: false,
                        q_plan: Some(values),
                    }
                }
            };
            self.step(choice, &reports, |r, _| Ok(counter.visit(hash.code(&r.next_obs))))?;
        }
        Ok(())
    }

    /// Novelty search, or prediction-error exploration when `pred_error`.
    fn run_model_based(
        &mut self,
        pred_error: bool,
        options: &mut RunOptions<'_>,
        params_out: &mut Option<ModelParams>,
    ) -> Result<(), AgentError> {
        let config = self.config;
        let exec = options.exec;
        let arch = Architecture::standard(self.env.obs_dim(), config.abstract_dim, self.env.n_actions());
        let mut params = ModelParams::new(arch, &mut stream(config.seed, STREAM_INIT));
        params.sync_interval = config.target_sync as u64;
        let mut trainer = Trainer::new(config, &params, stream(config.seed, STREAM_TRAIN));
        let dim = config.abstract_dim;
        // next-state encodings aligned with the buffer
        let mut points: Vec<f64> = Vec::new();
        let plan = config.plan();

        let result = (|| {
            while !self.finished() {
                let mut reports = Vec::new();
                let choice = if self.in_random_phase() {
                    Choice::random(self.random_action())
                } else {
                    if self.training_due() {
                        let outcome = match trainer.train_until_accurate(&self.buffer, &mut params) {
                            Err(AgentError::NonFinite { report, .. }) => {
                                return Err(AgentError::NonFinite {
                                    step: self.t() + 1,
                                    report,
                                })
                            }
                            other => other?,
                        };
                        log::debug!(
                            "step {}: {} iterations, gate {}",
                            self.t() + 1,
                            outcome.iterations(),
                            if outcome.reached_gate { "reached" } else { "not reached" }
                        );
                        reports = outcome.reports;
                        self.record_training(&reports);
                        if pred_error {
                            refresh_prediction_errors(&mut self.buffer, &params, exec)?;
                        } else {
                            points = refresh_intrinsic_rewards(&mut self.buffer, &params, config.k, exec)?;
                        }
                    }
                    let x = params.encode(&self.obs)?;
                    let model = LearnedModel {
                        params: &params,
                        points: (!pred_error).then_some(points.as_slice()),
                        k: config.k,
                    };
                    let trace = options.plan_trace.is_some();
                    let decision = select_action(&model, &x.0, &plan, &mut self.act_rng, exec, trace)?;
                    if let (Some(sink), Some(p)) = (options.plan_trace.as_mut(), decision.plan.as_ref()) {
                        let nodes = p.trace.as_ref().map_or(&[][..], |tr| &tr.nodes[..]);
                        serde_json::to_writer(
                            &mut **sink,
                            &TraceLine {
                                t: self.t() + 1,
                                q_plan: &p.q_plan,
                                nodes,
                            },
                        )
                        .map_err(io::Error::from)?;
                        sink.write_all(b"\n")?;
                    }
                    Choice {
                        action: decision.action,
                        explored: decision.explored,
                        q_plan: decision.plan.map(|p| p.q_plan),
                    }
                };
                let mut next_encoding = None;
                let (_, evicted) = self.step(choice, &reports, |r, _| {
                    if pred_error {
                        return Ok(prediction_error(&params, r)?);
                    }
                    let x_next = params.encode(&r.next_obs)?.0;
                    let score = if points.is_empty() {
                        0.0
                    } else {
                        novelty_score(&x_next, &points, dim, config.k, None)?
                    };
                    next_encoding = Some(x_next);
                    Ok(score)
                })?;
                if let Some(x_next) = next_encoding {
                    if evicted {
                        points.drain(..dim);
                    }
                    points.extend(x_next);
                }
            }
            Ok(())
        })();
        *params_out = Some(params);
        result
    }
}

/// Runs one exploration episode as configured.
pub fn run_exploration(
    config: &RunConfig,
    mut options: RunOptions<'_>,
) -> Result<RunOutput, RunAbort> {
    if let Err(e) = config.validate() {
        return Err(RunAbort {
            error: e.into(),
            log: RunLog::default(),
        });
    }
    let mut runner = Runner::new(config);
    let mut params = None;
    let result = match config.policy {
        Policy::Random => runner.run_random(),
        Policy::Count => runner.run_count(),
        Policy::Hash => runner.run_hash(),
        Policy::Novelty => runner.run_model_based(false, &mut options, &mut params),
        Policy::PredError => runner.run_model_based(true, &mut options, &mut params),
    };
    match result {
        Ok(()) => {
            let summary = runner.log.summary(config, runner.tracker.reachable());
            Ok(RunOutput {
                log: runner.log,
                summary,
                buffer: runner.buffer,
                params,
            })
        }
        Err(error) => Err(RunAbort {
            error,
            log: runner.log,
        }),
    }
}
