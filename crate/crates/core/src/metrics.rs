//! Exploration metrics: state coverage, the share of states seen only once,
//! visit heatmaps, and the aggregate statistics used for seed sweeps.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::envs::{Env, StateId};

/// Coverage after `steps` environment steps. The start state counts as
/// visited.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageMetrics {
    pub steps: usize,
    pub unique_visited: usize,
    pub coverage_fraction: f64,
    pub visited_once_fraction: f64,
    pub mean_r_intr: f64,
}

/// Incremental visit counter over a fixed set of reachable states.
#[derive(Clone, Debug)]
pub struct CoverageTracker {
    reachable: BTreeSet<StateId>,
    counts: HashMap<StateId, u64>,
    once: usize,
}

impl CoverageTracker {
    /// Starts with the environment's start state visited.
    pub fn new(env: &Env) -> Self {
        let mut t = Self {
            reachable: env.reachable_states(),
            counts: HashMap::new(),
            once: 0,
        };
        t.visit(env.start_state());
        t
    }

    pub fn visit(&mut self, state: StateId) {
        let c = self.counts.entry(state).or_insert(0);
        *c += 1;
        match *c {
            1 => self.once += 1,
            2 => self.once -= 1,
            _ => {}
        }
    }

    pub fn count(&self, state: StateId) -> u64 {
        self.counts.get(&state).copied().unwrap_or(0)
    }

    pub fn unique_visited(&self) -> usize {
        self.counts.len()
    }

    pub fn reachable(&self) -> usize {
        self.reachable.len()
    }

    pub fn snapshot(&self, steps: usize, mean_r_intr: f64) -> CoverageMetrics {
        let unique = self.counts.len();
        CoverageMetrics {
            steps,
            unique_visited: unique,
            coverage_fraction: unique as f64 / self.reachable.len() as f64,
            visited_once_fraction: if unique == 0 {
                0.0
            } else {
                self.once as f64 / unique as f64
            },
            mean_r_intr,
        }
    }
}

/// Replays a trajectory of arrival states (one per step) and returns the
/// metrics after every step. `mean_r_intr[t]` is carried through as given.
pub fn compute_coverage(
    env: &Env,
    arrivals: &[StateId],
    mean_r_intr: &[f64],
) -> Vec<CoverageMetrics> {
    let mut tracker = CoverageTracker::new(env);
    arrivals
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            tracker.visit(s);
            tracker.snapshot(i + 1, mean_r_intr.get(i).copied().unwrap_or(0.0))
        })
        .collect()
}

/// Per-cell arrival counts, `height` rows by `width` columns. Key-maze
/// states with and without the key share a cell. The start position is not
/// counted, so the total equals the number of steps.
pub fn heatmap(env: &Env, arrivals: &[StateId]) -> Vec<Vec<u64>> {
    let mut grid = vec![vec![0u64; env.width()]; env.height()];
    for &s in arrivals {
        let info = env.state_info(s);
        grid[info.row][info.col] += 1;
    }
    grid
}

/// Sample mean and standard error of the mean (sample standard deviation
/// over `sqrt(n)`). A single sample has zero standard error.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}
