//! History buffer and the k-nearest-neighbor novelty score.
//!
//! The novelty of an abstract state is the mean euclidean distance to its
//! `k` nearest encodings in the history. Neighbor search is an exact linear
//! scan; ties in distance resolve to the earlier (older) point.

mod buffer;

use std::collections::HashMap;
use std::f64::consts::PI;

use thiserror::Error;

use crate::autodiff::euclidean_distance;
use crate::nets::{ModelParams, NetError};
use crate::par::Execution;

pub use buffer::{HistoryBuffer, RecordDump, TransitionRecord, DEFAULT_CAPACITY};

/// Neighbor count used for novelty scoring.
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum NoveltyError {
    #[error("nearest-neighbor query on an empty buffer")]
    EmptyBuffer,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("point set of length {len} is not a multiple of dimension {dim}")]
    Dimension { len: usize, dim: usize },
    #[error("density estimate needs more than {k} points, have {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

fn point_count(points: &[f64], dim: usize) -> Result<usize, NoveltyError> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(NoveltyError::Dimension {
            len: points.len(),
            dim,
        });
    }
    Ok(points.len() / dim)
}

/// Exact k nearest neighbors of `query` among `points` (flat, `dim` wide),
/// ascending by distance with ties broken by index. `exclude` removes one
/// point (the query's own record) from consideration. Returns fewer than
/// `k` neighbors when the set is smaller.
pub fn knn(
    query: &[f64],
    points: &[f64],
    dim: usize,
    k: usize,
    exclude: Option<usize>,
) -> Result<Vec<Neighbor>, NoveltyError> {
    if k == 0 {
        return Err(NoveltyError::InvalidK);
    }
    let n = point_count(points, dim)?;
    if n == 0 {
        return Err(NoveltyError::EmptyBuffer);
    }
    if query.len() != dim {
        return Err(NoveltyError::Dimension {
            len: query.len(),
            dim,
        });
    }
    let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
    for (index, p) in points.chunks_exact(dim).enumerate() {
        if Some(index) == exclude {
            continue;
        }
        let distance = euclidean_distance(query, p);
        if best.len() == k && distance >= best[k - 1].distance {
            continue;
        }
        // strict comparison keeps earlier indices ahead on ties
        let pos = best.partition_point(|nb| nb.distance <= distance);
        best.insert(pos, Neighbor { index, distance });
        best.truncate(k);
    }
    Ok(best)
}

/// Mean distance to the (up to) `k` nearest neighbors; 0 when exclusion
/// leaves no neighbors.
pub fn novelty_score(
    query: &[f64],
    points: &[f64],
    dim: usize,
    k: usize,
    exclude: Option<usize>,
) -> Result<f64, NoveltyError> {
    let neighbors = knn(query, points, dim, k, exclude)?;
    if neighbors.is_empty() {
        return Ok(0.0);
    }
    Ok(neighbors.iter().map(|nb| nb.distance).sum::<f64>() / neighbors.len() as f64)
}

/// Encodes every record's next observation under the live encoder, flat in
/// buffer order. Observations are encoded once per distinct state id.
pub fn encode_next_states(
    buffer: &HistoryBuffer,
    params: &ModelParams,
    exec: Execution,
) -> Result<Vec<f64>, NoveltyError> {
    let dim = params.abstract_dim();
    let mut slot_of: HashMap<usize, usize> = HashMap::new();
    let mut unique: Vec<&TransitionRecord> = Vec::new();
    let slots: Vec<usize> = buffer
        .iter()
        .map(|r| {
            *slot_of.entry(r.next_state).or_insert_with(|| {
                unique.push(r);
                unique.len() - 1
            })
        })
        .collect();
    let encoded = exec.map_slice(&unique, |r| params.encode(&r.next_obs));
    let encoded = encoded
        .into_iter()
        .map(|e| e.map(|s| s.0))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::with_capacity(slots.len() * dim);
    for s in slots {
        out.extend_from_slice(&encoded[s]);
    }
    Ok(out)
}

/// Recomputes every record's `r_intr` as the novelty of its encoded next
/// state against all other buffered next states. Returns the encodings
/// used.
pub fn refresh_intrinsic_rewards(
    buffer: &mut HistoryBuffer,
    params: &ModelParams,
    k: usize,
    exec: Execution,
) -> Result<Vec<f64>, NoveltyError> {
    let dim = params.abstract_dim();
    let points = encode_next_states(buffer, params, exec)?;
    let n = buffer.len();
    let scores = exec.map_range(n, |i| {
        novelty_score(&points[i * dim..(i + 1) * dim], &points, dim, k, Some(i))
    });
    for (record, score) in buffer.iter_mut().zip(scores) {
        record.r_intr = score?;
    }
    Ok(points)
}

/// Scores many queries against one point set.
pub fn novelty_scores(
    queries: &[f64],
    points: &[f64],
    dim: usize,
    k: usize,
    exec: Execution,
) -> Result<Vec<f64>, NoveltyError> {
    let m = point_count(queries, dim)?;
    exec.map_range(m, |i| {
        novelty_score(&queries[i * dim..(i + 1) * dim], points, dim, k, None)
    })
    .into_iter()
    .collect()
}

/// Volume of the `dim`-dimensional euclidean ball of radius `r`.
pub fn ball_volume(dim: usize, r: f64) -> f64 {
    // V_d = pi^(d/2) / Gamma(d/2 + 1) * r^d, with Gamma via the recursion
    // V_d = V_{d-2} * 2 pi / d
    let unit = match dim {
        0 => 1.0,
        1 => 2.0,
        _ => {
            let mut v = if dim % 2 == 0 { 1.0 } else { 2.0 };
            let mut d = if dim % 2 == 0 { 2 } else { 3 };
            while d <= dim {
                v *= 2.0 * PI / d as f64;
                d += 2;
            }
            v
        }
    };
    unit * r.powi(dim as i32)
}

/// Nonparametric k-NN density estimate `k / (n * V(r_k))`, where `r_k` is
/// the distance to the k-th nearest neighbor. A zero radius yields
/// `f64::INFINITY`.
pub fn recoding_density_oracle(
    query: &[f64],
    points: &[f64],
    dim: usize,
    k: usize,
    exclude: Option<usize>,
) -> Result<f64, NoveltyError> {
    let n = point_count(points, dim)? - usize::from(exclude.is_some());
    if n <= k {
        return Err(NoveltyError::TooFewPoints { k, n });
    }
    let neighbors = knn(query, points, dim, k, exclude)?;
    let radius = neighbors[k - 1].distance;
    if radius == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(k as f64 / (n as f64 * ball_volume(dim, radius)))
}
