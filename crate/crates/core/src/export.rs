//! File formats for run results: per-step metrics CSV, heatmaps,
//! representation dumps, buffer dumps and seed aggregates.
//!
//! All CSV files are comma separated with a header row and `.` decimals.

use std::collections::BTreeSet;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{RunLog, RunSummary};
use crate::envs::{Env, StateId};
use crate::metrics::mean_stderr;
use crate::nets::{ModelParams, NetError};
use crate::novelty::{HistoryBuffer, RecordDump};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("state {state} is not a state of the {env} environment")]
    UnknownState { state: StateId, env: String },
}

pub const METRICS_COLUMNS: [&str; 12] = [
    "step",
    "unique_visited",
    "coverage_fraction",
    "visited_once_fraction",
    "mean_r_intr",
    "L_Q",
    "L_R",
    "L_G",
    "L_tau",
    "L_d1",
    "L_csc",
    "iters_used",
];

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per step. Loss columns hold the last training iteration before
/// the step and are empty when no training ran.
pub fn write_metrics_csv<W: Write>(log: &RunLog, w: W) -> Result<(), ExportError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_COLUMNS)?;
    for s in &log.steps {
        let l = s.losses;
        out.write_record([
            s.t.to_string(),
            s.unique_visited.to_string(),
            s.coverage_fraction.to_string(),
            s.visited_once_fraction.to_string(),
            s.mean_r_intr.to_string(),
            opt(l.map(|l| l.l_q)),
            opt(l.map(|l| l.l_r)),
            opt(l.map(|l| l.l_g)),
            opt(l.map(|l| l.l_tau)),
            opt(l.map(|l| l.l_d1)),
            opt(l.map(|l| l.l_csc)),
            s.iters_used.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Grid of counts, one CSV row per grid row, columns `c0..c{w-1}`.
pub fn write_heatmap_csv<W: Write>(grid: &[Vec<u64>], w: W) -> Result<(), ExportError> {
    let mut out = csv::Writer::from_writer(w);
    let width = grid.first().map_or(0, Vec::len);
    out.write_record((0..width).map(|c| format!("c{c}")))?;
    for row in grid {
        out.write_record(row.iter().map(u64::to_string))?;
    }
    out.flush()?;
    Ok(())
}

/// Distinct states appearing in the buffer, as source or destination.
pub fn buffered_states(buffer: &HistoryBuffer) -> BTreeSet<StateId> {
    buffer
        .iter()
        .flat_map(|r| [r.state, r.next_state])
        .collect()
}

/// `state_id,row,col,has_key,x0..x{n-1}`: each state's grid position and
/// its encoding under `params`, in state id order.
pub fn write_representation_csv<W: Write>(
    env: &Env,
    params: &ModelParams,
    states: &BTreeSet<StateId>,
    w: W,
) -> Result<(), ExportError> {
    let reachable = env.reachable_states();
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["state_id".to_string(), "row".into(), "col".into(), "has_key".into()];
    header.extend((0..params.abstract_dim()).map(|i| format!("x{i}")));
    out.write_record(&header)?;
    for &s in states {
        if !reachable.contains(&s) {
            return Err(ExportError::UnknownState {
                state: s,
                env: env.kind().to_string(),
            });
        }
        let info = env.state_info(s);
        let x = params.encode(&env.observation_for(s))?;
        let mut row = vec![
            s.to_string(),
            info.row.to_string(),
            info.col.to_string(),
            u8::from(info.has_key).to_string(),
        ];
        row.extend(x.as_slice().iter().map(f64::to_string));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// A buffered transition reduced to state ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionEdge {
    pub state: StateId,
    pub action: usize,
    pub next_state: StateId,
}

pub fn buffer_edges(buffer: &HistoryBuffer) -> Vec<TransitionEdge> {
    buffer
        .iter()
        .map(|r| TransitionEdge {
            state: r.state,
            action: r.action,
            next_state: r.next_state,
        })
        .collect()
}

/// `from_id,action,to_id`, in buffer order.
pub fn write_transitions_csv<W: Write>(edges: &[TransitionEdge], w: W) -> Result<(), ExportError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["from_id", "action", "to_id"])?;
    for e in edges {
        out.write_record([e.state.to_string(), e.action.to_string(), e.next_state.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// One JSON object per buffered record, oldest first. Encodings are empty
/// when there is no model.
pub fn write_buffer_ndjson<W: Write>(
    buffer: &HistoryBuffer,
    params: Option<&ModelParams>,
    mut w: W,
) -> Result<(), ExportError> {
    for (index, r) in buffer.iter().enumerate() {
        let (x, x_next) = match params {
            Some(p) => (p.encode(&r.obs)?.0, p.encode(&r.next_obs)?.0),
            None => (Vec::new(), Vec::new()),
        };
        let dump = RecordDump {
            index,
            state: r.state,
            action: r.action,
            next_state: r.next_state,
            r_extr: r.r_extr,
            r_intr: r.r_intr,
            discount: r.discount,
            encoded_state: &x,
            encoded_next_state: &x_next,
        };
        serde_json::to_writer(&mut w, &dump)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the state ids back from a buffer dump.
pub fn read_buffer_edges<R: BufRead>(r: R) -> Result<Vec<TransitionEdge>, ExportError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Mean and standard error of one summary field across seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Aggregates every numeric summary field. A field missing from some runs
/// (steps to goal) is averaged over the runs that have it.
pub fn aggregate(summaries: &[RunSummary]) -> Vec<AggregateRow> {
    let mut names: Vec<&'static str> = Vec::new();
    for s in summaries {
        for (name, _) in s.numeric_fields() {
            if !names.contains(&name) {
                names.push(name);
            }
        }
    }
    names
        .into_iter()
        .map(|name| {
            let values: Vec<f64> = summaries
                .iter()
                .filter_map(|s| s.numeric_fields().into_iter().find(|(n, _)| *n == name))
                .map(|(_, v)| v)
                .collect();
            let (mean, stderr) = mean_stderr(&values);
            AggregateRow {
                metric: name.to_string(),
                mean,
                stderr,
                n: values.len(),
            }
        })
        .collect()
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], w: W) -> Result<(), ExportError> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(["metric", "mean", "stderr", "n"])?;
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{run_exploration, Policy, RunConfig, RunOptions};
    use crate::envs::EnvKind;
    use crate::metrics::heatmap;

    fn tiny(env: EnvKind, policy: Policy) -> RunConfig {
        let mut c = RunConfig::defaults(env);
        c.policy = policy;
        c.n_init = 16;
        c.n_max = 24;
        c.batch_size = 8;
        c.n_iters = 5;
        c.depth = 1;
        c
    }

    #[test]
    fn metrics_csv_layout() {
        let out = run_exploration(&tiny(EnvKind::OpenLabyrinth, Policy::Novelty), RunOptions::default())
            .unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&out.log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_COLUMNS.join(","));
        assert_eq!(lines.len(), 25);
        // random phase rows have empty loss columns
        assert!(lines[1].starts_with("1,") && lines[1].contains(",,,,,,"));
        let trained: Vec<&str> = lines[17].split(',').collect();
        assert_eq!(trained.len(), 12);
        assert!(trained[5..11].iter().all(|v| v.parse::<f64>().is_ok()));
    }

    #[test]
    fn key_maze_representation_has_three_columns() {
        let c = tiny(EnvKind::KeyMaze, Policy::Novelty);
        let out = run_exploration(&c, RunOptions::default()).unwrap();
        let params = out.params.unwrap();
        let env = Env::new(EnvKind::KeyMaze);
        let states = buffered_states(&out.buffer);
        let mut a = Vec::new();
        write_representation_csv(&env, &params, &states, &mut a).unwrap();
        let text = String::from_utf8(a.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "state_id,row,col,has_key,x0,x1,x2");
        assert_eq!(lines.count(), states.len());
        let mut b = Vec::new();
        write_representation_csv(&env, &params, &states, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_state_is_rejected() {
        let c = tiny(EnvKind::OpenLabyrinth, Policy::Novelty);
        let out = run_exploration(&c, RunOptions::default()).unwrap();
        let env = Env::new(EnvKind::OpenLabyrinth);
        let bogus: BTreeSet<StateId> = [0].into();
        let err = write_representation_csv(&env, &out.params.unwrap(), &bogus, Vec::new());
        assert!(matches!(err, Err(ExportError::UnknownState { .. })));
    }

    #[test]
    fn buffer_dump_round_trips_edges() {
        let out = run_exploration(&tiny(EnvKind::FourRoom, Policy::Random), RunOptions::default())
            .unwrap();
        let mut buf = Vec::new();
        write_buffer_ndjson(&out.buffer, None, &mut buf).unwrap();
        assert_eq!(read_buffer_edges(&buf[..]).unwrap(), buffer_edges(&out.buffer));
        let mut csv_out = Vec::new();
        write_transitions_csv(&buffer_edges(&out.buffer), &mut csv_out).unwrap();
        assert_eq!(String::from_utf8(csv_out).unwrap().lines().count(), 25);
    }

    #[test]
    fn heatmap_csv_sums_to_steps() {
        let out = run_exploration(&tiny(EnvKind::FourRoom, Policy::Random), RunOptions::default())
            .unwrap();
        let env = Env::new(EnvKind::FourRoom);
        let mut buf = Vec::new();
        write_heatmap_csv(&heatmap(&env, &out.log.arrivals()), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let total: u64 = text
            .lines()
            .skip(1)
            .flat_map(|l| l.split(',').map(|v| v.parse::<u64>().unwrap()).collect::<Vec<_>>())
            .sum();
        assert_eq!(total, 24);
        assert_eq!(text.lines().count(), env.height() + 1);
    }

    #[test]
    fn aggregate_matches_hand_computation() {
        let runs: Vec<RunSummary> = [2u64, 3, 4]
            .iter()
            .map(|&seed| {
                let mut c = tiny(EnvKind::OpenLabyrinth, Policy::Random);
                c.seed = seed;
                run_exploration(&c, RunOptions::default()).unwrap().summary
            })
            .collect();
        let rows = aggregate(&runs);
        let cov = rows.iter().find(|r| r.metric == "coverage_fraction").unwrap();
        let v: Vec<f64> = runs.iter().map(|s| s.coverage_fraction).collect();
        let mean = (v[0] + v[1] + v[2]) / 3.0;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 2.0;
        assert!((cov.mean - mean).abs() < 1e-15);
        assert!((cov.stderr - (var / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(cov.n, 3);
        assert!(rows.iter().all(|r| r.metric != "steps_to_goal"));
        let mut buf = Vec::new();
        write_aggregate_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("metric,mean,stderr,n\nsteps,24.0,0.0,3\n"), "{text}");
    }
}
