use scout_core::agent::{run_exploration, Policy, RunConfig, RunOptions};
use scout_core::envs::{Env, EnvKind};
use scout_core::export::{
    buffer_edges, read_buffer_edges, write_buffer_ndjson, write_representation_csv,
};
use scout_core::metrics::compute_coverage;
use scout_core::nets::{load_checkpoint, save_checkpoint};
use scout_core::Execution;

fn small(env: EnvKind, policy: Policy) -> RunConfig {
    let mut c = RunConfig::defaults(env);
    c.policy = policy;
    c.n_init = 16;
    c.n_max = 40;
    c.batch_size = 8;
    c.n_iters = 10;
    c.depth = 2;
    c.seed = 5;
    c
}

#[test]
fn checkpoint_round_trip_preserves_encodings() {
    let out = run_exploration(&small(EnvKind::FourRoom, Policy::Novelty), RunOptions::default())
        .unwrap();
    let params = out.params.expect("model-based run keeps its params");
    let path = std::env::temp_dir().join(format!("scout-pipeline-{}.ckpt", std::process::id()));
    save_checkpoint(&path, &params).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(params, loaded);

    let env = Env::new(EnvKind::FourRoom);
    let obs = env.observation_for(env.start_state());
    assert_eq!(params.encode(&obs).unwrap(), loaded.encode(&obs).unwrap());
}

#[test]
fn buffer_dump_reproduces_the_visited_edges() {
    let out = run_exploration(&small(EnvKind::KeyMaze, Policy::Novelty), RunOptions::default())
        .unwrap();
    let mut dump = Vec::new();
    write_buffer_ndjson(&out.buffer, out.params.as_ref(), &mut dump).unwrap();
    assert_eq!(read_buffer_edges(dump.as_slice()).unwrap(), buffer_edges(&out.buffer));

    let env = Env::new(EnvKind::KeyMaze);
    let states = buffer_edges(&out.buffer)
        .iter()
        .flat_map(|e| [e.state, e.next_state])
        .collect();
    let mut csv = Vec::new();
    write_representation_csv(&env, out.params.as_ref().unwrap(), &states, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), states.len() + 1);
}

#[test]
fn logged_coverage_matches_a_replay() {
    for policy in Policy::ALL {
        let c = small(EnvKind::OpenLabyrinth, policy);
        let out = run_exploration(&c, RunOptions::default()).unwrap();
        let env = Env::new(c.env);
        let r: Vec<f64> = out.log.steps.iter().map(|s| s.mean_r_intr).collect();
        let replay = compute_coverage(&env, &out.log.arrivals(), &r);
        assert_eq!(replay.len(), out.log.steps.len());
        for (s, m) in out.log.steps.iter().zip(&replay) {
            assert_eq!(s.unique_visited, m.unique_visited, "{policy} t={}", s.t);
            assert_eq!(s.coverage_fraction, m.coverage_fraction);
        }
    }
}

#[test]
fn sequential_and_parallel_runs_agree() {
    let c = small(EnvKind::OpenLabyrinth, Policy::Novelty);
    let log = |exec| {
        let mut buf = Vec::new();
        run_exploration(&c, RunOptions { exec, plan_trace: None })
            .unwrap()
            .log
            .write_ndjson(&mut buf)
            .unwrap();
        buf
    };
    assert_eq!(log(Execution::Sequential), log(Execution::Parallel));
}
