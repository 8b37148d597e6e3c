use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scout_core::envs::{Env, EnvKind};
use scout_core::nets::{Architecture, ModelParams};
use scout_core::novelty::{
    novelty_scores, refresh_intrinsic_rewards, HistoryBuffer, TransitionRecord,
};
use scout_core::planner::{q_plan, LearnedModel, PlanConfig};
use scout_core::Execution;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn random_walk_buffer(env: &mut Env, steps: usize, rng: &mut ChaCha8Rng) -> HistoryBuffer {
    let mut buffer = HistoryBuffer::new(steps);
    let mut obs = env.reset();
    for _ in 0..steps {
        let state = env.state();
        let action = rng.random_range(0..env.n_actions());
        let out = env.step(action).unwrap();
        buffer.push(TransitionRecord {
            obs: obs.clone(),
            action,
            r_extr: out.reward,
            r_intr: 0.0,
            discount: out.discount,
            next_obs: out.observation.clone(),
            state,
            next_state: env.state(),
        });
        obs = out.observation;
    }
    buffer
}

fn setup() -> (Env, ModelParams, HistoryBuffer) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut env = Env::new(EnvKind::OpenLabyrinth);
    let params = ModelParams::new(Architecture::standard(env.obs_dim(), 2, 4), &mut rng);
    let buffer = random_walk_buffer(&mut env, 1000, &mut rng);
    (env, params, buffer)
}

fn refresh(c: &mut Criterion) {
    let (_, params, buffer) = setup();
    let mut group = c.benchmark_group("refresh_intrinsic_rewards");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched_ref(
                || buffer.clone(),
                |buf| refresh_intrinsic_rewards(buf, &params, 5, exec).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn scores(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let points: Vec<f64> = (0..2000).map(|_| rng.random_range(-3.0..3.0)).collect();
    let queries: Vec<f64> = (0..2000).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut group = c.benchmark_group("novelty_scores");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| novelty_scores(&queries, &points, 2, 5, exec).unwrap())
        });
    }
    group.finish();
}

fn planning(c: &mut Criterion) {
    let (env, params, mut buffer) = setup();
    let points = refresh_intrinsic_rewards(&mut buffer, &params, 5, Execution::Sequential).unwrap();
    let x = params.encode(&env.observation_for(env.start_state())).unwrap();
    let model = LearnedModel {
        params: &params,
        points: Some(&points),
        k: 5,
    };
    let config = PlanConfig {
        depth: 5,
        b: 4,
        epsilon: 0.0,
    };
    let mut group = c.benchmark_group("q_plan_depth5");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| q_plan(&model, &x.0, &config, exec, false).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, refresh, scores, planning);
criterion_main!(benches);
