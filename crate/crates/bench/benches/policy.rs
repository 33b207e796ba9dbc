use criterion::{criterion_group, criterion_main, Criterion};
use egs_core::reward::{dssim, psnr};
use egs_core::sampler::feature_matrix;
use egs_core::scene::generate_scene;
use egs_core::trainer::{bandit_step, frame_contexts, BanditState};
use egs_core::{Aabb, BudgetSet, CandidatePool, Environment, Policy, PolicyConfig, RewardConfig, SceneSpec, TrainerConfig};

fn bench_forward(c: &mut Criterion) {
    let frame = generate_scene(&SceneSpec::default()).unwrap().remove(0);
    let pool = CandidatePool::build(&frame, Aabb::default(), 2048, 0.01).unwrap();
    let features = feature_matrix(&pool).unwrap();
    let policy = Policy::new(PolicyConfig::default(), BudgetSet::scaled(64).unwrap(), 2026).unwrap();
    c.bench_function("policy_forward_384", |b| b.iter(|| policy.forward(&features).unwrap()));
}

fn bench_bandit_step(c: &mut Criterion) {
    let scenes = vec![generate_scene(&SceneSpec::default()).unwrap()];
    let contexts = frame_contexts(&scenes, Aabb::default(), 2048, 0.01).unwrap();
    let reward = RewardConfig {
        kappa_max: 128,
        ref_budget: 128,
        teacher_budget: 256,
        ..RewardConfig::default()
    };
    let env = Environment::new(reward, Aabb::default()).unwrap();
    let cfg = TrainerConfig::default();
    let opt = cfg.optimizer();
    let mut policy = Policy::new(PolicyConfig::default(), BudgetSet::scaled(64).unwrap(), 2026).unwrap();
    let mut state = BanditState::default();
    c.bench_function("bandit_step", |b| {
        b.iter(|| {
            let fc = &contexts[state.step % contexts.len()];
            bandit_step(&mut policy, &opt, &cfg, &env, fc, &mut state).unwrap()
        })
    });
}

fn bench_metrics(c: &mut Criterion) {
    let env = Environment::new(RewardConfig::default(), Aabb::default()).unwrap();
    let frame = generate_scene(&SceneSpec::default()).unwrap().remove(0);
    let pool = CandidatePool::build(&frame, Aabb::default(), 2048, 0.01).unwrap();
    let target = env.target(0, &frame);
    let half: Vec<usize> = (0..pool.len()).step_by(2).collect();
    let img = env.render_subset(&pool, &half);
    c.bench_function("render_half_pool", |b| b.iter(|| env.render_subset(&pool, &half)));
    c.bench_function("psnr", |b| b.iter(|| psnr(&img, &target).unwrap()));
    c.bench_function("dssim", |b| b.iter(|| dssim(&img, &target).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_forward, bench_bandit_step, bench_metrics
}
criterion_main!(benches);
