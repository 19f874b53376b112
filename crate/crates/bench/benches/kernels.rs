use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use dtrl_core::dtmodel::{DtConfig, DtPolicy, Sequence, Tape};
use dtrl_core::envsim::{generate_offline_dataset, make_env, EnvSpec, Quality};
use dtrl_core::grpodt::{generate_group, group_advantages, rollout_full, GrpoConfig};
use dtrl_core::ppodt::gae;
use dtrl_core::pretrain::{pretrain_loss, sample_pretrain_batch, PretrainLoss};
use dtrl_core::seed::rng_from;

fn policy(context_len: usize) -> DtPolicy {
    let cfg = DtConfig { n_layers: 1, n_heads: 2, embed_dim: 32, context_len, action_dim: 2, obs_dim: 4, ..DtConfig::default() };
    DtPolicy::new(cfg, &mut rng_from(0)).unwrap()
}

fn env_step(c: &mut Criterion) {
    let mut env = make_env(EnvSpec::dense(2)).unwrap();
    env.reset(0);
    c.bench_function("env_step", |b| {
        b.iter(|| {
            let r = env.step(black_box(&[0.3, -0.2])).unwrap();
            if r.done {
                env.reset(1);
            }
        })
    });
}

fn forward(c: &mut Criterion) {
    let mut env = make_env(EnvSpec::dense(2)).unwrap();
    let data = generate_offline_dataset(&mut env, Quality::Medium, 500, 0).unwrap();
    let seq = Sequence::segment(&data[0], 0, 20);
    let pol = policy(20);
    c.bench_function("dt_forward_20_steps", |b| b.iter(|| pol.forward_seq(black_box(&seq)).unwrap()));
}

fn pretrain_backward(c: &mut Criterion) {
    let mut env = make_env(EnvSpec::dense(2)).unwrap();
    let data = generate_offline_dataset(&mut env, Quality::Random, 2000, 0).unwrap();
    let pol = policy(5);
    let batch = sample_pretrain_batch(&data, 32, 5, &mut rng_from(1)).unwrap();
    c.bench_function("pretrain_loss_backward_b32", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let bound = pol.params.bind(&mut t);
            let (loss, _, _) = pretrain_loss(&mut t, &pol, &bound, &batch, 0.1, PretrainLoss::Nll, None).unwrap();
            t.backward(loss)
        })
    });
}

fn grpo_group(c: &mut Criterion) {
    let mut env = make_env(EnvSpec::dense(2)).unwrap();
    let pol = policy(1);
    let tr = rollout_full(&mut env, &pol, 0.0, 0, &mut rng_from(2)).unwrap();
    let cfg = GrpoConfig { l_traj: 5, l_eval: 30, ..GrpoConfig::default() };
    let mut seed = 0;
    c.bench_function("grpo_generate_group_g8", |b| {
        b.iter(|| {
            seed += 1;
            generate_group(&mut env, &pol, &tr, 40, &cfg, seed).unwrap()
        })
    });
}

fn advantage_kernels(c: &mut Criterion) {
    let mut rng = rng_from(3);
    let rewards: Vec<f64> = (0..20).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    let values: Vec<f64> = (0..21).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    c.bench_function("gae_len20", |b| b.iter(|| gae(black_box(&rewards), black_box(&values), 0.99, 0.95).unwrap()));
    c.bench_function("group_advantages_g16", |b| {
        b.iter_batched(|| rewards[..16].to_vec(), |r| group_advantages(&r, 0.0), BatchSize::SmallInput)
    });
}

criterion_group!(benches, env_step, forward, pretrain_backward, grpo_group, advantage_kernels);
criterion_main!(benches);
