//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line per criterion and exits nonzero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use dtrl_core::dtmodel::gaussian::gaussian_kl;
use dtrl_core::dtmodel::{flatten_grads, grad_check, Bound, DtConfig, DtPolicy, Mat, Mlp, MlpConfig, ModelParams, NodeId, OutputInit, Tape};
use dtrl_core::envsim::{generate_offline_dataset, make_env, EnvSpec, Quality};
use dtrl_core::grpodt::{generate_group, group_advantages, grpo_loss, record_ratios, rollout_full, sample_reset_points, GrpoConfig, RatioMode};
use dtrl_core::harness::{finetune, parse_config, prepare_policy, pretrain_csv, pretrain_policy, build_dataset, build_env, relabel_instability_report, run_finetune, Algo, TrainConfig};
use dtrl_core::metrics::{csv_digest, parse_csv, to_csv, IterMetrics, MetricsTable};
use dtrl_core::ppodt::{gae, ppo_loss, value_loss, window_record, PpoConfig, PpoSample};
use dtrl_core::pretrain::{evaluate, pretrain_loss, sample_pretrain_batch, PretrainLoss};
use dtrl_core::qguided::critic_loss;
use dtrl_core::seed::rng_from;
use dtrl_core::traj::{length_weighted_indices, RtgForm, SubTrajRecord, Trajectory};

const DENSE: &str = include_str!("../../../configs/desk-dense.toml");
const RELABEL: &str = include_str!("../../../configs/desk-relabel.toml");
const SPARSE: &str = include_str!("../../../configs/desk-sparse.toml");
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn seeded(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..base.clone() }
}

/// Pretrained desk-scale dense policies, one per seed, shared by several criteria.
fn dense_policies() -> &'static Vec<DtPolicy> {
    static CELL: OnceLock<Vec<DtPolicy>> = OnceLock::new();
    CELL.get_or_init(|| {
        let base = parse_config(DENSE).unwrap();
        SEEDS.iter().map(|&s| prepare_policy(&seeded(&base, s)).unwrap()).collect()
    })
}

/// First iteration at which the eval score reaches `threshold`, stopping there.
fn iterations_to(algo: Algo, cfg: &TrainConfig, policy: &DtPolicy, threshold: f64) -> (Option<usize>, usize) {
    let mut env = build_env(cfg).unwrap();
    let mut pol = policy.clone();
    let mut hit = None;
    finetune(algo, cfg, &mut env, &mut pol, &mut |m: &IterMetrics| {
        if m.eval_score_mean >= threshold {
            hit = Some(m.iteration);
            return false;
        }
        true
    })
    .unwrap();
    (hit, env.reset_to_calls())
}

fn iters_as_f64(x: Option<usize>) -> f64 {
    x.map_or(f64::INFINITY, |v| v as f64)
}

fn baseline_score(cfg: &TrainConfig, policy: &DtPolicy, g: f64) -> (f64, f64) {
    let mut env = build_env(cfg).unwrap();
    let r = evaluate(policy, &mut env, g, cfg.eval.episodes, cfg.eval.mode, dtrl_core::seed::derive(cfg.seed, "baseline-eval")).unwrap();
    (r.mean_score, r.success_rate)
}

// ---------------------------------------------------------------- gradients

fn tiny_policy(context_len: usize, seed: u64) -> DtPolicy {
    let cfg = DtConfig { n_layers: 1, n_heads: 2, embed_dim: 8, context_len, action_dim: 2, obs_dim: 4, dropout: 0.0, ..DtConfig::default() };
    DtPolicy::new(cfg, &mut rng_from(seed)).unwrap()
}

fn perturbed(p: &DtPolicy, scale: f64, seed: u64) -> DtPolicy {
    let mut q = p.clone();
    let mut rng = rng_from(seed);
    let n = Normal::new(0.0, scale).unwrap();
    q.params.tensors_mut().iter_mut().for_each(|t| t.data.iter_mut().for_each(|x| *x += n.sample(&mut rng)));
    q
}

fn check_policy(pol: &DtPolicy, build: &dyn Fn(&mut Tape, &DtPolicy, &Bound) -> NodeId) -> f64 {
    let mut t = Tape::new();
    let bound = pol.params.bind(&mut t);
    let loss = build(&mut t, pol, &bound);
    let mut grads = t.backward(loss);
    let analytic = flatten_grads(&pol.params.collect_grads(&bound, &mut grads));
    let eval = |p: &ModelParams| {
        let probe = DtPolicy { config: pol.config.clone(), params: p.clone() };
        let mut t = Tape::new();
        let b = probe.params.bind_const(&mut t);
        let l = build(&mut t, &probe, &b);
        t.scalar(l)
    };
    grad_check(eval, &pol.params, &analytic, 1e-5)
}

fn check_mlp(net: &Mlp, build: &dyn Fn(&mut Tape, &Mlp, &Bound) -> NodeId) -> f64 {
    let mut t = Tape::new();
    let bound = net.params.bind(&mut t);
    let loss = build(&mut t, net, &bound);
    let mut grads = t.backward(loss);
    let analytic = flatten_grads(&net.params.collect_grads(&bound, &mut grads));
    let eval = |p: &ModelParams| {
        let probe = Mlp { config: net.config.clone(), params: p.clone() };
        let mut t = Tape::new();
        let b = probe.params.bind_const(&mut t);
        let l = build(&mut t, &probe, &b);
        t.scalar(l)
    };
    grad_check(eval, &net.params, &analytic, 1e-5)
}

fn random_rows(n: usize, d: usize, rng: &mut dtrl_core::seed::Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn gradient_checks() -> Outcome {
    let spec = EnvSpec::dense(2);
    let mut env = make_env(spec.clone()).unwrap();
    let mut results = Vec::new();

    let data = generate_offline_dataset(&mut env, Quality::Medium, 300, 1).unwrap();
    let pol = tiny_policy(3, 2);
    let batch = sample_pretrain_batch(&data, 3, 3, &mut rng_from(3)).unwrap();
    results.push((
        "pretrain-nll",
        check_policy(&pol, &|t, p, b| pretrain_loss(t, p, b, &batch, 0.1, PretrainLoss::Nll, None).unwrap().0),
    ));

    let tr = rollout_full(&mut env, &pol, 0.5, 4, &mut rng_from(5)).unwrap();
    let gcfg = GrpoConfig { group_size: 3, l_traj: 4, l_eval: 5, beta: 0.5, ..GrpoConfig::default() };
    let mut records: Vec<SubTrajRecord> = Vec::new();
    for (i, k) in [2usize, 20, 60].into_iter().enumerate() {
        let (g, _) = generate_group(&mut env, &pol, &tr, k, &gcfg, 10 + i as u64).unwrap().unwrap();
        records.extend(g);
    }
    let mut rng = rng_from(6);
    for r in &mut records {
        r.advantage = rng.random_range(-1.5..1.5);
        // Keep ratios off 1 but well inside the clip range.
        for lp in &mut r.behavior_token_logprobs {
            *lp += rng.random_range(-0.01..0.01);
        }
        r.behavior_seq_logprob = r.behavior_token_logprobs.iter().sum();
    }
    let reference = perturbed(&pol, 0.05, 7);
    let refs: Vec<&SubTrajRecord> = records.iter().collect();
    for (name, seq, gm) in [("grpo-sequence", true, false), ("grpo-token", false, false), ("grpo-geometric", true, true)] {
        let c = GrpoConfig { sequence_ratio: seq, geometric_mean: gm, ..gcfg.clone() };
        results.push((name, check_policy(&pol, &|t, p, b| grpo_loss(t, p, b, &reference, &refs, &c, 0.3).unwrap().0)));
    }

    let mut samples = Vec::new();
    for s in [0usize, 17, 80] {
        let record = window_record(&tr, s, 4, pol.config.context_len);
        let mut record = record;
        for lp in &mut record.behavior_token_logprobs {
            *lp += rng.random_range(-0.01..0.01);
        }
        let advantages = (0..record.len()).map(|_| rng.random_range(-1.5..1.5)).collect();
        samples.push(PpoSample { value_targets: vec![0.0; record.len()], record, advantages });
    }
    let sref: Vec<&PpoSample> = samples.iter().collect();
    let pcfg = PpoConfig { beta: 0.5, ..PpoConfig::default() };
    results.push(("ppo-surrogate", check_policy(&pol, &|t, p, b| ppo_loss(t, p, b, &reference, &sref, &pcfg, 0.3).unwrap().0)));

    let mk = |input_dim| {
        Mlp::new(MlpConfig { input_dim, hidden: 8, layer_norm: true, output_init: OutputInit::Small }, &mut rng_from(input_dim as u64)).unwrap()
    };
    let states = random_rows(6, 4, &mut rng);
    let targets: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
    let v = mk(4);
    results.push(("value-loss", check_mlp(&v, &|t, n, b| value_loss(t, n, b, &states, &targets).unwrap())));
    let q = mk(6);
    let inputs = Mat::from_rows(&random_rows(6, 6, &mut rng), 6);
    results.push(("td3-critic", check_mlp(&q, &|t, n, b| critic_loss(t, n, b, &inputs, &targets))));

    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail = results.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect::<Vec<_>>().join(" ");
    outcome(worst < 1e-3, format!("max rel err {worst:.2e} < 1e-3 ({detail})"))
}

// ---------------------------------------------------------------- oracles

/// Independent straight-line group normalization.
fn advantage_oracle(rewards: &[f64], delta_r: f64) -> (Vec<f64>, Vec<bool>) {
    let mut sum = 0.0;
    for r in rewards {
        sum += r;
    }
    let mean = sum / rewards.len() as f64;
    let mut keep = Vec::new();
    let mut kept = Vec::new();
    for r in rewards {
        let k = (r - mean).abs() >= delta_r;
        keep.push(k);
        if k {
            kept.push(*r);
        }
    }
    if kept.len() < 2 {
        return (vec![0.0; rewards.len()], vec![false; rewards.len()]);
    }
    let mut s = 0.0;
    for k in &kept {
        s += k;
    }
    let m = s / kept.len() as f64;
    let mut var = 0.0;
    for k in &kept {
        var += (k - m) * (k - m);
    }
    let sd = (var / kept.len() as f64).sqrt();
    let adv = rewards.iter().zip(&keep).map(|(r, k)| if *k { (r - m) / (sd + 1e-8) } else { 0.0 }).collect();
    (adv, keep)
}

fn advantage_oracle_check() -> Outcome {
    let mut rng = rng_from(11);
    let (mut worst_mean, mut worst_std, mut checked, mut mismatches) = (0.0f64, 0.0f64, 0, 0);
    for trial in 0..1000 {
        let g = rng.random_range(2..=16);
        let scale = 10f64.powf(rng.random_range(-1.0..2.0));
        let offset = rng.random_range(-50.0..50.0);
        let rewards: Vec<f64> = if trial % 50 == 0 {
            vec![offset; g]
        } else {
            (0..g).map(|_| offset + scale * Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect()
        };
        let (adv, keep) = group_advantages(&rewards, 0.0);
        assert!(keep.iter().all(|k| *k));
        let n = g as f64;
        let rm = rewards.iter().sum::<f64>() / n;
        let raw_sd = (rewards.iter().map(|r| (r - rm) * (r - rm)).sum::<f64>() / n).sqrt();
        if raw_sd > 1e-6 {
            let m = adv.iter().sum::<f64>() / n;
            let sd = (adv.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n).sqrt();
            worst_mean = worst_mean.max(m.abs());
            worst_std = worst_std.max((sd - 1.0).abs());
            checked += 1;
        }
        for delta in [0.0, 0.3 * raw_sd, raw_sd, 2.5 * raw_sd] {
            if group_advantages(&rewards, delta) != advantage_oracle(&rewards, delta) {
                mismatches += 1;
            }
        }
    }
    let pass = worst_mean < 1e-9 && worst_std < 1e-6 && mismatches == 0;
    outcome(pass, format!("{checked} groups: max|mean| {worst_mean:.1e} < 1e-9, max|std-1| {worst_std:.1e} < 1e-6, filter mismatches {mismatches}/4000"))
}

fn gae_double_sum(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let t = rewards.len();
    (0..t)
        .map(|h| {
            (0..t - h)
                .map(|l| {
                    let d = rewards[h + l] + gamma * values[h + l + 1] - values[h + l];
                    (gamma * lambda).powi(l as i32) * d
                })
                .sum()
        })
        .collect()
}

fn gae_oracle_check() -> Outcome {
    let mut rng = rng_from(12);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=20);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let values: Vec<f64> = (0..=n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gamma = rng.random_range(0.5..=1.0);
        for lambda in [0.0, 0.5, 0.95, 1.0] {
            let a = gae(&rewards, &values, gamma, lambda).unwrap();
            let b = gae_double_sum(&rewards, &values, gamma, lambda);
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    outcome(worst < 1e-10, format!("max |recursion - double sum| {worst:.1e} < 1e-10 over 4000 cases"))
}

fn ratio_identities() -> Outcome {
    let mut env = make_env(EnvSpec::dense(2)).unwrap();
    let pol = tiny_policy(3, 21);
    let tr = rollout_full(&mut env, &pol, 1.0, 3, &mut rng_from(22)).unwrap();
    let cfg = GrpoConfig { group_size: 4, l_traj: 6, l_eval: 4, ..GrpoConfig::default() };
    let mut records = Vec::new();
    for (i, k) in [0usize, 31, 77].into_iter().enumerate() {
        records.extend(generate_group(&mut env, &pol, &tr, k, &cfg, 30 + i as u64).unwrap().unwrap().0);
    }
    let (mut identity, mut product, mut geo) = (0.0f64, 0.0f64, 0.0f64);
    for r in &records {
        for mode in [RatioMode::Sequence, RatioMode::Token, RatioMode::GeometricMean] {
            for w in record_ratios(&pol, r, mode).unwrap() {
                identity = identity.max((w - 1.0).abs());
            }
        }
    }
    let moved = perturbed(&pol, 0.02, 23);
    for r in &records {
        let seq = record_ratios(&moved, r, RatioMode::Sequence).unwrap()[0];
        let prod: f64 = record_ratios(&moved, r, RatioMode::Token).unwrap().iter().product();
        let gm = record_ratios(&moved, r, RatioMode::GeometricMean).unwrap()[0];
        product = product.max((seq - prod).abs() / seq.max(1.0));
        geo = geo.max((gm - seq.powf(1.0 / r.len() as f64)).abs());
    }
    let mut kl = 0.0f64;
    for r in &records {
        for j in 0..r.len() {
            let d = pol.forward(&r.context(j, pol.config.context_len)).unwrap();
            kl = kl.max(gaussian_kl(&d, &d));
        }
    }
    let refs: Vec<&SubTrajRecord> = records.iter().collect();
    let mut t = Tape::new();
    let b = pol.params.bind_const(&mut t);
    let (_, stats) = grpo_loss(&mut t, &pol, &b, &pol, &refs, &cfg, 0.1).unwrap();
    kl = kl.max(stats.kl_to_ref.abs());
    let pass = identity < 1e-6 && product < 1e-6 && geo < 1e-6 && kl < 1e-12;
    outcome(pass, format!("|w-1| {identity:.1e}, seq vs token product {product:.1e}, GM vs root {geo:.1e} (< 1e-6); KL(p||p) {kl:.1e} < 1e-12"))
}

fn chi_squared_p(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let stat: f64 = counts.iter().zip(probs).map(|(&c, &p)| {
        let e = p * n as f64;
        (c as f64 - e) * (c as f64 - e) / e
    }).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

fn sampling_laws() -> Outcome {
    let draws = 100_000;
    let lengths = [3usize, 17, 1, 40, 9, 25, 60, 12];
    let total: usize = lengths.iter().sum();
    let probs: Vec<f64> = lengths.iter().map(|&l| l as f64 / total as f64).collect();
    let mut counts = vec![0u64; lengths.len()];
    for i in length_weighted_indices(&lengths, draws, &mut rng_from(41)).unwrap() {
        counts[i] += 1;
    }
    let p_len = chi_squared_p(&counts, &probs);

    let vars = [0.05, 0.4, 0.9, 1.6, 0.0, 2.1, 0.7, 1.2, 0.3, 2.8];
    let mut tr = Trajectory::empty(RtgForm::Rollout, 0.0, 0);
    for v in vars {
        tr.states.push(vec![0.0; 4]);
        tr.actions.push(vec![0.0; 2]);
        tr.rewards.push(0.0);
        tr.rtgs.push(0.0);
        tr.action_vars.push(v);
    }
    let mx = vars.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = vars.iter().map(|v| (v - mx).exp()).sum();
    let softmax: Vec<f64> = vars.iter().map(|v| (v - mx).exp() / z).collect();
    let mut rng = rng_from(42);
    let mut counts = vec![0u64; vars.len()];
    for _ in 0..draws {
        counts[sample_reset_points(&tr, 1, true, &mut rng).unwrap()[0]] += 1;
    }
    let p_reset = chi_squared_p(&counts, &softmax);
    outcome(p_len > 0.001 && p_reset > 0.001, format!("length-weighted p={p_len:.3}, softmax reset p={p_reset:.3} (> 0.001, 1e5 draws each)"))
}

// ---------------------------------------------------------------- training

fn relabel_instability() -> Outcome {
    let start = Instant::now();
    let base = parse_config(RELABEL).unwrap();
    let dense = parse_config(DENSE).unwrap();
    // Same env, data, model and pretraining as the dense fixture, so its policies are reused.
    assert!(base.env == dense.env && base.data == dense.data && base.model == dense.model && base.pretrain == dense.pretrain);
    let (mut on, mut off, mut on_final, mut off_final) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, &s) in SEEDS.iter().enumerate() {
        for relabel in [true, false] {
            let mut cfg = seeded(&base, s);
            cfg.grpo.hindsight_relabel = relabel;
            let mut env = build_env(&cfg).unwrap();
            let mut pol = dense_policies()[i].clone();
            let rows = finetune(Algo::Grpo, &cfg, &mut env, &mut pol, &mut |_| true).unwrap();
            let table: MetricsTable = parse_csv(&to_csv(&rows, "")).unwrap();
            let last = rows.last().unwrap().eval_score_mean;
            if relabel {
                on.push(table);
                on_final.push(last);
            } else {
                off.push(table);
                off_final.push(last);
            }
        }
    }
    let report = relabel_instability_report(&on, &off, Some(20)).unwrap();
    let (f_on, f_off) = (median(&on_final), median(&off_final));
    let elapsed = start.elapsed();
    let pass = report.reproduced && f_off > f_on && minutes(elapsed) <= 15.0;
    outcome(pass, format!(
        "log-var on/off {:.1} >= 2 (on {:.4}, off {:.4}); final score off {f_off:.1} > on {f_on:.1}; {:.1} min <= 15",
        report.ratio, median(&report.on), median(&report.off), minutes(elapsed)
    ))
}

fn recovery(algo: Algo, threshold: f64, limit_min: f64) -> Outcome {
    let start = Instant::now();
    let base = parse_config(DENSE).unwrap();
    let g = match algo {
        Algo::Grpo => base.grpo.g_online,
        Algo::Ppo => base.ppo.g_online,
        Algo::Qguided => base.qguided.grpo.g_online,
    };
    let (mut reached, mut baselines, mut teleports) = (Vec::new(), Vec::new(), 0);
    for (i, &s) in SEEDS.iter().enumerate() {
        let cfg = seeded(&base, s);
        let pol = &dense_policies()[i];
        baselines.push(baseline_score(&cfg, pol, g).0);
        let (hit, calls) = iterations_to(algo, &cfg, pol, threshold);
        teleports += calls;
        reached.push(iters_as_f64(hit));
    }
    let it = median(&reached);
    let b = median(&baselines);
    let elapsed = start.elapsed();
    let mut pass = it <= base.iterations as f64 && b < 15.0 && minutes(elapsed) <= limit_min;
    let mut detail = format!(
        "median iterations to {threshold} = {it} <= {} (per seed {reached:?}); pretrain-only baseline {b:.1} < 15; {:.1} min <= {limit_min}",
        base.iterations,
        minutes(elapsed)
    );
    if algo == Algo::Qguided {
        pass &= teleports == 0;
        detail.push_str(&format!("; reset_to calls {teleports}"));
    }
    outcome(pass, detail)
}

fn directional_ablations() -> Outcome {
    let base = parse_config(DENSE).unwrap();
    let horizon = base.env.spec().horizon;
    let run = |f: &dyn Fn(&mut TrainConfig)| -> Vec<f64> {
        SEEDS
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let mut cfg = seeded(&base, s);
                f(&mut cfg);
                iters_as_f64(iterations_to(Algo::Grpo, &cfg, &dense_policies()[i], 60.0).0)
            })
            .collect()
    };
    let sub = run(&|_| {});
    let full = run(&|c| c.grpo.l_traj = horizon);
    let random = run(&|c| c.grpo.active_sampling = false);
    let (s, f, r) = (median(&sub), median(&full), median(&random));
    outcome(s.is_finite() && s <= f && s <= r, format!(
        "iterations to 60: sub-trajectory {s} <= full-trajectory {f}; active {s} <= random {r} (per seed {sub:?} {full:?} {random:?})"
    ))
}

fn sparse_sanity() -> Outcome {
    let base = parse_config(SPARSE).unwrap();
    let mut gains = Vec::new();
    let mut detail = Vec::new();
    for &s in &SEEDS {
        let cfg = seeded(&base, s);
        let policy = prepare_policy(&cfg).unwrap();
        let (_, before) = baseline_score(&cfg, &policy, cfg.grpo.g_online);
        let mut env = build_env(&cfg).unwrap();
        let mut pol = policy.clone();
        let rows = finetune(Algo::Grpo, &cfg, &mut env, &mut pol, &mut |_| true).unwrap();
        let tail = &rows[rows.len().saturating_sub(10)..];
        let after = tail.iter().map(|r| r.eval_success_rate).sum::<f64>() / tail.len() as f64;
        gains.push(after - before);
        detail.push(format!("{before:.2}->{after:.2}"));
    }
    let g = median(&gains);
    outcome(g >= 0.2 && base.iterations <= 300, format!(
        "median success gain {:.0} pp >= 20 after {} iterations (mean of last 10 evals; per seed {})",
        100.0 * g,
        base.iterations,
        detail.join(" ")
    ))
}

fn determinism() -> Outcome {
    let mut base = parse_config(DENSE).unwrap();
    base.iterations = 3;
    base.pretrain.steps = 20;
    base.data.transitions = 2000;
    let pretrain_digest = || {
        let mut env = build_env(&base).unwrap();
        let data = build_dataset(&mut env, &base).unwrap();
        let (pol, steps) = pretrain_policy(&base, &data).unwrap();
        (csv_digest(&pretrain_csv(&steps, "")), pol)
    };
    let (d1, pol) = pretrain_digest();
    let (d2, pol2) = pretrain_digest();
    let mut same = vec![("pretrain", d1 == d2 && pol.params.digest() == pol2.params.digest())];
    let dir = tempfile::tempdir().unwrap();
    for algo in [Algo::Grpo, Algo::Ppo, Algo::Qguided] {
        let a = run_finetune(algo, &base, &pol, &dir.path().join(format!("{algo}-a"))).unwrap();
        let b = run_finetune(algo, &base, &pol, &dir.path().join(format!("{algo}-b"))).unwrap();
        let on_disk = |o: &dtrl_core::harness::RunOutcome| csv_digest(&std::fs::read_to_string(o.dir.file("metrics.csv")).unwrap());
        same.push((
            match algo {
                Algo::Grpo => "grpo",
                Algo::Ppo => "ppo",
                Algo::Qguided => "qguided",
            },
            a.digest == b.digest && on_disk(&a) == on_disk(&b) && a.policy.params.digest() == b.policy.params.digest(),
        ));
    }
    let ok = same.iter().all(|(_, s)| *s);
    let detail = same.iter().map(|(n, s)| format!("{n}={}", if *s { "identical" } else { "DIFFERENT" })).collect::<Vec<_>>().join(" ");
    outcome(ok, format!("repeat-run metrics digests: {detail}"))
}

fn main() {
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient checks", Box::new(gradient_checks)),
        ("group advantage oracle", Box::new(advantage_oracle_check)),
        ("GAE double-sum oracle", Box::new(gae_oracle_check)),
        ("importance ratio identities", Box::new(ratio_identities)),
        ("sampling laws", Box::new(sampling_laws)),
        ("relabeling destabilizes ratios", Box::new(relabel_instability)),
        ("GRPO-DT recovers from random data", Box::new(|| recovery(Algo::Grpo, 80.0, 30.0))),
        ("PPO-DT recovers from random data", Box::new(|| recovery(Algo::Ppo, 70.0, 30.0))),
        ("Q-guided GRPO-DT without resets", Box::new(|| recovery(Algo::Qguided, 60.0, 40.0))),
        ("sub-trajectory and active sampling ablations", Box::new(directional_ablations)),
        ("sparse task success gain", Box::new(sparse_sanity)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !o.pass {
            failed += 1;
        }
        println!("{} {:>2} {name}: {} [{:.1}s]", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
