//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. A positional argument filters criteria by
//! substring, e.g. `cargo test -p mega-core --test acceptance -- decode`.

use std::collections::HashSet;
use std::sync::OnceLock;
use std::time::Instant;

use mega_core::ga::{
    choose_crossover_parents, choose_mutate_parent, crossover, evolve_population, mutate, record_fitness, Community,
    GaConfig, TaskPopulation,
};
use mega_core::genotype::{decode_to_weights, genotype_length, GenotypePolicy, WeightNorm, WeightPlan};
use mega_core::harness::{read_jsonl, run_training, stream_rng, Baseline, MetricsRecord, RunConfig, TrainReport};
use mega_core::modular_net::{ModularActorNet, NetDims};
use mega_core::nn::{Activation, Parameterized};
use mega_core::sac::{actor_loss, critic_loss, Batch, CriticNet, StoredTransition};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Verdict = (bool, String);

const FD_EPS: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely at `FD_REL_TOL * FD_FLOOR`.
const FD_FLOOR: f64 = 1e-4;

const E2E_SEEDS: [u64; 3] = [0, 1, 2];
const E2E_EPISODES_PER_TASK: usize = 2000;
const E2E_EVAL_EPISODES: usize = 20;
const E2E_SECONDS_PER_SEED: f64 = 45.0 * 60.0;

const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_EPISODES_PER_TASK: usize = 600;
const ABLATION_EVAL_EPISODES: usize = 50;
const ABLATION_MAX_REVERSAL: f64 = 0.05;

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: Vec<(&str, fn() -> Verdict)> = vec![
        ("decode oracle equivalence", decode_oracle),
        ("halfsoftmax range coverage", range_coverage),
        ("gradient finite differences", gradient_checks),
        ("ga operator invariants", ga_invariants),
        ("ga count-of-ones optimization", ga_count_of_ones),
        ("growth non-interference", growth_non_interference),
        ("end-to-end mt4-fixed training", end_to_end),
        ("resource allocation direction", allocation_direction),
        ("ablation directions on mt4-rand", ablations),
        ("seeded determinism", determinism),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let (pass, detail) = check();
        let secs = t0.elapsed().as_secs_f64();
        if !pass {
            failed += 1;
        }
        println!("{} {name}: {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Decoding

/// Compensated sum.
fn kahan(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0_f64, 0.0_f64);
    for x in xs {
        let y = x - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Reads the bitstring and evaluates `(e^d - 0.99) / sum(e^d - 0.99)` per
/// row, summing with compensation.
fn reference_half_softmax(bitstring: &str, p: usize, n_m: usize) -> Vec<Vec<f64>> {
    let chars: Vec<char> = bitstring.chars().collect();
    let mut at = 0;
    let mut rows = Vec::new();
    for i in 1..=n_m {
        let codes: Vec<u32> = (0..i)
            .map(|_| {
                let v = chars[at..at + p].iter().fold(0u32, |acc, &c| acc * 2 + u32::from(c == '1'));
                at += p;
                v
            })
            .collect();
        let shifted: Vec<f64> = codes.iter().map(|&d| (d as f64).exp() - 0.99).collect();
        let total = kahan(shifted.iter().copied());
        rows.push(shifted.iter().map(|s| s / total).collect());
    }
    assert_eq!(at, chars.len());
    rows
}

fn decode_oracle() -> Verdict {
    let t0 = Instant::now();
    let mut rng = stream_rng(11, 0);
    let mut worst = 0.0_f64;
    for k in 0..10_000 {
        let p = if k % 2 == 0 { 2 } else { 4 };
        let n_m = rng.random_range(1..=8);
        let g = GenotypePolicy::random(p, n_m, &mut rng).unwrap();
        let plan = decode_to_weights(&g, WeightNorm::HalfSoftmax).unwrap();
        let reference = reference_half_softmax(&g.bitstring(), p as usize, n_m as usize);
        for (a, b) in plan.rows().iter().flatten().zip(reference.iter().flatten()) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    (worst <= 1e-10 && secs < 5.0, format!("max |diff| {worst:.2e} over 10000 genotypes (tol 1e-10), {secs:.2}s"))
}

fn range_coverage() -> Verdict {
    let t0 = Instant::now();
    let p = 2;
    let mut ok = true;
    let mut notes = Vec::new();
    for i in 2..=4usize {
        let levels = 1usize << p;
        let (mut h_min, mut h_max, mut s_min, mut s_max) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for code in 0..levels.pow(i as u32) {
            let mut c = code;
            let d: Vec<u32> = (0..i)
                .map(|_| {
                    let v = (c % levels) as u32;
                    c /= levels;
                    v
                })
                .collect();
            for w in mega_core::genotype::half_softmax(&d).unwrap() {
                h_min = h_min.min(w);
                h_max = h_max.max(w);
            }
            for w in mega_core::genotype::softmax(&d).unwrap() {
                s_min = s_min.min(w);
                s_max = s_max.max(w);
            }
        }
        ok &= h_min < s_min && h_max > s_max;
        notes.push(format!("i={i}: half [{h_min:.2e}, {h_max:.4}] soft [{s_min:.2e}, {s_max:.4}]"));
    }
    let secs = t0.elapsed().as_secs_f64();
    (ok && secs < 1.0, notes.join("; "))
}

// ---------------------------------------------------------------------------
// Gradients

fn nudge<P: Parameterized>(p: &mut P, mut idx: usize, delta: f64) {
    for t in p.tensors_mut() {
        if idx < t.len() {
            t[idx] += delta;
            return;
        }
        idx -= t.len();
    }
    panic!("parameter index out of range");
}

/// Worst scaled error between `analytic` and central differences of `loss`.
fn fd_worst<P: Parameterized>(params: &mut P, analytic: &[f64], loss: &dyn Fn(&P) -> f64) -> f64 {
    assert_eq!(params.num_params(), analytic.len());
    let mut worst = 0.0_f64;
    for (i, &a) in analytic.iter().enumerate() {
        nudge(params, i, FD_EPS);
        let lp = loss(params);
        nudge(params, i, -2.0 * FD_EPS);
        let lm = loss(params);
        nudge(params, i, FD_EPS);
        let numeric = (lp - lm) / (2.0 * FD_EPS);
        let scale = a.abs().max(numeric.abs()).max(FD_FLOOR);
        worst = worst.max((a - numeric).abs() / scale);
    }
    worst
}

struct GradCase {
    net: ModularActorNet,
    critic: CriticNet,
    target: CriticNet,
    plans: Vec<WeightPlan>,
    batch: Batch,
    alphas: Vec<f64>,
    noise: Array2<f64>,
    next_noise: Array2<f64>,
    head_weights: Array2<f64>,
}

fn grad_case(rng: &mut ChaCha8Rng) -> GradCase {
    let obs = rng.random_range(2..=5);
    let act = rng.random_range(1..=3);
    let n_tasks = rng.random_range(1..=3);
    let n_modules = rng.random_range(1..=4);
    let dims = NetDims {
        obs_dim: obs,
        action_dim: act,
        embed_hidden: rng.random_range(3..=7),
        module_dim: rng.random_range(2..=5),
        module_hidden: rng.random_range(2..=4),
        activation: Activation::Relu,
        log_std_min: -20.0,
        log_std_max: 2.0,
    };
    let net = ModularActorNet::new(dims, n_modules, rng);
    let plans = (0..n_tasks)
        .map(|_| {
            let depth = rng.random_range(1..=n_modules) as u32;
            decode_to_weights(&GenotypePolicy::random(2, depth, rng).unwrap(), WeightNorm::HalfSoftmax).unwrap()
        })
        .collect();
    let hidden = rng.random_range(3..=6);
    let critic = CriticNet::new(obs + n_tasks + act, hidden, rng);
    let target = CriticNet::new(obs + n_tasks + act, hidden, rng);
    let rows = rng.random_range(3..=6);
    let vec = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let items: Vec<StoredTransition> = (0..rows)
        .map(|_| StoredTransition {
            state: vec(rng, obs),
            action: vec(rng, act),
            reward: rng.random_range(-1.0..1.0),
            next_state: vec(rng, obs),
            terminal: rng.random_bool(0.3),
            task_id: rng.random_range(0..n_tasks),
        })
        .collect();
    let refs: Vec<&StoredTransition> = items.iter().collect();
    let batch = Batch::from_transitions(&refs, n_tasks, false);
    let normal = |rng: &mut ChaCha8Rng| Array2::from_shape_simple_fn((rows, act), || rng.sample(rand_distr::StandardNormal));
    GradCase {
        noise: normal(rng),
        next_noise: normal(rng),
        head_weights: Array2::from_shape_simple_fn((rows, 2 * act), || rng.random_range(-1.0..1.0)),
        alphas: (0..n_tasks).map(|_| rng.random_range(0.01..1.0)).collect(),
        net,
        critic,
        target,
        plans,
        batch,
    }
}

fn raw_backward_error(c: &mut GradCase) -> f64 {
    let plan = c.plans[0].clone();
    let x = c.batch.actor_states.clone();
    let w = c.head_weights.clone();
    let a = c.net.dims().action_dim;
    let loss = |net: &ModularActorNet| {
        let t = net.forward_batch(x.view(), &plan).unwrap();
        let mut s = 0.0;
        for r in 0..t.mean.nrows() {
            for j in 0..a {
                s += w[[r, j]] * t.mean[[r, j]] + w[[r, a + j]] * t.log_std[[r, j]];
            }
        }
        s
    };
    let trace = c.net.forward_batch(x.view(), &plan).unwrap();
    let analytic = c.net.backward(&trace, &w).unwrap().flat();
    fd_worst(&mut c.net, &analytic, &loss)
}

fn actor_loss_error(c: &mut GradCase) -> f64 {
    let (batch, plans, critic, alphas, noise) = (&c.batch, &c.plans, &c.critic, &c.alphas, &c.noise);
    let analytic = actor_loss(batch, &c.net, plans, critic, alphas, noise).unwrap().grads.flat();
    let loss = |net: &ModularActorNet| actor_loss(batch, net, plans, critic, alphas, noise).unwrap().loss;
    fd_worst(&mut c.net, &analytic, &loss)
}

fn critic_loss_error(c: &mut GradCase) -> f64 {
    let (batch, plans, target, net, alphas, noise) = (&c.batch, &c.plans, &c.target, &c.net, &c.alphas, &c.next_noise);
    let analytic = critic_loss(batch, &c.critic, target, net, plans, alphas, 0.99, noise).unwrap().grads.flat();
    let loss = |critic: &CriticNet| critic_loss(batch, critic, target, net, plans, alphas, 0.99, noise).unwrap().loss;
    fd_worst(&mut c.critic, &analytic, &loss)
}

fn gradient_checks() -> Verdict {
    let t0 = Instant::now();
    let mut rng = stream_rng(12, 0);
    let (mut raw, mut actor, mut critic) = (0.0_f64, 0.0_f64, 0.0_f64);
    let mut failures = 0;
    for _ in 0..50 {
        let mut c = grad_case(&mut rng);
        let errs = [raw_backward_error(&mut c), actor_loss_error(&mut c), critic_loss_error(&mut c)];
        raw = raw.max(errs[0]);
        actor = actor.max(errs[1]);
        critic = critic.max(errs[2]);
        failures += errs.iter().filter(|&&e| !(e <= FD_REL_TOL)).count();
    }
    let secs = t0.elapsed().as_secs_f64();
    (
        failures == 0 && secs < 60.0,
        format!("50 cases, worst relative error: backward {raw:.1e}, actor {actor:.1e}, critic {critic:.1e} (tol {FD_REL_TOL:.0e})"),
    )
}

// ---------------------------------------------------------------------------
// Genetic algorithm

fn ga_invariants() -> Verdict {
    let t0 = Instant::now();
    let mut rng = stream_rng(13, 0);
    let mut violations = Vec::new();
    let mut generations = 0;
    while generations < 1000 {
        let pop_size = rng.random_range(3..=10);
        let abandon = 2 * rng.random_range(1..=(pop_size - 1) / 2);
        let n_tasks = rng.random_range(1..=3);
        let p = rng.random_range(1..=4);
        let cfg = GaConfig {
            pop_size,
            abandon_rate: abandon as f64 / pop_size as f64,
            mutate_rate: rng.random_range(0.05..0.5),
            crossover_rate: rng.random_range(0.1..0.9),
            ..GaConfig::default()
        };
        let pops = (0..n_tasks)
            .map(|t| TaskPopulation::random(t, pop_size, p, rng.random_range(1..=5), &mut rng).unwrap())
            .collect();
        let mut community = Community::new(pops).unwrap();
        for _ in 0..50 {
            generations += 1;
            let task = rng.random_range(0..n_tasks);
            for i in 0..pop_size {
                record_fitness(&mut community.populations[task], i, rng.random_range(-10.0..10.0)).unwrap();
            }
            let best_id = community.populations[task].best().unwrap().id;

            let (p1, p2) = choose_crossover_parents(&community, task, &cfg, &mut rng).unwrap();
            let child = crossover(&p1, &p2, cfg.crossover_rate, &mut rng);
            if child.len() != p1.len().max(p2.len()) {
                violations.push("crossover child length".to_string());
            }
            let parent = choose_mutate_parent(&community, task, &cfg, &mut rng).unwrap();
            let mutant = mutate(&parent, cfg.mutate_rate, &mut rng);
            let hamming = parent.bits().iter().zip(mutant.bits()).filter(|(a, b)| a != b).count();
            let expected = (parent.len() as f64 * cfg.mutate_rate + 1e-9).floor() as usize;
            if mutant.len() != parent.len() || hamming != expected {
                violations.push(format!("mutation distance {hamming} != {expected}"));
            }

            let others: Vec<TaskPopulation> =
                community.populations.iter().enumerate().filter(|(t, _)| *t != task).map(|(_, p)| p.clone()).collect();
            let report = evolve_population(&mut community, task, &cfg, &mut rng).unwrap();
            let pop = &community.populations[task];
            if pop.len() != pop_size {
                violations.push(format!("population size {}", pop.len()));
            }
            if report.abandoned_ids.contains(&best_id) || !pop.members().iter().any(|g| g.id == best_id) {
                violations.push("best member abandoned".into());
            }
            let expected_len = genotype_length(p, pop.stage).unwrap();
            if pop.members().iter().any(|g| g.len() != expected_len) {
                violations.push("member length off-stage".into());
            }
            let ids: HashSet<u64> = pop.members().iter().map(|g| g.id).collect();
            if ids.len() != pop_size {
                violations.push("duplicate ids".into());
            }
            let after: Vec<&TaskPopulation> =
                community.populations.iter().enumerate().filter(|(t, _)| *t != task).map(|(_, p)| p).collect();
            if after.iter().zip(&others).any(|(a, b)| *a != b) {
                violations.push("other population touched".into());
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let detail = if violations.is_empty() {
        format!("{generations} generations, no violations")
    } else {
        format!("{} violations, first: {}", violations.len(), violations[0])
    };
    (violations.is_empty() && secs < 10.0, detail)
}

fn ga_count_of_ones() -> Verdict {
    let t0 = Instant::now();
    let cfg = GaConfig { pop_size: 8, abandon_rate: 0.5, max_eval: 1, ..GaConfig::default() };
    let (p, n_m) = (2, 3);
    let optimum = genotype_length(p, n_m).unwrap() as f64;
    let mut solved = 0;
    let mut generations_needed = Vec::new();
    for seed in 0..100 {
        let mut rng = stream_rng(1000 + seed, 0);
        let mut community = Community::new(vec![TaskPopulation::random(0, 8, p, n_m, &mut rng).unwrap()]).unwrap();
        let ones = |g: &GenotypePolicy| g.bits().iter().map(|&b| f64::from(b)).sum::<f64>();
        for gen in 0..=200 {
            let pop = &mut community.populations[0];
            for i in 0..pop.len() {
                if pop.members()[i].eval_count() == 0 {
                    let f = ones(&pop.members()[i]);
                    record_fitness(pop, i, f).unwrap();
                }
            }
            if pop.best().and_then(|g| g.fitness()) == Some(optimum) {
                solved += 1;
                generations_needed.push(gen);
                break;
            }
            if gen < 200 {
                evolve_population(&mut community, 0, &cfg, &mut rng).unwrap();
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let median = {
        generations_needed.sort_unstable();
        generations_needed.get(generations_needed.len() / 2).copied().unwrap_or(0)
    };
    (solved >= 95 && secs < 30.0, format!("{solved}/100 seeds reach the optimum, median {median} generations"))
}

// ---------------------------------------------------------------------------
// Growth

fn growth_non_interference() -> Verdict {
    let t0 = Instant::now();
    let mut rng = stream_rng(14, 0);
    let mut changed = 0;
    for _ in 0..100 {
        let k = rng.random_range(1..=6);
        let dims = NetDims {
            obs_dim: rng.random_range(2..=8),
            action_dim: rng.random_range(1..=3),
            embed_hidden: rng.random_range(4..=16),
            module_dim: rng.random_range(4..=16),
            module_hidden: rng.random_range(2..=8),
            activation: Activation::Relu,
            log_std_min: -20.0,
            log_std_max: 2.0,
        };
        let mut net = ModularActorNet::new(dims, k, &mut rng);
        let x = Array2::from_shape_simple_fn((5, net.dims().obs_dim), || rng.random_range(-2.0..2.0));
        let plans: Vec<WeightPlan> = (0..4)
            .map(|_| {
                let g = GenotypePolicy::random(rng.random_range(1..=4), k as u32, &mut rng).unwrap();
                decode_to_weights(&g, WeightNorm::HalfSoftmax).unwrap()
            })
            .collect();
        let before: Vec<_> = plans.iter().map(|p| net.forward_batch(x.view(), p).unwrap()).collect();
        net.add_module(&mut rng);
        for (p, b) in plans.iter().zip(&before) {
            let a = net.forward_batch(x.view(), p).unwrap();
            let same = |u: &Array2<f64>, v: &Array2<f64>| u.iter().zip(v).all(|(s, t)| s.to_bits() == t.to_bits());
            if !same(&a.mean, &b.mean) || !same(&a.log_std, &b.log_std) {
                changed += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    (changed == 0 && secs < 5.0, format!("100 cases x 4 plans, {changed} outputs changed after add_module"))
}

// ---------------------------------------------------------------------------
// Training runs

struct E2eRun {
    seed: u64,
    report: TrainReport,
    secs: f64,
}

fn e2e_runs() -> &'static Vec<E2eRun> {
    static RUNS: OnceLock<Vec<E2eRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        E2E_SEEDS
            .iter()
            .map(|&seed| {
                let cfg = RunConfig {
                    suite: "mt4-fixed".into(),
                    seed,
                    episodes_per_task: E2E_EPISODES_PER_TASK,
                    eval_episodes: E2E_EVAL_EPISODES,
                    ..RunConfig::default()
                };
                let t0 = Instant::now();
                let report = run_training(cfg, None).expect("training run");
                let secs = t0.elapsed().as_secs_f64();
                eprintln!(
                    "  mt4-fixed seed {seed}: success {:?}, stages {:?}, {:.0}s",
                    report.eval.rows.iter().map(|r| r.success_rate).collect::<Vec<_>>(),
                    report.final_stages,
                    secs
                );
                E2eRun { seed, report, secs }
            })
            .collect()
    })
}

fn end_to_end() -> Verdict {
    let runs = e2e_runs();
    let suite: Vec<f64> = runs.iter().map(|r| r.report.eval.mean_success()).collect();
    let reach: Vec<f64> = runs.iter().map(|r| r.report.eval.rows[0].success_rate).collect();
    let mean_suite = suite.iter().sum::<f64>() / suite.len() as f64;
    let mean_reach = reach.iter().sum::<f64>() / reach.len() as f64;
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    let pass = mean_suite >= 0.8 && mean_reach >= 0.9 && slowest <= E2E_SECONDS_PER_SEED;
    (
        pass,
        format!(
            "mean suite success {mean_suite:.3} (>= 0.8), reach {mean_reach:.3} (>= 0.9), per-seed suite {suite:?}, slowest seed {slowest:.0}s"
        ),
    )
}

fn allocation_direction() -> Verdict {
    let runs = e2e_runs();
    let tour3 = runs[0].report.task_names.iter().position(|n| n == "tour-3").expect("tour-3 in mt4");
    let reach = runs[0].report.task_names.iter().position(|n| n == "reach").expect("reach in mt4");
    let ordered = runs.iter().all(|r| r.report.final_stages[tour3] >= r.report.final_stages[reach]);
    let all: Vec<f64> = runs.iter().flat_map(|r| r.report.final_stages.iter().map(|&s| s as f64)).collect();
    let mean_stage = all.iter().sum::<f64>() / all.len() as f64;
    let fixed = 16.0;
    let stages: Vec<String> = runs.iter().map(|r| format!("seed {}: {:?}", r.seed, r.report.final_stages)).collect();
    (
        ordered && mean_stage < fixed,
        format!("tour-3 >= reach in every seed: {ordered}; mean final stage {mean_stage:.2} < {fixed}; {}", stages.join(", ")),
    )
}

fn ablation_success(label: &str, tweak: fn(&mut RunConfig)) -> f64 {
    let scores: Vec<f64> = ABLATION_SEEDS
        .iter()
        .map(|&seed| {
            let mut cfg = RunConfig {
                suite: "mt4-rand".into(),
                seed,
                episodes_per_task: ABLATION_EPISODES_PER_TASK,
                eval_episodes: ABLATION_EVAL_EPISODES,
                ..RunConfig::default()
            };
            tweak(&mut cfg);
            let t0 = Instant::now();
            let report = run_training(cfg, None).expect("ablation run");
            eprintln!("  {label} seed {seed}: suite success {:.3}, {:.0}s", report.eval.mean_success(), t0.elapsed().as_secs_f64());
            report.eval.mean_success()
        })
        .collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn ablations() -> Verdict {
    let mega = ablation_success("mega", |_| {});
    let fixed = ablation_success("fixed-16", |c| c.baseline = Baseline::Fixed(16));
    let softmax = ablation_success("softmax", |c| c.decode = WeightNorm::Softmax);
    let ga_off = ablation_success("ga-off", |c| c.ga = false);
    let checks = [("evolution", mega, fixed), ("halfsoftmax", mega, softmax), ("ga", mega, ga_off)];
    let pass = checks.iter().all(|(_, on, off)| on - off >= -ABLATION_MAX_REVERSAL);
    let detail = checks
        .iter()
        .map(|(name, on, off)| format!("{name} on {on:.3} vs off {off:.3}"))
        .collect::<Vec<_>>()
        .join("; ");
    (pass, format!("{detail} (reversal limit {ABLATION_MAX_REVERSAL})"))
}

fn determinism() -> Verdict {
    let t0 = Instant::now();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let cfg = RunConfig { suite: "mt4-rand".into(), seed: 5, episodes_per_task: 50, eval_episodes: 2, ..RunConfig::default() };
        run_training(cfg, Some(d.path())).expect("determinism run");
    }
    let files = ["metrics.jsonl", "stage_events.jsonl", "sac_metrics.jsonl", "success.csv", "genotypes.csv"];
    let mut differing = Vec::new();
    for f in files {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        if a != b {
            differing.push(f);
        }
    }
    let records: Vec<MetricsRecord> = read_jsonl(&dirs[0].path().join("metrics.jsonl")).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    (
        differing.is_empty() && records.len() == 200 && secs < 300.0,
        format!("{} episodes logged, differing files: {differing:?}", records.len()),
    )
}
