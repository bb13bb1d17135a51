//! Acceptance gate: nine checks, one PASS/FAIL line each. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines on success.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use mira::analysis::{classify_failure, detect_loop, AnalyzerParams, FailureCategory};
use mira::env::{build_instance, EnvConfig, GraphFamily, PageId};
use mira::metrics::{auroc, equivalence_metrics, kendall_tau, pass_at_k};
use mira::models::{
    actor_loss_and_grad, kl_actor_loss_and_grad, perplexity, potential_loss_and_grad,
    value_loss_and_grad, ActorSample, Critic, KlActorSample, Policy,
};
use mira::shaping::{greedy_policy, interpolate_progress, value_iteration, KeyStep, TabularMdp};
use mira::train::{outer_loop, replay_filter_keep, HParams};
use mira::trajectory::Trajectory;

type Check = (&'static str, fn() -> Result<(), String>);

#[test]
fn acceptance_criteria() {
    let checks: Vec<Check> = vec![
        ("criterion 1: PBRS equivalence on random tabular MDPs", c1_pbrs_equivalence),
        ("criterion 2: progress-label worked example and properties", c2_progress_labels),
        ("criterion 3: gradient fidelity vs finite differences", c3_gradient_fidelity),
        ("criterion 4: alpha=0 reduces to the unshaped pipeline", c4_ablation_reduction),
        ("criterion 5: shaped-vs-sparse curriculum trend", c5_shaped_vs_sparse_trend),
        ("criterion 6: pass@k enumeration equivalence", c6_pass_at_k_oracle),
        ("criterion 7: AUROC/tau/F1 metric oracles", c7_metric_oracles),
        ("criterion 8: failure classifier fixture corpus", c8_failure_corpus),
        ("criterion 9: perplexity filter inclusive bounds", c9_perplexity_filter),
    ];
    let mut failures = Vec::new();
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("PASS: {name}"),
            Err(err) => {
                println!("FAIL: {name} — {err}");
                failures.push(name);
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}

fn random_mdp(rng: &mut ChaCha8Rng) -> TabularMdp {
    let n_states = rng.gen_range(2..=8);
    let n_actions = 3;
    let n_goals = rng.gen_range(1..=2);
    let mut transition = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    for row in transition.iter_mut().flatten() {
        let raw: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        for (cell, r) in row.iter_mut().zip(raw) {
            *cell = r / total;
        }
    }
    let reward = (0..n_goals)
        .map(|_| {
            (0..n_states)
                .map(|_| {
                    (0..n_actions)
                        .map(|_| (0..n_states).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .collect()
                })
                .collect()
        })
        .collect();
    let potential = (0..n_goals)
        .map(|_| (0..n_states).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    TabularMdp {
        n_states,
        n_actions,
        n_goals,
        transition,
        reward,
        potential,
        gamma: rng.gen_range(0.5..0.99),
    }
}

fn c1_pbrs_equivalence() -> Result<(), String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..50 {
        let mdp = random_mdp(&mut rng);
        let shaped = mdp.shaped();
        let shaped_iters = value_iteration(&shaped, mdp.zero_q(), 50);
        let orig_iters = value_iteration(&mdp, mdp.potential_q(), 50);
        for (k, (qs, qo)) in shaped_iters.iter().zip(&orig_iters).enumerate() {
            for g in 0..mdp.n_goals {
                for s in 0..mdp.n_states {
                    for a in 0..mdp.n_actions {
                        let diff = qs[g][s][a] - (qo[g][s][a] - mdp.potential[g][s]);
                        if diff.abs() > 1e-10 {
                            return Err(format!(
                                "case {case} iterate {k}: |Qshaped - (Q - phi)| = {}",
                                diff.abs()
                            ));
                        }
                    }
                }
            }
            if greedy_policy(qs) != greedy_policy(qo) {
                return Err(format!("case {case} iterate {k}: greedy policies differ"));
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed.as_secs_f64() > 5.0 {
        return Err(format!("runtime {elapsed:?} exceeds 5 s"));
    }
    Ok(())
}

fn c2_progress_labels() -> Result<(), String> {
    let labels = interpolate_progress(
        &[
            KeyStep { t: 2, count: 1 },
            KeyStep { t: 4, count: 2 },
            KeyStep { t: 6, count: 3 },
        ],
        3,
        9,
    )
    .map_err(|e| e.to_string())?;
    let expect = [
        (1, 1.0 / 6.0),
        (2, 1.0 / 3.0),
        (3, 0.5),
        (4, 2.0 / 3.0),
        (7, 13.0 / 15.0),
    ];
    for (t, want) in expect {
        let got = labels.0[t];
        if (got - want).abs() > 1e-15 {
            return Err(format!("p*_{t} = {got}, expected {want}"));
        }
    }
    if labels.0[0] != 0.0 || labels.0[9] != 1.0 {
        return Err("endpoints are not 0 and 1".into());
    }

    // Property suite on 1000 random positive key-step profiles.
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..1000 {
        let k = rng.gen_range(1..=6usize);
        let t_end = rng.gen_range(k + 1..k + 40);
        // Choose k strictly increasing key times in [1, t_end], with the
        // penultimate key strictly before t_end.
        let mut times: Vec<usize> = Vec::new();
        let mut t = 0usize;
        for remaining in (1..=k).rev() {
            let hi = t_end - (remaining - 1);
            t = rng.gen_range(t + 1..=hi);
            times.push(t);
        }
        let keys: Vec<KeyStep> = times
            .iter()
            .enumerate()
            .map(|(i, &t)| KeyStep { t, count: i + 1 })
            .collect();
        let labels = interpolate_progress(&keys, k, t_end)
            .map_err(|e| format!("case {case}: {e}"))?;
        if labels.0.len() != t_end + 1 {
            return Err(format!("case {case}: wrong label count"));
        }
        if labels.0[0] != 0.0 || labels.0[t_end] != 1.0 {
            return Err(format!("case {case}: endpoints wrong"));
        }
        for w in labels.0.windows(2) {
            if w[1] < w[0] - 1e-12 {
                return Err(format!("case {case}: labels not monotone"));
            }
        }
        if labels.0.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(format!("case {case}: label out of [0,1]"));
        }
    }
    Ok(())
}

fn fd_grad<F: Fn(&[f64]) -> f64>(params: &[f64], f: F) -> Vec<f64> {
    let h = 1e-5;
    let mut grad = vec![0.0; params.len()];
    let mut p = params.to_vec();
    for i in 0..params.len() {
        let orig = p[i];
        p[i] = orig + h;
        let plus = f(&p);
        p[i] = orig - h;
        let minus = f(&p);
        p[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn c3_gradient_fidelity() -> Result<(), String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let n_features = 5;
    let n_actions = 4;
    for case in 0..100 {
        let hidden = if case % 2 == 0 { None } else { Some(4) };
        let features: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..n_features).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        // Value critic (BCE).
        let critic = Critic::random_init(n_features, hidden, &mut rng);
        let batch: Vec<(Vec<f64>, f64)> = features
            .iter()
            .map(|x| (x.clone(), if rng.gen_bool(0.5) { 1.0 } else { 0.0 }))
            .collect();
        let (_, grad) = value_loss_and_grad(&critic, &batch);
        let numeric = fd_grad(&critic.params, |p| {
            let mut c = critic.clone();
            c.params = p.to_vec();
            value_loss_and_grad(&c, &batch).0
        });
        if max_rel_err(&grad, &numeric) >= 1e-4 {
            return Err(format!("value gradient mismatch in case {case}"));
        }

        // Potential critic (MSE).
        let critic = Critic::random_init(n_features, hidden, &mut rng);
        let batch: Vec<(Vec<f64>, f64)> = features
            .iter()
            .map(|x| (x.clone(), rng.gen_range(0.0..1.0)))
            .collect();
        let (_, grad) = potential_loss_and_grad(&critic, &batch);
        let numeric = fd_grad(&critic.params, |p| {
            let mut c = critic.clone();
            c.params = p.to_vec();
            potential_loss_and_grad(&c, &batch).0
        });
        if max_rel_err(&grad, &numeric) >= 1e-4 {
            return Err(format!("potential gradient mismatch in case {case}"));
        }

        // Log-ratio regression actor.
        let mut policy = Policy::zeros(n_features, n_actions);
        for w in &mut policy.weights {
            *w = rng.gen_range(-0.5..0.5);
        }
        let beta = rng.gen_range(0.5..2.0);
        let batch: Vec<ActorSample> = features
            .iter()
            .map(|x| ActorSample {
                features: x.clone(),
                action: rng.gen_range(0..n_actions),
                advantage: rng.gen_range(-1.0..1.0),
                ref_logprob: rng.gen_range(-2.0..-0.1),
            })
            .collect();
        let (_, grad) = actor_loss_and_grad(&policy, &batch, beta);
        let numeric = fd_grad(&policy.weights, |p| {
            let mut pol = policy.clone();
            pol.weights = p.to_vec();
            actor_loss_and_grad(&pol, &batch, beta).0
        });
        if max_rel_err(&grad, &numeric) >= 1e-4 {
            return Err(format!("actor gradient mismatch in case {case}"));
        }

        // KL-ablation actor.
        let batch: Vec<KlActorSample> = features
            .iter()
            .map(|x| KlActorSample {
                features: x.clone(),
                action: rng.gen_range(0..n_actions),
                advantage: rng.gen_range(-1.0..1.0),
            })
            .collect();
        let (_, grad) = kl_actor_loss_and_grad(&policy, &batch, beta);
        let numeric = fd_grad(&policy.weights, |p| {
            let mut pol = policy.clone();
            pol.weights = p.to_vec();
            kl_actor_loss_and_grad(&pol, &batch, beta).0
        });
        if max_rel_err(&grad, &numeric) >= 1e-4 {
            return Err(format!("KL actor gradient mismatch in case {case}"));
        }
    }
    let elapsed = start.elapsed();
    if elapsed.as_secs_f64() > 10.0 {
        return Err(format!("runtime {elapsed:?} exceeds 10 s"));
    }
    Ok(())
}

fn trend_config(seed: u64) -> EnvConfig {
    EnvConfig {
        family: GraphFamily::Chain,
        pages: 5,
        branching: 2,
        subgoals: 3,
        horizon: 30,
        seed,
    }
}

fn c4_ablation_reduction() -> Result<(), String> {
    let config = trend_config(4);
    let pool: Vec<_> = (0..4)
        .map(|s| build_instance(&config, s).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let base = HParams {
        alpha: 0.0,
        phases: 3,
        rollouts_per_phase: 4,
        train_tasks: 2,
        seed: 99,
        ..HParams::default()
    };
    let off = HParams {
        use_potential_critic: false,
        ..base.clone()
    };
    let with_critic =
        outer_loop(&config, &pool, &base, None).map_err(|e| e.to_string())?;
    let without = outer_loop(&config, &pool, &off, None).map_err(|e| e.to_string())?;
    if with_critic.models.policy != without.models.policy {
        return Err("policies differ between alpha=0 and no-potential pipelines".into());
    }
    if with_critic.models.value != without.models.value {
        return Err("value critics differ between alpha=0 and no-potential pipelines".into());
    }
    let a: Vec<f64> = with_critic.summaries.iter().map(|s| s.success_rate).collect();
    let b: Vec<f64> = without.summaries.iter().map(|s| s.success_rate).collect();
    if a != b {
        return Err("phase success rates differ".into());
    }
    Ok(())
}

const TREND_PHASE_CAP: usize = 12;
const TREND_THRESHOLD: f64 = 0.8;

fn phases_to_threshold(hp: &HParams, config: &EnvConfig) -> Result<(usize, f64), String> {
    let pool: Vec<_> = (0..4)
        .map(|s| build_instance(config, s).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let result = outer_loop(config, &pool, hp, None).map_err(|e| e.to_string())?;
    let reached = result
        .summaries
        .iter()
        .position(|s| s.success_rate >= TREND_THRESHOLD)
        .map(|i| i + 1)
        .unwrap_or(TREND_PHASE_CAP + 1);
    let phase1 = result
        .summaries
        .get(1)
        .or_else(|| result.summaries.last())
        .map(|s| s.success_rate)
        .unwrap_or(0.0);
    Ok((reached, phase1))
}

fn c5_shaped_vs_sparse_trend() -> Result<(), String> {
    let start = Instant::now();
    let mut shaped_wins = 0;
    let mut full_phase1 = 0.0;
    let mut sparse_phase1 = 0.0;
    let mut td_phase1 = 0.0;
    let seeds = 10;
    let mut detail = Vec::new();
    for seed in 0..seeds {
        let config = trend_config(7 + seed);
        // Aggressive-but-shared optimization settings so the trend resolves
        // within the runtime budget; all three variants use the same values.
        let full = HParams {
            alpha: 0.3,
            beta: 0.2,
            actor_lr: 2.0,
            actor_steps: 80,
            critic_iters: 20,
            critic_lr: 0.1,
            rollouts_per_phase: 128,
            phases: TREND_PHASE_CAP,
            stop_success_rate: Some(TREND_THRESHOLD),
            seed,
            ..HParams::default()
        };
        let sparse = HParams {
            alpha: 0.0,
            use_potential_critic: false,
            ..full.clone()
        };
        let pure_td = HParams {
            lambda: 1.0,
            ..full.clone()
        };
        let (full_n, full_p1) = phases_to_threshold(&full, &config)?;
        let (sparse_n, sparse_p1) = phases_to_threshold(&sparse, &config)?;
        let (_, td_p1) = phases_to_threshold(&pure_td, &config)?;
        if full_n < sparse_n {
            shaped_wins += 1;
        }
        full_phase1 += full_p1;
        sparse_phase1 += sparse_p1;
        td_phase1 += td_p1;
        detail.push((seed, full_n, sparse_n, full_p1, sparse_p1, td_p1));
    }
    eprintln!("trend detail (seed, full phases, sparse phases, phase-1 rates): {detail:?}");
    if shaped_wins < 8 {
        return Err(format!(
            "shaped beat sparse in only {shaped_wins}/{seeds} seeds: {detail:?}"
        ));
    }
    let (full_m, sparse_m, td_m) = (
        full_phase1 / seeds as f64,
        sparse_phase1 / seeds as f64,
        td_phase1 / seeds as f64,
    );
    if !(td_m < full_m && td_m < sparse_m) {
        return Err(format!(
            "lambda=1 phase-1 mean {td_m:.3} not below full {full_m:.3} and sparse {sparse_m:.3}"
        ));
    }
    let elapsed = start.elapsed();
    if elapsed.as_secs_f64() > 600.0 {
        return Err(format!("runtime {elapsed:?} exceeds 10 min"));
    }
    Ok(())
}

fn pass_at_k_enumeration(n: usize, c: usize, k: usize) -> f64 {
    let mut total = 0u64;
    let mut hits = 0u64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        total += 1;
        if (mask & ((1u32 << c) - 1)) != 0 {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

fn c6_pass_at_k_oracle() -> Result<(), String> {
    for n in 1..=12 {
        for c in 0..=n {
            for k in 1..=n {
                let got = pass_at_k(n, c, k).map_err(|e| e.to_string())?;
                let want = pass_at_k_enumeration(n, c, k);
                if (got - want).abs() > 1e-12 {
                    return Err(format!("n={n} c={c} k={k}: {got} != {want}"));
                }
                if c == 0 && got != 0.0 {
                    return Err(format!("c=0 boundary violated at n={n} k={k}"));
                }
                if c == n && got != 1.0 {
                    return Err(format!("c=n boundary violated at n={n} k={k}"));
                }
            }
        }
    }
    Ok(())
}

fn c7_metric_oracles() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut checked = 0;
    while checked < 200 {
        let n = rng.gen_range(4..=30);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 7.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let n_pos = labels.iter().filter(|&&y| y).count();
        if n_pos == 0 || n_pos == n {
            continue;
        }
        checked += 1;
        // AUROC vs pairwise brute force.
        let samples: Vec<(f64, bool)> =
            scores.iter().cloned().zip(labels.iter().cloned()).collect();
        let got = auroc(&samples).map_err(|e| e.to_string())?;
        let mut total = 0.0;
        let mut pairs = 0.0;
        for (si, &yi) in scores.iter().zip(&labels) {
            for (sj, &yj) in scores.iter().zip(&labels) {
                if yi && !yj {
                    pairs += 1.0;
                    total += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        if (got - total / pairs).abs() > 1e-12 {
            return Err(format!("AUROC mismatch: {got} vs {}", total / pairs));
        }
        // Kendall tau-b vs brute-force pair classification.
        let ys: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
        match kendall_tau(&scores, &ys) {
            Err(_) => {} // zero variance in scores: defined as an error
            Ok(got) => {
                let (mut nc, mut nd, mut tx, mut ty) = (0f64, 0f64, 0f64, 0f64);
                let mut n0 = 0f64;
                for i in 0..n {
                    for j in i + 1..n {
                        n0 += 1.0;
                        let dx = scores[i] - scores[j];
                        let dy = ys[i] - ys[j];
                        if dx == 0.0 {
                            tx += 1.0;
                        }
                        if dy == 0.0 {
                            ty += 1.0;
                        }
                        if dx != 0.0 && dy != 0.0 {
                            if (dx > 0.0) == (dy > 0.0) {
                                nc += 1.0;
                            } else {
                                nd += 1.0;
                            }
                        }
                    }
                }
                let want = (nc - nd) / ((n0 - tx) * (n0 - ty)).sqrt();
                if (got - want).abs() > 1e-12 {
                    return Err(format!("tau mismatch: {got} vs {want}"));
                }
            }
        }
    }
    // F1 harmonic-mean identity and the published-style triple.
    let m = equivalence_metrics(19, 5, 11).map_err(|e| e.to_string())?;
    let hm = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    if (m.f1 - hm).abs() > 1e-12 {
        return Err("F1 is not the harmonic mean of P and R".into());
    }
    let (p, r): (f64, f64) = (0.7917, 0.6032);
    if (2.0 * p * r / (p + r) - 0.6847).abs() > 5e-5 {
        return Err("published P/R/F1 triple fails the harmonic-mean check".into());
    }
    Ok(())
}

#[derive(Deserialize)]
struct CorpusRecord {
    label: String,
    goal_page: Option<u32>,
    trajectory: Trajectory,
}

fn c8_failure_corpus() -> Result<(), String> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/failure_corpus.jsonl");
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let params = AnalyzerParams::default();
    let mut counts: std::collections::BTreeMap<String, usize> = Default::default();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let record: CorpusRecord =
            serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        record.trajectory.validate().map_err(|e| e.to_string())?;
        let got = classify_failure(
            &record.trajectory,
            record.goal_page.map(PageId),
            &params,
        )
        .map_err(|e| e.to_string())?;
        if got.category.label() != record.label {
            return Err(format!(
                "{}: classified {} but labeled {}",
                record.trajectory.task_id,
                got.category.label(),
                record.label
            ));
        }
        if let Some(step) = got.decision_step {
            if step >= record.trajectory.len() {
                return Err(format!(
                    "{}: decision step {step} out of range",
                    record.trajectory.task_id
                ));
            }
        }
        // Loop entries match a brute-force cycle scan.
        let digests = record.trajectory.digests();
        let got_entry =
            detect_loop(&digests, params.min_repeats, params.max_period).map(|l| l.entry);
        let mut want_entry = None;
        'outer: for entry in 0..digests.len() {
            for period in 1..=params.max_period {
                if entry + params.min_repeats * period > digests.len() {
                    continue;
                }
                if (0..(params.min_repeats - 1) * period)
                    .all(|j| digests[entry + j] == digests[entry + j + period])
                {
                    want_entry = Some(entry);
                    break 'outer;
                }
            }
        }
        if got_entry != want_entry {
            return Err(format!(
                "{}: loop entry {got_entry:?} != brute force {want_entry:?}",
                record.trajectory.task_id
            ));
        }
        if got.category == FailureCategory::StuckMidway && want_entry.is_some() {
            if got.decision_step != want_entry {
                return Err(format!(
                    "{}: stuck decision step {:?} != loop entry {want_entry:?}",
                    record.trajectory.task_id, got.decision_step
                ));
            }
        }
        *counts.entry(record.label).or_insert(0) += 1;
    }
    for category in ["wrong_termination", "stuck_midway", "fail_attempt", "others"] {
        let n = counts.get(category).copied().unwrap_or(0);
        if n < 10 {
            return Err(format!("only {n} fixtures for {category}; need >= 10"));
        }
    }
    Ok(())
}

fn c9_perplexity_filter() -> Result<(), String> {
    let hp = HParams::default();
    // Inclusive bounds at rank scores exactly 0.9 and 0.5.
    if !replay_filter_keep(&hp, 1.0 / 0.9) {
        return Err("rank 0.9 (ppl 1/0.9) should be included".into());
    }
    if !replay_filter_keep(&hp, 1.0 / 0.5) {
        return Err("rank 0.5 (ppl 2) should be included".into());
    }
    if replay_filter_keep(&hp, 1.0 / 0.95) {
        return Err("rank 0.95 should be excluded".into());
    }
    if replay_filter_keep(&hp, 1.0 / 0.45) {
        return Err("rank 0.45 should be excluded".into());
    }
    // A uniform policy over |A| >= 3 has rank 1/|A| and is excluded.
    for n_actions in 3..=6 {
        let policy = Policy::zeros(2, n_actions);
        let steps: Vec<(Vec<f64>, usize)> =
            (0..8).map(|i| (vec![1.0, 0.5], i % n_actions)).collect();
        let ppl = perplexity(&policy, &steps);
        if (ppl - n_actions as f64).abs() > 1e-9 {
            return Err(format!("uniform perplexity {ppl} != {n_actions}"));
        }
        if replay_filter_keep(&hp, ppl) {
            return Err(format!("uniform policy over {n_actions} actions not excluded"));
        }
    }
    Ok(())
}
