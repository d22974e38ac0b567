// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recover::config::ExperimentConfig;
use recover::par::Execution;
use recover::policy::{boundary_extension, steady_layout, PolicyKind};
use recover::sim::cost::CostModel;
use recover::sim::metrics::{to_jsonl, write_jsonl};
use recover::sim::schedule::{
    generate_schedule, FailureSchedule, GenerationSpec, InjectionPoint, LocationWeights,
    ScheduleEntry,
};
use recover::sim::{run_batch, run_experiment, run_reference, RunReport};
use recover::trainer::model::ModelKind;
use recover::trainer::stream::StreamKind;
use recover::types::ReplicaId;
use recover::walkthrough;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn random_job(
    rng: &mut ChaCha8Rng,
    base: ExperimentConfig,
    iterations: u64,
) -> (ExperimentConfig, FailureSchedule) {
    let replicas = rng.random_range(2..=64usize);
    let cfg = ExperimentConfig {
        replicas,
        grad_accum: rng.random_range(1..=16),
        buckets: rng.random_range(1..=4),
        iterations,
        seed: rng.random(),
        execution: Execution::Sequential,
        ..base
    };
    let spec = GenerationSpec {
        seed: rng.random(),
        count: rng.random_range(1..replicas),
        step_start: 0,
        step_end: iterations,
        replicas,
        ranks_per_replica: cfg.ranks_per_replica,
        buckets: cfg.buckets,
        weights: LocationWeights::uniform(),
    };
    let schedule = generate_schedule(&spec).expect("valid generation spec");
    (cfg, schedule)
}

struct InvariantSweep {
    reports: Vec<RunReport>,
    jobs: Vec<(ExperimentConfig, FailureSchedule)>,
    seconds: f64,
    error: Option<String>,
}

fn invariant_sweep() -> InvariantSweep {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1000);
    let base = ExperimentConfig {
        dim: 2,
        eval_examples: 0,
        ..Default::default()
    };
    let jobs: Vec<_> = (0..1000)
        .map(|_| random_job(&mut rng, base.clone(), 6))
        .collect();
    let start = Instant::now();
    let results = run_batch(&jobs, Execution::Parallel);
    let seconds = start.elapsed().as_secs_f64();
    let mut reports = Vec::new();
    let mut error = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => {
                error.get_or_insert_with(|| format!("run {i} failed: {e}"));
            }
        }
    }
    InvariantSweep {
        reports,
        jobs,
        seconds,
        error,
    }
}

fn constant_batch(sweep: &InvariantSweep) -> Outcome {
    if let Some(e) = &sweep.error {
        return Err(e.clone());
    }
    let mut iterations = 0;
    let mut failures = 0;
    let mut locations = [0usize; 3];
    for (_, schedule) in &sweep.jobs {
        for e in &schedule.entries {
            locations[match e.location {
                InjectionPoint::BeforeSync => 0,
                InjectionPoint::DuringSync(_) => 1,
                InjectionPoint::AfterSyncBeforeStep => 2,
            }] += 1;
        }
    }
    for ((cfg, _), rep) in sweep.jobs.iter().zip(&sweep.reports) {
        let b = cfg.global_batch();
        for (m, idx) in rep.metrics.iter().zip(&rep.admitted_indices) {
            let distinct: BTreeSet<_> = idx.iter().collect();
            ensure(
                m.admitted == b && idx.len() == b && distinct.len() == b,
                || {
                    format!(
                        "W={} G={} iteration {}: {} admitted, {} distinct, B={b}",
                        cfg.replicas,
                        cfg.grad_accum,
                        m.iteration,
                        idx.len(),
                        distinct.len()
                    )
                },
            )?;
            iterations += 1;
            failures += m
                .events
                .iter()
                .map(|e| e.record.failed_replicas.len())
                .sum::<usize>();
        }
    }
    ensure(locations.iter().all(|&n| n > 0), || {
        format!("location coverage {locations:?}")
    })?;
    ensure(sweep.seconds < 60.0, || {
        format!("took {:.1}s", sweep.seconds)
    })?;
    Ok(format!(
        "{} runs, {iterations} iterations, {failures} failures (before/during/after sync: {locations:?}), {:.1}s",
        sweep.reports.len(),
        sweep.seconds
    ))
}

fn worked_example() -> Outcome {
    let w = walkthrough::run().map_err(|e| e.to_string())?;
    for c in &w.checks {
        ensure(c.passed(), || {
            format!("{}: expected {}, got {}", c.label, c.expected, c.actual)
        })?;
    }
    Ok(format!("{} exact checks", w.checks.len()))
}

fn policy_oracle() -> Outcome {
    let mut cases = 0u64;
    for w in 1..=64usize {
        for b in 1..=512usize {
            // steady layout by linear search
            let g = (1..=b).find(|g| w * g >= b).expect("some g covers b");
            let n_maj = (0..=w)
                .rev()
                .find(|n| n * g <= b)
                .expect("zero majors always fits");
            let r = b - n_maj * g;
            let n_min = usize::from(r > 0);
            let spares = w - n_maj - n_min;
            let n_mi = if n_min == 1 && spares >= 2 { 1 } else { 0 };
            let got = steady_layout(b, w);
            ensure(
                (
                    got.g_cur, got.n_maj, got.r_cur, got.n_min, got.n_ms, got.n_mi,
                ) == (g, n_maj, r, n_min, spares - n_mi, n_mi),
                || format!("layout W={w} B={b}: {got:?}"),
            )?;
            for c in 0..=b {
                let g_ext = (1..)
                    .find(|g| c + w * g >= b)
                    .expect("some extension covers b");
                let n_bdry = (0..=w)
                    .find(|n| c + (w - n) * g_ext + n * (g_ext - 1) == b)
                    .ok_or_else(|| format!("no exact split for W={w} B={b} C={c}"))?;
                let got = boundary_extension(b, c, w).map_err(|e| e.to_string())?;
                ensure((got.g_ext, got.n_bdry) == (g_ext, n_bdry), || {
                    format!("extension W={w} B={b} C={c}: got {got:?}, oracle ({g_ext}, {n_bdry})")
                })?;
                cases += 1;
            }
        }
    }
    Ok(format!(
        "{cases} extension cases and {} layouts, 0 mismatches",
        64 * 512
    ))
}

fn degenerate_equality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4000);
    let base = ExperimentConfig {
        model: ModelKind::ConstantGradient,
        stream: StreamKind::Identical,
        dim: 4,
        learning_rate: 0.125,
        eval_examples: 0,
        ..Default::default()
    };
    let jobs: Vec<_> = (0..60)
        .map(|_| {
            let (mut cfg, schedule) = random_job(&mut rng, base.clone(), 10);
            cfg.replicas = cfg.replicas.min(24);
            let spec = GenerationSpec {
                replicas: cfg.replicas,
                count: schedule.len().min(cfg.replicas - 1),
                ..schedule.generation.clone().expect("generated")
            };
            (cfg, generate_schedule(&spec).expect("valid spec"))
        })
        .collect();
    let refs: Vec<_> = jobs
        .iter()
        .map(|(c, _)| (c.clone(), FailureSchedule::empty()))
        .collect();
    let runs = run_batch(&jobs, Execution::Parallel);
    let references = run_batch(&refs, Execution::Parallel);
    let mut failures = 0;
    for (i, (run, reference)) in runs.into_iter().zip(references).enumerate() {
        let run = run.map_err(|e| format!("schedule {i}: {e}"))?;
        let reference = reference.map_err(|e| format!("reference {i}: {e}"))?;
        ensure(run.trajectory.len() == reference.trajectory.len(), || {
            format!("schedule {i}: length")
        })?;
        for (t, (a, b)) in run.trajectory.iter().zip(&reference.trajectory).enumerate() {
            ensure(bits(a) == bits(b), || {
                format!("schedule {i} iteration {t}: {a:?} != {b:?}")
            })?;
        }
        failures += jobs[i].1.len();
    }
    Ok(format!(
        "{} schedules, {failures} failures, trajectories bitwise equal",
        jobs.len()
    ))
}

fn statistical_equivalence() -> Outcome {
    let seeds = 30u64;
    let cfg_for = |seed: u64| ExperimentConfig {
        replicas: 16,
        grad_accum: 8,
        iterations: 200,
        buckets: 4,
        dim: 8,
        noise: 0.5,
        learning_rate: 0.1,
        seed,
        eval_examples: 4000,
        execution: Execution::Sequential,
        ..Default::default()
    };
    let mut jobs = Vec::new();
    for seed in 0..seeds {
        let spec = GenerationSpec {
            seed: 1000 + seed,
            count: 8,
            step_start: 5,
            step_end: 200,
            replicas: 16,
            ranks_per_replica: 8,
            buckets: 4,
            weights: LocationWeights::default(),
        };
        let schedule = generate_schedule(&spec).map_err(|e| e.to_string())?;
        jobs.push((cfg_for(seed), schedule));
        jobs.push((cfg_for(seed), FailureSchedule::empty()));
    }
    let results = run_batch(&jobs, Execution::Parallel);
    let mut failed_final = 0.0;
    let mut ref_final = 0.0;
    let mut worst_ratio: f64 = 0.0;
    for (seed, pair) in results.chunks(2).enumerate() {
        let run = pair[0].as_ref().map_err(|e| format!("seed {seed}: {e}"))?;
        let reference = pair[1].as_ref().map_err(|e| format!("seed {seed}: {e}"))?;
        failed_final += run.eval_loss;
        ref_final += reference.eval_loss;
        let first_failure = jobs[2 * seed]
            .1
            .entries
            .first()
            .map_or(0, |e| e.step as usize);
        let max_step = |r: &RunReport| {
            r.metrics[first_failure.saturating_sub(1)..]
                .windows(2)
                .map(|w| (w[1].loss - w[0].loss).abs())
                .fold(0.0, f64::max)
        };
        let (f, r) = (max_step(run), max_step(reference));
        worst_ratio = worst_ratio.max(f / r);
        ensure(f <= 3.0 * r, || {
            format!("seed {seed}: step-to-step delta {f:.4} vs reference {r:.4}")
        })?;
    }
    failed_final /= seeds as f64;
    ref_final /= seeds as f64;
    let rel = (failed_final - ref_final).abs() / ref_final;
    ensure(rel < 0.02, || {
        format!(
            "mean final loss {failed_final:.6} vs {ref_final:.6} ({:.3}%)",
            rel * 100.0
        )
    })?;
    Ok(format!(
        "{seeds} seeds, mean held-out loss {failed_final:.6} vs {ref_final:.6} ({:.4}% apart), worst spike ratio {worst_ratio:.3}",
        rel * 100.0
    ))
}

fn epoch_purity(sweep: &InvariantSweep) -> Outcome {
    if let Some(e) = &sweep.error {
        return Err(e.clone());
    }
    let mut buckets = 0;
    let mut late = 0;
    for rep in &sweep.reports {
        for m in &rep.metrics {
            ensure(m.bucket_epochs.iter().all(|e| *e == Some(m.epoch)), || {
                format!(
                    "iteration {}: bucket epochs {:?}, final epoch {}",
                    m.iteration, m.bucket_epochs, m.epoch
                )
            })?;
            late += usize::from(m.events.iter().any(|e| e.deferred));
            buckets += m.bucket_epochs.len();
        }
    }
    Ok(format!(
        "{buckets} committed buckets all tagged with their iteration's final epoch ({late} iterations lost a replica after the last reduce)"
    ))
}

fn adaptive_control() -> Outcome {
    let cfg = |policy| ExperimentConfig {
        replicas: 8,
        grad_accum: 4,
        iterations: 8,
        buckets: 2,
        dim: 4,
        model: ModelKind::ConstantGradient,
        stream: StreamKind::Identical,
        learning_rate: 0.125,
        policy,
        eval_examples: 0,
        ..Default::default()
    };
    let schedule = FailureSchedule::from_entries(vec![ScheduleEntry {
        step: 2,
        replica: ReplicaId(5),
        local_rank: 0,
        location: InjectionPoint::DuringSync(1),
    }]);
    let adaptive =
        run_experiment(&cfg(PolicyKind::Adaptive), &schedule).map_err(|e| e.to_string())?;
    let reference = run_reference(&cfg(PolicyKind::Adaptive)).map_err(|e| e.to_string())?;
    let fixed = run_experiment(&cfg(PolicyKind::Static), &schedule).map_err(|e| e.to_string())?;
    let b = 32;
    let short = adaptive.metrics.iter().filter(|m| m.admitted < b).count();
    ensure(short > 0, || "adaptive never committed fewer than B".into())?;
    ensure(
        bits(&adaptive.final_params) != bits(&reference.final_params),
        || "adaptive trajectory matched the reference".into(),
    )?;
    ensure(
        bits(&fixed.final_params) == bits(&reference.final_params),
        || "static trajectory did not match the reference".into(),
    )?;
    let smallest = adaptive
        .metrics
        .iter()
        .map(|m| m.admitted)
        .min()
        .unwrap_or(0);
    Ok(format!(
        "adaptive committed < B in {short} iterations (min {smallest} of {b}) and diverged; static stayed bitwise equal"
    ))
}

fn throughput_amortization() -> Outcome {
    let cost = CostModel {
        microbatch: 1.0,
        reduce_fixed: 50.0,
        reduce_per_bucket: 0.5,
        restore: 0.25,
    };
    let cfg = ExperimentConfig {
        replicas: 32,
        grad_accum: 8,
        ranks_per_replica: 8,
        iterations: 24,
        buckets: 4,
        dim: 4,
        cost,
        eval_examples: 0,
        ..Default::default()
    };
    let kill = |step, replica, location| ScheduleEntry {
        step,
        replica: ReplicaId(replica),
        local_rank: 0,
        location,
    };
    let schedule = FailureSchedule::from_entries(vec![
        kill(3, 31, InjectionPoint::DuringSync(2)),
        kill(7, 0, InjectionPoint::DuringSync(0)),
        kill(8, 1, InjectionPoint::BeforeSync),
        kill(12, 2, InjectionPoint::DuringSync(3)),
        kill(16, 3, InjectionPoint::DuringSync(1)),
        kill(20, 4, InjectionPoint::AfterSyncBeforeStep),
    ]);
    let rep = run_experiment(&cfg, &schedule).map_err(|e| e.to_string())?;
    let b = cfg.global_batch();
    let tokens = (b as u64 * cfg.tokens_per_microbatch) as f64;
    let closed_form = |g: usize, w: usize| {
        let seconds = g as f64 * cost.microbatch
            + cost.reduce_fixed
            + cfg.buckets as f64 * cost.reduce_per_bucket;
        tokens / (seconds * w as f64 * cfg.ranks_per_replica as f64)
    };
    let baseline = closed_form(8, 32);
    let first = &rep.metrics[0];
    ensure(
        (first.throughput - baseline).abs() <= 1e-9 * baseline,
        || {
            format!(
                "pre-failure throughput {} vs closed form {baseline}",
                first.throughput
            )
        },
    )?;
    let mut checked = Vec::new();
    for pair in rep.metrics.windows(2) {
        let (boundary, after) = (&pair[0], &pair[1]);
        if !boundary.boundary || !after.events.is_empty() {
            continue;
        }
        let predicted = closed_form(after.g_cur, after.w_cur);
        ensure(
            (after.throughput - predicted).abs() <= 1e-9 * predicted,
            || {
                format!(
                    "iteration {}: throughput {} vs closed form {predicted}",
                    after.iteration, after.throughput
                )
            },
        )?;
        ensure(after.throughput > baseline, || {
            format!(
                "iteration {}: {} does not exceed {baseline}",
                after.iteration, after.throughput
            )
        })?;
        checked.push(format!(
            "W={} G={}: {:.2}",
            after.w_cur, after.g_cur, after.throughput
        ));
    }
    ensure(checked.len() >= 3, || {
        format!("only {} post-boundary iterations checked", checked.len())
    })?;
    Ok(format!(
        "baseline {baseline:.2} tokens/s/rank; after boundaries {}",
        checked.join(", ")
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9000);
    let mut triples = 0;
    for policy in [PolicyKind::Static, PolicyKind::Adaptive] {
        for _ in 0..10 {
            let base = ExperimentConfig {
                dim: 3,
                policy,
                eval_examples: 32,
                ..Default::default()
            };
            let (cfg, schedule) = random_job(&mut rng, base, 12);
            let a = run_experiment(&cfg, &schedule).map_err(|e| e.to_string())?;
            let par = ExperimentConfig {
                execution: Execution::Parallel,
                ..cfg.clone()
            };
            let b = run_experiment(&par, &schedule).map_err(|e| e.to_string())?;
            let pa = dir.path().join(format!("{triples}-a.jsonl"));
            let pb = dir.path().join(format!("{triples}-b.jsonl"));
            write_jsonl(&pa, &a.metrics).map_err(|e| e.to_string())?;
            write_jsonl(&pb, &b.metrics).map_err(|e| e.to_string())?;
            let (fa, fb) = (
                std::fs::read(&pa).map_err(|e| e.to_string())?,
                std::fs::read(&pb).map_err(|e| e.to_string())?,
            );
            ensure(
                fa == fb && to_jsonl(&a.metrics) == to_jsonl(&b.metrics),
                || {
                    format!(
                        "metrics differ for W={} G={} {policy}",
                        cfg.replicas, cfg.grad_accum
                    )
                },
            )?;
            ensure(bits(&a.final_params) == bits(&b.final_params), || {
                "final params differ".into()
            })?;
            triples += 1;
        }
    }
    Ok(format!("{triples} triples repeated (sequential and parallel), metrics files and parameters identical"))
}

fn main() -> ExitCode {
    let sweep = invariant_sweep();
    let criteria: Vec<Criterion> = vec![
        (
            "constant global batch under random failures",
            Box::new(|| constant_batch(&sweep)),
        ),
        ("32-replica worked example", Box::new(worked_example)),
        (
            "policy arithmetic against brute force",
            Box::new(policy_oracle),
        ),
        (
            "degenerate-stream trajectory equality",
            Box::new(degenerate_equality),
        ),
        (
            "exchangeable-stream statistical equivalence",
            Box::new(statistical_equivalence),
        ),
        (
            "epoch purity of committed buckets",
            Box::new(|| epoch_purity(&sweep)),
        ),
        (
            "adaptive baseline negative control",
            Box::new(adaptive_control),
        ),
        (
            "throughput amortization after boundaries",
            Box::new(throughput_amortization),
        ),
        ("determinism", Box::new(determinism)),
    ];
    let total = criteria.len();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("[PASS] {}/{total} {name}: {detail} ({secs:.2}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {}/{total} {name}: {detail} ({secs:.2}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", total - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
