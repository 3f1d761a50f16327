//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::HashSet;
use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikerate::cli::cmd_train;
use spikerate::data::SensorMapping;
use spikerate::eval::normalized_sse;
use spikerate::learn::{apply_d, apply_u, autoencoder_step, LearnConfig};
use spikerate::net::{compute_drive, relu, Gate};
use spikerate::oracle::{measure_drift, run_bernoulli, run_bernoulli_benchmark, run_two_context_benchmark, BernoulliSpec};
use spikerate::trainer::{DatasetConfig, SyntheticData};
use spikerate::{Architecture, DelayedWeightTensor, Error, HistoryWindow, Network, TimestepFrame, TrainConfig, Trainer};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn window(frames_oldest_first: &[Vec<f64>]) -> HistoryWindow {
    let mut w = HistoryWindow::new(frames_oldest_first.len());
    for (t, f) in frames_oldest_first.iter().enumerate() {
        w.push(TimestepFrame::new(t as i64, f.clone()).unwrap()).unwrap();
    }
    w
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed <= Duration::from_secs(secs)
}

fn bernoulli_fixed_point() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for p in [0.1, 0.25, 0.5] {
        let run = run_bernoulli_benchmark(p, 50_000, 1e-3, 1).unwrap();
        worst = worst.max(run.gap());
    }
    let t = start.elapsed();
    outcome(worst <= 0.05 && within(t, 5), format!("max gap {worst:.4} in {:.2}s", t.as_secs_f64()))
}

fn two_contexts() -> Outcome {
    let start = Instant::now();
    let rows = run_two_context_benchmark(0.8, 0.2, 100_000, 1e-3, 2).unwrap();
    let t = start.elapsed();
    let worst = rows.iter().map(|r| r.gap()).fold(0.0, f64::max);
    let learned: Vec<String> = rows.iter().map(|r| format!("{:.3}/{:.3}", r.learned_q, r.oracle_rate)).collect();
    outcome(
        rows.len() == 2 && worst <= 0.05 && within(t, 10),
        format!("learned/oracle {} max gap {worst:.4} in {:.2}s", learned.join(" "), t.as_secs_f64()),
    )
}

fn direction_constraints() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut violations = 0;
    let mut checked_d = 0;
    let mut checked_u = 0;
    for _ in 0..1000 {
        let pre = rng.gen_range(1..5);
        let post = rng.gen_range(1..4);
        let k = rng.gen_range(1..4);
        let vals: Vec<f64> = (0..pre * post * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w0 = DelayedWeightTensor::from_values("a", "b", pre, post, k, &vals).unwrap();
        let mut frames: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..pre).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.0..3.0) } else { 0.0 }).collect())
            .collect();
        frames[0][0] += 0.5;
        let win = window(&frames);
        let eps = rng.gen_range(1e-4..1e-1);
        let q = compute_drive(&w0, &win).unwrap();

        let mut wd = w0.clone();
        apply_d(&mut wd, &win, &q, eps).unwrap();
        let qd = compute_drive(&wd, &win).unwrap();
        for j in 0..post {
            if q[j] > 0.0 {
                checked_d += 1;
                if qd[j] >= q[j] {
                    violations += 1;
                }
            }
        }

        let o: Vec<f64> = (0..post).map(|_| if rng.gen_bool(0.7) { rng.gen_range(0.1..2.0) } else { 0.0 }).collect();
        let mut wu = w0.clone();
        apply_u(&mut wu, &win, &TimestepFrame::new(0, o.clone()).unwrap(), eps).unwrap();
        let qu = compute_drive(&wu, &win).unwrap();
        for j in 0..post {
            if o[j] > 0.0 {
                checked_u += 1;
                if qu[j] <= q[j] {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        violations == 0,
        format!("{violations} violations over {checked_d} d-checks and {checked_u} u-checks in 1000 instances"),
    )
}

fn drift_relation() -> Outcome {
    let w = DelayedWeightTensor::from_values("h", "o", 3, 1, 2, &[0.05, 0.02, 0.1, 0.0, 0.03, 0.04]).unwrap();
    let win = window(&[vec![1.0, 0.0, 2.0], vec![0.5, 1.0, 0.0]]);
    let m = measure_drift(&w, &win, 0.6, 1e-3, 10_000, 5).unwrap();
    let err = m.relative_error();
    outcome(
        err <= 0.05,
        format!("measured {:.3e} predicted {:.3e} relative error {err:.4}", m.measured, m.predicted),
    )
}

fn noise_floor() -> Outcome {
    let mut worst: f64 = 0.0;
    for p in [0.1, 0.25, 0.5] {
        let run = run_bernoulli(&BernoulliSpec {
            p,
            noise_rate: 0.3,
            ..BernoulliSpec::default()
        })
        .unwrap();
        worst = worst.max(run.gap());
    }
    outcome(worst <= 0.05, format!("m=0.3, max gap {worst:.4}"))
}

fn identity_mapping() -> Outcome {
    let start = Instant::now();
    let arch = Architecture {
        input: 10,
        hidden: vec![10],
        classes: 1,
        k: 5,
        tau_us: 1000,
    };
    let eps = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = Network::new(arch, eps, &mut rng).unwrap();
    net.reset();
    for t in 0..50_000 {
        let x: Vec<f64> = (0..10).map(|_| if rng.gen_bool(0.1) { 1.0 } else { 0.0 }).collect();
        net.forward_step(TimestepFrame::new(t, x).unwrap(), &[Gate::Open]).unwrap();
        let below = net.window(0).oldest().unwrap().clone();
        let hidden = net.window(1).clone();
        autoencoder_step(&mut net.layers[0], &below, &hidden, eps).unwrap();
    }
    let t = start.elapsed();
    let w = &net.layers[0];
    let mut diagonal = 0;
    let mut targets = HashSet::new();
    for j in 0..10 {
        let summed: Vec<f64> = (0..10).map(|i| (0..5).map(|d| w.get(j, i, d)).sum()).collect();
        let best = (0..10).max_by(|&a, &b| summed[a].abs().total_cmp(&summed[b].abs())).unwrap();
        targets.insert(best);
        if best == j {
            diagonal += 1;
        }
    }
    outcome(
        diagonal >= 9 && within(t, 60),
        format!(
            "{diagonal}/10 strongest inputs on the diagonal; {} distinct inputs (10 = one-to-one); {:.1}s",
            targets.len(),
            t.as_secs_f64()
        ),
    )
}

fn desk_task() -> (Outcome, Outcome) {
    let start = Instant::now();
    let mut trainer = Trainer::new(TrainConfig::desk()).unwrap();
    trainer.run(None).unwrap();
    let report = trainer.evaluate(&trainer.test_stream().unwrap()).unwrap();
    let t = start.elapsed();
    let acc = report.recording_accuracy.unwrap();
    let seven = outcome(
        report.recordings == 20 && acc >= 0.9 && within(t, 300),
        format!(
            "per-recording accuracy {acc:.3} (per-timestep {:.3}) in {:.1}s",
            report.timestep_accuracy.unwrap(),
            t.as_secs_f64()
        ),
    );
    let (inf, pred) = (report.inference_sse.unwrap(), report.prediction_sse.unwrap());
    let eight = outcome(inf < pred, format!("inference SSE {inf:.4} vs prediction SSE {pred:.4}"));
    (seven, eight)
}

fn determinism() -> Outcome {
    let config = TrainConfig {
        seed: 21,
        passes: 2,
        checkpoint_every: 1,
        arch: Architecture {
            input: 2 * 8 * 8,
            hidden: vec![12, 8],
            classes: 2,
            k: 3,
            tau_us: 30_000,
        },
        learn: LearnConfig {
            eps_layers: 2e-3,
            eps_heads: 1e-3,
            noise_rate: 0.05,
            horizon: 3,
            ..LearnConfig::default()
        },
        data: DatasetConfig::Synthetic(SyntheticData {
            classes: vec![0, 1],
            train_per_class: 4,
            test_per_class: 2,
            length: 12,
            noise_rate: 0.01,
            gap: 5,
            crop: SensorMapping {
                origin: (60, 60),
                size: (8, 8),
            },
        }),
        ..TrainConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_train(&config, a.path()).unwrap();
    cmd_train(&config, b.path()).unwrap();
    let mut names: Vec<String> = fs::read_dir(a.path().join("checkpoints"))
        .unwrap()
        .map(|e| format!("checkpoints/{}", e.unwrap().file_name().to_string_lossy()))
        .collect();
    names.push("final.spk".into());
    names.push("metrics.csv".into());
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| fs::read(a.path().join(n)).unwrap() != fs::read(b.path().join(n)).unwrap())
        .collect();
    outcome(
        differing.is_empty() && names.len() == 6,
        format!("{} files compared, {} differ", names.len(), differing.len()),
    )
}

fn unit_algebra() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    check("relu(-1)", relu(-1.0).unwrap() == 0.0);
    check("relu(0)", relu(0.0).unwrap() == 0.0);
    check("relu(2.5)", relu(2.5).unwrap() == 2.5);
    check("relu(nan)", matches!(relu(f64::NAN), Err(Error::Numeric(_))));

    let single = |w: f64| DelayedWeightTensor::from_values("h", "o", 1, 1, 1, &[w]).unwrap();
    let h2 = window(&[vec![2.0]]);

    let mut w = single(0.5);
    apply_d(&mut w, &h2, &[1.5], 0.1).unwrap();
    check("d: 0.5 - 0.1*2*1.5", w.get(0, 0, 0) == 0.5 - 0.1 * 2.0 * 1.5);

    let mut w = DelayedWeightTensor::from_values("h", "o", 2, 1, 1, &[0.5, 0.7]).unwrap();
    apply_d(&mut w, &window(&[vec![2.0, 0.0]]), &[1.0], 0.1).unwrap();
    check("d: h=0 unchanged", w.get(0, 1, 0) == 0.7);

    let mut w = single(0.5);
    apply_d(&mut w, &h2, &[0.0], 0.1).unwrap();
    check("d: Q=0 unchanged", w.get(0, 0, 0) == 0.5);

    let mut w = single(0.2);
    apply_u(&mut w, &h2, &TimestepFrame::new(0, vec![1.0]).unwrap(), 0.1).unwrap();
    check("u: 0.2 + 0.1*2*1", w.get(0, 0, 0) == 0.2 + 0.1 * 2.0 * 1.0);

    let mut w = single(0.2);
    apply_u(&mut w, &h2, &TimestepFrame::new(0, vec![0.0]).unwrap(), 0.1).unwrap();
    check("u: o=0 unchanged", w.get(0, 0, 0) == 0.2);

    let mut w = single(0.2);
    apply_u(&mut w, &h2, &TimestepFrame::new(0, vec![0.5]).unwrap(), 0.1).unwrap();
    check("u: o=0.5", w.get(0, 0, 0) == 0.2 + 0.1 * 2.0 * 0.5);

    check("sse equal", normalized_sse(&[1.0, 2.0], &[1.0, 2.0]).unwrap() == 0.0);
    check("sse zero estimate", normalized_sse(&[0.0, 0.0], &[3.0, 1.0]).unwrap() == 1.0);
    check("sse swapped", normalized_sse(&[1.0, 0.0], &[0.0, 1.0]).unwrap() == 2.0);
    check("sse silent truth", matches!(normalized_sse(&[1.0], &[0.0]), Err(Error::UndefinedMetric(_))));

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "all example rows exact".into()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "fixed-point convergence", bernoulli_fixed_point()),
        (2, "two-context discrimination", two_contexts()),
        (3, "direction constraints", direction_constraints()),
        (4, "drift relation", drift_relation()),
        (5, "noise floor", noise_floor()),
        (6, "identity-mapping emergence", identity_mapping()),
    ];
    let (seven, eight) = desk_task();
    results.push((7, "desk-scale task", seven));
    results.push((8, "inference beats prediction", eight));
    results.push((9, "determinism", determinism()));
    results.push((10, "unit algebra", unit_algebra()));

    for (n, name, o) in &results {
        println!(
            "criterion {n:>2} {}: {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    let failed = results.iter().filter(|r| !r.2.passed).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
