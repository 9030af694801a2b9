//! Acceptance gate. Each criterion prints one PASS/FAIL line; any failure
//! makes the process exit non-zero.

use std::path::Path;
use std::time::{Duration, Instant};

use beem_core::calibration::error_rate_grid;
use beem_core::policy::run_beem;
use beem_core::theory::theorem_bound;
use beem_core::trace_io::{read_traces, write_traces};
use beem_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// Random traces

/// A random trace whose argmax repeats the previous exit's with probability
/// `stick`, so agreement runs of every length show up.
fn random_trace(rng: &mut ChaCha8Rng, layers: usize, classes: usize, stick: f64) -> SampleTrace {
    let mut rows = Vec::with_capacity(layers);
    let mut prev = rng.gen_range(0..classes);
    for _ in 0..layers {
        let top = if rng.gen::<f64>() < stick {
            prev
        } else {
            rng.gen_range(0..classes)
        };
        let mut row: Vec<f64> = (0..classes).map(|_| rng.gen::<f64>()).collect();
        row[top] += rng.gen_range(0.0..3.0);
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= sum);
        prev = argmax(&row);
        rows.push(row);
    }
    let label = rng.gen_range(0..classes);
    SampleTrace::new("r", Some(label), rows).unwrap()
}

fn random_shape(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=12), rng.gen_range(2..=10))
}

fn random_weights(rng: &mut ChaCha8Rng, layers: usize) -> Vec<f64> {
    match rng.gen_range(0..3) {
        0 => {
            let lambda = rng.gen_range(0.01..1.0);
            (1..=layers).map(|i| lambda * i as f64).collect()
        }
        1 => (0..layers).map(|_| rng.gen_range(0.3..1.0)).collect(),
        _ => (0..layers).map(|_| rng.gen_range(0.01..3.0)).collect(),
    }
}

fn random_thresholds(rng: &mut ChaCha8Rng, layers: usize) -> Vec<f64> {
    if rng.gen_bool(0.3) {
        vec![rng.gen_range(0.0..3.0); layers]
    } else {
        (0..layers).map(|_| rng.gen_range(0.0..3.0)).collect()
    }
}

/// First maximum, scanning left to right.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = j;
        }
    }
    best
}

/// Reference rule: compute every score first, then scan for the first exit
/// over its threshold. Returns (exit, label, all scores).
fn reference_beem(trace: &SampleTrace, w: &[f64], alpha: &[f64]) -> (usize, usize, Vec<f64>) {
    let rows: Vec<&[f64]> = trace.records().iter().map(|r| r.probs().as_slice()).collect();
    let layers = rows.len();
    let labels: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
    let mut scores = vec![0.0; layers];
    for i in 0..layers {
        let own = w[i] * rows[i][labels[i]];
        scores[i] = if i > 0 && labels[i] == labels[i - 1] {
            scores[i - 1] + own
        } else {
            own
        };
    }
    let exit = (0..layers - 1).find(|&i| scores[i] >= alpha[i]).unwrap_or(layers - 1);
    (exit + 1, labels[exit], scores)
}

// ---------------------------------------------------------------------------
// Criteria

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let (l, c) = random_shape(&mut rng);
        let trace = random_trace(&mut rng, l, c, 0.6);
        let w = random_weights(&mut rng, l);
        let alpha = random_thresholds(&mut rng, l);
        let d = run_beem(&trace, &w, &ThresholdVector::new(alpha.clone()).unwrap());
        let (exit, label, scores) = reference_beem(&trace, &w, &alpha);
        let same = d.exit_layer == exit
            && d.label == label
            && d.score_at_exit == scores[exit - 1]
            && d.per_layer_scores == scores[..exit];
        mismatches += usize::from(!same);
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("10000 traces, {mismatches} mismatches, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn scale_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..1_000 {
        let (l, c) = random_shape(&mut rng);
        let trace = random_trace(&mut rng, l, c, 0.6);
        let w = random_weights(&mut rng, l);
        let alpha = random_thresholds(&mut rng, l);
        let k = rng.gen_range(0.05..20.0);
        let a = run_beem(&trace, &w, &ThresholdVector::new(alpha.clone()).unwrap());
        let ws: Vec<f64> = w.iter().map(|x| k * x).collect();
        let alphas: Vec<f64> = alpha.iter().map(|x| k * x).collect();
        let b = run_beem(&trace, &ws, &ThresholdVector::new(alphas).unwrap());
        violations += usize::from((a.exit_layer, a.label) != (b.exit_layer, b.label));
    }
    outcome(violations == 0, format!("1000 tuples, {violations} violations"))
}

fn threshold_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for _ in 0..1_000 {
        let (l, c) = random_shape(&mut rng);
        let trace = random_trace(&mut rng, l, c, 0.6);
        let w = random_weights(&mut rng, l);
        let alpha = random_thresholds(&mut rng, l);
        let raised: Vec<f64> = alpha
            .iter()
            .map(|a| if rng.gen_bool(0.5) { a + rng.gen_range(0.0..1.0) } else { *a })
            .collect();
        let lo = run_beem(&trace, &w, &ThresholdVector::new(alpha).unwrap());
        let hi = run_beem(&trace, &w, &ThresholdVector::new(raised).unwrap());
        violations += usize::from(hi.exit_layer < lo.exit_layer);
    }
    outcome(violations == 0, format!("1000 traces, {violations} violations"))
}

fn linear_rates(layers: usize, hi: f64, lo: f64) -> Vec<f64> {
    (0..layers)
        .map(|i| hi - (hi - lo) * i as f64 / (layers - 1) as f64)
        .collect()
}

fn calibration_guarantee() -> Outcome {
    let layers = 12;
    let q = linear_rates(layers, 0.35, 0.10);
    let cfg = |n, seed| SynthConfig {
        persistence: 0.5,
        ..SynthConfig::new(layers, 2, n, q.clone(), seed)
    };
    let weights = WeightScheme::Cost { lambda: 0.1 };
    let mut val_violations = 0;
    let mut test_ok = 0;
    for seed in 0..20u64 {
        let val = generate(&cfg(5_000, 1_000 + seed)).unwrap();
        let test = generate(&cfg(20_000, 2_000 + seed)).unwrap();
        let report = calibrate_error_rate(&val, &weights, &error_rate_grid(layers), None).unwrap();
        let policy = report.policy().unwrap();
        let p = report.p;
        let early = |r: &EvalReport| r.per_exit_error[..layers - 1].iter().flatten().copied().collect::<Vec<_>>();
        let on_val = evaluate(&val, &policy).unwrap();
        val_violations += early(&on_val).iter().filter(|&&e| e > p).count();
        let on_test = evaluate(&test, &policy).unwrap();
        test_ok += usize::from(early(&on_test).iter().all(|&e| e <= p + 0.02));
    }
    outcome(
        val_violations == 0 && test_ok >= 18,
        format!("validation violations {val_violations}; test within p+0.02 in {test_ok}/20 seeds"),
    )
}

fn theorem_check() -> Outcome {
    let start = Instant::now();
    let layers = 12;
    let mut q = vec![0.02; layers - 1];
    q.push(0.2);
    let policy = Policy::Beem {
        weights: WeightScheme::Cost { lambda: 0.1 },
        thresholds: ThresholdVector::uniform(2.0, layers).unwrap(),
    };
    let n = 20_000;
    let sigma3 = 3.0 * (0.2f64 * 0.8 / n as f64).sqrt();
    let (mut satisfied, mut better, mut final_in_ci) = (0, 0, 0);
    for seed in 0..20u64 {
        let cfg = SynthConfig {
            persistence: 0.9,
            conf_wrong: (5.0, 2.0),
            ..SynthConfig::new(layers, 10, n, q.clone(), 3_000 + seed)
        };
        let data = generate(&cfg).unwrap();
        let report = check_condition(&data, &policy).unwrap();
        let holds = report.all_satisfied && report.estimable_exits > 0;
        satisfied += usize::from(holds);
        let err = 1.0 - evaluate(&data, &policy).unwrap().accuracy.unwrap();
        better += usize::from(holds && err <= report.p);
        let final_err = 1.0 - evaluate(&data, &Policy::FinalOnly).unwrap().accuracy.unwrap();
        final_in_ci += usize::from((final_err - 0.2).abs() <= sigma3);
    }
    let elapsed = start.elapsed();
    outcome(
        better >= 19 && final_in_ci == 20 && elapsed < Duration::from_secs(120),
        format!(
            "condition holds {satisfied}/20, error <= p {better}/20, final within 3σ {final_in_ci}/20, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn speedup_exactness() -> Outcome {
    let mut all_last = vec![0u64; 12];
    all_last[11] = 100;
    let mut half = vec![0u64; 12];
    half[5] = 50;
    half[11] = 50;
    let mut all_six = vec![0u64; 12];
    all_six[5] = 100;
    let cases = [(all_last, 1.0), (all_six, 2.0), (half, 1200.0 / 900.0)];
    let worst = cases
        .iter()
        .map(|(n, want)| (speedup(n) - want).abs())
        .fold(0.0, f64::max);
    outcome(worst <= 1e-12, format!("max deviation {worst:e}"))
}

fn bound_arithmetic() -> Outcome {
    let mut worst: f64 = 0.0;
    let tabulated = [(1.0, 1.0, 0.5, 1, 0.5), (1.0, 1.0, 0.1, 1, 0.1), (1.0, 2.0, 0.1, 3, 1.0 / 37.0)];
    for (a, b, p, t, want) in tabulated {
        worst = worst.max((theorem_bound(a, b, p, t).unwrap() - want).abs());
    }
    for t in 1..=12 {
        for (a, p) in [(1.0, 0.5), (1.0, 0.1), (0.4, 0.2), (2.5, 0.05)] {
            let simplified = a / (a + (1.0 / p - 1.0));
            worst = worst.max((theorem_bound(a, 1.0, p, t).unwrap() - simplified).abs());
        }
    }
    outcome(worst <= 1e-12, format!("max deviation {worst:e}"))
}

fn baseline_sanity() -> Outcome {
    let layers = 12;
    let q = linear_rates(layers, 0.30, 0.10);
    let (tau, patience, quorum) = (0.9, 3, 5);
    let mut sane = 0;
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in 0..20u64 {
        let val = generate(&SynthConfig::new(layers, 10, 5_000, q.clone(), 4_000 + seed)).unwrap();
        let test = generate(&SynthConfig::new(layers, 10, 20_000, q.clone(), 5_000 + seed)).unwrap();
        let acc: Vec<f64> = standalone_error_rates(&val).unwrap().iter().map(|e| 1.0 - e).collect();
        let weights = WeightScheme::Accuracy { acc };
        let beem = calibrate_error_rate(&val, &weights, &error_rate_grid(layers), None)
            .unwrap()
            .policy()
            .unwrap();
        let policies = [
            Policy::FinalOnly,
            Policy::ConfidenceThreshold { tau },
            Policy::Patience { patience },
            Policy::MajorityVote { quorum },
            beem,
        ];
        let r = compare(&test, &policies).unwrap();
        let final_acc = r[0].accuracy.unwrap();
        let ok = r[1..]
            .iter()
            .all(|x| x.speedup > 1.0 && (x.accuracy.unwrap() - final_acc).abs() <= 0.02);
        sane += usize::from(ok);
        if !ok && notes.len() < 3 {
            let worst = r[1..]
                .iter()
                .max_by(|a, b| {
                    let gap = |x: &EvalReport| (x.accuracy.unwrap() - final_acc).abs();
                    gap(a).total_cmp(&gap(b))
                })
                .unwrap();
            notes.push(format!("seed {seed}: {} acc {:.4} vs final {final_acc:.4}", worst.policy, worst.accuracy.unwrap()));
        }

        // Best uniform-threshold speedup among settings matching patience's accuracy.
        let (pat_acc, pat_speed) = (r[2].accuracy.unwrap(), r[2].speedup);
        let best = (1..=200)
            .map(|k| {
                let policy = Policy::Beem {
                    weights: weights.clone(),
                    thresholds: ThresholdVector::uniform(k as f64 * 0.025, layers).unwrap(),
                };
                evaluate(&test, &policy).unwrap()
            })
            .filter(|e| (e.accuracy.unwrap() - pat_acc).abs() <= 0.005)
            .map(|e| e.speedup)
            .fold(f64::NEG_INFINITY, f64::max);
        wins += usize::from(best >= pat_speed);
    }
    let mut detail = format!("sane {sane}/20, beem speedup >= patience at matched accuracy {wins}/20");
    for n in notes {
        detail.push_str("; ");
        detail.push_str(&n);
    }
    outcome(sane == 20 && wins >= 15, detail)
}

fn to_bytes(data: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    write_traces(data, &mut buf).unwrap();
    buf
}

fn trace_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let splits = [None, Some(Split::Train), Some(Split::Validation), Some(Split::Test)];
    let mut round_trip_failures = 0;
    for k in 0..100 {
        let (layers, classes) = random_shape(&mut rng);
        let q: Vec<f64> = (0..layers).map(|_| rng.gen_range(0.0..0.6)).collect();
        let cfg = SynthConfig {
            persistence: rng.gen_range(0.0..1.0),
            split: splits[k % splits.len()],
            ..SynthConfig::new(layers, classes, rng.gen_range(1..200), q, k as u64)
        };
        let data = generate(&cfg).unwrap();
        let bytes = to_bytes(&data);
        let back = read_traces(bytes.as_slice()).unwrap();
        round_trip_failures += usize::from(back != data || to_bytes(&back) != bytes);
    }

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/malformed");
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    let mut wrong = Vec::new();
    for path in &files {
        // The file stem names the expected invariant or error kind.
        let expected = path.file_stem().unwrap().to_str().unwrap();
        let matched = match beem_core::trace_io::load_traces(path) {
            Ok(_) => false,
            Err(e) => match expected {
                "parse" => matches!(e, Error::Parse { .. }),
                "shape" => matches!(e, Error::Shape { .. }),
                name => e.invariant() == Some(name),
            },
        };
        if !matched {
            wrong.push(expected.to_string());
        }
    }
    outcome(
        round_trip_failures == 0 && files.len() == 10 && wrong.is_empty(),
        format!(
            "100 datasets, {round_trip_failures} round-trip failures; {}/{} malformed files rejected as named{}",
            files.len() - wrong.len(),
            files.len(),
            if wrong.is_empty() { String::new() } else { format!(" (missed: {})", wrong.join(", ")) }
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("scale invariance", scale_invariance),
        ("threshold monotonicity", threshold_monotonicity),
        ("calibration guarantee", calibration_guarantee),
        ("performance condition", theorem_check),
        ("speedup exactness", speedup_exactness),
        ("bound arithmetic", bound_arithmetic),
        ("baseline sanity", baseline_sanity),
        ("trace round-trip", trace_round_trip),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = run();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
