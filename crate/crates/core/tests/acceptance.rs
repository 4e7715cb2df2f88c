//! Top-level acceptance suite: nine checks covering gradient correctness,
//! interpolation identities, displacement bounds (measured and analytic),
//! the strategy-ordering benchmarks, barrier probes, margin-loss behavior,
//! and artifact determinism. One printed pass/fail line per criterion; the
//! test fails if any criterion fails. Run with `-- --nocapture` to see the
//! per-criterion lines and raw distributions.

mod common;

use std::collections::BTreeMap;
use std::panic::catch_unwind;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use smm_lab::config::{ExperimentConfig, StrategyKind, StrategySpec, StreamSpec};
use smm_lab::metrics::{imm_bound, smm_bound};
use smm_lab::param::{FreezeMask, Layout, ParamVector};
use smm_lab::runner::{run, run_single};
use smm_lab::strategies::{
    interpolate, pretrain, run_task, AlphaSchedule, Hyper, Regime, SMM_PLAIN,
};
use smm_lab::taskgen::{make_blob_stream, BlobStreamParams, Protocol, TaskStream};

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome { id, name, passed, detail }
}

// ---------------------------------------------------------------- criterion 1

/// Analytic gradients of every loss term match central finite differences
/// (relative tolerance 1e-4) on 100 randomized instances each, in under a
/// minute.
fn criterion_gradients() -> Outcome {
    let t0 = Instant::now();
    let result = catch_unwind(|| {
        common::ce_fd_suite(100, 11);
        common::margin_fd_suite(100, 13);
        common::anchor_fd_suite(100, 17);
        common::total_fd_suite(100, 19);
    });
    let secs = t0.elapsed().as_secs_f64();
    let passed = result.is_ok() && secs < 60.0;
    outcome(
        1,
        "gradient suite",
        passed,
        format!(
            "4 loss terms x 100 randomized finite-difference instances, rel tol 1e-4, {secs:.2}s{}",
            if result.is_err() { " (mismatch found)" } else { "" }
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

/// Interpolation identities: endpoints bit-exact, idempotence bit-exact,
/// per-coordinate affine form within 1e-12, frozen segments pinned to the
/// knowledge base. 1000 randomized cases.
fn criterion_interpolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut failures = 0usize;
    let cases = 1000usize;
    for _ in 0..cases {
        let n_seg = rng.gen_range(1..=3);
        let segs: Vec<(String, usize)> =
            (0..n_seg).map(|i| (format!("s{i}"), rng.gen_range(1..=5))).collect();
        let total: usize = segs.iter().map(|(_, l)| *l).sum();
        let layout = Layout::new(segs).unwrap();
        let rand_vec = |rng: &mut ChaCha8Rng| {
            ParamVector::new(layout.clone(), (0..total).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .unwrap()
        };
        let w_b = rand_vec(&mut rng);
        let w_t = rand_vec(&mut rng);
        let mut mask = FreezeMask::none(&layout);
        let frozen_idx = if n_seg > 1 && rng.gen_bool(0.5) {
            let i = rng.gen_range(0..n_seg);
            mask.set_frozen(&format!("s{i}"), true).unwrap();
            Some(i)
        } else {
            None
        };
        let alpha: f64 = rng.gen_range(0.0..=1.0);

        let at_one = interpolate(&w_b, &w_t, 1.0, &mask).unwrap();
        let at_zero = interpolate(&w_b, &w_t, 0.0, &mask).unwrap();
        let idem = interpolate(&w_b, &w_b, alpha, &mask).unwrap();
        let mid = interpolate(&w_b, &w_t, alpha, &mask).unwrap();

        let mut ok = at_one.values() == w_b.values() && idem.values() == w_b.values();
        for (idx, seg) in layout.segments().iter().enumerate() {
            let frozen = frozen_idx == Some(idx);
            for i in seg.offset..seg.offset + seg.len {
                if frozen {
                    // frozen segments are pinned to the knowledge base
                    ok &= at_zero.values()[i] == w_b.values()[i];
                    ok &= mid.values()[i] == w_b.values()[i];
                } else {
                    ok &= at_zero.values()[i] == w_t.values()[i];
                    let affine = alpha * w_b.values()[i] + (1.0 - alpha) * w_t.values()[i];
                    ok &= (mid.values()[i] - affine).abs() <= 1e-12;
                }
            }
        }
        if !ok {
            failures += 1;
        }
    }
    outcome(
        2,
        "interpolation identities",
        failures == 0,
        format!("{cases} randomized cases (endpoints/idempotence exact, affine tol 1e-12), {failures} failures"),
    )
}

// ---------------------------------------------------------------- criterion 3

/// Measured per-task displacement of constant-ratio interpolated runs never
/// exceeds the geometric ceiling s·Σ(1−α)^t; the s/α asymptote does not move
/// when the epoch budget doubles.
fn criterion_displacement_bound() -> Outcome {
    let t0 = Instant::now();
    let stream = make_blob_stream(&BlobStreamParams {
        n_base: 3,
        n_novel: 2,
        k: 10,
        d_in: 8,
        spread: 0.2,
        protocol: Protocol::PerClass,
        hard_confusion: false,
        seed: 3,
    })
    .unwrap();
    let hyper_for = |a: f64, n_epoch: usize| Hyper {
        hidden: vec![16],
        pretrain_epochs: 6,
        eta_pretrain: 0.05,
        epochs_fc: 4,
        eta_fc: 0.05,
        eta_ex: 0.05,
        alpha: AlphaSchedule { n_epoch, alpha_lo: a, alpha_hi: a, ..AlphaSchedule::default() },
        batch_size: 16,
        ..Hyper::default()
    };

    let alphas = [0.1, 0.3, 0.5, 0.7, 0.9];
    let grid: Vec<(f64, u64)> =
        alphas.iter().flat_map(|&a| (0..20u64).map(move |s| (a, s))).collect();
    let per_run: Vec<(usize, usize)> = grid
        .par_iter()
        .map(|&(a, seed)| {
            let hyper = hyper_for(a, 10);
            let mut st = pretrain(&stream, &hyper, seed).unwrap();
            let mut checks = 0;
            let mut violations = 0;
            for t in 1..=stream.tasks.len() {
                let r = run_task(&mut st, &stream, t, SMM_PLAIN, &hyper).unwrap();
                assert_eq!(r.alpha_final, a);
                // s * sum_{t=1..N} (1-a)^t  ==  (1-a) * s * (1-(1-a)^N)/a
                let geometric = (1.0 - a) * r.bound_closed_form;
                checks += 1;
                if r.displacement > geometric + 1e-12 || r.displacement > r.bound_recursion + 1e-12
                {
                    violations += 1;
                }
            }
            (checks, violations)
        })
        .collect();
    let runs = per_run.len();
    let checks: usize = per_run.iter().map(|r| r.0).sum();
    let violations: usize = per_run.iter().map(|r| r.1).sum();

    // doubling the epoch budget at fixed alpha must not raise the asymptote
    let mut doubling_ok = true;
    let a = 0.5;
    for seed in 0..10u64 {
        for n_epoch in [10, 20] {
            let hyper = hyper_for(a, n_epoch);
            let mut st = pretrain(&stream, &hyper, seed).unwrap();
            for t in 1..=stream.tasks.len() {
                let r = run_task(&mut st, &stream, t, SMM_PLAIN, &hyper).unwrap();
                doubling_ok &= r.displacement <= r.bound_asymptote + 1e-12;
            }
        }
        // the asymptote is a function of alpha and s only, never of N
        let s = 0.37;
        doubling_ok &= smm_bound(a, 100, s).unwrap().asymptote
            == smm_bound(a, 200, s).unwrap().asymptote;
    }

    let secs = t0.elapsed().as_secs_f64();
    outcome(
        3,
        "displacement bound",
        violations == 0 && doubling_ok && runs >= 100 && secs < 300.0,
        format!(
            "{runs} constant-ratio runs, {checks} per-task checks, {violations} ceiling violations; \
             epoch-doubling asymptote unchanged: {doubling_ok}; {secs:.1}s"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

/// Analytic ordering on a dense grid: geometric ceiling <= closed form <=
/// asymptote, and the single-merge bound exceeds the asymptote whenever
/// N > 1/((1-a)a).
fn criterion_bound_ordering() -> Outcome {
    let mut checked = 0usize;
    let mut violations = 0usize;
    for ai in 1..=9 {
        let a = ai as f64 / 10.0;
        for n in 10..=10_000usize {
            let b = smm_bound(a, n, 1.0).unwrap();
            let mut ok = b.recursion <= b.closed_form + 1e-12
                && b.closed_form <= b.asymptote + 1e-12;
            if (n as f64) > 1.0 / ((1.0 - a) * a) {
                ok &= imm_bound(a, n, 1.0).unwrap() > b.asymptote;
            }
            checked += 1;
            if !ok {
                violations += 1;
            }
        }
    }
    outcome(
        4,
        "bound ordering grid",
        violations == 0,
        format!("alpha in 0.1..0.9 x N in 10..10000, {checked} grid points, {violations} violations"),
    )
}

// ------------------------------------------------------- criteria 5, 6 shared

/// Per-strategy (base accuracy, novel accuracy) at the end of the stream,
/// keyed by strategy label, one entry per seed in seed order.
fn ladder(
    stream: &TaskStream,
    hyper: &Hyper,
    imm_alpha: f64,
    seeds: u64,
) -> BTreeMap<String, Vec<(f64, f64)>> {
    let kinds = [
        StrategyKind::Naive,
        StrategyKind::Static,
        StrategyKind::Imm,
        StrategyKind::Smm,
        StrategyKind::SmmCr,
        StrategyKind::SmmCrIntersep,
        StrategyKind::Dbf,
    ];
    let mut rows: Vec<(String, u64, f64, f64)> = kinds
        .par_iter()
        .flat_map(|kind| (0..seeds).into_par_iter().map(move |seed| (*kind, seed)))
        .map(|(kind, seed)| {
            let spec = StrategySpec { kind, name: None, imm_alpha };
            let series = run_single(stream, &spec, hyper, seed).unwrap();
            let last = series.records.last().unwrap();
            (spec.label(), seed, last.base_acc, last.mean_novel_acc())
        })
        .collect();
    rows.sort_by(|x, y| (&x.0, x.1).cmp(&(&y.0, y.1)));
    let mut by: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (label, _, base, novel) in rows {
        by.entry(label).or_default().push((base, novel));
    }
    by
}

fn paired_margin(by: &BTreeMap<String, Vec<(f64, f64)>>, hi: &str, lo: &str, novel: bool) -> (f64, f64) {
    let pick = |p: &(f64, f64)| if novel { p.1 } else { p.0 };
    let diffs: Vec<f64> =
        by[hi].iter().zip(&by[lo]).map(|(a, b)| pick(a) - pick(b)).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let min = diffs.iter().cloned().fold(f64::INFINITY, f64::min);
    (mean, min)
}

fn ordering_criterion(
    id: usize,
    name: &'static str,
    protocol: Protocol,
    r_base: f64,
    imm_alpha: f64,
) -> Outcome {
    let t0 = Instant::now();
    let stream = make_blob_stream(&BlobStreamParams {
        n_base: 10,
        n_novel: 20,
        k: 10,
        d_in: 16,
        spread: 0.2,
        protocol,
        hard_confusion: false,
        seed: 2,
    })
    .unwrap();
    let hyper = Hyper {
        hidden: vec![32, 32],
        pretrain_epochs: 20,
        eta_pretrain: 0.05,
        epochs_fc: 10,
        eta_fc: 0.05,
        eta_ex: 0.1,
        alpha: AlphaSchedule { r_base, ..AlphaSchedule::default() },
        batch_size: 16,
        ..Hyper::default()
    };
    let by = ladder(&stream, &hyper, imm_alpha, 10);
    let pairs = [
        ("dbf", "smm_cr_intersep"),
        ("smm_cr_intersep", "smm"),
        ("smm", "imm"),
        ("imm", "naive"),
    ];
    let mut passed = true;
    let mut parts = Vec::new();
    for (hi, lo) in pairs {
        let (mean, min) = paired_margin(&by, hi, lo, true);
        passed &= mean >= 0.0;
        parts.push(format!("{hi}-{lo} novel {mean:+.4} (min {min:+.4})"));
    }
    let (mean, min) = paired_margin(&by, "static", "naive", false);
    passed &= mean >= 0.0;
    parts.push(format!("static-naive base {mean:+.4} (min {min:+.4})"));
    let secs = t0.elapsed().as_secs_f64();
    passed &= secs < 900.0;
    outcome(id, name, passed, format!("10 paired seeds; {}; {secs:.1}s", parts.join(", ")))
}

// ---------------------------------------------------------------- criterion 7

/// Linear-path loss barriers between consecutive task optima: the
/// interpolated regime's mean barrier must not exceed free fine-tuning's.
fn criterion_barrier() -> Outcome {
    let stream = make_blob_stream(&BlobStreamParams {
        n_base: 6,
        n_novel: 6,
        k: 10,
        d_in: 16,
        spread: 0.2,
        protocol: Protocol::PerClass,
        hard_confusion: false,
        seed: 2,
    })
    .unwrap();
    let hyper = Hyper {
        hidden: vec![32, 32],
        pretrain_epochs: 20,
        eta_pretrain: 0.05,
        epochs_fc: 10,
        eta_fc: 0.05,
        eta_ex: 0.1,
        alpha: AlphaSchedule::default(),
        batch_size: 16,
        probe_barrier: true,
        ..Hyper::default()
    };
    let rows: Vec<(f64, f64)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let mean_barrier = |regime: Regime| {
                let mut st = pretrain(&stream, &hyper, seed).unwrap();
                let mut sum = 0.0;
                for t in 1..=stream.tasks.len() {
                    sum += run_task(&mut st, &stream, t, regime, &hyper).unwrap().barrier.unwrap();
                }
                sum / stream.tasks.len() as f64
            };
            (mean_barrier(SMM_PLAIN), mean_barrier(Regime::Naive))
        })
        .collect();
    println!("criterion 7 raw per-seed mean barriers (interpolated | free fine-tune):");
    for (seed, (s, n)) in rows.iter().enumerate() {
        println!("    seed {seed}: {s:.6} | {n:.6}");
    }
    let mean_smm = rows.iter().map(|r| r.0).sum::<f64>() / rows.len() as f64;
    let mean_naive = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    let all_zero = rows.iter().all(|&(s, n)| s == 0.0 && n == 0.0);
    let passed = mean_smm < mean_naive || (all_zero && mean_smm <= mean_naive);
    let note = if all_zero {
        "; note: every barrier is exactly 0 on this benchmark (the normalized \
         cosine head keeps the linear path free of interior loss maxima), so \
         the comparison degenerates to a tie — accepted as 'not higher'"
    } else {
        ""
    };
    outcome(
        7,
        "loss-barrier probe",
        passed,
        format!("10 seeds, mean barrier interpolated {mean_smm:.6} vs free {mean_naive:.6}{note}"),
    )
}

// ---------------------------------------------------------------- criterion 8

/// On hard-confusion streams the separation-margin term improves old-class
/// accuracy over the pure cross-entropy objective, identical seeds.
fn criterion_margin_benefit() -> Outcome {
    let stream = make_blob_stream(&BlobStreamParams {
        n_base: 10,
        n_novel: 10,
        k: 10,
        d_in: 16,
        spread: 0.3,
        protocol: Protocol::PerClass,
        hard_confusion: true,
        seed: 2,
    })
    .unwrap();
    let hyper = Hyper {
        hidden: vec![32, 32],
        pretrain_epochs: 20,
        eta_pretrain: 0.05,
        epochs_fc: 10,
        eta_fc: 0.05,
        eta_ex: 0.2,
        alpha: AlphaSchedule::default(),
        batch_size: 16,
        ..Hyper::default()
    };
    // sample-weighted accuracy over everything learned before the final task:
    // the base test set plus each past novel task's test set
    let old_acc = |records: &[smm_lab::metrics::RunRecord]| {
        let last = records.last().unwrap();
        let mut num = last.base_acc * stream.base_test.len() as f64;
        let mut den = stream.base_test.len() as f64;
        for t in 0..last.novel_accs.len() - 1 {
            let n = stream.tasks[t].test.len() as f64;
            num += last.novel_accs[t] * n;
            den += n;
        }
        num / den
    };
    let diffs: Vec<f64> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let run_with = |use_margin: bool| {
                let regime = Regime::Smm { use_cr: false, use_margin, use_anchor: true };
                let mut st = pretrain(&stream, &hyper, seed).unwrap();
                let mut records = Vec::new();
                for t in 1..=stream.tasks.len() {
                    records.push(run_task(&mut st, &stream, t, regime, &hyper).unwrap());
                }
                old_acc(&records)
            };
            run_with(true) - run_with(false)
        })
        .collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let positives = diffs.iter().filter(|&&d| d > 0.0).count();
    outcome(
        8,
        "separation-margin benefit",
        mean > 0.0,
        format!(
            "hard-confusion stream, 10 paired seeds: mean old-class accuracy gain {mean:+.4} \
             ({positives}/10 seeds positive)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

/// Two consecutive invocations of the same experiment produce byte-identical
/// CSV and summary artifacts.
fn criterion_determinism() -> Outcome {
    let params = BlobStreamParams {
        n_base: 3,
        n_novel: 2,
        k: 5,
        d_in: 8,
        spread: 0.3,
        protocol: Protocol::PerClass,
        hard_confusion: false,
        seed: 7,
    };
    let hyper = Hyper {
        hidden: vec![16],
        pretrain_epochs: 5,
        eta_pretrain: 0.05,
        epochs_fc: 4,
        eta_fc: 0.05,
        eta_ex: 0.05,
        alpha: AlphaSchedule::default(),
        batch_size: 16,
        ..Hyper::default()
    };
    let spec = |kind| StrategySpec { kind, name: None, imm_alpha: 0.5 };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig {
        stream: StreamSpec::Blobs(params),
        strategies: vec![
            spec(StrategyKind::Naive),
            spec(StrategyKind::SmmCrIntersep),
            spec(StrategyKind::Dbf),
        ],
        seeds: vec![0, 1],
        out_dir: dir_a.path().to_path_buf(),
        hyper,
    };
    run(&config, 0, None).unwrap();
    config.out_dir = dir_b.path().to_path_buf();
    run(&config, 0, None).unwrap();
    let mut identical = true;
    let mut compared = Vec::new();
    for file in ["combined.csv", "summary.json"] {
        let a = std::fs::read(dir_a.path().join(file)).unwrap();
        let b = std::fs::read(dir_b.path().join(file)).unwrap();
        identical &= a == b;
        compared.push(format!("{file} ({} bytes)", a.len()));
    }
    outcome(
        9,
        "artifact determinism",
        identical,
        format!("two invocations byte-compared: {}", compared.join(", ")),
    )
}

// -----------------------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let outcomes = vec![
        criterion_gradients(),
        criterion_interpolation(),
        criterion_displacement_bound(),
        criterion_bound_ordering(),
        ordering_criterion(5, "strategy ordering (per-class)", Protocol::PerClass, 0.3, 0.5),
        ordering_criterion(6, "strategy ordering (per-group)", Protocol::PerGroup(5), 0.9, 0.4),
        criterion_barrier(),
        criterion_margin_benefit(),
        criterion_determinism(),
    ];
    let mut all_passed = true;
    for o in &outcomes {
        println!("criterion {} [{}] {}: {}", o.id, if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        all_passed &= o.passed;
    }
    let failed: Vec<String> =
        outcomes.iter().filter(|o| !o.passed).map(|o| format!("{} ({})", o.id, o.name)).collect();
    assert!(all_passed, "failed criteria: {}", failed.join(", "));
}
