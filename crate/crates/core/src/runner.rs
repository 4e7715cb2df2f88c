//! Experiment orchestration: runs every (strategy, seed) pair, isolates
//! per-run failures, and writes deterministic CSV/JSON artifacts.
//!
//! Output layout under `out_dir`:
//!   `<strategy>/seed<k>/records.csv`   per-task records of one run
//!   `<strategy>/seed<k>/series.json`   the same data as JSON
//!   `combined.csv`                     all runs, sorted by (strategy, seed, task)
//!   `summary.json`                     per-strategy aggregates over seeds
//!   `failures.json`                    runs that errored or panicked
//!   `timing.txt`                       wall-clock only; excluded from the
//!                                      determinism guarantee of the files above

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, StrategySpec};
use crate::error::{Error, Result};
use crate::metrics::{self, RunRecord, RunSeries};
use crate::strategies::{
    self, dbf_accuracy, eval_examples, pretrain, run_task, Hyper, Regime, SMM_CR_INTERSEP,
};
use crate::taskgen::TaskStream;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub strategy: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub series: Vec<RunSeries>,
    pub failures: Vec<FailureRecord>,
}

/// Runs one strategy over the full stream with one seed.
pub fn run_single(
    stream: &TaskStream,
    spec: &StrategySpec,
    hyper: &Hyper,
    seed: u64,
) -> Result<RunSeries> {
    let records = match spec.regime() {
        Some(regime) => {
            let mut state = pretrain(stream, hyper, seed)?;
            let mut records = Vec::with_capacity(stream.tasks.len());
            for t in 1..=stream.tasks.len() {
                records.push(run_task(&mut state, stream, t, regime, hyper)?);
            }
            records
        }
        None => run_dbf(stream, hyper, seed)?,
    };
    Ok(RunSeries { method: spec.label(), seed, records })
}

/// Double-branch run: a frozen-extractor branch and an interpolation-trained
/// branch share the stream; accuracies are computed on the combined scores
/// (base classes from the static branch, novel from the dynamic one).
fn run_dbf(stream: &TaskStream, hyper: &Hyper, seed: u64) -> Result<Vec<RunRecord>> {
    let mut static_state = pretrain(stream, hyper, seed)?;
    let mut dynamic_state = static_state.clone();
    let mut records = Vec::with_capacity(stream.tasks.len());
    for t in 1..=stream.tasks.len() {
        run_task(&mut static_state, stream, t, Regime::Static, hyper)?;
        let mut rec = run_task(&mut dynamic_state, stream, t, SMM_CR_INTERSEP, hyper)?;
        rec.base_acc = dbf_accuracy(
            &static_state.net,
            &dynamic_state.net,
            &stream.base_classes,
            &eval_examples(&stream.base_test),
        )?;
        for (j, task) in stream.tasks.iter().take(t).enumerate() {
            rec.novel_accs[j] = dbf_accuracy(
                &static_state.net,
                &dynamic_state.net,
                &stream.base_classes,
                &eval_examples(&task.test),
            )?;
        }
        records.push(rec);
    }
    Ok(records)
}

fn run_isolated(
    stream: &TaskStream,
    spec: &StrategySpec,
    hyper: &Hyper,
    seed: u64,
) -> std::result::Result<RunSeries, FailureRecord> {
    let outcome = catch_unwind(AssertUnwindSafe(|| run_single(stream, spec, hyper, seed)));
    match outcome {
        Ok(Ok(series)) => Ok(series),
        Ok(Err(e)) => Err(FailureRecord { strategy: spec.label(), seed, error: e.to_string() }),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic with non-string payload".to_string());
            Err(FailureRecord { strategy: spec.label(), seed, error: format!("panic: {msg}") })
        }
    }
}

/// Runs the whole experiment with up to `jobs` parallel workers (0 = rayon
/// default) and writes all artifacts under `config.out_dir`.
pub fn run(config: &ExperimentConfig, jobs: usize, config_dir: Option<&Path>) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    let stream = config.stream.resolve(config_dir)?;
    stream.check_integrity()?;

    let mut pairs: Vec<(&StrategySpec, u64)> = Vec::new();
    for spec in &config.strategies {
        for &seed in &config.seeds {
            pairs.push((spec, seed));
        }
    }

    let worker = |(spec, seed): &(&StrategySpec, u64)| run_isolated(&stream, spec, &config.hyper, *seed);
    let outcomes: Vec<std::result::Result<RunSeries, FailureRecord>> = if jobs > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        pool.install(|| pairs.par_iter().map(worker).collect())
    } else {
        pairs.par_iter().map(worker).collect()
    };

    let mut series = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(s) => series.push(s),
            Err(f) => failures.push(f),
        }
    }
    series.sort_by(|a, b| (&a.method, a.seed).cmp(&(&b.method, b.seed)));
    failures.sort_by(|a, b| (&a.strategy, a.seed).cmp(&(&b.strategy, b.seed)));

    write_artifacts(&config.out_dir, &series, &failures)?;
    // resolved config (defaults filled in) for provenance
    std::fs::write(
        config.out_dir.join("config_resolved.json"),
        serde_json::to_string_pretty(config)? + "\n",
    )?;
    std::fs::write(
        config.out_dir.join("timing.txt"),
        format!("wall_clock_seconds {:.3}\n", started.elapsed().as_secs_f64()),
    )?;
    Ok(RunReport { series, failures })
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

const CSV_HEADER: [&str; 15] = [
    "strategy",
    "seed",
    "task_index",
    "n_classes",
    "base_acc",
    "current_acc",
    "mean_novel_acc",
    "displacement",
    "max_step",
    "alpha_final",
    "bound_recursion",
    "bound_closed_form",
    "bound_asymptote",
    "barrier",
    "novel_accs",
];

fn csv_row(method: &str, seed: u64, r: &RunRecord) -> Vec<String> {
    vec![
        method.to_string(),
        seed.to_string(),
        r.task_index.to_string(),
        r.n_classes.to_string(),
        fmt(r.base_acc),
        fmt(r.current_acc()),
        fmt(r.mean_novel_acc()),
        fmt(r.displacement),
        fmt(r.max_step),
        fmt(r.alpha_final),
        fmt(r.bound_recursion),
        fmt(r.bound_closed_form),
        fmt(r.bound_asymptote),
        r.barrier.map(fmt).unwrap_or_default(),
        r.novel_accs.iter().map(|&a| fmt(a)).collect::<Vec<_>>().join(";"),
    ]
}

fn write_records_csv(path: &Path, rows: &[(String, u64, &RunRecord)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for (method, seed, rec) in rows {
        w.write_record(csv_row(method, *seed, rec))?;
    }
    w.flush()?;
    Ok(())
}

fn write_artifacts(out_dir: &Path, series: &[RunSeries], failures: &[FailureRecord]) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for s in series {
        let dir = out_dir.join(&s.method).join(format!("seed{}", s.seed));
        std::fs::create_dir_all(&dir)?;
        let rows: Vec<(String, u64, &RunRecord)> =
            s.records.iter().map(|r| (s.method.clone(), s.seed, r)).collect();
        write_records_csv(&dir.join("records.csv"), &rows)?;
        std::fs::write(dir.join("series.json"), serde_json::to_string_pretty(s)? + "\n")?;
    }

    let mut combined: Vec<(String, u64, &RunRecord)> = Vec::new();
    for s in series {
        for r in &s.records {
            combined.push((s.method.clone(), s.seed, r));
        }
    }
    combined.sort_by(|a, b| (&a.0, a.1, a.2.task_index).cmp(&(&b.0, b.1, b.2.task_index)));
    write_records_csv(&out_dir.join("combined.csv"), &combined)?;

    let summary = metrics::summarize(series);
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    std::fs::write(out_dir.join("failures.json"), serde_json::to_string_pretty(failures)? + "\n")?;
    Ok(())
}

/// Reads back every `series.json` under `out_dir` and prints the per-strategy
/// summary table. Returns the summaries for programmatic use.
pub fn report(out_dir: &Path) -> Result<Vec<metrics::MethodSummary>> {
    let mut series = Vec::new();
    let mut method_dirs: Vec<_> = std::fs::read_dir(out_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    method_dirs.sort();
    for mdir in method_dirs {
        let mut seed_dirs: Vec<_> = std::fs::read_dir(&mdir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        seed_dirs.sort();
        for sdir in seed_dirs {
            let path = sdir.join("series.json");
            if path.exists() {
                let text = std::fs::read_to_string(&path)?;
                let s: RunSeries =
                    serde_json::from_str(&text).map_err(|e| Error::Parse { line: 0, detail: e.to_string() })?;
                series.push(s);
            }
        }
    }
    if series.is_empty() {
        return Err(Error::InvalidInput(format!("no series.json files under {}", out_dir.display())));
    }
    let summaries = metrics::summarize(&series);
    println!(
        "{:<18} {:>5} {:>10} {:>10} {:>11}",
        "strategy", "seeds", "base_acc", "novel_acc", "forgetting"
    );
    for s in &summaries {
        println!(
            "{:<18} {:>5} {:>10.4} {:>10.4} {:>11.4}",
            s.method, s.seeds, s.final_base_acc_mean, s.final_novel_acc_mean, s.avg_forgetting_mean
        );
    }
    Ok(summaries)
}

/// Verifies the displacement-bound algebra on an analytic grid and checks a
/// measured constant-ratio training run against its ceilings. Prints one line
/// per check; returns an error on the first violation.
pub fn check_bounds() -> Result<()> {
    // Analytic grid: ordering of the three ceilings and the crossover against
    // end-of-task interpolation.
    for a in 1..=9usize {
        let alpha = a as f64 / 10.0;
        for &n in &[10usize, 100, 1000, 10000] {
            let b = metrics::smm_bound(alpha, n, 1.0)?;
            if !(b.recursion <= b.closed_form && b.closed_form <= b.asymptote) {
                return Err(Error::Numeric(format!(
                    "ceiling ordering violated at alpha={alpha} n={n}: {b:?}"
                )));
            }
            let crossover = 1.0 / ((1.0 - alpha) * alpha);
            if (n as f64) > crossover && metrics::imm_bound(alpha, n, 1.0)? <= b.asymptote {
                return Err(Error::Numeric(format!(
                    "end-of-task bound failed to cross asymptote at alpha={alpha} n={n}"
                )));
            }
        }
        println!("bound grid alpha={alpha:.1}: ordering and crossover ok");
    }

    // Measured run at constant interpolation ratio.
    let stream = crate::taskgen::make_blob_stream(&crate::taskgen::BlobStreamParams {
        n_base: 3,
        n_novel: 2,
        k: 10,
        d_in: 4,
        spread: 0.15,
        protocol: crate::taskgen::Protocol::PerClass,
        hard_confusion: false,
        seed: 7,
    })?;
    for alpha in [0.2, 0.5] {
        let hyper = Hyper {
            hidden: vec![16],
            pretrain_epochs: 10,
            epochs_fc: 5,
            alpha: strategies::AlphaSchedule {
                alpha_lo: alpha,
                alpha_hi: alpha,
                n_epoch: 10,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut state = pretrain(&stream, &hyper, 7)?;
        let rec = run_task(&mut state, &stream, 1, strategies::SMM_PLAIN, &hyper)?;
        let b = metrics::smm_bound(alpha, hyper.alpha.n_epoch, rec.max_step)?;
        let iter_bound = metrics::smm_bound(
            alpha,
            (stream.tasks[0].train.len() + hyper.batch_size - 1) / hyper.batch_size
                * hyper.alpha.n_epoch,
            rec.max_step,
        )?;
        if rec.displacement > rec.bound_recursion * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::Numeric(format!(
                "measured displacement {} exceeds accumulated recursion ceiling {}",
                rec.displacement, rec.bound_recursion
            )));
        }
        if rec.displacement > iter_bound.recursion * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::Numeric(format!(
                "measured displacement {} exceeds geometric ceiling {}",
                rec.displacement, iter_bound.recursion
            )));
        }
        println!(
            "measured run alpha={alpha}: displacement {:.6} <= recursion {:.6} <= asymptote {:.6}",
            rec.displacement, rec.bound_recursion, b.asymptote
        );
    }
    Ok(())
}
