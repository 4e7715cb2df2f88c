//! Forgetting metrics, analytic displacement bounds, and linear-connectivity
//! barrier probing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{FreezeMask, ParamVector};
use crate::scalar::Real;

/// Per-task record of one strategy run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub task_index: usize,
    pub n_classes: usize,
    /// Accuracy on the base test set after this task.
    pub base_acc: f64,
    /// Accuracy on each novel task's test set seen so far (index 0 = task 1).
    pub novel_accs: Vec<f64>,
    /// L2 parameter displacement over this task's unfrozen segments.
    pub displacement: f64,
    /// Measured max per-iteration step length (eta * |grad|).
    pub max_step: f64,
    /// Interpolation ratio in effect during the last epoch.
    pub alpha_final: f64,
    pub bound_recursion: f64,
    pub bound_closed_form: f64,
    pub bound_asymptote: f64,
    /// Linear-path loss barrier against the previous task optimum, when probed.
    pub barrier: Option<f64>,
}

impl RunRecord {
    pub fn current_acc(&self) -> f64 {
        *self.novel_accs.last().unwrap_or(&0.0)
    }

    pub fn mean_novel_acc(&self) -> f64 {
        if self.novel_accs.is_empty() {
            0.0
        } else {
            self.novel_accs.iter().sum::<f64>() / self.novel_accs.len() as f64
        }
    }

    /// Mean accuracy over past novel tasks (excludes the current one).
    pub fn mean_old_novel_acc(&self) -> Option<f64> {
        let n = self.novel_accs.len();
        if n < 2 {
            None
        } else {
            Some(self.novel_accs[..n - 1].iter().sum::<f64>() / (n - 1) as f64)
        }
    }
}

/// All records of one (method, seed) run, in task order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSeries {
    pub method: String,
    pub seed: u64,
    pub records: Vec<RunRecord>,
}

/// L2 norm of `w_prev - w_curr` over unfrozen segments.
pub fn displacement<R: Real>(
    w_prev: &ParamVector<R>,
    w_curr: &ParamVector<R>,
    mask: &FreezeMask,
) -> Result<R> {
    w_prev.distance(w_curr, mask)
}

/// The three displacement ceilings for per-iteration interpolation: the
/// recursion-derived bound, the closed form as printed in the source
/// derivation (which differs from the literal series by a factor of 1-alpha),
/// and the N-independent asymptote.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmmBound<R> {
    /// s * sum_{t=1..N} (1-alpha)^t
    pub recursion: R,
    /// s * (1 - (1-alpha)^N) / alpha
    pub closed_form: R,
    /// s / alpha
    pub asymptote: R,
}

pub fn smm_bound<R: Real>(alpha: R, iterations: usize, step: R) -> Result<SmmBound<R>> {
    if alpha <= R::zero() || alpha >= R::one() {
        return Err(Error::InvalidConfig("alpha must be in (0, 1)".into()));
    }
    if iterations < 1 {
        return Err(Error::InvalidConfig("iteration count must be >= 1".into()));
    }
    if step < R::zero() {
        return Err(Error::InvalidConfig("step length must be >= 0".into()));
    }
    let q = R::one() - alpha;
    let pow = q.powi(iterations as i32);
    // Geometric series sum_{t=1..N} q^t = q (1 - q^N) / (1 - q).
    let series = q * (R::one() - pow) / alpha;
    Ok(SmmBound {
        recursion: step * series,
        closed_form: step * (R::one() - pow) / alpha,
        asymptote: step / alpha,
    })
}

/// Single end-of-task interpolation ceiling: s * (1 - alpha) * N.
pub fn imm_bound<R: Real>(alpha: R, iterations: usize, step: R) -> Result<R> {
    if alpha <= R::zero() || alpha > R::one() {
        return Err(Error::InvalidConfig("alpha must be in (0, 1]".into()));
    }
    if step < R::zero() {
        return Err(Error::InvalidConfig("step length must be >= 0".into()));
    }
    Ok(step * (R::one() - alpha) * R::of(iterations as f64))
}

/// Max loss along the G-point linear path between two parameter vectors,
/// minus the larger endpoint loss. Reported raw (may be slightly negative).
pub fn loss_barrier<R: Real, F>(
    w_a: &ParamVector<R>,
    w_b: &ParamVector<R>,
    grid: usize,
    mut eval: F,
) -> Result<R>
where
    F: FnMut(&ParamVector<R>) -> Result<R>,
{
    if grid < 3 {
        return Err(Error::InvalidConfig("barrier grid must have at least 3 points".into()));
    }
    let mask = FreezeMask::none(w_a.layout());
    let mut max_path = R::neg_infinity();
    let mut end_a = R::zero();
    let mut end_b = R::zero();
    for i in 0..grid {
        let t = R::of(i as f64 / (grid - 1) as f64);
        // point = (1-t) w_a + t w_b
        let point = w_a.lerp_toward(w_b, t, &mask)?;
        let loss = eval(&point)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at barrier grid index {i}")));
        }
        if loss > max_path {
            max_path = loss;
        }
        if i == 0 {
            end_a = loss;
        }
        if i == grid - 1 {
            end_b = loss;
        }
    }
    Ok(max_path - end_a.max(end_b))
}

/// Per-method aggregate over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub seeds: usize,
    pub final_base_acc_mean: f64,
    pub final_base_acc_std: f64,
    pub final_novel_acc_mean: f64,
    pub final_novel_acc_std: f64,
    pub avg_forgetting_mean: f64,
    pub avg_forgetting_std: f64,
    /// Mean displacement per task index, averaged over seeds.
    pub displacement_trajectory: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Average forgetting of one run: per past novel task, max accuracy seen over
/// the run minus final accuracy, averaged over tasks. Non-negative by
/// construction.
pub fn average_forgetting(records: &[RunRecord]) -> f64 {
    let Some(last) = records.last() else { return 0.0 };
    let n_tasks = last.novel_accs.len();
    if n_tasks == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..n_tasks {
        let max_acc = records
            .iter()
            .filter_map(|r| r.novel_accs.get(j).copied())
            .fold(f64::NEG_INFINITY, f64::max);
        total += max_acc - last.novel_accs[j];
    }
    total / n_tasks as f64
}

/// Per-method mean and std over seeds of the final accuracies, forgetting and
/// displacement trajectory.
pub fn summarize(runs: &[RunSeries]) -> Vec<MethodSummary> {
    let mut methods: Vec<String> = runs.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();
    methods
        .iter()
        .map(|method| {
            let series: Vec<&RunSeries> = runs.iter().filter(|r| &r.method == method).collect();
            let base: Vec<f64> = series
                .iter()
                .filter_map(|r| r.records.last().map(|rec| rec.base_acc))
                .collect();
            let novel: Vec<f64> = series
                .iter()
                .filter_map(|r| r.records.last().map(|rec| rec.mean_novel_acc()))
                .collect();
            let forgetting: Vec<f64> = series.iter().map(|r| average_forgetting(&r.records)).collect();
            let max_tasks = series.iter().map(|r| r.records.len()).max().unwrap_or(0);
            let mut trajectory = Vec::with_capacity(max_tasks);
            for t in 0..max_tasks {
                let ds: Vec<f64> = series
                    .iter()
                    .filter_map(|r| r.records.get(t).map(|rec| rec.displacement))
                    .collect();
                trajectory.push(mean_std(&ds).0);
            }
            let (bm, bs) = mean_std(&base);
            let (nm, ns) = mean_std(&novel);
            let (fm, fs) = mean_std(&forgetting);
            MethodSummary {
                method: method.clone(),
                seeds: series.len(),
                final_base_acc_mean: bm,
                final_base_acc_std: bs,
                final_novel_acc_mean: nm,
                final_novel_acc_std: ns,
                avg_forgetting_mean: fm,
                avg_forgetting_std: fs,
                displacement_trajectory: trajectory,
            }
        })
        .collect()
}
