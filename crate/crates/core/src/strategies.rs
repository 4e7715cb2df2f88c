//! Continual-learning strategies: naive fine-tuning, the static branch,
//! end-of-task weight averaging, per-iteration stable moment matching with a
//! knowledge base and adaptive interpolation ratio, and the double-branch
//! score combiner.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ClassGroups, MarginConfig};
use crate::metrics::{self, RunRecord};
use crate::nn::{
    apply_step, backward, renormalize_head_segments, Batch, ClassId, CosineClassifierNet,
    LossSpec, TotalSpec, HEAD_SEGMENT_PREFIX,
};
use crate::param::{FreezeMask, ParamVector};
use crate::store::{imprint, EmbeddingStore};
use crate::taskgen::{Example, IncrementalTask, TaskStream};

pub type ParamVec = ParamVector<f64>;
pub type Net = CosineClassifierNet<f64>;

/// Adaptive interpolation ratio: a clamped linear ramp over epochs that
/// steepens with the task index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub r_base: f64,
    pub r_step: f64,
    pub n_epoch: usize,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule { r_base: 0.3, r_step: 0.02, n_epoch: 20, alpha_lo: 0.0, alpha_hi: 0.95 }
    }
}

impl AlphaSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.n_epoch == 0 {
            return Err(Error::InvalidConfig("n_epoch must be >= 1".into()));
        }
        if !(0.0 <= self.alpha_lo && self.alpha_lo <= self.alpha_hi && self.alpha_hi <= 1.0) {
            return Err(Error::InvalidConfig(
                "alpha clamp must satisfy 0 <= alpha_lo <= alpha_hi <= 1".into(),
            ));
        }
        if self.r_base < 0.0 || self.r_step < 0.0 {
            return Err(Error::InvalidConfig("r_base and r_step must be >= 0".into()));
        }
        Ok(())
    }

    /// `(r_step * n + r_base) * q / n_epoch`, clamped. `q` resets to 0 at the
    /// start of each task.
    pub fn alpha(&self, task: usize, epoch: usize) -> f64 {
        let raw = (self.r_step * task as f64 + self.r_base) * epoch as f64 / self.n_epoch as f64;
        raw.clamp(self.alpha_lo, self.alpha_hi)
    }
}

/// Element-wise `alpha * w_b + (1 - alpha) * w_t`; frozen segments from `w_b`.
pub fn interpolate(w_b: &ParamVec, w_t: &ParamVec, alpha: f64, mask: &FreezeMask) -> Result<ParamVec> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    w_t.lerp_toward(w_b, alpha, mask)
}

/// Strategy hyperparameters. Defaults follow the library-wide conventions;
/// everything is exposed through the runner config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyper {
    pub hidden: Vec<usize>,
    pub kappa: f64,
    pub margin: f64,
    pub lambda_margin: f64,
    pub lambda_anchor: f64,
    pub pretrain_epochs: usize,
    pub eta_pretrain: f64,
    pub epochs_fc: usize,
    pub eta_fc: f64,
    pub eta_ex: f64,
    pub alpha: AlphaSchedule,
    pub capacity: usize,
    pub replay_per_class: usize,
    pub batch_size: usize,
    /// Also collect representatives for base classes after pre-training.
    pub base_representatives: bool,
    /// Probe the linear-path loss barrier against the previous task optimum.
    pub probe_barrier: bool,
    pub barrier_grid: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            hidden: vec![64, 64],
            kappa: 16.0,
            margin: 0.5,
            lambda_margin: 1.0,
            lambda_anchor: 0.01,
            pretrain_epochs: 30,
            eta_pretrain: 0.05,
            epochs_fc: 10,
            eta_fc: 0.01,
            eta_ex: 0.001,
            alpha: AlphaSchedule::default(),
            capacity: 20,
            replay_per_class: 4,
            batch_size: 16,
            base_representatives: true,
            probe_barrier: false,
            barrier_grid: 25,
        }
    }
}

impl Hyper {
    pub fn margin_config(&self) -> MarginConfig<f64> {
        MarginConfig {
            margin: self.margin,
            scale: self.kappa,
            lambda_margin: self.lambda_margin,
            lambda_anchor: self.lambda_anchor,
        }
    }
}

/// How the dynamic phase of a task is driven.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Classifier-only adaptation; the extractor never moves.
    Static,
    /// Unfrozen extractor, plain SGD, no interpolation.
    Naive,
    /// Plain SGD followed by a single end-of-task interpolation.
    Imm { alpha: f64 },
    /// Per-iteration interpolation with the knowledge base.
    Smm { use_cr: bool, use_margin: bool, use_anchor: bool },
}

pub const SMM_PLAIN: Regime = Regime::Smm { use_cr: false, use_margin: false, use_anchor: true };
pub const SMM_CR: Regime = Regime::Smm { use_cr: true, use_margin: false, use_anchor: true };
pub const SMM_CR_INTERSEP: Regime = Regime::Smm { use_cr: true, use_margin: true, use_anchor: true };

/// One branch's evolving model plus the bookkeeping shared by all strategies.
#[derive(Debug, Clone)]
pub struct StrategyState {
    pub net: Net,
    pub store: EmbeddingStore,
    pub base_classes: Vec<ClassId>,
    /// Classes of each completed incremental task, in order.
    pub learned_tasks: Vec<Vec<ClassId>>,
    rng: ChaCha8Rng,
}

fn as_eval(examples: &[Example]) -> Vec<(Vec<f64>, ClassId)> {
    examples.iter().map(|e| (e.features.clone(), e.label)).collect()
}

impl StrategyState {
    /// Completed incremental task count.
    pub fn task_index(&self) -> usize {
        self.learned_tasks.len()
    }

    pub fn known_classes(&self) -> Vec<ClassId> {
        let mut out = self.base_classes.clone();
        for t in &self.learned_tasks {
            out.extend_from_slice(t);
        }
        out
    }

    fn next_seed(&mut self) -> u64 {
        self.rng.gen()
    }
}

/// Pre-trains the representation on the base task and returns the initial
/// strategy state.
pub fn pretrain(stream: &TaskStream, hyper: &Hyper, seed: u64) -> Result<StrategyState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Net::new(stream.d_in, &hyper.hidden, hyper.kappa, &mut rng)?;
    for &c in &stream.base_classes {
        let dir: Vec<f64> = (0..net.embed_dim())
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        net.head.add_class(c, dir)?;
    }
    let layout = net.layout()?;
    let mask = FreezeMask::none(&layout);
    let mut w = net.to_params()?;
    let mut order: Vec<usize> = (0..stream.base_train.len()).collect();
    for _ in 0..hyper.pretrain_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            net.set_params(&w)?;
            let batch = Batch {
                inputs: chunk.iter().map(|&i| stream.base_train[i].features.clone()).collect(),
                labels: chunk.iter().map(|&i| stream.base_train[i].label).collect(),
            };
            let (_, g) = backward(&net, &batch, &LossSpec::CrossEntropy, &mask)?;
            w = apply_step(&w, &g, hyper.eta_pretrain)?;
        }
    }
    net.set_params(&w)?;

    let mut state = StrategyState {
        net,
        store: EmbeddingStore::new(),
        base_classes: stream.base_classes.clone(),
        learned_tasks: Vec::new(),
        rng,
    };
    if hyper.base_representatives {
        collect_representatives(&mut state, &stream.base_train, &stream.base_classes, 0, hyper)?;
    }
    Ok(state)
}

fn collect_representatives(
    state: &mut StrategyState,
    examples: &[Example],
    classes: &[ClassId],
    task_index: usize,
    hyper: &Hyper,
) -> Result<()> {
    for &c in classes {
        let mut embs = Vec::new();
        for ex in examples.iter().filter(|e| e.label == c) {
            embs.push(state.net.embed_unit(&ex.features)?);
        }
        let seed = state.next_seed();
        state.store.collect(c, task_index, embs, hyper.capacity, seed)?;
    }
    Ok(())
}

/// Imprints the new class rows and fine-tunes only them with cross-entropy,
/// everything else frozen. Returns the resulting knowledge base weights.
pub fn phase_fc(state: &mut StrategyState, task: &IncrementalTask, hyper: &Hyper) -> Result<ParamVec> {
    let known = state.known_classes();
    for &c in &task.classes {
        if known.contains(&c) {
            return Err(Error::StreamIntegrity(format!("class {c} arrives twice in the stream")));
        }
    }
    for &c in &task.classes {
        let shots: Vec<Vec<f64>> = task
            .train
            .iter()
            .filter(|e| e.label == c)
            .map(|e| state.net.embed_unit(&e.features))
            .collect::<Result<_>>()?;
        let theta = imprint(&shots)?;
        state.net.head.add_class(c, theta)?;
    }

    let layout = state.net.layout()?;
    let mut mask = FreezeMask::all(&layout);
    for &c in &task.classes {
        mask.set_frozen(&format!("{HEAD_SEGMENT_PREFIX}{c}"), false)?;
    }
    let mut w = state.net.to_params()?;
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    for _ in 0..hyper.epochs_fc {
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(hyper.batch_size) {
            state.net.set_params(&w)?;
            let batch = Batch {
                inputs: chunk.iter().map(|&i| task.train[i].features.clone()).collect(),
                labels: chunk.iter().map(|&i| task.train[i].label).collect(),
            };
            let (_, g) = backward(&state.net, &batch, &LossSpec::CrossEntropy, &mask)?;
            w = apply_step(&w, &g, hyper.eta_fc)?;
        }
    }
    state.net.set_params(&w)?;
    Ok(w)
}

/// Freeze mask for the dynamic phase: extractor and new rows trainable, base
/// and old-novel rows frozen.
fn phase_ex_mask(net: &Net, new_classes: &[ClassId]) -> Result<FreezeMask> {
    let layout = net.layout()?;
    let mut mask = FreezeMask::none(&layout);
    for seg in layout.segments() {
        if let Some(id) = seg.name.strip_prefix(HEAD_SEGMENT_PREFIX) {
            let id: ClassId = id.parse().map_err(|_| Error::LayoutMismatch("bad head segment".into()))?;
            if !new_classes.contains(&id) {
                mask.set_frozen(&seg.name, true)?;
            }
        }
    }
    Ok(mask)
}

/// Telemetry of one dynamic phase.
#[derive(Debug, Clone, Copy)]
pub struct PhaseExStats {
    pub max_step: f64,
    pub iterations: usize,
    pub alpha_final: f64,
    /// Numeric accumulation of the per-iteration displacement recursion
    /// ceiling `h <- (1 - alpha_t) * (h + step_t)`.
    pub recursion_ceiling: f64,
}

/// One gradient step on the total objective followed by interpolation with
/// the knowledge base at the given alpha; the interpolated weights seed the
/// next iteration. Cosine rows are renormalized last.
#[allow(clippy::too_many_arguments)]
pub fn phase_ex_step(
    net: &mut Net,
    w: &ParamVec,
    w_b: &ParamVec,
    batch: &Batch<f64>,
    spec: &LossSpec<f64>,
    mask: &FreezeMask,
    eta: f64,
    alpha: f64,
    iteration: usize,
) -> Result<(ParamVec, f64)> {
    net.set_params(w)?;
    let (loss, g) = backward(net, batch, spec, mask)?;
    if !loss.is_finite() {
        return Err(Error::Divergence { iteration, detail: "non-finite loss".into() });
    }
    let step_len = eta * g.norm();
    let stepped = apply_step(w, &g, eta)?;
    let mut out = interpolate(w_b, &stepped, alpha, mask)?;
    // endpoints copy rows that are already unit norm; only interior mixes
    // denormalize them
    if alpha > 0.0 && alpha < 1.0 {
        renormalize_head_segments(&mut out, mask);
    }
    if !out.is_finite() {
        return Err(Error::Divergence { iteration, detail: "non-finite parameters".into() });
    }
    Ok((out, step_len))
}

/// The full dynamic phase of one task under the given regime (interpolation
/// for SMM, plain SGD otherwise). Returns the final weights and telemetry.
pub fn phase_ex(
    state: &mut StrategyState,
    task: &IncrementalTask,
    w_b: &ParamVec,
    hyper: &Hyper,
    regime: Regime,
) -> Result<(ParamVec, PhaseExStats)> {
    let mask = phase_ex_mask(&state.net, &task.classes)?;
    let (smm, use_cr, use_margin, use_anchor) = match regime {
        Regime::Smm { use_cr, use_margin, use_anchor } => (true, use_cr, use_margin, use_anchor),
        _ => (false, false, false, false),
    };
    let n = state.task_index() + 1;
    let groups = if use_margin {
        let mut old: std::collections::BTreeSet<ClassId> = state.store.class_ids().into_iter().collect();
        // Only classes already in the head can serve as templates.
        old.retain(|&c| state.net.head.class_index(c).is_some());
        Some(ClassGroups { old, new: task.classes.iter().copied().collect() })
    } else {
        None
    };

    let mut w = w_b.clone();
    let mut stats = PhaseExStats { max_step: 0.0, iterations: 0, alpha_final: 0.0, recursion_ceiling: 0.0 };
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    for q in 0..hyper.alpha.n_epoch {
        let alpha = if smm { hyper.alpha.alpha(n, q) } else { 0.0 };
        stats.alpha_final = alpha;
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch = Batch {
                inputs: chunk.iter().map(|&i| task.train[i].features.clone()).collect(),
                labels: chunk.iter().map(|&i| task.train[i].label).collect(),
            };
            let old_samples = if use_cr || use_margin {
                let seed = state.next_seed();
                state.store.sample_balanced(hyper.replay_per_class, seed)
            } else {
                Vec::new()
            };
            let spec = LossSpec::Total(TotalSpec {
                cfg: hyper.margin_config(),
                anchor: if use_anchor && smm { Some(w_b.clone()) } else { None },
                old_samples,
                groups: groups.clone(),
                replay_ce: use_cr,
                use_margin,
            });
            let (next, step_len) =
                phase_ex_step(&mut state.net, &w, w_b, &batch, &spec, &mask, hyper.eta_ex, alpha, stats.iterations)?;
            w = next;
            stats.max_step = stats.max_step.max(step_len);
            stats.recursion_ceiling = (1.0 - alpha) * (stats.recursion_ceiling + step_len);
            stats.iterations += 1;
        }
    }
    state.net.set_params(&w)?;
    Ok((w, stats))
}

/// Extends `w_prev` (previous-task weights) to the current layout, filling
/// the segments that did not exist yet from `fill`.
fn extend_to_layout(w_prev: &ParamVec, fill: &ParamVec) -> ParamVec {
    let mut out = fill.clone();
    for seg in w_prev.layout().segments() {
        if let Some(dst) = out.segment_values_mut(&seg.name) {
            dst.copy_from_slice(&w_prev.values()[seg.offset..seg.offset + seg.len]);
        }
    }
    out
}

fn evaluate(state: &StrategyState, stream: &TaskStream, through_task: usize) -> Result<(f64, Vec<f64>)> {
    let base_acc = state.net.accuracy(&as_eval(&stream.base_test))?;
    let mut novel = Vec::with_capacity(through_task);
    for t in 0..through_task {
        novel.push(state.net.accuracy(&as_eval(&stream.tasks[t].test))?);
    }
    Ok((base_acc, novel))
}

fn barrier_probe(
    state: &mut StrategyState,
    stream: &TaskStream,
    through_task: usize,
    w_a: &ParamVec,
    w_b: &ParamVec,
    grid: usize,
) -> Result<f64> {
    let mut eval_set: Vec<(Vec<f64>, ClassId)> = as_eval(&stream.base_test);
    for t in 0..through_task {
        eval_set.extend(as_eval(&stream.tasks[t].test));
    }
    let net = &mut state.net;
    metrics::loss_barrier(w_a, w_b, grid, |point| {
        net.set_params(point)?;
        let mut total = 0.0;
        for (x, y) in &eval_set {
            let (_, logits) = net.forward(x)?;
            let idx = net.head.class_index(*y).ok_or(Error::InvalidLabel { label: *y })?;
            total += crate::losses::cross_entropy(&logits, idx)?.0;
        }
        Ok(total / eval_set.len() as f64)
    })
}

/// Runs one incremental task under the given regime and records the outcome.
pub fn run_task(
    state: &mut StrategyState,
    stream: &TaskStream,
    task_number: usize,
    regime: Regime,
    hyper: &Hyper,
) -> Result<RunRecord> {
    let task = &stream.tasks[task_number - 1];
    if state.task_index() + 1 != task_number {
        return Err(Error::StreamIntegrity(format!(
            "task {task_number} arrived out of order (expected {})",
            state.task_index() + 1
        )));
    }
    let w_prev = state.net.to_params()?;
    let w_b = phase_fc(state, task, hyper)?;

    let (w_final, stats) = match regime {
        Regime::Static => (w_b.clone(), PhaseExStats {
            max_step: 0.0,
            iterations: 0,
            alpha_final: 0.0,
            recursion_ceiling: 0.0,
        }),
        Regime::Naive | Regime::Smm { .. } => phase_ex(state, task, &w_b, hyper, regime)?,
        Regime::Imm { alpha } => {
            let (w_new, stats) = phase_ex(state, task, &w_b, hyper, Regime::Naive)?;
            let prev_ext = extend_to_layout(&w_prev, &w_b);
            let mask = FreezeMask::none(w_new.layout());
            let mut merged = interpolate(&prev_ext, &w_new, alpha, &mask)?;
            if alpha > 0.0 && alpha < 1.0 {
                renormalize_head_segments(&mut merged, &mask);
            }
            state.net.set_params(&merged)?;
            (merged, stats)
        }
    };

    let mask = phase_ex_mask(&state.net, &task.classes)?;
    let disp = metrics::displacement(&w_b, &w_final, &mask)?;

    let barrier = if hyper.probe_barrier {
        let prev_ext = extend_to_layout(&w_prev, &w_final);
        let b = barrier_probe(state, stream, task_number, &prev_ext, &w_final, hyper.barrier_grid)?;
        state.net.set_params(&w_final)?;
        Some(b)
    } else {
        None
    };

    // Freeze the task's representatives only after training converged.
    let needs_store = matches!(regime, Regime::Smm { use_cr, use_margin, .. } if use_cr || use_margin);
    if needs_store {
        let classes = task.classes.clone();
        collect_representatives(state, &task.train, &classes, task_number, hyper)?;
    }
    state.learned_tasks.push(task.classes.clone());

    let (base_acc, novel_accs) = evaluate(state, stream, task_number)?;
    let (bound_recursion, bound_closed, bound_asymptote) = if stats.alpha_final > 0.0
        && stats.alpha_final < 1.0
        && stats.iterations > 0
    {
        let b = metrics::smm_bound(stats.alpha_final, stats.iterations, stats.max_step)?;
        (stats.recursion_ceiling, b.closed_form, b.asymptote)
    } else {
        (stats.recursion_ceiling, 0.0, 0.0)
    };

    Ok(RunRecord {
        task_index: task_number,
        n_classes: state.known_classes().len(),
        base_acc,
        novel_accs,
        displacement: disp,
        max_step: stats.max_step,
        alpha_final: stats.alpha_final,
        bound_recursion,
        bound_closed_form: bound_closed,
        bound_asymptote,
        barrier,
    })
}

/// Base-class scores from the static branch, novel-class scores from the
/// dynamic branch, concatenated; argmax over the concatenation.
pub fn dbf_predict(
    static_net: &Net,
    dynamic_net: &Net,
    base_classes: &[ClassId],
    x: &[f64],
) -> Result<(ClassId, Vec<(ClassId, f64)>)> {
    let (_, static_logits) = static_net.forward(x)?;
    let (_, dynamic_logits) = dynamic_net.forward(x)?;
    let mut scores: Vec<(ClassId, f64)> = Vec::new();
    for &c in base_classes {
        let idx = static_net.head.class_index(c).ok_or_else(|| {
            Error::StreamIntegrity(format!("base class {c} missing from static branch"))
        })?;
        scores.push((c, static_logits[idx]));
    }
    for (i, &c) in dynamic_net.head.class_ids().iter().enumerate() {
        if base_classes.contains(&c) {
            continue;
        }
        scores.push((c, dynamic_logits[i]));
    }
    // Every non-base dynamic class must be absent from the base list and vice
    // versa; a base class missing from the dynamic head means the branches
    // disagree on bookkeeping.
    for &c in base_classes {
        if dynamic_net.head.class_index(c).is_none() {
            return Err(Error::StreamIntegrity(format!(
                "base class {c} missing from dynamic branch"
            )));
        }
    }
    let best = scores
        .iter()
        .fold(None::<(ClassId, f64)>, |acc, &(c, s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((c, s)),
        })
        .ok_or_else(|| Error::InvalidInput("no classes to score".into()))?;
    Ok((best.0, scores))
}

pub fn dbf_accuracy(
    static_net: &Net,
    dynamic_net: &Net,
    base_classes: &[ClassId],
    examples: &[(Vec<f64>, ClassId)],
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (x, y) in examples {
        if dbf_predict(static_net, dynamic_net, base_classes, x)?.0 == *y {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

pub fn eval_examples(examples: &[Example]) -> Vec<(Vec<f64>, ClassId)> {
    as_eval(examples)
}
