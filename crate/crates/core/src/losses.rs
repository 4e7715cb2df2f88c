//! Training objectives: cosine cross-entropy, inter-task separation margin
//! loss, L2 anchor regularizer, and their weighted total.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::nn::{ClassId, CosineHead};
use crate::param::{FreezeMask, ParamVector};
use crate::scalar::Real;

/// Margin-loss hyperparameters. `scale` must match the cosine head's scale.
#[derive(Debug, Clone)]
pub struct MarginConfig<R: Real> {
    /// Hinge margin m, applied on the scale-multiplied cosine axis.
    pub margin: R,
    /// Cosine scale kappa.
    pub scale: R,
    /// Weight of the separation term in the total objective.
    pub lambda_margin: R,
    /// Weight of the anchor term in the total objective.
    pub lambda_anchor: R,
}

impl<R: Real> MarginConfig<R> {
    pub fn validate(&self) -> Result<()> {
        if self.margin < R::zero() {
            return Err(Error::InvalidConfig("margin must be >= 0".into()));
        }
        if self.scale <= R::zero() {
            return Err(Error::InvalidConfig("scale must be > 0".into()));
        }
        if self.lambda_margin < R::zero() || self.lambda_anchor < R::zero() {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

impl<R: Real> Default for MarginConfig<R> {
    fn default() -> Self {
        MarginConfig {
            margin: R::of(0.5),
            scale: R::of(16.0),
            lambda_margin: R::one(),
            lambda_anchor: R::of(0.01),
        }
    }
}

/// Old/new class partition used when selecting negative templates.
#[derive(Debug, Clone, Default)]
pub struct ClassGroups {
    pub old: BTreeSet<ClassId>,
    pub new: BTreeSet<ClassId>,
}

/// An embedding tagged with its ground-truth class.
#[derive(Debug, Clone)]
pub struct LabeledEmbedding<R: Real> {
    pub label: ClassId,
    pub embedding: Vec<R>,
}

/// Gradients of the margin loss with respect to the raw (pre-normalization)
/// new-sample embeddings and raw head rows.
#[derive(Debug, Clone)]
pub struct MarginGrads<R: Real> {
    pub d_embeddings: Vec<Vec<R>>,
    pub d_head_rows: Vec<Vec<R>>,
}

/// Numerically stable softmax cross-entropy and its exact gradient.
pub fn cross_entropy<R: Real>(logits: &[R], target: usize) -> Result<(R, Vec<R>)> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    if target >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "target index {target} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(R::neg_infinity(), R::max);
    let sum_exp: R = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + sum_exp.ln();
    let loss = lse - logits[target];
    let mut dlogits: Vec<R> = logits.iter().map(|&l| (l - lse).exp()).collect();
    dlogits[target] = dlogits[target] - R::one();
    Ok((loss, dlogits))
}

fn vec_norm<R: Real>(v: &[R]) -> R {
    v.iter().map(|x| *x * *x).sum::<R>().sqrt()
}

fn unit<R: Real>(v: &[R]) -> Vec<R> {
    let n = vec_norm(v);
    v.iter().map(|&x| x / n).collect()
}

/// Inter-task separation loss (mean over contributing samples) with exact
/// subgradients. The zero subgradient is taken at the hinge boundary. Samples
/// whose opposite group is empty contribute nothing; with no old classes at
/// all the loss is defined as zero.
pub fn inter_task_separation<R: Real>(
    new_samples: &[LabeledEmbedding<R>],
    old_samples: &[LabeledEmbedding<R>],
    head: &CosineHead<R>,
    groups: &ClassGroups,
    cfg: &MarginConfig<R>,
) -> Result<(R, MarginGrads<R>)> {
    cfg.validate()?;
    let kappa = cfg.scale;
    let dim = head.dim();
    let n_rows = head.num_classes();

    // Precompute unit rows and their raw norms.
    let mut unit_rows = Vec::with_capacity(n_rows);
    let mut row_norms = Vec::with_capacity(n_rows);
    for c in 0..n_rows {
        let row = head.row(c);
        let n = vec_norm(row);
        row_norms.push(n);
        unit_rows.push(row.iter().map(|&r| r / n).collect::<Vec<R>>());
    }
    let row_in_group = |c: usize, group: &BTreeSet<ClassId>| group.contains(&head.class_ids()[c]);

    let mut d_rows = vec![vec![R::zero(); dim]; n_rows];
    let mut d_embeddings = vec![Vec::new(); new_samples.len()];
    let mut sum = R::zero();
    let mut contributing = 0usize;

    // Gradient of cosine w.r.t. a raw row: (v - s*rhat)/|row|.
    let row_grad = |c: usize, v: &[R], s: R| -> Vec<R> {
        (0..dim).map(|i| (v[i] - s * unit_rows[c][i]) / row_norms[c]).collect()
    };

    let process = |sample: &LabeledEmbedding<R>,
                       own_group: &BTreeSet<ClassId>,
                       opp_group: &BTreeSet<ClassId>,
                       d_rows: &mut Vec<Vec<R>>|
     -> Result<Option<(R, Option<Vec<R>>)>> {
        if !own_group.contains(&sample.label) {
            return Err(Error::InvalidInput(format!(
                "sample label {} is not in its declared group",
                sample.label
            )));
        }
        let pos = head
            .class_index(sample.label)
            .ok_or(Error::InvalidLabel { label: sample.label })?;
        // Highest-similarity template from the opposite group.
        let mut neg: Option<(usize, R)> = None;
        let raw_norm = vec_norm(&sample.embedding);
        let v = unit(&sample.embedding);
        for c in 0..n_rows {
            if !row_in_group(c, opp_group) {
                continue;
            }
            let s: R = unit_rows[c].iter().zip(&v).map(|(a, b)| *a * *b).sum();
            if neg.map_or(true, |(_, best)| s > best) {
                neg = Some((c, s));
            }
        }
        let Some((neg_idx, s_neg)) = neg else {
            return Ok(None); // no opposite-group template in the head yet
        };
        let s_pos: R = unit_rows[pos].iter().zip(&v).map(|(a, b)| *a * *b).sum();
        let term = cfg.margin - kappa * s_pos + kappa * s_neg;
        if term <= R::zero() {
            return Ok(Some((R::zero(), Some(vec![R::zero(); dim]))));
        }
        // Active hinge: accumulate subgradients.
        let gp = row_grad(pos, &v, s_pos);
        let gn = row_grad(neg_idx, &v, s_neg);
        for i in 0..dim {
            d_rows[pos][i] = d_rows[pos][i] - kappa * gp[i];
            d_rows[neg_idx][i] = d_rows[neg_idx][i] + kappa * gn[i];
        }
        // d(term)/dv, then through the embedding normalization.
        let dv: Vec<R> = (0..dim)
            .map(|i| kappa * (unit_rows[neg_idx][i] - unit_rows[pos][i]))
            .collect();
        let dot: R = dv.iter().zip(&v).map(|(a, b)| *a * *b).sum();
        let d_emb: Vec<R> = (0..dim).map(|i| (dv[i] - dot * v[i]) / raw_norm).collect();
        Ok(Some((term, Some(d_emb))))
    };

    for (k, sample) in new_samples.iter().enumerate() {
        match process(sample, &groups.new, &groups.old, &mut d_rows)? {
            Some((term, Some(d_emb))) => {
                sum = sum + term;
                contributing += 1;
                d_embeddings[k] = d_emb;
            }
            _ => d_embeddings[k] = vec![R::zero(); dim],
        }
    }
    for sample in old_samples {
        // Stored embeddings are constants: gradient flows to head rows only.
        if let Some((term, _)) = process(sample, &groups.old, &groups.new, &mut d_rows)? {
            sum = sum + term;
            contributing += 1;
        }
    }

    if contributing == 0 {
        return Ok((
            R::zero(),
            MarginGrads { d_embeddings, d_head_rows: vec![vec![R::zero(); dim]; n_rows] },
        ));
    }
    let inv = R::one() / R::of(contributing as f64);
    for row in &mut d_rows {
        for g in row.iter_mut() {
            *g = *g * inv;
        }
    }
    for emb in &mut d_embeddings {
        for g in emb.iter_mut() {
            *g = *g * inv;
        }
    }
    Ok((sum * inv, MarginGrads { d_embeddings, d_head_rows: d_rows }))
}

/// Squared L2 distance over unfrozen segments and its gradient 2(w - w_b).
pub fn l2_anchor<R: Real>(
    w: &ParamVector<R>,
    anchor: &ParamVector<R>,
    mask: &FreezeMask,
) -> Result<(R, ParamVector<R>)> {
    let mut grad = ParamVector::zeros(w.layout().clone());
    let mut loss = R::zero();
    // distance() validates the layouts up front.
    let _ = w.distance(anchor, mask)?;
    for (idx, seg) in w.layout().segments().iter().enumerate() {
        if mask.is_frozen(idx) {
            continue;
        }
        let ws = &w.values()[seg.offset..seg.offset + seg.len];
        let ans = &anchor.values()[seg.offset..seg.offset + seg.len];
        let gs = grad.segment_values_mut(&seg.name).unwrap();
        for i in 0..seg.len {
            let d = ws[i] - ans[i];
            loss = loss + d * d;
            gs[i] = R::of(2.0) * d;
        }
    }
    Ok((loss, grad))
}

/// `L_ce + lambda_margin * L_mgn + lambda_anchor * L_reg`.
pub fn total_loss<R: Real>(ce: R, mgn: R, reg: R, cfg: &MarginConfig<R>) -> R {
    ce + cfg.lambda_margin * mgn + cfg.lambda_anchor * reg
}
