//! Dense feed-forward network with a cosine-similarity classifier head and
//! exact analytic backpropagation.
//!
//! The head keeps one weight row per class. Logits are `scale * cos(row, f(x))`
//! computed on L2-normalized embeddings and rows; rows are renormalized after
//! every optimizer step so the cosine semantics stay exact, and gradients are
//! taken through both normalizations so finite-difference checks agree.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::losses::{self, ClassGroups, LabeledEmbedding, MarginConfig};
use crate::param::{FreezeMask, Gradients, Layout, ParamVector};
use crate::scalar::Real;

/// Global class identifier.
pub type ClassId = u32;

pub const HEAD_SEGMENT_PREFIX: &str = "head.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply<R: Real>(self, z: R) -> R {
        match self {
            Activation::Relu => {
                if z > R::zero() {
                    z
                } else {
                    R::zero()
                }
            }
            Activation::Identity => z,
        }
    }

    fn derivative<R: Real>(self, z: R) -> R {
        match self {
            Activation::Relu => {
                if z > R::zero() {
                    R::one()
                } else {
                    R::zero()
                }
            }
            Activation::Identity => R::one(),
        }
    }
}

/// One fully connected layer, weights stored row-major (out x in).
#[derive(Debug, Clone)]
pub struct DenseLayer<R: Real> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<R>,
    pub bias: Vec<R>,
    pub activation: Activation,
}

impl<R: Real> DenseLayer<R> {
    pub fn new_random<G: Rng>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut G) -> Self
    where
        StandardNormal: Distribution<R>,
    {
        // He init scaled for relu.
        let std = R::of((2.0 / in_dim as f64).sqrt());
        let weights = (0..in_dim * out_dim)
            .map(|_| {
                let z: R = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        DenseLayer { in_dim, out_dim, weights, bias: vec![R::zero(); out_dim], activation }
    }

    fn forward(&self, input: &[R], pre: &mut Vec<R>, post: &mut Vec<R>) {
        pre.clear();
        post.clear();
        for o in 0..self.out_dim {
            let mut z = self.bias[o];
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for (w, x) in row.iter().zip(input) {
                z = z + *w * *x;
            }
            pre.push(z);
            post.push(self.activation.apply(z));
        }
    }
}

/// Expandable unit-normalized classifier weight matrix with a fixed scale.
#[derive(Debug, Clone)]
pub struct CosineHead<R: Real> {
    dim: usize,
    scale: R,
    class_ids: Vec<ClassId>,
    rows: Vec<Vec<R>>,
}

impl<R: Real> CosineHead<R> {
    pub fn new(dim: usize, scale: R) -> Result<Self> {
        if scale <= R::zero() {
            return Err(Error::InvalidConfig("cosine head scale must be positive".into()));
        }
        Ok(CosineHead { dim, scale, class_ids: Vec::new(), rows: Vec::new() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> R {
        self.scale
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn class_index(&self, id: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == id)
    }

    pub fn row(&self, idx: usize) -> &[R] {
        &self.rows[idx]
    }

    pub fn add_class(&mut self, id: ClassId, mut row: Vec<R>) -> Result<()> {
        if self.class_index(id).is_some() {
            return Err(Error::StreamIntegrity(format!("class {id} already present in head")));
        }
        if row.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "imprint row dim {} does not match head dim {}",
                row.len(),
                self.dim
            )));
        }
        normalize_in_place(&mut row);
        self.class_ids.push(id);
        self.rows.push(row);
        Ok(())
    }

    /// Overwrites a row without renormalizing, for code that works on raw
    /// row coordinates (optimizer steps, gradient checks).
    pub fn set_row_raw(&mut self, idx: usize, row: Vec<R>) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "row dim {} does not match head dim {}",
                row.len(),
                self.dim
            )));
        }
        self.rows[idx] = row;
        Ok(())
    }

    pub fn renormalize(&mut self) {
        for row in &mut self.rows {
            normalize_in_place(row);
        }
    }
}

fn norm<R: Real>(v: &[R]) -> R {
    v.iter().map(|x| *x * *x).sum::<R>().sqrt()
}

fn normalize_in_place<R: Real>(v: &mut [R]) {
    let n = norm(v);
    if n > R::of(1e-300) {
        for x in v.iter_mut() {
            *x = *x / n;
        }
    }
}

/// Feature extractor plus cosine head.
#[derive(Debug, Clone)]
pub struct CosineClassifierNet<R: Real> {
    pub layers: Vec<DenseLayer<R>>,
    pub head: CosineHead<R>,
}

/// Per-sample forward trace kept for backpropagation.
struct ForwardTrace<R: Real> {
    pre: Vec<Vec<R>>,
    post: Vec<Vec<R>>, // post[0] is the input itself
    embedding: Vec<R>,
    emb_norm: R,
    unit_embedding: Vec<R>,
    logits: Vec<R>,
}

impl<R: Real> CosineClassifierNet<R> {
    /// Extractor with the given hidden widths (relu) ending at `embed_dim`
    /// (relu as well, the last hidden activation is the embedding).
    pub fn new<G: Rng>(input_dim: usize, hidden: &[usize], scale: R, rng: &mut G) -> Result<Self>
    where
        StandardNormal: Distribution<R>,
    {
        if hidden.is_empty() {
            return Err(Error::InvalidConfig("extractor needs at least one layer".into()));
        }
        let mut layers = Vec::new();
        let mut in_dim = input_dim;
        for &width in hidden {
            layers.push(DenseLayer::new_random(in_dim, width, Activation::Relu, rng));
            in_dim = width;
        }
        Ok(CosineClassifierNet { layers, head: CosineHead::new(in_dim, scale)? })
    }

    /// Identity extractor, used in tests.
    pub fn identity(input_dim: usize, scale: R) -> Result<Self> {
        let mut eye = vec![R::zero(); input_dim * input_dim];
        for i in 0..input_dim {
            eye[i * input_dim + i] = R::one();
        }
        let layer = DenseLayer {
            in_dim: input_dim,
            out_dim: input_dim,
            weights: eye,
            bias: vec![R::zero(); input_dim],
            activation: Activation::Identity,
        };
        Ok(CosineClassifierNet { layers: vec![layer], head: CosineHead::new(input_dim, scale)? })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.head.dim()
    }

    pub fn layout(&self) -> Result<Arc<Layout>> {
        let mut parts = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            parts.push((format!("layer{i}.w"), layer.weights.len()));
            parts.push((format!("layer{i}.b"), layer.bias.len()));
        }
        for &id in self.head.class_ids() {
            parts.push((format!("{HEAD_SEGMENT_PREFIX}{id}"), self.head.dim()));
        }
        Layout::new(parts)
    }

    pub fn to_params(&self) -> Result<ParamVector<R>> {
        let layout = self.layout()?;
        let mut values = Vec::with_capacity(layout.total_len());
        for layer in &self.layers {
            values.extend_from_slice(&layer.weights);
            values.extend_from_slice(&layer.bias);
        }
        for row in &self.rows_in_order() {
            values.extend_from_slice(row);
        }
        ParamVector::new(layout, values)
    }

    fn rows_in_order(&self) -> Vec<&Vec<R>> {
        self.head.rows.iter().collect()
    }

    pub fn set_params(&mut self, params: &ParamVector<R>) -> Result<()> {
        let layout = self.layout()?;
        if *params.layout().as_ref() != *layout {
            return Err(Error::LayoutMismatch("parameter layout does not match network shape".into()));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let w = params.segment_values(&format!("layer{i}.w")).unwrap();
            layer.weights.copy_from_slice(w);
            let b = params.segment_values(&format!("layer{i}.b")).unwrap();
            layer.bias.copy_from_slice(b);
        }
        let ids: Vec<ClassId> = self.head.class_ids().to_vec();
        for (idx, id) in ids.iter().enumerate() {
            let seg = params.segment_values(&format!("{HEAD_SEGMENT_PREFIX}{id}")).unwrap();
            self.head.rows[idx].copy_from_slice(seg);
        }
        Ok(())
    }

    /// Freeze mask with the extractor segments frozen.
    pub fn mask_with_frozen_extractor(&self, layout: &Arc<Layout>) -> FreezeMask {
        let mut mask = FreezeMask::none(layout);
        for i in 0..self.layers.len() {
            mask.set_frozen(&format!("layer{i}.w"), true).unwrap();
            mask.set_frozen(&format!("layer{i}.b"), true).unwrap();
        }
        mask
    }

    fn trace(&self, x: &[R]) -> Result<ForwardTrace<R>> {
        if x.len() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "input dim {} does not match network input dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        if self.head.num_classes() == 0 {
            return Err(Error::InvalidInput("classifier head is empty".into()));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<R>> = Vec::with_capacity(self.layers.len() + 1);
        post.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut p = Vec::new();
            let mut a = Vec::new();
            layer.forward(&post[i], &mut p, &mut a);
            pre.push(p);
            post.push(a);
        }
        let embedding = post.last().unwrap().clone();
        let emb_norm = norm(&embedding);
        let unit_embedding: Vec<R> = if emb_norm > R::of(1e-300) {
            embedding.iter().map(|&e| e / emb_norm).collect()
        } else {
            vec![R::zero(); embedding.len()]
        };
        let logits = self.head_logits(&unit_embedding);
        Ok(ForwardTrace { pre, post, embedding, emb_norm, unit_embedding, logits })
    }

    fn head_logits(&self, unit_embedding: &[R]) -> Vec<R> {
        let kappa = self.head.scale();
        self.head
            .rows
            .iter()
            .map(|row| {
                let n = norm(row);
                let dot: R = row.iter().zip(unit_embedding).map(|(a, b)| *a * *b).sum();
                if n > R::of(1e-300) {
                    kappa * dot / n
                } else {
                    R::zero()
                }
            })
            .collect()
    }

    /// Penultimate activation f(x) and the cosine logits.
    pub fn forward(&self, x: &[R]) -> Result<(Vec<R>, Vec<R>)> {
        let t = self.trace(x)?;
        Ok((t.embedding, t.logits))
    }

    /// Embedding normalized to unit length.
    pub fn embed_unit(&self, x: &[R]) -> Result<Vec<R>> {
        let t = self.trace(x)?;
        Ok(t.unit_embedding)
    }

    pub fn predict(&self, x: &[R]) -> Result<ClassId> {
        let (_, logits) = self.forward(x)?;
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        Ok(self.head.class_ids()[best])
    }

    pub fn accuracy(&self, examples: &[(Vec<R>, ClassId)]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for (x, y) in examples {
            if self.predict(x)? == *y {
                hits += 1;
            }
        }
        Ok(hits as f64 / examples.len() as f64)
    }
}

/// Labeled batch of raw input vectors.
#[derive(Debug, Clone)]
pub struct Batch<R: Real> {
    pub inputs: Vec<Vec<R>>,
    pub labels: Vec<ClassId>,
}

impl<R: Real> Batch<R> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Which objective `backward` differentiates.
#[derive(Debug, Clone)]
pub enum LossSpec<R: Real> {
    /// Plain softmax cross-entropy on the batch.
    CrossEntropy,
    /// The full dynamic-branch objective: CE + margin + anchor.
    Total(TotalSpec<R>),
}

/// Configuration of the combined objective.
#[derive(Debug, Clone)]
pub struct TotalSpec<R: Real> {
    pub cfg: MarginConfig<R>,
    /// Anchor weights for the L2 regularizer; `None` disables the term.
    pub anchor: Option<ParamVector<R>>,
    /// Stored old-class embeddings sampled for this batch.
    pub old_samples: Vec<LabeledEmbedding<R>>,
    /// Old/new class partition for the margin loss; `None` disables it.
    pub groups: Option<ClassGroups>,
    /// Also run cross-entropy over `old_samples` (class-representative replay).
    pub replay_ce: bool,
    /// Enable the inter-task separation term.
    pub use_margin: bool,
}

struct GradBuffer<R: Real> {
    raw: ParamVector<R>,
}

impl<R: Real> GradBuffer<R> {
    fn add_to_segment(&mut self, name: &str, scale: R, values: &[R]) {
        let seg = self.raw.segment_values_mut(name).expect("segment exists");
        for (s, v) in seg.iter_mut().zip(values) {
            *s = *s + scale * *v;
        }
    }
}

/// Mean-batch loss value and its exact gradient under the freeze mask.
pub fn backward<R: Real>(
    net: &CosineClassifierNet<R>,
    batch: &Batch<R>,
    loss: &LossSpec<R>,
    mask: &FreezeMask,
) -> Result<(R, Gradients<R>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    for &y in &batch.labels {
        if net.head.class_index(y).is_none() {
            return Err(Error::InvalidLabel { label: y });
        }
    }
    let layout = net.layout()?;
    let mut buf = GradBuffer { raw: ParamVector::zeros(layout.clone()) };

    let mut ce_sum = R::zero();

    // CE over the batch (plus replayed embeddings when enabled), gradients
    // taken through both normalizations.
    let mut ce_count = batch.len();
    if let LossSpec::Total(spec) = loss {
        if spec.replay_ce {
            ce_count += spec.old_samples.len();
        }
    }
    let inv_ce = R::one() / R::of(ce_count as f64);

    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        let t = net.trace(x)?;
        let target = net.head.class_index(y).unwrap();
        let (l, dlogits) = losses::cross_entropy(&t.logits, target)?;
        ce_sum = ce_sum + l;
        accumulate_head_and_embedding(net, &t, &dlogits, inv_ce, &mut buf)?;
    }

    let total = match loss {
        LossSpec::CrossEntropy => ce_sum * inv_ce,
        LossSpec::Total(spec) => {
            // Replay CE on stored old embeddings (head-side only).
            if spec.replay_ce {
                for s in &spec.old_samples {
                    let idx = net
                        .head
                        .class_index(s.label)
                        .ok_or(Error::InvalidLabel { label: s.label })?;
                    let u = unit(&s.embedding);
                    let logits = net.head_logits(&u);
                    let (l, dlogits) = losses::cross_entropy(&logits, idx)?;
                    ce_sum = ce_sum + l;
                    accumulate_head_only(net, &u, &dlogits, inv_ce, &mut buf);
                }
            }
            let ce = ce_sum * inv_ce;

            // Inter-task separation margin term.
            let mut mgn = R::zero();
            if spec.use_margin {
                if let Some(groups) = &spec.groups {
                    let mut new_samples = Vec::with_capacity(batch.len());
                    let mut traces = Vec::with_capacity(batch.len());
                    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
                        let t = net.trace(x)?;
                        new_samples.push(LabeledEmbedding { label: y, embedding: t.embedding.clone() });
                        traces.push(t);
                    }
                    let (loss_m, grads) = losses::inter_task_separation(
                        &new_samples,
                        &spec.old_samples,
                        &net.head,
                        groups,
                        &spec.cfg,
                    )?;
                    mgn = loss_m;
                    let lam = spec.cfg.lambda_margin;
                    for (i, &id) in net.head.class_ids().iter().enumerate() {
                        buf.add_to_segment(&format!("{HEAD_SEGMENT_PREFIX}{id}"), lam, &grads.d_head_rows[i]);
                    }
                    for (t, d_emb) in traces.iter().zip(&grads.d_embeddings) {
                        backprop_embedding(net, t, d_emb, lam, &mut buf);
                    }
                }
            }

            // L2 anchor.
            let mut reg = R::zero();
            if let Some(anchor) = &spec.anchor {
                let w = net.to_params()?;
                let (l, g) = losses::l2_anchor(&w, anchor, mask)?;
                reg = l;
                let lam = spec.cfg.lambda_anchor;
                for seg in layout.segments() {
                    let gs = g.segment_values(&seg.name).unwrap().to_vec();
                    buf.add_to_segment(&seg.name, lam, &gs);
                }
            }

            losses::total_loss(ce, mgn, reg, &spec.cfg)
        }
    };

    if !total.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    let grads = Gradients::new(buf.raw, mask.clone())?;
    Ok((total, grads))
}

/// Head-row and extractor gradients for one traced sample given dL/dlogits.
fn accumulate_head_and_embedding<R: Real>(
    net: &CosineClassifierNet<R>,
    t: &ForwardTrace<R>,
    dlogits: &[R],
    scale: R,
    buf: &mut GradBuffer<R>,
) -> Result<()> {
    let kappa = net.head.scale();
    let d = net.head.dim();
    let mut d_unit_emb = vec![R::zero(); d];
    for (c, &id) in net.head.class_ids().iter().enumerate() {
        let g = dlogits[c];
        if g == R::zero() {
            continue;
        }
        let row = net.head.row(c);
        let n = norm(row);
        let unit_row: Vec<R> = row.iter().map(|&r| r / n).collect();
        let s: R = unit_row.iter().zip(&t.unit_embedding).map(|(a, b)| *a * *b).sum();
        // d(logit)/d(row) = kappa (v - s*rhat)/|row|
        let mut d_row = vec![R::zero(); d];
        for i in 0..d {
            d_row[i] = kappa * (t.unit_embedding[i] - s * unit_row[i]) / n;
        }
        buf.add_to_segment(&format!("{HEAD_SEGMENT_PREFIX}{id}"), scale * g, &d_row);
        for i in 0..d {
            d_unit_emb[i] = d_unit_emb[i] + g * kappa * unit_row[i];
        }
    }
    // Through the embedding normalization: de = (dv - (v.dv) v)/|e|
    let d_emb = through_unit_norm(&d_unit_emb, &t.unit_embedding, t.emb_norm);
    backprop_embedding(net, t, &d_emb, scale, buf);
    Ok(())
}

/// Head-row gradients only, for stored (constant) embeddings.
fn accumulate_head_only<R: Real>(
    net: &CosineClassifierNet<R>,
    unit_embedding: &[R],
    dlogits: &[R],
    scale: R,
    buf: &mut GradBuffer<R>,
) {
    let kappa = net.head.scale();
    let d = net.head.dim();
    for (c, &id) in net.head.class_ids().iter().enumerate() {
        let g = dlogits[c];
        if g == R::zero() {
            continue;
        }
        let row = net.head.row(c);
        let n = norm(row);
        let unit_row: Vec<R> = row.iter().map(|&r| r / n).collect();
        let s: R = unit_row.iter().zip(unit_embedding).map(|(a, b)| *a * *b).sum();
        let mut d_row = vec![R::zero(); d];
        for i in 0..d {
            d_row[i] = kappa * (unit_embedding[i] - s * unit_row[i]) / n;
        }
        buf.add_to_segment(&format!("{HEAD_SEGMENT_PREFIX}{id}"), scale * g, &d_row);
    }
}

fn through_unit_norm<R: Real>(d_unit: &[R], unit: &[R], raw_norm: R) -> Vec<R> {
    let dot: R = d_unit.iter().zip(unit).map(|(a, b)| *a * *b).sum();
    d_unit
        .iter()
        .zip(unit)
        .map(|(&dv, &v)| (dv - dot * v) / raw_norm)
        .collect()
}

fn unit<R: Real>(v: &[R]) -> Vec<R> {
    let n = norm(v);
    if n > R::of(1e-300) {
        v.iter().map(|&x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Backpropagates dL/d(embedding) through the extractor layers.
fn backprop_embedding<R: Real>(
    net: &CosineClassifierNet<R>,
    t: &ForwardTrace<R>,
    d_embedding: &[R],
    scale: R,
    buf: &mut GradBuffer<R>,
) {
    let mut da = d_embedding.to_vec();
    for l in (0..net.layers.len()).rev() {
        let layer = &net.layers[l];
        let input = &t.post[l];
        let mut dz = vec![R::zero(); layer.out_dim];
        for o in 0..layer.out_dim {
            dz[o] = da[o] * layer.activation.derivative(t.pre[l][o]);
        }
        let mut dw = vec![R::zero(); layer.weights.len()];
        for o in 0..layer.out_dim {
            for i in 0..layer.in_dim {
                dw[o * layer.in_dim + i] = dz[o] * input[i];
            }
        }
        buf.add_to_segment(&format!("layer{l}.w"), scale, &dw);
        buf.add_to_segment(&format!("layer{l}.b"), scale, &dz);
        let mut d_prev = vec![R::zero(); layer.in_dim];
        for o in 0..layer.out_dim {
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for i in 0..layer.in_dim {
                d_prev[i] = d_prev[i] + row[i] * dz[o];
            }
        }
        da = d_prev;
    }
}

/// `w - eta * g` on unfrozen segments, frozen segments copied verbatim,
/// cosine head rows renormalized afterward.
pub fn apply_step<R: Real>(w: &ParamVector<R>, g: &Gradients<R>, eta: R) -> Result<ParamVector<R>> {
    if eta <= R::zero() {
        return Err(Error::InvalidConfig("learning rate must be positive".into()));
    }
    let mut out = w.step(g, eta)?;
    renormalize_head_segments(&mut out, g.mask());
    Ok(out)
}

/// Renormalizes the unfrozen `head.*` segments of a flat vector to unit
/// length. Frozen rows are left untouched so the freeze contract stays
/// bit-exact.
pub fn renormalize_head_segments<R: Real>(w: &mut ParamVector<R>, mask: &FreezeMask) {
    let names: Vec<String> = w
        .layout()
        .segments()
        .iter()
        .filter(|s| s.name.starts_with(HEAD_SEGMENT_PREFIX) && !mask.is_frozen_name(&s.name))
        .map(|s| s.name.clone())
        .collect();
    for name in names {
        if let Some(seg) = w.segment_values_mut(&name) {
            normalize_in_place(seg);
        }
    }
}
