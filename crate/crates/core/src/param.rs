//! Flat parameter vectors with a named-segment layout.
//!
//! A [`ParamVector`] is the interpolation-friendly view of a network: every
//! trainable tensor is flattened into one contiguous vector, and a shared
//! [`Layout`] records where each named segment lives. Two vectors with the
//! same layout combine element-wise, which is all the moment-matching
//! strategies need.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// One named slice of the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Ordered, non-overlapping segments covering the whole vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    total_len: usize,
}

impl Layout {
    /// Builds a layout from `(name, len)` pairs, assigning offsets in order.
    pub fn new(parts: impl IntoIterator<Item = (String, usize)>) -> Result<Arc<Self>> {
        let mut segments = Vec::new();
        let mut offset = 0;
        for (name, len) in parts {
            if segments.iter().any(|s: &Segment| s.name == name) {
                return Err(Error::LayoutMismatch(format!("duplicate segment `{name}`")));
            }
            segments.push(Segment { name, offset, len });
            offset += len;
        }
        Ok(Arc::new(Layout { segments, total_len: offset }))
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }
}

fn check_same_layout(a: &Arc<Layout>, b: &Arc<Layout>) -> Result<()> {
    if Arc::ptr_eq(a, b) || a == b {
        Ok(())
    } else {
        Err(Error::LayoutMismatch("parameter vectors have different layouts".into()))
    }
}

/// Per-segment freeze flags. Frozen segments receive no gradient and are
/// copied verbatim through steps and interpolation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    layout: Arc<Layout>,
    frozen: Vec<bool>,
}

impl FreezeMask {
    /// All segments trainable.
    pub fn none(layout: &Arc<Layout>) -> Self {
        FreezeMask { layout: layout.clone(), frozen: vec![false; layout.segments().len()] }
    }

    /// All segments frozen.
    pub fn all(layout: &Arc<Layout>) -> Self {
        FreezeMask { layout: layout.clone(), frozen: vec![true; layout.segments().len()] }
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let idx = self
            .layout
            .segment_index(name)
            .ok_or_else(|| Error::LayoutMismatch(format!("no segment `{name}`")))?;
        self.frozen[idx] = frozen;
        Ok(())
    }

    pub fn is_frozen(&self, segment_idx: usize) -> bool {
        self.frozen[segment_idx]
    }

    pub fn is_frozen_name(&self, name: &str) -> bool {
        self.layout.segment_index(name).map(|i| self.frozen[i]).unwrap_or(false)
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }
}

/// Flat view of all trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<R: Real> {
    layout: Arc<Layout>,
    values: Vec<R>,
}

impl<R: Real> ParamVector<R> {
    pub fn new(layout: Arc<Layout>, values: Vec<R>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::LayoutMismatch(format!(
                "value length {} does not match layout length {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total_len();
        ParamVector { layout, values: vec![R::zero(); n] }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [R] {
        &mut self.values
    }

    pub fn segment_values(&self, name: &str) -> Option<&[R]> {
        self.layout.segment(name).map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn segment_values_mut(&mut self, name: &str) -> Option<&mut [R]> {
        let seg = self.layout.segment(name).cloned()?;
        Some(&mut self.values[seg.offset..seg.offset + seg.len])
    }

    /// `self - eta * g` on unfrozen segments; frozen segments copied verbatim.
    /// Head-row renormalization is layered on top by the network (`nn::apply_step`).
    pub fn step(&self, g: &Gradients<R>, eta: R) -> Result<ParamVector<R>> {
        check_same_layout(&self.layout, &g.values.layout)?;
        let mut out = self.clone();
        for (idx, seg) in self.layout.segments().iter().enumerate() {
            if g.mask.is_frozen(idx) {
                continue;
            }
            for i in seg.offset..seg.offset + seg.len {
                out.values[i] = self.values[i] - eta * g.values.values[i];
            }
        }
        Ok(out)
    }

    /// Element-wise `alpha * anchor + (1 - alpha) * self` on unfrozen segments;
    /// frozen segments taken from `anchor` verbatim.
    pub fn lerp_toward(&self, anchor: &ParamVector<R>, alpha: R, mask: &FreezeMask) -> Result<ParamVector<R>> {
        check_same_layout(&self.layout, &anchor.layout)?;
        check_same_layout(&self.layout, &mask.layout)?;
        let mut out = self.clone();
        for (idx, seg) in self.layout.segments().iter().enumerate() {
            for i in seg.offset..seg.offset + seg.len {
                out.values[i] = if mask.is_frozen(idx) || alpha == R::one() {
                    anchor.values[i]
                } else {
                    // written as a single correction so that equal inputs and
                    // alpha = 0 reproduce `self` bit-exactly
                    self.values[i] + alpha * (anchor.values[i] - self.values[i])
                };
            }
        }
        Ok(out)
    }

    /// L2 norm of `self - other` over unfrozen segments.
    pub fn distance(&self, other: &ParamVector<R>, mask: &FreezeMask) -> Result<R> {
        check_same_layout(&self.layout, &other.layout)?;
        let mut acc = R::zero();
        for (idx, seg) in self.layout.segments().iter().enumerate() {
            if mask.is_frozen(idx) {
                continue;
            }
            for i in seg.offset..seg.offset + seg.len {
                let d = self.values[i] - other.values[i];
                acc = acc + d * d;
            }
        }
        Ok(acc.sqrt())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Gradient of a scalar loss with respect to a [`ParamVector`], carrying the
/// freeze mask under which it was computed.
#[derive(Debug, Clone)]
pub struct Gradients<R: Real> {
    values: ParamVector<R>,
    mask: FreezeMask,
}

impl<R: Real> Gradients<R> {
    /// Wraps raw gradient values, zeroing out the frozen segments.
    pub fn new(values: ParamVector<R>, mask: FreezeMask) -> Result<Self> {
        check_same_layout(&values.layout, &mask.layout)?;
        let mut g = Gradients { values, mask };
        g.enforce_mask();
        Ok(g)
    }

    pub fn zeros(layout: Arc<Layout>, mask: FreezeMask) -> Self {
        Gradients { values: ParamVector::zeros(layout), mask }
    }

    pub fn vector(&self) -> &ParamVector<R> {
        &self.values
    }

    pub fn mask(&self) -> &FreezeMask {
        &self.mask
    }

    /// L2 norm over unfrozen segments.
    pub fn norm(&self) -> R {
        let mut acc = R::zero();
        for (idx, seg) in self.values.layout.segments().iter().enumerate() {
            if self.mask.is_frozen(idx) {
                continue;
            }
            for i in seg.offset..seg.offset + seg.len {
                let v = self.values.values[i];
                acc = acc + v * v;
            }
        }
        acc.sqrt()
    }

    /// `self += scale * other` on unfrozen segments.
    pub fn add_scaled(&mut self, other: &ParamVector<R>, scale: R) -> Result<()> {
        check_same_layout(&self.values.layout, &other.layout)?;
        for (idx, seg) in self.values.layout.segments().iter().enumerate() {
            if self.mask.is_frozen(idx) {
                continue;
            }
            for i in seg.offset..seg.offset + seg.len {
                self.values.values[i] = self.values.values[i] + scale * other.values[i];
            }
        }
        Ok(())
    }

    pub fn values_mut_unchecked(&mut self) -> &mut [R] {
        &mut self.values.values
    }

    /// Re-applies the freeze mask (frozen segments forced to zero).
    pub fn enforce_mask(&mut self) {
        let segs: Vec<Segment> = self.values.layout.segments().to_vec();
        for (idx, seg) in segs.iter().enumerate() {
            if self.mask.is_frozen(idx) {
                for i in seg.offset..seg.offset + seg.len {
                    self.values.values[i] = R::zero();
                }
            }
        }
    }
}
