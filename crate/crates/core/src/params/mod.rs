//! Flat parameter vectors, their segment layouts, and path-free vector algebra.
//!
//! A [`ParamVector`] is a contiguous `f64` buffer plus a shared [`ParamLayout`]
//! describing which ranges belong to which layer, module, and weight matrix, and
//! which ranges are tunable. Every path and ensemble in the crate is built from
//! the operations here.

mod checkpoint;

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{manifest_path, Checkpoint, CHECKPOINT_FORMAT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModuleKind {
    AttentionAnalog,
    Feedforward,
    Adapter,
    Head,
    Bias,
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModuleKind::AttentionAnalog => "attention-analog",
            ModuleKind::Feedforward => "feedforward",
            ModuleKind::Adapter => "adapter",
            ModuleKind::Head => "head",
            ModuleKind::Bias => "bias",
        };
        f.write_str(s)
    }
}

/// A named contiguous range of a parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub layer_id: u32,
    pub module_kind: ModuleKind,
    pub matrix_id: u32,
    pub tunable: bool,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total_len: usize,
    tunable_len: usize,
}

impl ParamLayout {
    /// Validates contiguity, tag uniqueness, and that something is tunable.
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::structure("layout has no segments"));
        }
        let mut expected_offset = 0usize;
        let mut tags = HashSet::new();
        let mut names = HashSet::new();
        for seg in &segments {
            if seg.len == 0 {
                return Err(Error::structure(format!("segment `{}` is empty", seg.name)));
            }
            if seg.offset != expected_offset {
                return Err(Error::structure(format!(
                    "segment `{}` starts at {} but the previous segment ends at {}",
                    seg.name, seg.offset, expected_offset
                )));
            }
            if !tags.insert((seg.layer_id, seg.module_kind, seg.matrix_id)) {
                return Err(Error::structure(format!(
                    "duplicate (layer, module, matrix) tag ({}, {}, {}) on `{}`",
                    seg.layer_id, seg.module_kind, seg.matrix_id, seg.name
                )));
            }
            if !names.insert(seg.name.as_str()) {
                return Err(Error::structure(format!(
                    "duplicate segment name `{}`",
                    seg.name
                )));
            }
            expected_offset += seg.len;
        }
        let tunable_len: usize = segments.iter().filter(|s| s.tunable).map(|s| s.len).sum();
        if tunable_len == 0 {
            return Err(Error::structure("layout has no tunable segment"));
        }
        Ok(ParamLayout {
            segments,
            total_len: expected_offset,
            tunable_len,
        })
    }

    pub fn builder() -> LayoutBuilder {
        LayoutBuilder::default()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// |θ₀|: the number of tunable entries.
    pub fn tunable_len(&self) -> usize {
        self.tunable_len
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn tunable_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.tunable)
    }

    pub fn frozen_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| !s.tunable)
    }

    /// Per-entry tunable flag.
    pub fn tunable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total_len];
        for seg in self.tunable_segments() {
            mask[seg.range()].fill(true);
        }
        mask
    }
}

impl TryFrom<Vec<Segment>> for ParamLayout {
    type Error = Error;

    fn try_from(segments: Vec<Segment>) -> Result<Self> {
        ParamLayout::new(segments)
    }
}

impl From<ParamLayout> for Vec<Segment> {
    fn from(layout: ParamLayout) -> Self {
        layout.segments
    }
}

/// Appends segments with offsets computed from their lengths.
#[derive(Default)]
pub struct LayoutBuilder {
    segments: Vec<Segment>,
    offset: usize,
}

impl LayoutBuilder {
    pub fn push(
        mut self,
        name: impl Into<String>,
        len: usize,
        layer_id: u32,
        module_kind: ModuleKind,
        matrix_id: u32,
        tunable: bool,
    ) -> Self {
        self.segments.push(Segment {
            name: name.into(),
            offset: self.offset,
            len,
            layer_id,
            module_kind,
            matrix_id,
            tunable,
        });
        self.offset += len;
        self
    }

    pub fn build(self) -> Result<ParamLayout> {
        ParamLayout::new(self.segments)
    }
}

/// θ: a flat parameter vector bound to a layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn new(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::structure(format!(
                "{} values for a layout of length {}",
                values.len(),
                layout.total_len()
            )));
        }
        check_finite(&values)?;
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.total_len()],
            layout,
        }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for engines that update in place. Callers must keep
    /// entries finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment_values(&self, name: &str) -> Option<&[f64]> {
        self.layout.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub(crate) fn ensure_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::structure("parameter vectors have different layouts"))
        }
    }

    /// Copy of `self` with `values` replaced; used by engines that build a
    /// vector entry-wise and already know the layout matches.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(values.len(), self.values.len());
        check_finite(&values)?;
        Ok(ParamVector {
            values,
            layout: Arc::clone(&self.layout),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(k) => Err(Error::domain(format!("non-finite parameter at index {k}"))),
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::domain(format!("alpha = {alpha} is outside [0, 1]")))
    }
}

/// φ(α) = (1−α)·a + α·b.
///
/// The weight pair is formed as `w_a = 1 − α`, `w_b = 1 − w_a` so that swapping
/// the endpoints and passing `1 − α` yields bit-identical results. Entries where
/// `a[k] == b[k]` are copied, so frozen entries survive exactly.
pub fn linear_interpolate(a: &ParamVector, b: &ParamVector, alpha: f64) -> Result<ParamVector> {
    a.ensure_same_layout(b)?;
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if alpha == 1.0 {
        return Ok(b.clone());
    }
    let w_a = 1.0 - alpha;
    let w_b = 1.0 - w_a;
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| if x == y { x } else { w_a * x + w_b * y })
        .collect();
    a.with_values(values)
}

/// φ_θ(α) = (1−α)²·a + 2α(1−α)·control + α²·b.
pub fn bezier_point(
    a: &ParamVector,
    control: &ParamVector,
    b: &ParamVector,
    alpha: f64,
) -> Result<ParamVector> {
    a.ensure_same_layout(control)?;
    a.ensure_same_layout(b)?;
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if alpha == 1.0 {
        return Ok(b.clone());
    }
    let [w_a, w_c, w_b] = bezier_weights(alpha);
    let values = a
        .values
        .iter()
        .zip(&control.values)
        .zip(&b.values)
        .map(|((&x, &c), &y)| {
            if x == y && x == c {
                x
            } else {
                w_a * x + w_c * c + w_b * y
            }
        })
        .collect();
    a.with_values(values)
}

/// Bernstein weights of the quadratic Bezier curve; the middle one is also
/// ∂φ_θ(α)/∂θ.
pub fn bezier_weights(alpha: f64) -> [f64; 3] {
    let beta = 1.0 - alpha;
    [beta * beta, 2.0 * alpha * beta, alpha * alpha]
}

/// Euclidean distance over tunable entries, optionally divided by
/// √(tunable count).
pub fn euclidean_distance(a: &ParamVector, b: &ParamVector, normalized: bool) -> Result<f64> {
    a.ensure_same_layout(b)?;
    let mut sum = 0.0;
    for seg in a.layout.tunable_segments() {
        for k in seg.range() {
            let d = a.values[k] - b.values[k];
            sum += d * d;
        }
    }
    let raw = sum.sqrt();
    Ok(if normalized {
        raw / (a.layout.tunable_len() as f64).sqrt()
    } else {
        raw
    })
}

/// `{i / (n_interior + 1)}` for `i = 0..=n_interior + 1`, endpoints included.
pub fn make_alpha_grid(n_interior: usize) -> Vec<f64> {
    let denom = (n_interior + 1) as f64;
    (0..=n_interior + 1).map(|i| i as f64 / denom).collect()
}

/// Elementwise mean of two vectors; frozen entries that agree stay exact.
pub fn midpoint(a: &ParamVector, b: &ParamVector) -> Result<ParamVector> {
    a.ensure_same_layout(b)?;
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| if x == y { x } else { 0.5 * x + 0.5 * y })
        .collect();
    a.with_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(len: usize) -> Arc<ParamLayout> {
        Arc::new(
            ParamLayout::builder()
                .push("w", len, 0, ModuleKind::Feedforward, 0, true)
                .build()
                .unwrap(),
        )
    }

    fn vector(values: &[f64]) -> ParamVector {
        ParamVector::new(layout(values.len()), values.to_vec()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let a = vector(&[1.0, 2.0]);
        let b = vector(&[3.0, 4.0]);
        assert_eq!(
            linear_interpolate(&a, &b, 0.0).unwrap().values(),
            &[1.0, 2.0]
        );
        assert_eq!(
            linear_interpolate(&a, &b, 0.5).unwrap().values(),
            &[2.0, 3.0]
        );
        let p = linear_interpolate(&vector(&[0.0, 0.0]), &vector(&[10.0, -10.0]), 0.3).unwrap();
        assert!((p.values()[0] - 3.0).abs() < 1e-12);
        assert!((p.values()[1] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        let a = vector(&[1.0]);
        assert!(matches!(
            linear_interpolate(&a, &a, 1.5),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            linear_interpolate(&a, &a, -0.1),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            bezier_point(&a, &a, &a, f64::NAN),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn layout_mismatch_is_structural() {
        let a = vector(&[1.0, 2.0]);
        let b = vector(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            linear_interpolate(&a, &b, 0.5),
            Err(Error::Structure(_))
        ));
        assert!(matches!(
            euclidean_distance(&a, &b, false),
            Err(Error::Structure(_))
        ));
        // Same length, different tags.
        let other = Arc::new(
            ParamLayout::builder()
                .push("w", 2, 1, ModuleKind::Feedforward, 0, true)
                .build()
                .unwrap(),
        );
        let c = ParamVector::new(other, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            bezier_point(&a, &a, &c, 0.5),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn bezier_examples() {
        let p = bezier_point(&vector(&[0.0]), &vector(&[1.0]), &vector(&[0.0]), 0.5).unwrap();
        assert_eq!(p.values(), &[0.5]);
        let a = vector(&[0.3, -1.2]);
        let b = vector(&[2.0, 5.0]);
        let c = vector(&[9.0, 9.0]);
        assert_eq!(bezier_point(&a, &c, &b, 0.0).unwrap(), a);
        assert_eq!(bezier_point(&a, &c, &b, 1.0).unwrap(), b);
        let mid = midpoint(&a, &b).unwrap();
        let curve = bezier_point(&a, &mid, &b, 0.37).unwrap();
        let line = linear_interpolate(&a, &b, 0.37).unwrap();
        for (x, y) in curve.values().iter().zip(line.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn distance_examples() {
        let z = vector(&[0.0, 0.0]);
        let p = vector(&[3.0, 4.0]);
        assert_eq!(euclidean_distance(&p, &p, false).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&z, &p, false).unwrap(), 5.0);
        let n = euclidean_distance(&z, &p, true).unwrap();
        assert!((n - 5.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn distance_ignores_frozen_entries() {
        let layout = Arc::new(
            ParamLayout::builder()
                .push("frozen", 1, 0, ModuleKind::Feedforward, 0, false)
                .push("head", 2, 1, ModuleKind::Head, 0, true)
                .build()
                .unwrap(),
        );
        let a = ParamVector::new(Arc::clone(&layout), vec![100.0, 0.0, 0.0]).unwrap();
        let b = ParamVector::new(layout, vec![-100.0, 3.0, 4.0]).unwrap();
        assert_eq!(euclidean_distance(&a, &b, false).unwrap(), 5.0);
    }

    #[test]
    fn alpha_grids() {
        let g = make_alpha_grid(24);
        assert_eq!(g.len(), 26);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[25], 1.0);
        assert_eq!(g[1], 1.0 / 25.0);
        assert_eq!(make_alpha_grid(0), vec![0.0, 1.0]);
        let g4 = make_alpha_grid(4);
        let expected = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        for (x, y) in g4.iter().zip(expected) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn layout_validation() {
        let dup = ParamLayout::builder()
            .push("a", 1, 0, ModuleKind::Feedforward, 0, true)
            .push("b", 1, 0, ModuleKind::Feedforward, 0, true)
            .build();
        assert!(matches!(dup, Err(Error::Structure(_))));
        let frozen = ParamLayout::builder()
            .push("a", 1, 0, ModuleKind::Feedforward, 0, false)
            .build();
        assert!(matches!(frozen, Err(Error::Structure(_))));
        let gap = ParamLayout::new(vec![Segment {
            name: "a".into(),
            offset: 3,
            len: 2,
            layer_id: 0,
            module_kind: ModuleKind::Head,
            matrix_id: 0,
            tunable: true,
        }]);
        assert!(matches!(gap, Err(Error::Structure(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(ParamVector::new(layout(2), vec![1.0, f64::NAN]).is_err());
        assert!(ParamVector::new(layout(2), vec![1.0]).is_err());
    }
}
