//! Flat parameter storage with named layer segments.
//!
//! Every aggregation rule in this crate operates on [`ParameterVector`]s. A
//! vector carries its [`Layout`] so that two vectors can only be combined when
//! they describe the same model.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// One named, contiguous run of parameters (a weight matrix or a bias).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Ordered, contiguous segmentation of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    /// Builds a layout from `(name, len)` pairs laid out back to back.
    pub fn from_sizes<S: Into<String>>(parts: impl IntoIterator<Item = (S, usize)>) -> Self {
        let mut offset = 0;
        let segments = parts
            .into_iter()
            .map(|(name, len)| {
                let seg = Segment {
                    name: name.into(),
                    offset,
                    len,
                };
                offset += len;
                seg
            })
            .collect();
        Layout {
            segments,
            total: offset,
        }
    }

    /// A single segment named `flat`.
    pub fn flat(len: usize) -> Self {
        Self::from_sizes([("flat", len)])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.total
    }
}

/// Real-valued model weights with a fixed layout.
///
/// All values are finite. Operations that would produce NaN or infinity
/// return [`ModelError::NonFinite`] instead.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParameterVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParameterVector {
            values: vec![0.0; layout.total_len()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != layout.total_len() {
            return Err(ModelError::DimensionMismatch {
                what: "parameter vector length",
                expected: layout.total_len(),
                found: values.len(),
            });
        }
        let v = ParameterVector { values, layout };
        v.ensure_finite("from_values")?;
        Ok(v)
    }

    /// Convenience constructor for a single-segment vector.
    pub fn flat(values: Vec<f64>) -> Result<Self, ModelError> {
        let layout = Arc::new(Layout::flat(values.len()));
        Self::from_values(layout, values)
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, index: usize) -> &[f64] {
        let seg = &self.layout.segments()[index];
        &self.values[seg.offset..seg.offset + seg.len]
    }

    pub fn same_layout(&self, other: &ParameterVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn check_compatible(&self, other: &ParameterVector) -> Result<(), ModelError> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(ModelError::LayoutMismatch)
        }
    }

    pub fn ensure_finite(&self, context: &'static str) -> Result<(), ModelError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(index) => Err(ModelError::NonFinite { context, index }),
        }
    }

    /// `self + other`
    pub fn add(&self, other: &ParameterVector) -> Result<ParameterVector, ModelError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    /// `self - other`
    pub fn sub(&self, other: &ParameterVector) -> Result<ParameterVector, ModelError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Result<ParameterVector, ModelError> {
        let out = ParameterVector {
            values: self.values.iter().map(|v| v * factor).collect(),
            layout: Arc::clone(&self.layout),
        };
        out.ensure_finite("scale")?;
        Ok(out)
    }

    /// In-place `self += factor * other`.
    pub fn add_scaled(&mut self, other: &ParameterVector, factor: f64) -> Result<(), ModelError> {
        self.check_compatible(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
        self.ensure_finite("add_scaled")
    }

    pub fn dot(&self, other: &ParameterVector) -> Result<f64, ModelError> {
        self.check_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn linf_distance(&self, other: &ParameterVector) -> Result<f64, ModelError> {
        self.check_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    fn zip_with(
        &self,
        other: &ParameterVector,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<ParameterVector, ModelError> {
        self.check_compatible(other)?;
        let out = ParameterVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| f(*a, *b))
                .collect(),
            layout: Arc::clone(&self.layout),
        };
        out.ensure_finite(context)?;
        Ok(out)
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets_are_contiguous() {
        let layout = Layout::from_sizes([("a", 3), ("b", 0), ("c", 4)]);
        let total: usize = layout.segments().iter().map(|s| s.len).sum();
        assert_eq!(total, layout.total_len());
        let mut expected = 0;
        for seg in layout.segments() {
            assert_eq!(seg.offset, expected);
            expected += seg.len;
        }
    }

    #[test]
    fn mismatched_layouts_refuse_to_combine() {
        let a = ParameterVector::flat(vec![1.0, 2.0]).unwrap();
        let b = ParameterVector::from_values(
            Arc::new(Layout::from_sizes([("w", 1), ("b", 1)])),
            vec![1.0, 2.0],
        )
        .unwrap();
        assert!(matches!(a.add(&b), Err(ModelError::LayoutMismatch)));
        assert!(matches!(
            a.linf_distance(&b),
            Err(ModelError::LayoutMismatch)
        ));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(ParameterVector::flat(vec![f64::NAN]).is_err());
        let big = ParameterVector::flat(vec![f64::MAX]).unwrap();
        assert!(matches!(big.add(&big), Err(ModelError::NonFinite { .. })));
        assert!(big.scale(10.0).is_err());
    }

    #[test]
    fn length_must_match_layout() {
        let err = ParameterVector::from_values(Arc::new(Layout::flat(3)), vec![0.0; 2]);
        assert!(matches!(err, Err(ModelError::DimensionMismatch { .. })));
    }

    #[test]
    fn add_scaled_matches_add_then_scale() {
        let mut a = ParameterVector::flat(vec![1.0, -2.0, 0.5]).unwrap();
        let b = ParameterVector::flat(vec![4.0, 4.0, -1.0]).unwrap();
        let expected = a.add(&b.scale(0.25).unwrap()).unwrap();
        a.add_scaled(&b, 0.25).unwrap();
        assert_eq!(a, expected);
    }
}
