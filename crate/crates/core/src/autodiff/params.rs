use std::sync::Arc;

use super::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All parameters of a model in one flat buffer, with named segments that
/// tile it in order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    segments: Arc<[Segment]>,
    values: Vec<f64>,
}

impl ParamVector {
    /// Zero-filled vector with the given `(name, shape)` layout.
    pub fn zeros(layout: &[(String, Vec<usize>)]) -> Self {
        let mut offset = 0;
        let segments: Vec<Segment> = layout
            .iter()
            .map(|(name, shape)| {
                let seg = Segment {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += seg.len();
                seg
            })
            .collect();
        ParamVector {
            segments: segments.into(),
            values: vec![0.0; offset],
        }
    }

    /// Concatenates named parts into one buffer.
    pub fn flatten(parts: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let layout: Vec<(String, Vec<usize>)> =
            parts.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect();
        let mut out = Self::zeros(&layout);
        for (seg, (_, shape, values)) in out.segments.clone().iter().zip(parts) {
            if values.len() != seg.len() {
                return Err(Error::Dimension {
                    op: "flatten",
                    lhs: shape,
                    rhs: vec![values.len()],
                });
            }
            out.values[seg.range()].copy_from_slice(&values);
        }
        Ok(out)
    }

    /// Splits the buffer back into its named parts.
    pub fn unflatten(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.segments
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone(), self.values[s.range()].to_vec()))
            .collect()
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Dimension {
                op: "with_values",
                lhs: vec![self.values.len()],
                rhs: vec![values.len()],
            });
        }
        Ok(ParamVector {
            segments: self.segments.clone(),
            values,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            segments: self.segments.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

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

    pub fn segment_values(&self, index: usize) -> &[f64] {
        &self.values[self.segments[index].range()]
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.segments, &other.segments) || self.segments == other.segments
    }

    /// One constant tensor per segment.
    pub fn constants(&self) -> Vec<Tensor> {
        self.segments
            .iter()
            .map(|s| {
                Tensor::new(s.shape.clone(), self.values[s.range()].to_vec())
                    .expect("segment length matches its shape")
            })
            .collect()
    }

    /// One differentiable leaf per segment, recorded on `tape`.
    pub fn leaves(&self, tape: &Tape) -> Vec<Tensor> {
        self.constants().iter().map(|t| tape.var(t)).collect()
    }

    /// Gathers per-segment tensors into a vector with this layout.
    pub fn from_tensors(&self, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != self.segments.len() {
            return Err(Error::Contract(format!(
                "expected {} segment tensors, got {}",
                self.segments.len(),
                tensors.len()
            )));
        }
        let mut out = self.zeros_like();
        for (seg, t) in self.segments.iter().zip(tensors) {
            if t.shape() != seg.shape.as_slice() {
                return Err(Error::Dimension {
                    op: "from_tensors",
                    lhs: seg.shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            out.values[seg.range()].copy_from_slice(t.data());
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    /// `‖self − other‖₂`.
    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn bitwise_eq(&self, other: &ParamVector) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> Vec<(String, Vec<usize>)> {
        vec![
            ("w".into(), vec![2, 3]),
            ("b".into(), vec![1, 3]),
            ("s".into(), vec![1]),
        ]
    }

    #[test]
    fn segments_tile_the_buffer() {
        let p = ParamVector::zeros(&layout());
        let mut next = 0;
        for s in p.segments() {
            assert_eq!(s.offset, next);
            next += s.len();
        }
        assert_eq!(next, p.len());
        assert_eq!(p.len(), 10);
    }

    #[test]
    fn from_tensors_checks_shapes() {
        let p = ParamVector::zeros(&layout());
        let mut ts = p.constants();
        ts[1] = Tensor::zeros(&[3, 1]);
        assert!(p.from_tensors(&ts).is_err());
        assert!(p.from_tensors(&ts[..2]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_bitwise_identity(values in proptest::collection::vec(any::<f64>(), 10)) {
            let p = ParamVector::zeros(&layout()).with_values(values).unwrap();
            let q = ParamVector::flatten(p.unflatten()).unwrap();
            prop_assert!(p.bitwise_eq(&q));
            prop_assert_eq!(p.segments(), q.segments());
            let r = p.from_tensors(&p.constants()).unwrap();
            prop_assert!(p.bitwise_eq(&r));
        }
    }
}
