use std::rc::Rc;

use super::kernels;
use super::tape::{Op, Tape};
use crate::error::{Error, Result};

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

/// Dense row-major f64 tensor.
///
/// A tensor either is a constant or refers to the node of a [`Tape`] that
/// produced it. Operations on recorded tensors are recorded on the same tape;
/// operations on constants only are not recorded at all.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let head: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &head)
            .field("recorded", &self.node.is_some())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self::from_parts(shape, Rc::new(data), None))
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], Rc::new(vec![value]), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), Rc::new(vec![value; n]), None)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Rc<Vec<f64>>, node: Option<NodeRef>) -> Self {
        Tensor { shape, data, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_recorded(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// The same values as a constant, cut off from any tape.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.clone(), None)
    }

    pub(crate) fn node(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    pub(crate) fn shared_data(&self) -> Rc<Vec<f64>> {
        self.data.clone()
    }

    fn record(op: Op, inputs: &[&Tensor], shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let mut tape: Option<&Tape> = None;
        for t in inputs {
            if let Some(n) = &t.node {
                match tape {
                    None => tape = Some(&n.tape),
                    Some(tp) if !tp.same(&n.tape) => {
                        return Err(Error::Provenance(
                            "operands are recorded on different tapes".into(),
                        ))
                    }
                    Some(_) => {}
                }
            }
        }
        let data = Rc::new(data);
        let Some(tape) = tape else {
            return Ok(Self::from_parts(shape, data, None));
        };
        let ids = inputs
            .iter()
            .map(|t| match &t.node {
                Some(n) => n.id,
                None => tape.push_constant(t),
            })
            .collect();
        let id = tape.push(op, ids, shape.clone(), data.clone());
        Ok(Self::from_parts(shape, data, Some(tape.node_ref(id))))
    }

    fn unary(&self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Self::record(op, &[self], shape, data).expect("a single operand cannot span tapes")
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.zip_with(other, |a, b| a + b);
        Self::record(Op::Add, &[self, other], self.shape.clone(), data)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.zip_with(other, |a, b| a - b);
        Self::record(Op::Sub, &[self, other], self.shape.clone(), data)
    }

    /// Element-wise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self.zip_with(other, |a, b| a * b);
        Self::record(Op::Mul, &[self, other], self.shape.clone(), data)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data.iter().map(|&v| v * factor).collect();
        self.unary(Op::Scale(factor), self.shape.clone(), data)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        let (&[m, k], &[k2, n]) = (&self.shape[..], &other.shape[..]) else {
            return Err(mismatch());
        };
        if k != k2 {
            return Err(mismatch());
        }
        let data = kernels::matmul(&self.data, &other.data, m, k, n);
        Self::record(Op::MatMul, &[self, other], vec![m, n], data)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let data = kernels::transpose(&self.data, r, c);
        Ok(self.unary(Op::Transpose, vec![c, r], data))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.unary(Op::Relu, self.shape.clone(), data)
    }

    /// Element-wise sign with `sign(0) = 0`. Its derivative is taken to be
    /// identically zero.
    pub fn sign(&self) -> Tensor {
        let data = self.data.iter().map(|&v| kernels::sign(v)).collect();
        self.unary(Op::Sign, self.shape.clone(), data)
    }

    pub fn sum(&self) -> Tensor {
        let total = self.data.iter().sum();
        self.unary(Op::Sum, vec![1], vec![total])
    }

    pub fn mean(&self) -> Tensor {
        let total: f64 = self.data.iter().sum();
        self.unary(Op::Mean, vec![1], vec![total / self.data.len() as f64])
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if self.len() != 1 {
            return Err(Error::Dimension {
                op: "expand",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let n = shape.iter().product();
        Ok(self.unary(Op::Expand, shape.to_vec(), vec![self.data[0]; n]))
    }

    /// Sums each row of a matrix into a column `[rows, 1]`.
    pub fn row_sum(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("row_sum")?;
        let data = (0..r).map(|i| self.data[i * c..(i + 1) * c].iter().sum()).collect();
        Ok(self.unary(Op::RowSum, vec![r, 1], data))
    }

    /// Repeats a column `[rows, 1]` across `cols` columns.
    pub fn broadcast_cols(&self, cols: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("broadcast_cols")?;
        if c != 1 {
            return Err(Error::Dimension {
                op: "broadcast_cols",
                lhs: self.shape.clone(),
                rhs: vec![r, cols],
            });
        }
        let data = self.data.iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
        Ok(self.unary(Op::BroadcastCols, vec![r, cols], data))
    }

    /// Row-wise softmax of a `[rows, classes]` matrix.
    pub fn softmax(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("softmax")?;
        let data = kernels::softmax_rows(&self.data, r, c);
        Ok(self.unary(Op::Softmax, vec![r, c], data))
    }

    /// Mean softmax cross-entropy of `[rows, classes]` logits against one
    /// integer label per row, computed with log-sum-exp stabilization.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2("softmax_cross_entropy")?;
        if labels.len() != r {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: self.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let value = kernels::cross_entropy(&self.data, labels, c);
        Ok(self.unary(Op::CrossEntropy(labels.into()), vec![1], vec![value]))
    }

    /// Mean over all elements of `(self - target)²`.
    pub fn squared_error(&self, target: &Tensor) -> Result<Tensor> {
        self.same_shape(target, "squared_error")?;
        let total: f64 = self
            .data
            .iter()
            .zip(target.data.iter())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let value = total / self.len() as f64;
        Self::record(Op::SquaredError, &[self, target], vec![1], vec![value])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_hand() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn relu_and_sign() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        let y = Tensor::new(vec![3], vec![-2.5, 0.0, 3.1]).unwrap();
        assert_eq!(y.sign().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");

        let err = a.add(&Tensor::zeros(&[3, 2])).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "add", .. }));
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_n() {
        for n in [2usize, 5, 10] {
            let logits = Tensor::matrix(3, n, vec![0.0; 3 * n]).unwrap();
            let loss = logits.softmax_cross_entropy(&[0, 1, n - 1]).unwrap();
            assert!((loss.item() - (n as f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let logits = Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap();
        let loss = logits.softmax_cross_entropy(&[1]).unwrap();
        assert!((loss.item() - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            logits.softmax_cross_entropy(&[3]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn constants_are_not_recorded() {
        let a = Tensor::full(&[2], 1.0);
        assert!(!a.add(&a).unwrap().is_recorded());
    }

    #[test]
    fn mixing_tapes_is_a_provenance_error() {
        let t1 = Tape::first_order();
        let t2 = Tape::first_order();
        let a = t1.var(&Tensor::full(&[2], 1.0));
        let b = t2.var(&Tensor::full(&[2], 1.0));
        assert!(matches!(a.add(&b), Err(Error::Provenance(_))));
    }
}
