//! Append-only recording tape and the reverse pass over it.
//!
//! Every vector-Jacobian product is written in terms of tensor ops, so when
//! the reverse pass runs with `create_graph` the gradients it produces are
//! themselves recorded and can be differentiated once more. Nodes created
//! that way are flagged as derived; a second `create_graph` pass through a
//! derived node would be a third derivative and is refused.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{NodeRef, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Scale(f64),
    Mul,
    MatMul,
    Transpose,
    Relu,
    Sign,
    Sum,
    Mean,
    Expand,
    RowSum,
    BroadcastCols,
    Softmax,
    CrossEntropy(Rc<[usize]>),
    SquaredError,
}

pub(crate) struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    derived: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    order: usize,
    deriving: bool,
}

/// A recording of tensor operations supporting first- or second-order
/// reverse-mode differentiation.
///
/// Cloning a `Tape` yields another handle to the same recording. Tapes are
/// single-threaded; independent tapes share nothing.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("order", &inner.order)
            .field("nodes", &inner.nodes.len())
            .finish()
    }
}

impl Tape {
    /// Creates a tape of differentiability `order`, which must be 1 or 2.
    pub fn new(order: usize) -> Result<Self> {
        if !(1..=2).contains(&order) {
            return Err(Error::Capability(format!(
                "tapes support differentiation orders 1 and 2, not {order}"
            )));
        }
        Ok(Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                order,
                deriving: false,
            })),
        })
    }

    pub fn first_order() -> Self {
        Self::new(1).expect("order 1 is supported")
    }

    pub fn second_order() -> Self {
        Self::new(2).expect("order 2 is supported")
    }

    pub fn order(&self) -> usize {
        self.inner.borrow().order
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers `value` as a differentiable leaf on this tape.
    pub fn var(&self, value: &Tensor) -> Tensor {
        let id = self.push(
            Op::Leaf,
            Vec::new(),
            value.shape().to_vec(),
            value.shared_data(),
        );
        Tensor::from_parts(value.shape().to_vec(), value.shared_data(), Some(self.node_ref(id)))
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn node_ref(&self, id: usize) -> NodeRef {
        NodeRef {
            tape: self.clone(),
            id,
        }
    }

    pub(crate) fn push(
        &self,
        op: Op,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        value: Rc<Vec<f64>>,
    ) -> usize {
        let mut inner = self.inner.borrow_mut();
        debug_assert!(inputs.iter().all(|&i| i < inner.nodes.len()));
        let derived = inner.deriving;
        inner.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            derived,
        });
        inner.nodes.len() - 1
    }

    pub(crate) fn push_constant(&self, t: &Tensor) -> usize {
        self.push(Op::Constant, Vec::new(), t.shape().to_vec(), t.shared_data())
    }

    fn tensor_of(&self, id: usize, recorded: bool) -> Tensor {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id];
        let node_ref = recorded.then(|| self.node_ref(id));
        Tensor::from_parts(node.shape.clone(), node.value.clone(), node_ref)
    }

    fn begin_deriving(&self) -> DerivingGuard {
        self.inner.borrow_mut().deriving = true;
        DerivingGuard { tape: self.clone() }
    }
}

struct DerivingGuard {
    tape: Tape,
}

impl Drop for DerivingGuard {
    fn drop(&mut self) {
        self.tape.inner.borrow_mut().deriving = false;
    }
}

/// Gradients of the scalar `output` with respect to each tensor in `wrt`.
///
/// With `create_graph` the returned gradients are recorded on the tape so a
/// further `backward` yields second derivatives. The local derivative of
/// `sign` is exactly zero: no gradient flows through it.
pub fn backward(output: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.len() != 1 {
        return Err(Error::Contract(format!(
            "backward needs a scalar output, got shape {:?}",
            output.shape()
        )));
    }
    let mut wrt_nodes = Vec::with_capacity(wrt.len());
    for (i, w) in wrt.iter().enumerate() {
        let node = w.node().ok_or_else(|| {
            Error::Provenance(format!("wrt tensor {i} is not recorded on a tape"))
        })?;
        wrt_nodes.push(node);
    }
    let zeros = || wrt.iter().map(|w| Tensor::zeros(w.shape())).collect::<Vec<_>>();

    // A constant output does not depend on anything.
    let Some(out) = output.node() else {
        return Ok(zeros());
    };
    let tape = &out.tape;
    if wrt_nodes.iter().any(|n| !n.tape.same(tape)) {
        return Err(Error::Provenance(
            "wrt tensor is recorded on a different tape than the output".into(),
        ));
    }
    if create_graph && tape.order() < 2 {
        return Err(Error::Capability(
            "create_graph requires a tape of order 2".into(),
        ));
    }
    let Some(lo) = wrt_nodes.iter().map(|n| n.id).min() else {
        return Ok(Vec::new());
    };
    let hi = out.id;
    if hi < lo {
        return Ok(zeros());
    }
    let span = hi - lo + 1;
    let mut is_wrt = vec![false; span];
    for n in &wrt_nodes {
        is_wrt[n.id - lo] = true;
    }

    // Nodes on some path from a wrt tensor to the output.
    let mut on_path = vec![false; span];
    {
        let inner = tape.inner.borrow();
        for id in lo..=hi {
            let k = id - lo;
            let node = &inner.nodes[id];
            on_path[k] = is_wrt[k] || node.inputs.iter().any(|&i| i >= lo && on_path[i - lo]);
            if create_graph && on_path[k] && !is_wrt[k] && node.derived {
                return Err(Error::Capability(
                    "third-order differentiation is not supported".into(),
                ));
            }
        }
    }
    if !on_path[span - 1] {
        return Ok(zeros());
    }

    let _guard = create_graph.then(|| tape.begin_deriving());
    let mut grads: Vec<Option<Tensor>> = vec![None; span];
    grads[span - 1] = Some(Tensor::scalar(1.0));

    for id in (lo..=hi).rev() {
        let k = id - lo;
        if !on_path[k] {
            continue;
        }
        let upstream = if is_wrt[k] {
            grads[k].clone()
        } else {
            grads[k].take()
        };
        let Some(upstream) = upstream else { continue };
        let (op, inputs) = {
            let inner = tape.inner.borrow();
            let node = &inner.nodes[id];
            (node.op.clone(), node.inputs.clone())
        };
        let needs: Vec<bool> = inputs.iter().map(|&i| i >= lo && on_path[i - lo]).collect();
        if !needs.iter().any(|&n| n) {
            continue;
        }
        let args: Vec<Tensor> = inputs
            .iter()
            .map(|&i| tape.tensor_of(i, create_graph))
            .collect();
        let result = matches!(op, Op::Softmax).then(|| tape.tensor_of(id, create_graph));
        let contributions = vjp(&op, &upstream, &args, result.as_ref(), &needs)?;
        for ((&input, contribution), need) in inputs.iter().zip(contributions).zip(needs) {
            let Some(c) = contribution else { continue };
            if !need {
                continue;
            }
            let slot = &mut grads[input - lo];
            *slot = Some(match slot.take() {
                None => c,
                Some(prev) => prev.add(&c)?,
            });
        }
    }

    Ok(wrt_nodes
        .iter()
        .zip(wrt)
        .map(|(n, w)| grads[n.id - lo].clone().unwrap_or_else(|| Tensor::zeros(w.shape())))
        .collect())
}

fn vjp(
    op: &Op,
    g: &Tensor,
    args: &[Tensor],
    result: Option<&Tensor>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    Ok(match op {
        Op::Leaf | Op::Constant => Vec::new(),
        Op::Add => vec![need(0).then(|| g.clone()), need(1).then(|| g.clone())],
        Op::Sub => vec![need(0).then(|| g.clone()), need(1).then(|| g.scale(-1.0))],
        Op::Scale(c) => vec![Some(g.scale(*c))],
        Op::Mul => vec![
            if need(0) { Some(g.mul(&args[1])?) } else { None },
            if need(1) { Some(g.mul(&args[0])?) } else { None },
        ],
        Op::MatMul => vec![
            if need(0) { Some(g.matmul(&args[1].transpose()?)?) } else { None },
            if need(1) { Some(args[0].transpose()?.matmul(g)?) } else { None },
        ],
        Op::Transpose => vec![Some(g.transpose()?)],
        Op::Relu => {
            let mask: Vec<f64> = args[0]
                .data()
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                .collect();
            vec![Some(g.mul(&Tensor::new(args[0].shape().to_vec(), mask)?)?)]
        }
        Op::Sign => vec![None],
        Op::Sum => vec![Some(g.expand(args[0].shape())?)],
        Op::Mean => {
            let n = args[0].len() as f64;
            vec![Some(g.expand(args[0].shape())?.scale(1.0 / n))]
        }
        Op::Expand => vec![Some(g.sum())],
        Op::RowSum => vec![Some(g.broadcast_cols(args[0].shape()[1])?)],
        Op::BroadcastCols => vec![Some(g.row_sum()?)],
        Op::Softmax => {
            let s = result.expect("softmax backward needs its output");
            let cols = s.shape()[1];
            let weighted = g.mul(s)?.row_sum()?.broadcast_cols(cols)?;
            vec![Some(s.mul(&g.sub(&weighted)?)?)]
        }
        Op::CrossEntropy(labels) => {
            let logits = &args[0];
            let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
            let mut onehot = vec![0.0; rows * cols];
            for (r, &l) in labels.iter().enumerate() {
                onehot[r * cols + l] = 1.0;
            }
            let diff = logits
                .softmax()?
                .sub(&Tensor::new(vec![rows, cols], onehot)?)?;
            vec![Some(
                g.expand(logits.shape())?.mul(&diff)?.scale(1.0 / rows as f64),
            )]
        }
        Op::SquaredError => {
            let n = args[0].len() as f64;
            let residual = args[0].sub(&args[1])?;
            let dpred = g.expand(args[0].shape())?.mul(&residual)?.scale(2.0 / n);
            let dtarget = need(1).then(|| dpred.scale(-1.0));
            vec![Some(dpred), dtarget]
        }
    })
}

/// Hessian-vector products of a scalar loss: `(∇² loss) · v`, one tensor per
/// entry of `wrt`, by differentiating `⟨∇loss, v⟩` a second time.
pub fn hvp(loss: &Tensor, wrt: &[Tensor], v: &[Tensor]) -> Result<Vec<Tensor>> {
    if wrt.len() != v.len() {
        return Err(Error::Contract(format!(
            "hvp: {} wrt tensors but {} direction tensors",
            wrt.len(),
            v.len()
        )));
    }
    for (w, d) in wrt.iter().zip(v) {
        if w.shape() != d.shape() {
            return Err(Error::Dimension {
                op: "hvp",
                lhs: w.shape().to_vec(),
                rhs: d.shape().to_vec(),
            });
        }
    }
    if let Some(node) = loss.node().or_else(|| wrt.first().and_then(|w| w.node())) {
        if node.tape.order() < 2 {
            return Err(Error::Capability(
                "hvp requires a tape of order 2".into(),
            ));
        }
    }
    let grads = backward(loss, wrt, true)?;
    let mut directional: Option<Tensor> = None;
    for (g, d) in grads.iter().zip(v) {
        let term = g.mul(d)?.sum();
        directional = Some(match directional {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    match directional {
        Some(dd) => backward(&dd, wrt, false),
        None => Ok(Vec::new()),
    }
}
