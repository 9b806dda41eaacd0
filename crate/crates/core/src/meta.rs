//! Bilevel solvers: inner-loop unrolling by SGD or signSGD, the four
//! meta-gradient engines, and the upper-level step.
//!
//! | method          | inner loop | meta-gradient                                   |
//! |-----------------|------------|-------------------------------------------------|
//! | `maml-product`  | SGD        | `∏ (I − β ∇²ℓ̂(y⁽ⁿ⁾))` applied to `∇ℓ(y⁽ᵐ⁾)`     |
//! | `maml-autodiff` | SGD        | backprop through the recorded unroll            |
//! | `fo-maml`       | SGD        | `∇ℓ(y⁽ᵐ⁾)`, second-order terms dropped          |
//! | `sign-maml`     | signSGD    | `∇ℓ(y⁽ᵐ⁾)`, exact because `sign` has zero slope |

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, hvp, ParamVector, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{self, MlpSpec, Targets};
use crate::tasks::Task;

/// Query-set loss of an adapted model, with its accuracy when the task is
/// a classification task.
pub struct QueryLoss {
    pub loss: Tensor,
    pub accuracy: Option<f64>,
}

/// A lower-level problem (the support loss) paired with its upper-level
/// objective (the query loss), both as functions of the model parameters.
pub trait Objective {
    fn support_loss(&self, params: &[Tensor]) -> Result<Tensor>;
    fn query_loss(&self, params: &[Tensor]) -> Result<QueryLoss>;
}

/// A sampled task evaluated through an MLP.
#[derive(Clone, Copy, Debug)]
pub struct ModelTask<'a> {
    pub spec: &'a MlpSpec,
    pub task: &'a Task,
}

impl<'a> ModelTask<'a> {
    pub fn new(spec: &'a MlpSpec, task: &'a Task) -> Self {
        ModelTask { spec, task }
    }
}

impl Objective for ModelTask<'_> {
    fn support_loss(&self, params: &[Tensor]) -> Result<Tensor> {
        let s = &self.task.support;
        models::loss(self.spec, self.task.loss, params, &s.input_tensor(), &s.targets)
    }

    fn query_loss(&self, params: &[Tensor]) -> Result<QueryLoss> {
        let q = &self.task.query;
        let out = self.spec.forward(params, &q.input_tensor())?;
        let accuracy = match &q.targets {
            Targets::Labels(labels) => Some(models::argmax_accuracy(
                out.data(),
                self.spec.output_dim(),
                labels,
            )),
            Targets::Values(_) => None,
        };
        let loss = models::loss_from_outputs(self.task.loss, &out, &q.targets)?;
        Ok(QueryLoss { loss, accuracy })
    }
}

/// Support loss `½ (y − c)ᵀ A (y − c)` and query loss `gᵀ y` over a single
/// column parameter `y`. Its Hessian is the constant `A`.
#[derive(Clone, Debug)]
pub struct QuadraticBilevel {
    n: usize,
    a: Vec<f64>,
    c: Vec<f64>,
    g: Vec<f64>,
}

impl QuadraticBilevel {
    pub fn new(a: Vec<f64>, c: Vec<f64>, g: Vec<f64>) -> Result<Self> {
        let n = c.len();
        if a.len() != n * n || g.len() != n {
            return Err(Error::Dimension {
                op: "quadratic_bilevel",
                lhs: vec![a.len()],
                rhs: vec![n, g.len()],
            });
        }
        Ok(QuadraticBilevel { n, a, c, g })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn params(&self, y: Vec<f64>) -> Result<ParamVector> {
        ParamVector::flatten(vec![("y".into(), vec![self.n, 1], y)])
    }
}

impl Objective for QuadraticBilevel {
    fn support_loss(&self, params: &[Tensor]) -> Result<Tensor> {
        let a = Tensor::matrix(self.n, self.n, self.a.clone())?;
        let c = Tensor::matrix(self.n, 1, self.c.clone())?;
        let d = params[0].sub(&c)?;
        Ok(d.mul(&a.matmul(&d)?)?.sum().scale(0.5))
    }

    fn query_loss(&self, params: &[Tensor]) -> Result<QueryLoss> {
        let g = Tensor::matrix(self.n, 1, self.g.clone())?;
        Ok(QueryLoss {
            loss: params[0].mul(&g)?.sum(),
            accuracy: None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerKind {
    Sgd,
    SignSgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerOptimizer {
    pub kind: InnerKind,
    pub beta: f64,
    pub steps: usize,
}

impl InnerOptimizer {
    pub fn sgd(beta: f64, steps: usize) -> Self {
        InnerOptimizer {
            kind: InnerKind::Sgd,
            beta,
            steps,
        }
    }

    pub fn signsgd(beta: f64, steps: usize) -> Self {
        InnerOptimizer {
            kind: InnerKind::SignSgd,
            beta,
            steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "inner learning rate must be finite and non-negative, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Recorded support-gradient graph at one inner iterate, kept so the product
/// engine can take Hessian-vector products without recomputing the forward.
#[derive(Debug)]
struct StepGraph {
    leaves: Vec<Tensor>,
    grads: Vec<Tensor>,
}

/// Inner-loop iterates `y⁽⁰⁾ = x, …, y⁽ᵐ⁾`.
#[derive(Debug)]
pub struct AdaptTrace {
    pub kind: InnerKind,
    pub beta: f64,
    pub iterates: Vec<ParamVector>,
    graphs: Vec<StepGraph>,
}

impl AdaptTrace {
    pub fn steps(&self) -> usize {
        self.iterates.len() - 1
    }

    pub fn last(&self) -> &ParamVector {
        self.iterates.last().expect("a trace always holds y0")
    }

    pub fn is_replayable(&self) -> bool {
        self.graphs.len() == self.steps()
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn tensors_finite(ts: &[Tensor]) -> bool {
    ts.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
}

/// Runs `inner.steps` full-batch steps on the support loss from `x`. With
/// `replayable` each step's gradient graph is kept on an order-2 tape.
pub fn unroll<O: Objective + ?Sized>(
    x: &ParamVector,
    objective: &O,
    inner: &InnerOptimizer,
    replayable: bool,
) -> Result<AdaptTrace> {
    inner.validate()?;
    let beta = inner.beta;
    let mut iterates = Vec::with_capacity(inner.steps + 1);
    let mut graphs = Vec::new();
    iterates.push(x.clone());
    for step in 0..inner.steps {
        let y = iterates.last().unwrap();
        let tape = if replayable {
            Tape::second_order()
        } else {
            Tape::first_order()
        };
        let leaves = y.leaves(&tape);
        let loss = objective.support_loss(&leaves)?;
        if !loss.item().is_finite() {
            return Err(Error::Divergence { step });
        }
        let grads = backward(&loss, &leaves, replayable)?;
        if !tensors_finite(&grads) {
            return Err(Error::Divergence { step });
        }
        let g = y.from_tensors(&grads)?;
        let next: Vec<f64> = match inner.kind {
            InnerKind::Sgd => y
                .values()
                .iter()
                .zip(g.values())
                .map(|(&yi, &gi)| yi - gi * beta)
                .collect(),
            InnerKind::SignSgd => y
                .values()
                .iter()
                .zip(g.values())
                .map(|(&yi, &gi)| yi - sign(gi) * beta)
                .collect(),
        };
        let next = y.with_values(next)?;
        if replayable {
            graphs.push(StepGraph { leaves, grads });
        }
        iterates.push(next);
    }
    Ok(AdaptTrace {
        kind: inner.kind,
        beta,
        iterates,
        graphs,
    })
}

pub fn unroll_sgd<O: Objective + ?Sized>(x: &ParamVector, objective: &O, beta: f64, steps: usize) -> Result<AdaptTrace> {
    unroll(x, objective, &InnerOptimizer::sgd(beta, steps), false)
}

pub fn unroll_signsgd<O: Objective + ?Sized>(x: &ParamVector, objective: &O, beta: f64, steps: usize) -> Result<AdaptTrace> {
    unroll(x, objective, &InnerOptimizer::signsgd(beta, steps), false)
}

/// A per-task meta-gradient together with the query loss it came from.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub grad: ParamVector,
    pub query_loss: f64,
    pub query_accuracy: Option<f64>,
}

/// Gradient of the query loss at `y`, on a fresh first-order tape.
pub fn query_gradient<O: Objective + ?Sized>(y: &ParamVector, objective: &O) -> Result<MetaGradient> {
    let tape = Tape::first_order();
    let leaves = y.leaves(&tape);
    let q = objective.query_loss(&leaves)?;
    let value = q.loss.item();
    let grads = backward(&q.loss, &leaves, false)?;
    let grad = y.from_tensors(&grads)?;
    if !value.is_finite() || !grad.is_finite() {
        return Err(Error::Divergence { step: 0 });
    }
    Ok(MetaGradient {
        grad,
        query_loss: value,
        query_accuracy: q.accuracy,
    })
}

fn expect_kind(trace: &AdaptTrace, kind: InnerKind, engine: &str) -> Result<()> {
    if trace.kind != kind {
        return Err(Error::MethodMismatch(format!(
            "{engine} needs a {kind:?} trace, got {:?}",
            trace.kind
        )));
    }
    Ok(())
}

/// Exact MAML meta-gradient as the explicit product of `(I − β ∇²ℓ̂)` factors,
/// applied right to left onto the query gradient at the last iterate.
pub fn meta_grad_maml_product<O: Objective + ?Sized>(trace: &AdaptTrace, objective: &O) -> Result<MetaGradient> {
    expect_kind(trace, InnerKind::Sgd, "maml-product")?;
    let mut out = query_gradient(trace.last(), objective)?;
    let mut v = out.grad.clone();
    for n in (0..trace.steps()).rev() {
        let direction = v.constants();
        let hv = match trace.graphs.get(n) {
            Some(graph) => {
                let mut dd: Option<Tensor> = None;
                for (g, d) in graph.grads.iter().zip(&direction) {
                    let term = g.mul(d)?.sum();
                    dd = Some(match dd {
                        None => term,
                        Some(acc) => acc.add(&term)?,
                    });
                }
                match dd {
                    Some(dd) => backward(&dd, &graph.leaves, false)?,
                    None => Vec::new(),
                }
            }
            None => {
                let tape = Tape::second_order();
                let leaves = trace.iterates[n].leaves(&tape);
                let loss = objective.support_loss(&leaves)?;
                hvp(&loss, &leaves, &direction)?
            }
        };
        let hv = v.from_tensors(&hv)?;
        let next: Vec<f64> = v
            .values()
            .iter()
            .zip(hv.values())
            .map(|(&vi, &hi)| vi - hi * trace.beta)
            .collect();
        v = v.with_values(next)?;
        if !v.is_finite() {
            return Err(Error::Divergence { step: n });
        }
    }
    out.grad = v;
    Ok(out)
}

/// Differentiates the query loss through the whole recorded unroll. Works
/// for either inner optimizer; with signSGD it is the reference for the
/// collapse identity.
pub fn meta_grad_maml_autodiff<O: Objective + ?Sized>(
    x: &ParamVector,
    objective: &O,
    inner: &InnerOptimizer,
) -> Result<MetaGradient> {
    inner.validate()?;
    let tape = Tape::second_order();
    let leaves = x.leaves(&tape);
    let mut y = leaves.clone();
    for step in 0..inner.steps {
        let loss = objective.support_loss(&y)?;
        if !loss.item().is_finite() {
            return Err(Error::Divergence { step });
        }
        let grads = backward(&loss, &y, true)?;
        if !tensors_finite(&grads) {
            return Err(Error::Divergence { step });
        }
        y = y
            .iter()
            .zip(&grads)
            .map(|(yi, gi)| {
                let direction = match inner.kind {
                    InnerKind::Sgd => gi.clone(),
                    InnerKind::SignSgd => gi.sign(),
                };
                yi.sub(&direction.scale(inner.beta))
            })
            .collect::<Result<_>>()?;
    }
    let q = objective.query_loss(&y)?;
    let value = q.loss.item();
    let grad = x.from_tensors(&backward(&q.loss, &leaves, false)?)?;
    if !value.is_finite() || !grad.is_finite() {
        return Err(Error::Divergence { step: inner.steps });
    }
    Ok(MetaGradient {
        grad,
        query_loss: value,
        query_accuracy: q.accuracy,
    })
}

/// First-order MAML: the query gradient at the last SGD iterate, as if the
/// inner-loop Hessians were zero.
pub fn meta_grad_fomaml<O: Objective + ?Sized>(trace: &AdaptTrace, objective: &O) -> Result<MetaGradient> {
    expect_kind(trace, InnerKind::Sgd, "fo-maml")?;
    query_gradient(trace.last(), objective)
}

/// Sign-MAML: the query gradient at the last signSGD iterate. This is the
/// exact meta-gradient of the signSGD unroll, not an approximation.
pub fn meta_grad_signmaml<O: Objective + ?Sized>(trace: &AdaptTrace, objective: &O) -> Result<MetaGradient> {
    expect_kind(trace, InnerKind::SignSgd, "sign-maml")?;
    query_gradient(trace.last(), objective)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaMethod {
    MamlProduct,
    #[serde(alias = "maml")]
    MamlAutodiff,
    FoMaml,
    SignMaml,
}

impl MetaMethod {
    pub const ALL: [MetaMethod; 4] = [
        MetaMethod::MamlProduct,
        MetaMethod::MamlAutodiff,
        MetaMethod::FoMaml,
        MetaMethod::SignMaml,
    ];

    pub fn inner_kind(self) -> InnerKind {
        match self {
            MetaMethod::SignMaml => InnerKind::SignSgd,
            _ => InnerKind::Sgd,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetaMethod::MamlProduct => "maml-product",
            MetaMethod::MamlAutodiff => "maml-autodiff",
            MetaMethod::FoMaml => "fo-maml",
            MetaMethod::SignMaml => "sign-maml",
        }
    }
}

impl fmt::Display for MetaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetaMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maml-product" => Ok(MetaMethod::MamlProduct),
            "maml-autodiff" | "maml" => Ok(MetaMethod::MamlAutodiff),
            "fo-maml" => Ok(MetaMethod::FoMaml),
            "sign-maml" => Ok(MetaMethod::SignMaml),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Meta-gradient of one task under `method`.
pub fn task_meta_gradient<O: Objective + ?Sized>(
    x: &ParamVector,
    objective: &O,
    method: MetaMethod,
    inner: &InnerOptimizer,
) -> Result<MetaGradient> {
    if method.inner_kind() != inner.kind {
        return Err(Error::MethodMismatch(format!(
            "{method} cannot run with a {:?} inner loop",
            inner.kind
        )));
    }
    match method {
        MetaMethod::MamlProduct => meta_grad_maml_product(&unroll(x, objective, inner, true)?, objective),
        MetaMethod::MamlAutodiff => meta_grad_maml_autodiff(x, objective, inner),
        MetaMethod::FoMaml => meta_grad_fomaml(&unroll(x, objective, inner, false)?, objective),
        MetaMethod::SignMaml => meta_grad_signmaml(&unroll(x, objective, inner, false)?, objective),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Upper-level learning rate.
    pub alpha: f64,
    pub inner: InnerOptimizer,
    pub method: MetaMethod,
    /// Tasks per meta-iteration.
    pub meta_batch: usize,
    /// Adaptation steps at test time.
    pub test_steps: usize,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        self.inner.validate()?;
        if self.method.inner_kind() != self.inner.kind {
            return Err(Error::Config(format!(
                "{} pairs with a {:?} inner loop",
                self.method,
                self.method.inner_kind()
            )));
        }
        if self.meta_batch < 1 {
            return Err(Error::Config("meta batch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub mean_query_loss: f64,
    pub mean_query_accuracy: Option<f64>,
    /// Adaptation, meta-gradients and the update; nothing else.
    pub duration: Duration,
}

/// One upper-level step: `x − α · mean of the per-task meta-gradients`.
pub fn meta_step<O: Objective + Sync>(x: &ParamVector, episode: &[O], cfg: &MetaConfig) -> Result<(ParamVector, StepStats)> {
    meta_step_in(None, x, episode, cfg)
}

/// [`meta_step`] with the per-task work spread over `pool`. The reduction
/// still runs in episode order, so the result is bitwise identical.
pub fn meta_step_on<O: Objective + Sync>(
    pool: &rayon::ThreadPool,
    x: &ParamVector,
    episode: &[O],
    cfg: &MetaConfig,
) -> Result<(ParamVector, StepStats)> {
    meta_step_in(Some(pool), x, episode, cfg)
}

fn meta_step_in<O: Objective + Sync>(
    pool: Option<&rayon::ThreadPool>,
    x: &ParamVector,
    episode: &[O],
    cfg: &MetaConfig,
) -> Result<(ParamVector, StepStats)> {
    cfg.validate()?;
    if episode.len() != cfg.meta_batch {
        return Err(Error::Contract(format!(
            "episode has {} tasks but the meta batch is {}",
            episode.len(),
            cfg.meta_batch
        )));
    }
    let start = Instant::now();
    let per_task = |o: &O| task_meta_gradient(x, o, cfg.method, &cfg.inner);
    let results: Vec<Result<MetaGradient>> = match pool {
        Some(pool) => pool.install(|| episode.par_iter().map(per_task).collect()),
        None => episode.iter().map(per_task).collect(),
    };

    let p = episode.len() as f64;
    let mut total = vec![0.0; x.len()];
    let mut loss = 0.0;
    let mut acc = 0.0;
    let mut has_acc = true;
    for (task, result) in results.into_iter().enumerate() {
        let mg = result.map_err(|e| Error::Task {
            task,
            source: Box::new(e),
        })?;
        for (t, g) in total.iter_mut().zip(mg.grad.values()) {
            *t += g;
        }
        loss += mg.query_loss;
        match mg.query_accuracy {
            Some(a) => acc += a,
            None => has_acc = false,
        }
    }
    let next: Vec<f64> = x
        .values()
        .iter()
        .zip(&total)
        .map(|(&xi, &t)| xi - cfg.alpha * (t / p))
        .collect();
    let next = x.with_values(next)?;
    let duration = start.elapsed();
    Ok((
        next,
        StepStats {
            mean_query_loss: loss / p,
            mean_query_accuracy: has_acc.then(|| acc / p),
            duration,
        },
    ))
}
