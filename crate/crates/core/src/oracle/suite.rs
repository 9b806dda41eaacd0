//! Seeded random instances and the batch verification run behind the
//! `verify` command and the acceptance tests.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::collapse::collapse_check;
use super::fd::{fd_meta_grad, max_relative_error, FdEstimate, FdSpec};
use super::quadratic::quadratic_bilevel_oracle;
use super::report::VerificationReport;
use crate::autodiff::ParamVector;
use crate::error::{Error, Result};
use crate::meta::{
    meta_grad_fomaml, meta_grad_maml_autodiff, meta_grad_maml_product, unroll, InnerKind, InnerOptimizer,
    ModelTask, QuadraticBilevel,
};
use crate::models::{init_params, MlpSpec};
use crate::tasks::{sample_task, StreamKey, Task, TaskDistribution};

/// Stream domain reserved for verification instances.
const ORACLE_DOMAIN: u32 = 7;

/// A small MLP, a task for it, and a starting point.
pub struct Instance {
    pub spec: MlpSpec,
    pub task: Task,
    pub x: ParamVector,
}

impl Instance {
    pub fn objective(&self) -> ModelTask<'_> {
        ModelTask::new(&self.spec, &self.task)
    }
}

/// A random instance with at most 200 parameters: a blob classification
/// task three times out of four, a sinusoid regression task otherwise.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regression = rng.random_range(0..4) == 0;
    let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(3..=8)).collect();
    let (dist, d, out) = if regression {
        let dist = TaskDistribution::sinusoid(rng.random_range(2..=5), rng.random_range(2..=5));
        (dist, 1, 1)
    } else {
        let d = rng.random_range(2..=5);
        let way = rng.random_range(2..=4);
        let dist = TaskDistribution::blobs(d, way, rng.random_range(1..=3), rng.random_range(1..=3), 2.0, 1.0);
        (dist, d, way)
    };
    let mut widths = vec![d];
    widths.extend(hidden);
    widths.push(out);
    let spec = MlpSpec::new(widths).expect("widths are nonzero");
    let task = sample_task(&dist, StreamKey::new(seed, ORACLE_DOMAIN, 0, 0));
    let mut x = init_params(&spec, seed);
    // Nonzero biases so that no hidden unit starts exactly at a kink by symmetry.
    let jitter = Normal::new(0.0, 0.1).unwrap();
    for seg in x.segments().to_vec() {
        if seg.name.ends_with("bias") {
            for v in &mut x.values_mut()[seg.range()] {
                *v = jitter.sample(&mut rng);
            }
        }
    }
    Instance { spec, task, x }
}

/// A random symmetric quadratic/linear bilevel problem with its rate,
/// depth and starting point.
pub struct QuadraticInstance {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub g: Vec<f64>,
    pub beta: f64,
    pub steps: usize,
    pub y0: Vec<f64>,
}

pub fn random_quadratic(seed: u64) -> QuadraticInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=6);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let b: Vec<f64> = (0..n * n).map(|_| normal()).collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (b[i * n + j] + b[j * n + i]) * 0.5;
        }
    }
    let c = (0..n).map(|_| normal()).collect();
    let g = (0..n).map(|_| normal()).collect();
    let y0 = (0..n).map(|_| normal()).collect();
    QuadraticInstance {
        a,
        c,
        g,
        beta: rng.random_range(0.01..0.2),
        steps: rng.random_range(0..=5),
        y0,
    }
}

/// How many instances each check runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub collapse: usize,
    pub equivalence: usize,
    pub finite_difference: usize,
    pub quadratic: usize,
}

impl SuiteConfig {
    pub fn full(seed: u64) -> Self {
        SuiteConfig {
            seed,
            collapse: 1000,
            equivalence: 500,
            finite_difference: 100,
            quadratic: 200,
        }
    }

    pub fn quick(seed: u64) -> Self {
        SuiteConfig {
            seed,
            collapse: 40,
            equivalence: 20,
            finite_difference: 8,
            quadratic: 20,
        }
    }
}

pub const COLLAPSE_STEPS: [usize; 4] = [0, 1, 3, 10];

fn relative_l2(a: &ParamVector, b: &ParamVector) -> f64 {
    let d = a.distance(b);
    if d == 0.0 {
        0.0
    } else {
        d / b.norm().max(f64::MIN_POSITIVE)
    }
}

fn instance_seed(base: u64, stream: u64, i: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (stream << 48) ^ i
}

pub fn check_collapse(cfg: &SuiteConfig, report: &mut VerificationReport) -> Result<()> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..cfg.collapse {
        let inst = random_instance(instance_seed(cfg.seed, 1, i as u64));
        let beta = 0.001 + 0.049 * ((i * 37 % 101) as f64 / 100.0);
        for m in COLLAPSE_STEPS {
            worst = worst.max(collapse_check(&inst.x, &inst.objective(), beta, m)?);
        }
    }
    report.set("collapse.instances", cfg.collapse);
    report.set("collapse.max_rel_dev", worst);
    report.set("collapse.seconds", start.elapsed().as_secs_f64());
    Ok(())
}

pub fn check_equivalence(cfg: &SuiteConfig, report: &mut VerificationReport) -> Result<()> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..cfg.equivalence {
        let inst = random_instance(instance_seed(cfg.seed, 2, i as u64));
        let obj = inst.objective();
        let inner = InnerOptimizer::sgd(0.05 + 0.25 * ((i * 17 % 31) as f64 / 30.0), 1 + i % 3);
        let product = meta_grad_maml_product(&unroll(&inst.x, &obj, &inner, true)?, &obj)?;
        let autodiff = meta_grad_maml_autodiff(&inst.x, &obj, &inner)?;
        worst = worst.max(relative_l2(&product.grad, &autodiff.grad));
    }
    report.set("equivalence.instances", cfg.equivalence);
    report.set("equivalence.max_rel_err", worst);
    report.set("equivalence.seconds", start.elapsed().as_secs_f64());
    Ok(())
}

/// Draws instances until one passes the kink guard, up to 50 attempts.
pub fn fd_against_autodiff(seed: u64, inner_kind: InnerKind, steps: usize, epsilon: f64) -> Result<(f64, usize)> {
    for attempt in 0..50u64 {
        let inst = random_instance(seed ^ (attempt << 32));
        let obj = inst.objective();
        let beta = match inner_kind {
            InnerKind::Sgd => 0.1,
            InnerKind::SignSgd => 0.01,
        };
        let inner = InnerOptimizer { kind: inner_kind, beta, steps };
        match fd_meta_grad(&inst.x, &obj, &inner, FdSpec::coordinate(epsilon)) {
            Ok(FdEstimate::Gradient(num)) => {
                let exact = meta_grad_maml_autodiff(&inst.x, &obj, &inner)?;
                return Ok((max_relative_error(exact.grad.values(), &num), attempt as usize));
            }
            Ok(FdEstimate::Directional(_)) => unreachable!("coordinate mode"),
            Err(Error::KinkProximity { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::KinkProximity { margin: 0.0 })
}

pub fn check_finite_difference(cfg: &SuiteConfig, report: &mut VerificationReport) -> Result<()> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut resampled = 0;
    for i in 0..cfg.finite_difference {
        let (err, redraws) = fd_against_autodiff(instance_seed(cfg.seed, 3, i as u64), InnerKind::Sgd, i % 4, 1e-4)?;
        worst = worst.max(err);
        resampled += redraws;
    }
    report.set("fd.instances", cfg.finite_difference);
    report.set("fd.epsilon", 1e-4);
    report.set("fd.max_rel_err", worst);
    report.set("fd.resampled", resampled);
    report.set("fd.seconds", start.elapsed().as_secs_f64());
    Ok(())
}

pub fn check_quadratic(cfg: &SuiteConfig, report: &mut VerificationReport) -> Result<()> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut fo_exact = 0;
    let mut fo_gap = f64::INFINITY;
    for i in 0..cfg.quadratic {
        let q = random_quadratic(instance_seed(cfg.seed, 4, i as u64));
        let obj = QuadraticBilevel::new(q.a.clone(), q.c.clone(), q.g.clone())?;
        let y0 = obj.params(q.y0.clone())?;
        let trace = unroll(&y0, &obj, &InnerOptimizer::sgd(q.beta, q.steps), false)?;
        let product = meta_grad_maml_product(&trace, &obj)?;
        let truth = quadratic_bilevel_oracle(&q.a, &q.c, &q.g, q.beta, q.steps)?;
        worst = worst.max(max_relative_error(product.grad.values(), truth.values()));
        let fo = meta_grad_fomaml(&trace, &obj)?;
        if fo.grad.values().iter().zip(&q.g).all(|(a, b)| a.to_bits() == b.to_bits()) {
            fo_exact += 1;
        }
        if q.steps > 0 {
            fo_gap = fo_gap.min(relative_l2(&fo.grad, &truth));
        }
    }
    report.set("quadratic.instances", cfg.quadratic);
    report.set("quadratic.max_rel_err", worst);
    report.set("quadratic.fo_returns_g", fo_exact);
    report.set("quadratic.fo_min_rel_gap", fo_gap);
    report.set("quadratic.seconds", start.elapsed().as_secs_f64());
    Ok(())
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<VerificationReport> {
    let mut report = VerificationReport::new();
    report.set("seed", cfg.seed);
    check_collapse(cfg, &mut report)?;
    check_equivalence(cfg, &mut report)?;
    check_finite_difference(cfg, &mut report)?;
    check_quadratic(cfg, &mut report)?;
    Ok(report)
}
