//! Multi-layer perceptrons and their losses.
//!
//! Parameters are laid out per layer as `layer{i}.weight` with shape
//! `[fan_in, fan_out]` followed by `layer{i}.bias` with shape `[1, fan_out]`.
//! Hidden layers use relu; the output layer is linear.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVector, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    widths: Vec<usize>,
}

impl MlpSpec {
    /// Layer widths from input dimension to output dimension.
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least 2 widths, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!("zero-width layer in {widths:?}")));
        }
        Ok(MlpSpec { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.widths
            .windows(2)
            .enumerate()
            .flat_map(|(i, w)| {
                [
                    (format!("layer{i}.weight"), vec![w[0], w[1]]),
                    (format!("layer{i}.bias"), vec![1, w[1]]),
                ]
            })
            .collect()
    }

    /// Logits (or regression outputs) for a `[rows, input_dim]` batch.
    pub fn forward(&self, params: &[Tensor], inputs: &Tensor) -> Result<Tensor> {
        if params.len() != 2 * self.num_layers() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                2 * self.num_layers(),
                params.len()
            )));
        }
        let rows = inputs.shape()[0];
        let ones = Tensor::full(&[rows, 1], 1.0);
        let mut h = inputs.clone();
        for layer in 0..self.num_layers() {
            let (w, b) = (&params[2 * layer], &params[2 * layer + 1]);
            h = h.matmul(w)?.add(&ones.matmul(b)?)?;
            if layer + 1 < self.num_layers() {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

/// Supervision for a batch: class labels or real-valued targets, one per row.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Glorot-uniform weights, zero biases; deterministic in `seed`.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamVector::zeros(&spec.layout());
    let segments = params.segments().to_vec();
    for seg in segments.iter().filter(|s| s.name.ends_with(".weight")) {
        let (fan_in, fan_out) = (seg.shape[0], seg.shape[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut params.values_mut()[seg.range()] {
            *v = rng.random_range(-limit..=limit);
        }
    }
    params
}

/// Mean loss of the model over a batch.
pub fn loss(
    spec: &MlpSpec,
    kind: LossKind,
    params: &[Tensor],
    inputs: &Tensor,
    targets: &Targets,
) -> Result<Tensor> {
    let out = spec.forward(params, inputs)?;
    loss_from_outputs(kind, &out, targets)
}

pub(crate) fn loss_from_outputs(kind: LossKind, out: &Tensor, targets: &Targets) -> Result<Tensor> {
    let rows = out.shape()[0];
    if targets.len() != rows {
        return Err(Error::Dimension {
            op: "loss",
            lhs: out.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    match (kind, targets) {
        (LossKind::SoftmaxCrossEntropy, Targets::Labels(labels)) => out.softmax_cross_entropy(labels),
        (LossKind::MeanSquaredError, Targets::Values(values)) => {
            out.squared_error(&Tensor::new(out.shape().to_vec(), values.clone())?)
        }
        (kind, _) => Err(Error::Data(format!(
            "{kind:?} does not match the kind of targets supplied"
        ))),
    }
}

/// [`loss`] with `params` registered as leaves on `tape`.
pub fn loss_on_tape(
    params: &ParamVector,
    spec: &MlpSpec,
    kind: LossKind,
    inputs: &Tensor,
    targets: &Targets,
    tape: &Tape,
) -> Result<(Tensor, Vec<Tensor>)> {
    let leaves = params.leaves(tape);
    let value = loss(spec, kind, &leaves, inputs, targets)?;
    Ok((value, leaves))
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn argmax_accuracy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    hits as f64 / labels.len() as f64
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(params: &ParamVector, spec: &MlpSpec, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = spec.forward(&params.constants(), inputs)?;
    Ok(argmax_accuracy(logits.data(), spec.output_dim(), labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;
    use crate::oracle::fd::{central_gradient, max_relative_error};
    use crate::oracle::reference::ReferenceMlp;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2]).is_err());
        let s = MlpSpec::new(vec![2, 3, 2]).unwrap();
        assert_eq!(s.num_params(), 2 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(init_params(&s, 0).len(), s.num_params());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let s = MlpSpec::new(vec![2, 3, 2]).unwrap();
        let a = init_params(&s, 7);
        assert!(a.bitwise_eq(&init_params(&s, 7)));
        assert!(!a.bitwise_eq(&init_params(&s, 8)));
        for (i, seg) in a.segments().iter().enumerate() {
            if seg.name.ends_with(".bias") {
                assert!(a.segment_values(i).iter().all(|&v| v == 0.0));
            } else {
                let limit = (6.0 / (seg.shape[0] + seg.shape[1]) as f64).sqrt();
                assert!(a.segment_values(i).iter().all(|v| v.abs() <= limit));
            }
        }
    }

    #[test]
    fn init_weight_mean_is_zero_within_three_standard_errors() {
        // 10^5 draws from one big layer: uniform on [-L, L] has sd L/√3.
        let s = MlpSpec::new(vec![400, 250]).unwrap();
        let p = init_params(&s, 123);
        let w = p.segment_values(0);
        assert_eq!(w.len(), 100_000);
        let limit = (6.0 / 650.0f64).sqrt();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let se = limit / 3f64.sqrt() / (w.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn uniform_logits_give_log_n() {
        let s = MlpSpec::new(vec![3, 4]).unwrap();
        let p = ParamVector::zeros(&s.layout());
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let l = loss(&s, LossKind::SoftmaxCrossEntropy, &p.constants(), &x, &Targets::Labels(vec![0, 3])).unwrap();
        assert!((l.item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mse_is_zero_at_targets() {
        let s = MlpSpec::new(vec![1, 1]).unwrap();
        let p = ParamVector::flatten(vec![
            ("layer0.weight".into(), vec![1, 1], vec![2.0]),
            ("layer0.bias".into(), vec![1, 1], vec![1.0]),
        ])
        .unwrap();
        let x = Tensor::matrix(3, 1, vec![0.0, 1.0, -2.0]).unwrap();
        let y = Targets::Values(vec![1.0, 3.0, -3.0]);
        let l = loss(&s, LossKind::MeanSquaredError, &p.constants(), &x, &y).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn label_out_of_range_and_kind_mismatch_are_data_errors() {
        let s = MlpSpec::new(vec![2, 3]).unwrap();
        let p = init_params(&s, 1);
        let x = Tensor::zeros(&[1, 2]);
        let e = loss(&s, LossKind::SoftmaxCrossEntropy, &p.constants(), &x, &Targets::Labels(vec![3]));
        assert!(matches!(e, Err(Error::Data(_))));
        let e = loss(&s, LossKind::MeanSquaredError, &p.constants(), &x, &Targets::Labels(vec![0]));
        assert!(matches!(e, Err(Error::Data(_))));
    }

    fn random_batch(rows: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::matrix(rows, dim, data).unwrap()
    }

    #[test]
    fn loss_matches_straight_line_reference() {
        let s = MlpSpec::new(vec![4, 6, 3]).unwrap();
        let mut p = init_params(&s, 42);
        // nonzero biases so they are exercised
        for (i, v) in p.values_mut().iter_mut().enumerate() {
            *v += 0.01 * (i % 5) as f64;
        }
        let x = random_batch(7, 4, 9);
        let labels = vec![0, 1, 2, 0, 1, 2, 2];
        let ours = loss(&s, LossKind::SoftmaxCrossEntropy, &p.constants(), &x, &Targets::Labels(labels.clone()))
            .unwrap()
            .item();
        let reference = ReferenceMlp::new(s.widths())
            .loss(p.values(), x.data(), &Targets::Labels(labels))
            .unwrap();
        assert!((ours - reference).abs() < 1e-12);

        let s = MlpSpec::new(vec![4, 5, 1]).unwrap();
        let p = init_params(&s, 3);
        let y: Vec<f64> = (0..7).map(|i| i as f64 * 0.3 - 1.0).collect();
        let ours = loss(&s, LossKind::MeanSquaredError, &p.constants(), &x, &Targets::Values(y.clone()))
            .unwrap()
            .item();
        let reference = ReferenceMlp::new(s.widths())
            .loss(p.values(), x.data(), &Targets::Values(y))
            .unwrap();
        assert!((ours - reference).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let s = MlpSpec::new(vec![3, 5, 4, 3]).unwrap();
        let p = init_params(&s, 17);
        let x = random_batch(6, 3, 2);
        let targets = Targets::Labels(vec![0, 1, 2, 2, 1, 0]);
        let tape = Tape::first_order();
        let (l, leaves) = loss_on_tape(&p, &s, LossKind::SoftmaxCrossEntropy, &x, &targets, &tape).unwrap();
        let g = p.from_tensors(&backward(&l, &leaves, false).unwrap()).unwrap();
        let num = central_gradient(
            |v| {
                let q = p.with_values(v.to_vec()).unwrap();
                Ok(loss(&s, LossKind::SoftmaxCrossEntropy, &q.constants(), &x, &targets)?.item())
            },
            p.values(),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(g.values(), &num) < 1e-5);
    }

    #[test]
    fn accuracy_extremes() {
        assert_eq!(argmax_accuracy(&[1.0, 0.0, 0.0, 1.0], 2, &[0, 1]), 1.0);
        assert_eq!(argmax_accuracy(&[1.0, 0.0, 0.0, 1.0], 2, &[1, 0]), 0.0);
        // ties go to the lowest index
        assert_eq!(argmax_accuracy(&[0.5, 0.5, 0.5], 3, &[0]), 1.0);
        assert_eq!(argmax_accuracy(&[0.1, 0.7, 0.7], 3, &[1]), 1.0);
    }

    #[test]
    fn accuracy_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..8).map(|i| i % 5).collect();
        let base = argmax_accuracy(&logits, 5, &labels);
        let shifted: Vec<f64> = logits
            .chunks(5)
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |v| v + 10.0 * r as f64 - 17.0))
            .collect();
        assert_eq!(base, argmax_accuracy(&shifted, 5, &labels));
    }

    #[test]
    fn random_logits_score_chance() {
        let n = 5;
        let episodes = 400;
        let per = 75;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let accs: Vec<f64> = (0..episodes)
            .map(|_| {
                let logits: Vec<f64> = (0..per * n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let labels: Vec<usize> = (0..per).map(|i| i % n).collect();
                argmax_accuracy(&logits, n, &labels)
            })
            .collect();
        let mean = accs.iter().sum::<f64>() / episodes as f64;
        let p = 1.0 / n as f64;
        let se = (p * (1.0 - p) / (episodes * per) as f64).sqrt();
        assert!((mean - p).abs() < 3.0 * se, "mean {mean}");
    }
}
