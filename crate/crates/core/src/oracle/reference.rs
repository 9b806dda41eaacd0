//! Straight-line MLP over flat parameter buffers: forward pass, loss,
//! hand-written backprop and inner-loop unrolling. Nothing here touches the
//! tape or its kernels.

use crate::error::{Error, Result};
use crate::meta::InnerKind;
use crate::models::Targets;

/// Reference network with the same parameter layout as
/// [`crate::models::MlpSpec`]: per layer a row-major `[in, out]` weight
/// block followed by an `out` bias block.
#[derive(Clone, Debug)]
pub struct ReferenceMlp {
    widths: Vec<usize>,
}

/// Pre-activations of every layer and the network output.
struct Trace {
    inputs_per_layer: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    rows: usize,
}

/// Everything the finite-difference guard needs to know about where an
/// evaluation sits relative to the nonsmooth points of the unroll.
#[derive(Clone, Debug, PartialEq)]
pub struct KinkProfile {
    /// Smallest |hidden pre-activation| and, for signSGD, smallest
    /// |support-gradient coordinate| met along the unroll.
    pub margin: f64,
    /// Relu activity at every hidden unit, then gradient signs per step.
    pub pattern: Vec<i8>,
}

impl ReferenceMlp {
    pub fn new(widths: &[usize]) -> Self {
        ReferenceMlp {
            widths: widths.to_vec(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn check(&self, params: &[f64], inputs: &[f64]) -> Result<usize> {
        if params.len() != self.num_params() {
            return Err(Error::Dimension {
                op: "reference_mlp",
                lhs: vec![self.num_params()],
                rhs: vec![params.len()],
            });
        }
        let d = self.widths[0];
        if inputs.len() % d != 0 {
            return Err(Error::Dimension {
                op: "reference_mlp",
                lhs: vec![d],
                rhs: vec![inputs.len()],
            });
        }
        Ok(inputs.len() / d)
    }

    fn run(&self, params: &[f64], inputs: &[f64]) -> Result<Trace> {
        let rows = self.check(params, inputs)?;
        let layers = self.widths.len() - 1;
        let mut offset = 0;
        let mut h = inputs.to_vec();
        let mut trace = Trace {
            inputs_per_layer: Vec::new(),
            pre: Vec::new(),
            rows,
        };
        for l in 0..layers {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let w = &params[offset..offset + fan_in * fan_out];
            let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut z = vec![0.0; rows * fan_out];
            for r in 0..rows {
                for j in 0..fan_out {
                    let mut acc = 0.0;
                    for i in 0..fan_in {
                        acc += h[r * fan_in + i] * w[i * fan_out + j];
                    }
                    z[r * fan_out + j] = acc + b[j];
                }
            }
            trace.inputs_per_layer.push(h);
            h = if l + 1 < layers {
                z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
            } else {
                z.clone()
            };
            trace.pre.push(z);
        }
        Ok(trace)
    }

    /// Network output, row-major `[rows, out]`.
    pub fn forward(&self, params: &[f64], inputs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(params, inputs)?.pre.pop().unwrap())
    }

    fn loss_and_seed(&self, out: &[f64], rows: usize, targets: &Targets) -> Result<(f64, Vec<f64>)> {
        let k = *self.widths.last().unwrap();
        match targets {
            Targets::Labels(labels) => {
                if labels.len() != rows {
                    return Err(Error::Data(format!("{} labels for {rows} rows", labels.len())));
                }
                let mut total = 0.0;
                let mut seed = vec![0.0; rows * k];
                for (r, &label) in labels.iter().enumerate() {
                    if label >= k {
                        return Err(Error::Data(format!("label {label} with {k} classes")));
                    }
                    let row = &out[r * k..(r + 1) * k];
                    let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - top).exp()).sum();
                    total += top + z.ln() - row[label];
                    for c in 0..k {
                        let p = (row[c] - top).exp() / z;
                        let hit = if c == label { 1.0 } else { 0.0 };
                        seed[r * k + c] = (p - hit) / rows as f64;
                    }
                }
                Ok((total / rows as f64, seed))
            }
            Targets::Values(values) => {
                if values.len() != out.len() {
                    return Err(Error::Data(format!("{} targets for {} outputs", values.len(), out.len())));
                }
                let n = out.len() as f64;
                let mut total = 0.0;
                let mut seed = vec![0.0; out.len()];
                for i in 0..out.len() {
                    let e = out[i] - values[i];
                    total += e * e;
                    seed[i] = 2.0 * e / n;
                }
                Ok((total / n, seed))
            }
        }
    }

    pub fn loss(&self, params: &[f64], inputs: &[f64], targets: &Targets) -> Result<f64> {
        let t = self.run(params, inputs)?;
        Ok(self.loss_and_seed(t.pre.last().unwrap(), t.rows, targets)?.0)
    }

    /// Loss and its gradient by manual backpropagation.
    pub fn loss_and_grad(&self, params: &[f64], inputs: &[f64], targets: &Targets) -> Result<(f64, Vec<f64>)> {
        let t = self.run(params, inputs)?;
        let rows = t.rows;
        let (value, mut dz) = self.loss_and_seed(t.pre.last().unwrap(), rows, targets)?;
        let layers = self.widths.len() - 1;
        let mut grad = vec![0.0; params.len()];
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            offsets.push(offset);
            offset += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let base = offsets[l];
            let h = &t.inputs_per_layer[l];
            for i in 0..fan_in {
                for j in 0..fan_out {
                    let mut acc = 0.0;
                    for r in 0..rows {
                        acc += h[r * fan_in + i] * dz[r * fan_out + j];
                    }
                    grad[base + i * fan_out + j] = acc;
                }
            }
            for j in 0..fan_out {
                let mut acc = 0.0;
                for r in 0..rows {
                    acc += dz[r * fan_out + j];
                }
                grad[base + fan_in * fan_out + j] = acc;
            }
            if l == 0 {
                break;
            }
            let w = &params[base..base + fan_in * fan_out];
            let below = &t.pre[l - 1];
            let mut next = vec![0.0; rows * fan_in];
            for r in 0..rows {
                for i in 0..fan_in {
                    if below[r * fan_in + i] > 0.0 {
                        let mut acc = 0.0;
                        for j in 0..fan_out {
                            acc += dz[r * fan_out + j] * w[i * fan_out + j];
                        }
                        next[r * fan_in + i] = acc;
                    }
                }
            }
            dz = next;
        }
        Ok((value, grad))
    }

    fn hidden_profile(&self, params: &[f64], inputs: &[f64], profile: &mut KinkProfile) -> Result<()> {
        let t = self.run(params, inputs)?;
        for z in &t.pre[..t.pre.len() - 1] {
            for &v in z {
                profile.margin = profile.margin.min(v.abs());
                profile.pattern.push((v > 0.0) as i8);
            }
        }
        Ok(())
    }

    /// Runs `steps` inner steps on the support data and returns the query
    /// loss at the last iterate, with the kink profile of the whole path.
    #[allow(clippy::too_many_arguments)]
    pub fn unrolled_query_loss(
        &self,
        x: &[f64],
        kind: InnerKind,
        beta: f64,
        steps: usize,
        support: (&[f64], &Targets),
        query: (&[f64], &Targets),
    ) -> Result<(f64, KinkProfile)> {
        let mut profile = KinkProfile {
            margin: f64::INFINITY,
            pattern: Vec::new(),
        };
        let mut y = x.to_vec();
        for _ in 0..steps {
            self.hidden_profile(&y, support.0, &mut profile)?;
            let (_, g) = self.loss_and_grad(&y, support.0, support.1)?;
            for (yi, gi) in y.iter_mut().zip(&g) {
                match kind {
                    InnerKind::Sgd => *yi -= beta * gi,
                    InnerKind::SignSgd => {
                        profile.margin = profile.margin.min(gi.abs());
                        let s = if *gi > 0.0 {
                            1.0
                        } else if *gi < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        profile.pattern.push(s as i8);
                        *yi -= beta * s;
                    }
                }
            }
        }
        self.hidden_profile(&y, query.0, &mut profile)?;
        Ok((self.loss(&y, query.0, query.1)?, profile))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_network() {
        // 1 → 2 → 1, w1 = [1, −1], b1 = [0, 0.5], w2 = [2, 3], b2 = [1]
        let net = ReferenceMlp::new(&[1, 2, 1]);
        let p = [1.0, -1.0, 0.0, 0.5, 2.0, 3.0, 1.0];
        // x = 1: hidden = relu([1, −0.5]) = [1, 0]; out = 2 + 1 = 3
        assert_eq!(net.forward(&p, &[1.0]).unwrap(), vec![3.0]);
        let (l, g) = net.loss_and_grad(&p, &[1.0], &Targets::Values(vec![1.0])).unwrap();
        assert_eq!(l, 4.0);
        // dl/dout = 4; dw2 = 4·[1, 0]; db2 = 4; dhidden = 4·[2, 3] masked to [8, 0]
        assert_eq!(g, vec![8.0, 0.0, 8.0, 0.0, 4.0, 0.0, 4.0]);
    }

    #[test]
    fn gradient_matches_differences() {
        let net = ReferenceMlp::new(&[2, 3, 3]);
        let p: Vec<f64> = (0..net.num_params()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect();
        let x = [0.3, -1.2, 0.8, 0.4];
        let t = Targets::Labels(vec![2, 0]);
        let (_, g) = net.loss_and_grad(&p, &x, &t).unwrap();
        for i in 0..p.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let num = (net.loss(&a, &x, &t).unwrap() - net.loss(&b, &x, &t).unwrap()) / 2e-6;
            assert!((num - g[i]).abs() < 1e-8, "coordinate {i}");
        }
    }
}
