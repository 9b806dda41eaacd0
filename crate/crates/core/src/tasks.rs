//! Synthetic few-shot task distributions and the episodic sampler.
//!
//! Every task is drawn from its own ChaCha stream keyed by
//! `(seed, domain, episode, task)`, so tasks can be sampled in any order or
//! in parallel and still come out identical.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{LossKind, Targets};

pub const AMPLITUDE_RANGE: (f64, f64) = (0.1, 5.0);
pub const PHASE_RANGE: (f64, f64) = (0.0, PI);
pub const SINUSOID_INPUT_RANGE: (f64, f64) = (-5.0, 5.0);

/// Stream domains keep training, validation and test tasks apart.
pub mod domain {
    pub const TRAIN: u32 = 0;
    pub const VALIDATION: u32 = 1;
    pub const TEST: u32 = 2;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistributionKind {
    GaussianBlobs,
    Sinusoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDistribution {
    pub kind: DistributionKind,
    /// Input dimension (1 for sinusoid).
    pub dim: usize,
    /// Classes per task; 1 for regression.
    pub way: usize,
    /// Support examples per class (or in total, for regression).
    pub shot: usize,
    /// Query examples per class (or in total, for regression).
    pub query: usize,
    /// Class means are drawn from `[-separation, separation]^dim`.
    pub separation: f64,
    /// Standard deviation of points around their class mean.
    pub noise: f64,
}

impl TaskDistribution {
    pub fn blobs(dim: usize, way: usize, shot: usize, query: usize, separation: f64, noise: f64) -> Self {
        TaskDistribution {
            kind: DistributionKind::GaussianBlobs,
            dim,
            way,
            shot,
            query,
            separation,
            noise,
        }
    }

    pub fn sinusoid(shot: usize, query: usize) -> Self {
        TaskDistribution {
            kind: DistributionKind::Sinusoid,
            dim: 1,
            way: 1,
            shot,
            query,
            separation: 0.0,
            noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shot < 1 || self.query < 1 {
            return Err(Error::Config("shot and query must be at least 1".into()));
        }
        match self.kind {
            DistributionKind::GaussianBlobs => {
                if self.way < 2 {
                    return Err(Error::Config("classification needs way >= 2".into()));
                }
                if self.dim < 1 {
                    return Err(Error::Config("input dimension must be at least 1".into()));
                }
                if !(self.separation.is_finite() && self.separation > 0.0) {
                    return Err(Error::Config("separation must be positive".into()));
                }
                if !(self.noise.is_finite() && self.noise >= 0.0) {
                    return Err(Error::Config("noise must be non-negative".into()));
                }
            }
            DistributionKind::Sinusoid => {
                if self.dim != 1 || self.way != 1 {
                    return Err(Error::Config("sinusoid tasks have dim 1 and way 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.kind {
            DistributionKind::GaussianBlobs => LossKind::SoftmaxCrossEntropy,
            DistributionKind::Sinusoid => LossKind::MeanSquaredError,
        }
    }

    /// Model output width needed for this distribution.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            DistributionKind::GaussianBlobs => self.way,
            DistributionKind::Sinusoid => 1,
        }
    }

    fn rows(&self, per_class: usize) -> usize {
        match self.kind {
            DistributionKind::GaussianBlobs => self.way * per_class,
            DistributionKind::Sinusoid => per_class,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub domain: u32,
    pub episode: u64,
    pub task: u32,
}

impl StreamKey {
    pub fn new(seed: u64, domain: u32, episode: u64, task: u32) -> Self {
        StreamKey {
            seed,
            domain,
            episode,
            task,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..12].copy_from_slice(&self.domain.to_le_bytes());
        key[12..16].copy_from_slice(&self.task.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.episode);
        rng
    }
}

/// A row-major `[rows, dim]` input block with its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
    pub targets: Targets,
}

impl Batch {
    pub fn input_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.dim, self.inputs.clone()).expect("batch is rectangular")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.inputs[r * self.dim..(r + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels(l) => Some(l),
            Targets::Values(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub kind: DistributionKind,
    pub support: Batch,
    pub query: Batch,
    pub loss: LossKind,
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    /// Sinusoid amplitude, when known.
    pub amplitude: Option<f64>,
}

pub fn sample_task(dist: &TaskDistribution, key: StreamKey) -> Task {
    let mut rng = key.rng();
    match dist.kind {
        DistributionKind::GaussianBlobs => sample_blobs(dist, &mut rng),
        DistributionKind::Sinusoid => sample_sinusoid(dist, &mut rng),
    }
}

fn sample_blobs(dist: &TaskDistribution, rng: &mut ChaCha8Rng) -> Task {
    let (n, k, q, d) = (dist.way, dist.shot, dist.query, dist.dim);
    let s = dist.separation;
    let means: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-s..=s)).collect())
        .collect();
    let mut support = Vec::with_capacity(n * k * d);
    let mut query = Vec::with_capacity(n * q * d);
    let mut support_labels = Vec::with_capacity(n * k);
    let mut query_labels = Vec::with_capacity(n * q);
    for (class, mean) in means.iter().enumerate() {
        for i in 0..k + q {
            let (block, labels) = if i < k {
                (&mut support, &mut support_labels)
            } else {
                (&mut query, &mut query_labels)
            };
            for &m in mean {
                let z: f64 = StandardNormal.sample(rng);
                block.push(m + dist.noise * z);
            }
            labels.push(class);
        }
    }
    Task {
        kind: dist.kind,
        support: Batch {
            inputs: support,
            rows: n * k,
            dim: d,
            targets: Targets::Labels(support_labels),
        },
        query: Batch {
            inputs: query,
            rows: n * q,
            dim: d,
            targets: Targets::Labels(query_labels),
        },
        loss: LossKind::SoftmaxCrossEntropy,
        way: n,
        shot: k,
        query_per_class: q,
        amplitude: None,
    }
}

fn sample_sinusoid(dist: &TaskDistribution, rng: &mut ChaCha8Rng) -> Task {
    let amplitude = rng.random_range(AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1);
    let phase = rng.random_range(PHASE_RANGE.0..=PHASE_RANGE.1);
    let mut draw = |count: usize| {
        let xs: Vec<f64> = (0..count)
            .map(|_| rng.random_range(SINUSOID_INPUT_RANGE.0..=SINUSOID_INPUT_RANGE.1))
            .collect();
        let ys = xs.iter().map(|x| amplitude * (x + phase).sin()).collect();
        Batch {
            inputs: xs,
            rows: count,
            dim: 1,
            targets: Targets::Values(ys),
        }
    };
    let support = draw(dist.shot);
    let query = draw(dist.query);
    Task {
        kind: dist.kind,
        support,
        query,
        loss: LossKind::MeanSquaredError,
        way: 1,
        shot: dist.shot,
        query_per_class: dist.query,
        amplitude: Some(amplitude),
    }
}

/// Position in a sequence of episodes. Episode `e` owns the streams
/// `(seed, domain, e, 0..P)`; advancing never reuses a stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeStream {
    seed: u64,
    domain: u32,
    next: u64,
}

impl EpisodeStream {
    pub fn new(seed: u64, domain: u32) -> Self {
        EpisodeStream {
            seed,
            domain,
            next: 0,
        }
    }

    pub fn position(&self) -> u64 {
        self.next
    }

    /// Key of task `task` in the episode about to be sampled.
    pub fn key(&self, task: u32) -> StreamKey {
        StreamKey::new(self.seed, self.domain, self.next, task)
    }
}

/// Draws `count` tasks from the next episode of `stream`.
pub fn sample_episode(dist: &TaskDistribution, count: usize, stream: &mut EpisodeStream) -> Result<Vec<Task>> {
    if count < 1 {
        return Err(Error::Config("an episode needs at least one task".into()));
    }
    let tasks = (0..count)
        .map(|i| sample_task(dist, stream.key(i as u32)))
        .collect();
    stream.next += 1;
    Ok(tasks)
}

fn kind_code(kind: DistributionKind) -> u32 {
    match kind {
        DistributionKind::GaussianBlobs => 0,
        DistributionKind::Sinusoid => 1,
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_batch(w: &mut impl Write, batch: &Batch) -> Result<()> {
    for v in &batch.inputs {
        w.write_all(&v.to_le_bytes())?;
    }
    match &batch.targets {
        Targets::Labels(labels) => {
            for &l in labels {
                w.write_all(&(l as i32).to_le_bytes())?;
            }
        }
        Targets::Values(values) => {
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_batch(r: &mut impl Read, kind: DistributionKind, rows: usize, dim: usize) -> Result<Batch> {
    let inputs = read_f64s(r, rows * dim)?;
    let targets = match kind {
        DistributionKind::GaussianBlobs => {
            let mut labels = Vec::with_capacity(rows);
            for _ in 0..rows {
                let l = read_u32(r)? as i32;
                if l < 0 {
                    return Err(Error::Data(format!("negative label {l}")));
                }
                labels.push(l as usize);
            }
            Targets::Labels(labels)
        }
        DistributionKind::Sinusoid => Targets::Values(read_f64s(r, rows)?),
    };
    Ok(Batch {
        inputs,
        rows,
        dim,
        targets,
    })
}

impl Task {
    /// Header `(kind, d, N, K, Q)` as little-endian u32, then the support
    /// block and the query block. Each block holds the inputs as
    /// little-endian f64 followed by the targets: i32 labels for
    /// classification, f64 values for regression.
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        for v in [
            kind_code(self.kind),
            self.support.dim as u32,
            self.way as u32,
            self.shot as u32,
            self.query_per_class as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        write_batch(w, &self.support)?;
        write_batch(w, &self.query)
    }

    pub fn read_binary(r: &mut impl Read) -> Result<Task> {
        let kind = match read_u32(r)? {
            0 => DistributionKind::GaussianBlobs,
            1 => DistributionKind::Sinusoid,
            other => return Err(Error::Data(format!("unknown task kind code {other}"))),
        };
        let dim = read_u32(r)? as usize;
        let way = read_u32(r)? as usize;
        let shot = read_u32(r)? as usize;
        let query = read_u32(r)? as usize;
        let dist = TaskDistribution {
            kind,
            dim,
            way,
            shot,
            query,
            separation: 1.0,
            noise: 0.0,
        };
        let support = read_batch(r, kind, dist.rows(shot), dim)?;
        let query_batch = read_batch(r, kind, dist.rows(query), dim)?;
        Ok(Task {
            kind,
            support,
            query: query_batch,
            loss: dist.loss_kind(),
            way,
            shot,
            query_per_class: query,
            amplitude: None,
        })
    }
}

/// Task count as a little-endian u32, then each task's binary layout.
pub fn write_episode(tasks: &[Task], w: &mut impl Write) -> Result<()> {
    w.write_all(&(tasks.len() as u32).to_le_bytes())?;
    for t in tasks {
        t.write_binary(w)?;
    }
    Ok(())
}

pub fn read_episode(r: &mut impl Read) -> Result<Vec<Task>> {
    let n = read_u32(r)?;
    (0..n).map(|_| Task::read_binary(r)).collect()
}

/// Query accuracy of classifying each query point by its nearest support
/// class mean.
pub fn nearest_mean_accuracy(task: &Task) -> f64 {
    let (Some(support_labels), Some(query_labels)) = (task.support.labels(), task.query.labels()) else {
        return 0.0;
    };
    let d = task.support.dim;
    let mut means = vec![vec![0.0; d]; task.way];
    let mut counts = vec![0usize; task.way];
    for (r, &l) in support_labels.iter().enumerate() {
        for (m, &x) in means[l].iter_mut().zip(task.support.row(r)) {
            *m += x;
        }
        counts[l] += 1;
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        for v in m.iter_mut() {
            *v /= c as f64;
        }
    }
    let hits = query_labels
        .iter()
        .enumerate()
        .filter(|&(r, &label)| {
            let x = task.query.row(r);
            let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let mut best = 0;
            for c in 1..task.way {
                if dist(&means[c]) < dist(&means[best]) {
                    best = c;
                }
            }
            best == label
        })
        .count();
    hits as f64 / query_labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> TaskDistribution {
        TaskDistribution::blobs(4, 5, 2, 3, 5.0, 1.0)
    }

    #[test]
    fn class_balance_and_label_multiset() {
        let dist = blobs();
        for t in 0..20 {
            let task = sample_task(&dist, StreamKey::new(1, domain::TRAIN, 0, t));
            let s = task.support.labels().unwrap();
            let q = task.query.labels().unwrap();
            assert_eq!(s.len(), 10);
            assert_eq!(q.len(), 15);
            for c in 0..5 {
                assert_eq!(s.iter().filter(|&&l| l == c).count(), 2);
                assert_eq!(q.iter().filter(|&&l| l == c).count(), 3);
            }
            assert_eq!(task.support.inputs.len(), 10 * 4);
        }
    }

    #[test]
    fn support_and_query_are_disjoint() {
        // Every point is its own draw; no query row repeats a support row.
        let task = sample_task(&blobs(), StreamKey::new(3, 0, 0, 0));
        for qr in 0..task.query.rows {
            for sr in 0..task.support.rows {
                assert_ne!(task.query.row(qr), task.support.row(sr));
            }
        }
    }

    #[test]
    fn zero_noise_points_sit_on_their_means() {
        let dist = TaskDistribution::blobs(3, 4, 2, 5, 5.0, 0.0);
        for t in 0..10 {
            let task = sample_task(&dist, StreamKey::new(9, 0, 0, t));
            assert_eq!(nearest_mean_accuracy(&task), 1.0);
            let labels = task.query.labels().unwrap();
            for r in 0..task.query.rows {
                let sr = labels[r] * 2;
                assert_eq!(task.query.row(r), task.support.row(sr));
            }
        }
    }

    #[test]
    fn same_key_same_task() {
        let key = StreamKey::new(5, domain::TEST, 3, 2);
        assert_eq!(sample_task(&blobs(), key), sample_task(&blobs(), key));
        let other = StreamKey::new(5, domain::TEST, 3, 3);
        assert_ne!(sample_task(&blobs(), key), sample_task(&blobs(), other));
    }

    #[test]
    fn singleton_episode_equals_sample_task() {
        let dist = blobs();
        let mut stream = EpisodeStream::new(11, domain::TRAIN);
        let key = stream.key(0);
        let ep = sample_episode(&dist, 1, &mut stream).unwrap();
        assert_eq!(ep, vec![sample_task(&dist, key)]);
        assert_eq!(stream.position(), 1);
    }

    #[test]
    fn consecutive_episodes_use_distinct_streams() {
        let dist = blobs();
        let mut stream = EpisodeStream::new(11, domain::TRAIN);
        let k0 = stream.key(0);
        let a = sample_episode(&dist, 2, &mut stream).unwrap();
        let k1 = stream.key(0);
        let b = sample_episode(&dist, 2, &mut stream).unwrap();
        assert_ne!(k0, k1);
        assert_ne!(a, b);
        // Raw streams differ from the first word on.
        let w0: u64 = k0.rng().random();
        let w1: u64 = k1.rng().random();
        assert_ne!(w0, w1);
    }

    #[test]
    fn sinusoid_targets_bounded_by_amplitude() {
        let dist = TaskDistribution::sinusoid(10, 10);
        for t in 0..50 {
            let task = sample_task(&dist, StreamKey::new(2, 0, 0, t));
            let a = task.amplitude.unwrap();
            assert!((AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1).contains(&a));
            for b in [&task.support, &task.query] {
                assert!(b.inputs.iter().all(|x| (-5.0..=5.0).contains(x)));
                let Targets::Values(ys) = &b.targets else { panic!() };
                assert!(ys.iter().all(|y| y.abs() <= a));
            }
        }
    }

    #[test]
    fn validation_rules() {
        assert!(TaskDistribution::blobs(2, 1, 1, 1, 1.0, 1.0).validate().is_err());
        assert!(TaskDistribution::blobs(2, 2, 0, 1, 1.0, 1.0).validate().is_err());
        assert!(TaskDistribution::blobs(2, 2, 1, 1, 1.0, -1.0).validate().is_err());
        assert!(TaskDistribution::sinusoid(5, 5).validate().is_ok());
        assert!(sample_episode(&blobs(), 0, &mut EpisodeStream::new(0, 0)).is_err());
    }

    #[test]
    fn binary_layout_roundtrip_and_size() {
        let dist = blobs();
        let task = sample_task(&dist, StreamKey::new(1, 0, 0, 0));
        let mut buf = Vec::new();
        task.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 20 + (10 * 4) * 8 + 10 * 4 + (15 * 4) * 8 + 15 * 4);
        let back = Task::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(back, task);

        let sin = sample_task(&TaskDistribution::sinusoid(3, 4), StreamKey::new(1, 0, 0, 0));
        let mut buf = Vec::new();
        sin.write_binary(&mut buf).unwrap();
        let back = Task::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(back.support, sin.support);
        assert_eq!(back.query, sin.query);
    }
}
