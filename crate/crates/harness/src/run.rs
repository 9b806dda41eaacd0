//! The meta-training loop and test-time evaluation.

use anyhow::{Context, Result};
use serde::Serialize;

use signmaml::meta::{self, unroll, MetaMethod};
use signmaml::models::{self, init_params};
use signmaml::tasks::{domain, sample_episode, sample_task, EpisodeStream, StreamKey, Task};
use signmaml::{MetaConfig, MlpSpec, ModelTask, ParamVector, Targets};

use crate::config::ExperimentConfig;
use crate::stats;

/// One meta-iteration's log line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub iteration: usize,
    /// Mean query loss of the adapted models over the episode.
    pub loss: f64,
    pub accuracy: Option<f64>,
    /// Wall-clock seconds of adaptation, meta-gradients and update.
    pub seconds: f64,
    pub val_score: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub records: Vec<RunRecord>,
}

/// Training stopped early; holds everything logged before the failure.
#[derive(Debug)]
pub struct TrainFailure {
    pub iteration: usize,
    pub records: Vec<RunRecord>,
    pub error: signmaml::Error,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "meta-iteration {} failed: {}", self.iteration, self.error)
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Runs `cfg.iterations` meta-iterations from the seeded initialization.
/// `on_record` sees every record as soon as it is complete.
pub fn train(cfg: &ExperimentConfig, mut on_record: impl FnMut(&RunRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = cfg.model()?;
    let dist = cfg.distribution();
    let meta_cfg = cfg.meta_config();
    let pool = if cfg.workers > 1 {
        Some(rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?)
    } else {
        None
    };
    let mut x = init_params(&spec, cfg.seed);
    let mut stream = EpisodeStream::new(cfg.seed, domain::TRAIN);
    let mut records = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let tasks = sample_episode(&dist, cfg.meta.meta_batch, &mut stream)?;
        let episode: Vec<ModelTask> = tasks.iter().map(|t| ModelTask::new(&spec, t)).collect();
        let stepped = match &pool {
            Some(pool) => meta::meta_step_on(pool, &x, &episode, &meta_cfg),
            None => meta::meta_step(&x, &episode, &meta_cfg),
        };
        let (next, step) = match stepped {
            Ok(v) => v,
            Err(error) => {
                return Err(TrainFailure {
                    iteration,
                    records,
                    error,
                }
                .into())
            }
        };
        x = next;
        let val_score = if cfg.val_interval > 0 && (iteration + 1) % cfg.val_interval == 0 {
            Some(validation_score(&x, &spec, cfg)?)
        } else {
            None
        };
        let record = RunRecord {
            iteration,
            loss: step.mean_query_loss,
            accuracy: step.mean_query_accuracy,
            seconds: step.duration.as_secs_f64().max(f64::MIN_POSITIVE),
            val_score,
        };
        on_record(&record);
        records.push(record);
    }
    Ok(TrainOutcome { params: x, records })
}

/// Per-task test-time result after `m_test` adaptation steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TaskScore {
    pub task: usize,
    /// Query accuracy for classification, query MSE for regression.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub method: MetaMethod,
    pub metric: &'static str,
    pub mean: f64,
    pub ci95: f64,
    pub tasks: Vec<TaskScore>,
}

/// Adapts `params` to `task` with `steps` inner steps of the method's
/// inner optimizer and scores the query set.
pub fn adapt_and_score(
    params: &ParamVector,
    spec: &MlpSpec,
    task: &Task,
    meta_cfg: &MetaConfig,
    steps: usize,
) -> signmaml::Result<f64> {
    let obj = ModelTask::new(spec, task);
    let mut inner = meta_cfg.inner;
    inner.steps = steps;
    let trace = unroll(params, &obj, &inner, false)?;
    let adapted = trace.last();
    let q = &task.query;
    match &q.targets {
        Targets::Labels(labels) => models::accuracy(adapted, spec, &q.input_tensor(), labels),
        Targets::Values(_) => Ok(models::loss(spec, task.loss, &adapted.constants(), &q.input_tensor(), &q.targets)?.item()),
    }
}

fn score_tasks(
    params: &ParamVector,
    spec: &MlpSpec,
    cfg: &ExperimentConfig,
    domain_id: u32,
    count: usize,
) -> Result<Vec<TaskScore>> {
    let dist = cfg.distribution();
    let meta_cfg = cfg.meta_config();
    (0..count)
        .map(|i| {
            let task = sample_task(&dist, StreamKey::new(cfg.seed, domain_id, i as u64, 0));
            let score = adapt_and_score(params, spec, &task, &meta_cfg, cfg.meta.m_test)
                .with_context(|| format!("test task {i}"))?;
            Ok(TaskScore { task: i, score })
        })
        .collect()
}

/// Mean score over the first `val_tasks` validation-domain tasks. Higher is
/// better: accuracy, or negated MSE for regression.
pub fn validation_score(params: &ParamVector, spec: &MlpSpec, cfg: &ExperimentConfig) -> Result<f64> {
    let scores = score_tasks(params, spec, cfg, domain::VALIDATION, cfg.val_tasks)?;
    let mean = scores.iter().map(|s| s.score).sum::<f64>() / scores.len() as f64;
    Ok(if cfg.is_classification() { mean } else { -mean })
}

/// Scores `params` on `cfg.test_tasks` fresh test-domain tasks.
pub fn evaluate(params: &ParamVector, cfg: &ExperimentConfig) -> Result<Evaluation> {
    let spec = cfg.model()?;
    let tasks = score_tasks(params, &spec, cfg, domain::TEST, cfg.test_tasks)?;
    let values: Vec<f64> = tasks.iter().map(|t| t.score).collect();
    Ok(Evaluation {
        method: cfg.meta.method,
        metric: if cfg.is_classification() { "accuracy" } else { "mse" },
        mean: stats::mean(&values),
        ci95: stats::ci95(&values),
        tasks,
    })
}

/// Timing summary over records after the warm-up; all records when the run
/// is too short to drop any.
pub fn timing(records: &[RunRecord], warmup: usize) -> (f64, f64, usize) {
    let kept = if records.len() > warmup + 1 { &records[warmup..] } else { records };
    let secs: Vec<f64> = kept.iter().map(|r| r.seconds).collect();
    (stats::mean(&secs), stats::sample_std(&secs), secs.len())
}
