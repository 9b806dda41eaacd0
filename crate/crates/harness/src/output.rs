//! Result files. `results.csv` columns are fixed:
//! `method,N,K,m_train,m_test,beta,accuracy,ci95,time_mean_s,time_std_s,seed`.
//! For regression the `accuracy` column holds the query MSE.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use signmaml::ParamVector;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::run::{self, Evaluation, RunRecord, TrainFailure};

pub const RESULT_COLUMNS: [&str; 11] = [
    "method", "N", "K", "m_train", "m_test", "beta", "accuracy", "ci95", "time_mean_s", "time_std_s", "seed",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub m_train: usize,
    pub m_test: usize,
    pub beta: f64,
    pub accuracy: Option<f64>,
    pub ci95: Option<f64>,
    pub time_mean_s: Option<f64>,
    pub time_std_s: Option<f64>,
    pub seed: u64,
}

impl ResultRow {
    /// A row with the configuration filled in and no measurements.
    pub fn empty(cfg: &ExperimentConfig) -> Self {
        ResultRow {
            method: cfg.meta.method.name().to_string(),
            n: cfg.task.way,
            k: cfg.task.shot,
            m_train: cfg.meta.m_train,
            m_test: cfg.meta.m_test,
            beta: cfg.meta.beta,
            accuracy: None,
            ci95: None,
            time_mean_s: None,
            time_std_s: None,
            seed: cfg.seed,
        }
    }

    pub fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.method.clone(),
            self.n.to_string(),
            self.k.to_string(),
            self.m_train.to_string(),
            self.m_test.to_string(),
            self.beta.to_string(),
            opt(self.accuracy),
            opt(self.ci95),
            opt(self.time_mean_s),
            opt(self.time_std_s),
            self.seed.to_string(),
        ]
    }
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub method: String,
    pub metric: &'static str,
    pub accuracy: f64,
    pub ci95: f64,
    pub test_tasks: usize,
    pub time_mean_s: f64,
    pub time_std_s: f64,
    pub timed_iterations: usize,
    pub iterations: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub config: ExperimentConfig,
}

impl Summary {
    pub fn row(&self) -> ResultRow {
        ResultRow {
            accuracy: Some(self.accuracy),
            ci95: Some(self.ci95),
            time_mean_s: Some(self.time_mean_s),
            time_std_s: Some(self.time_std_s),
            ..ResultRow::empty(&self.config)
        }
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(RESULT_COLUMNS)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Appends records to `loss.csv` as they arrive, flushing each line so a
/// failed run still leaves its history behind.
pub struct LossLog {
    w: csv::Writer<File>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(["iteration", "loss", "accuracy", "seconds", "val_score"])?;
        w.flush()?;
        Ok(LossLog { w })
    }

    pub fn push(&mut self, r: &RunRecord) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        self.w.write_record([
            r.iteration.to_string(),
            r.loss.to_string(),
            opt(r.accuracy),
            r.seconds.to_string(),
            opt(r.val_score),
        ])?;
        self.w.flush()?;
        Ok(())
    }
}

pub fn write_task_scores(path: &Path, eval: &Evaluation) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["task", eval.metric])?;
    for t in &eval.tasks {
        w.write_record([t.task.to_string(), t.score.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

pub fn summarize(cfg: &ExperimentConfig, records: &[RunRecord], eval: &Evaluation) -> Summary {
    let (time_mean_s, time_std_s, timed_iterations) = run::timing(records, cfg.warmup);
    Summary {
        method: cfg.meta.method.name().to_string(),
        metric: eval.metric,
        accuracy: eval.mean,
        ci95: eval.ci95,
        test_tasks: eval.tasks.len(),
        time_mean_s,
        time_std_s,
        timed_iterations,
        iterations: records.len(),
        initial_loss: records.first().map(|r| r.loss),
        final_loss: records.last().map(|r| r.loss),
        config: cfg.clone(),
    }
}

/// Train, checkpoint, evaluate and write every output file into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<(ParamVector, Summary)> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let mut log = LossLog::create(&dir.join("loss.csv"))?;
    let mut write_err = None;
    let trained = run::train(cfg, |r| {
        if let Err(e) = log.push(r) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let trained = trained.map_err(|e| {
        let kept = e.downcast_ref::<TrainFailure>().map(|f| f.records.len());
        match kept {
            Some(n) => e.context(format!("{n} records kept in loss.csv")),
            None => e,
        }
    })?;
    checkpoint::save(&trained.params, &dir.join("checkpoint.bin"))?;
    let eval = run::evaluate(&trained.params, cfg)?;
    write_task_scores(&dir.join("tasks.csv"), &eval)?;
    let summary = summarize(cfg, &trained.records, &eval);
    write_results(&dir.join("results.csv"), &[summary.row()])?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok((trained.params, summary))
}
