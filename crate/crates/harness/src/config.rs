use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use signmaml::tasks::{DistributionKind, TaskDistribution};
use signmaml::{InnerOptimizer, MetaConfig, MetaMethod, MlpSpec};

/// Everything a run needs. Loaded from TOML; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Meta-iterations.
    pub iterations: usize,
    /// Validate every this many iterations; 0 disables validation.
    pub val_interval: usize,
    pub val_tasks: usize,
    pub test_tasks: usize,
    /// Threads for per-task work within an episode. Timing runs use 1.
    pub workers: usize,
    /// Leading iterations left out of timing statistics.
    pub warmup: usize,
    pub out_dir: PathBuf,
    pub meta: MetaSection,
    pub task: TaskSection,
    pub model: ModelSection,
    pub sweep: SweepSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSection {
    pub method: MetaMethod,
    pub alpha: f64,
    pub beta: f64,
    pub m_train: usize,
    pub m_test: usize,
    pub meta_batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: DistributionKind,
    pub dim: usize,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub separation: f64,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Methods run per sweep cell; empty means fo-maml and sign-maml.
    pub methods: Vec<MetaMethod>,
    /// Per-method inner rate, overriding `meta.beta`.
    pub betas: BTreeMap<String, f64>,
    /// Ascending grid-search candidates per method.
    pub candidates: BTreeMap<String, Vec<f64>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            iterations: 1000,
            val_interval: 0,
            val_tasks: 200,
            test_tasks: 1000,
            workers: 1,
            warmup: 10,
            out_dir: PathBuf::from("runs/default"),
            meta: MetaSection::default(),
            task: TaskSection::default(),
            model: ModelSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl Default for MetaSection {
    fn default() -> Self {
        MetaSection {
            method: MetaMethod::SignMaml,
            alpha: 0.001,
            beta: 0.0065,
            m_train: 1,
            m_test: 10,
            meta_batch: 4,
        }
    }
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            kind: DistributionKind::GaussianBlobs,
            dim: 16,
            way: 5,
            shot: 1,
            query: 15,
            separation: 2.0,
            noise: 1.0,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden: vec![64, 64] }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn distribution(&self) -> TaskDistribution {
        let t = &self.task;
        match t.kind {
            DistributionKind::GaussianBlobs => {
                TaskDistribution::blobs(t.dim, t.way, t.shot, t.query, t.separation, t.noise)
            }
            DistributionKind::Sinusoid => TaskDistribution::sinusoid(t.shot, t.query),
        }
    }

    pub fn model(&self) -> Result<MlpSpec> {
        let dist = self.distribution();
        let mut widths = vec![dist.dim];
        widths.extend(&self.model.hidden);
        widths.push(dist.output_dim());
        Ok(MlpSpec::new(widths)?)
    }

    pub fn inner(&self, steps: usize) -> InnerOptimizer {
        InnerOptimizer {
            kind: self.meta.method.inner_kind(),
            beta: self.meta.beta,
            steps,
        }
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            alpha: self.meta.alpha,
            inner: self.inner(self.meta.m_train),
            method: self.meta.method,
            meta_batch: self.meta.meta_batch,
            test_steps: self.meta.m_test,
        }
    }

    /// Switches method, taking its rate from `[sweep.betas]` when present.
    pub fn with_method(&self, method: MetaMethod) -> Self {
        let mut cfg = self.clone();
        cfg.meta.method = method;
        if let Some(&b) = self.sweep.betas.get(method.name()) {
            cfg.meta.beta = b;
        }
        cfg
    }

    pub fn is_classification(&self) -> bool {
        self.task.kind == DistributionKind::GaussianBlobs
    }

    pub fn validate(&self) -> Result<()> {
        self.distribution().validate()?;
        self.meta_config().validate()?;
        self.model()?;
        if self.test_tasks < 2 {
            bail!("test_tasks must be at least 2 for a confidence interval");
        }
        if self.val_interval > 0 && self.val_tasks == 0 {
            bail!("validation is enabled but val_tasks is 0");
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        for (name, c) in &self.sweep.candidates {
            name.parse::<MetaMethod>()?;
            if c.len() < 2 || c.windows(2).any(|w| w[0] >= w[1]) {
                bail!("grid candidates for {name} must be ascending with at least 2 values");
            }
        }
        for name in self.sweep.betas.keys() {
            name.parse::<MetaMethod>()?;
        }
        Ok(())
    }
}
