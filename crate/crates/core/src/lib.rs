//! Reverse-mode autodiff with second-order support, MLP models, few-shot
//! task samplers and bilevel meta-learning solvers: MAML (explicit Hessian
//! product or differentiated unroll), first-order MAML, and Sign-MAML.

pub mod autodiff;
pub mod error;
pub mod meta;
pub mod models;
pub mod oracle;
pub mod tasks;

pub use autodiff::{backward, hvp, ParamVector, Tape, Tensor};
pub use error::{Error, Result};
pub use meta::{
    meta_step, meta_step_on, InnerKind, InnerOptimizer, MetaConfig, MetaGradient, MetaMethod, ModelTask,
    Objective,
};
pub use models::{init_params, LossKind, MlpSpec, Targets};
pub use tasks::{sample_episode, sample_task, EpisodeStream, StreamKey, Task, TaskDistribution};
