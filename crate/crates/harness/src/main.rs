use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use signmaml::oracle::{run_suite, SuiteConfig, VerificationReport};
use signmaml::{init_params, MetaMethod};
use signmaml_harness::output::{self, ResultRow};
use signmaml_harness::sweep::{self, Axis};
use signmaml_harness::{checkpoint, grid, run, ExperimentConfig};

#[derive(Parser)]
#[command(name = "signmaml", version, about = "Meta-training and evaluation of MAML, FO-MAML and Sign-MAML")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train, checkpoint, then evaluate on test tasks.
    Train(Common),
    /// Evaluate a checkpoint (or the untrained initialization) on test tasks.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Choose the inner learning rate by validation accuracy.
    GridSearch {
        #[command(flatten)]
        common: Common,
        /// Ascending candidate rates; defaults depend on the method.
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<f64>,
    },
    /// Train and evaluate over a list of ways, shots or inner-step counts.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// way, shot or steps
        #[arg(long)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        methods: Vec<MetaMethod>,
    },
    /// Run the oracle checks and print the verification report.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Far fewer instances; for smoke tests.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config file plus per-field overrides.
#[derive(Args)]
struct Common {
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    method: Option<MetaMethod>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    m_train: Option<usize>,
    #[arg(long)]
    m_test: Option<usize>,
    #[arg(long)]
    meta_batch: Option<usize>,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long)]
    query: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    val_interval: Option<usize>,
    #[arg(long)]
    val_tasks: Option<usize>,
    #[arg(long)]
    test_tasks: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

macro_rules! set {
    ($src:expr => $dst:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl Common {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = self.method {
            c = c.with_method(m);
        }
        set!(self.seed => c.seed);
        set!(self.iterations => c.iterations);
        set!(self.alpha => c.meta.alpha);
        set!(self.beta => c.meta.beta);
        set!(self.m_train => c.meta.m_train);
        set!(self.m_test => c.meta.m_test);
        set!(self.meta_batch => c.meta.meta_batch);
        set!(self.way => c.task.way);
        set!(self.shot => c.task.shot);
        set!(self.query => c.task.query);
        set!(self.dim => c.task.dim);
        set!(self.separation => c.task.separation);
        set!(self.noise => c.task.noise);
        set!(self.hidden => c.model.hidden);
        set!(self.val_interval => c.val_interval);
        set!(self.val_tasks => c.val_tasks);
        set!(self.test_tasks => c.test_tasks);
        set!(self.workers => c.workers);
        set!(self.warmup => c.warmup);
        set!(self.out_dir => c.out_dir);
        c.validate()?;
        Ok(c)
    }
}

fn default_candidates(method: MetaMethod) -> Vec<f64> {
    match method {
        MetaMethod::SignMaml => vec![0.0035, 0.005, 0.0065, 0.0075, 0.01],
        _ => vec![0.06, 0.08, 0.1, 0.12, 0.14, 0.16],
    }
}

fn verify(seed: u64, quick: bool, out: Option<PathBuf>) -> Result<bool> {
    let cfg = if quick { SuiteConfig::quick(seed) } else { SuiteConfig::full(seed) };
    let report = run_suite(&cfg)?;
    print!("{report}");
    if let Some(path) = out {
        std::fs::write(&path, report.to_string()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(report_passes(&report))
}

fn report_passes(r: &VerificationReport) -> bool {
    let get = |k: &str| r.get_f64(k).unwrap_or(f64::INFINITY);
    get("collapse.max_rel_dev") < 1e-12
        && get("equivalence.max_rel_err") < 1e-8
        && get("fd.max_rel_err") < 1e-4
        && get("quadratic.max_rel_err") < 1e-10
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let (_, s) = output::run_experiment(&cfg, &cfg.out_dir)?;
            println!(
                "{} {} = {:.4} ± {:.4}; {:.5} ± {:.5} s per meta-iteration ({} timed)",
                s.method, s.metric, s.accuracy, s.ci95, s.time_mean_s, s.time_std_s, s.timed_iterations
            );
            println!("outputs in {}", cfg.out_dir.display());
        }
        Command::Eval { common, checkpoint: ck } => {
            let cfg = common.resolve()?;
            let params = match &ck {
                Some(p) => checkpoint::load(p)?,
                None => init_params(&cfg.model()?, cfg.seed),
            };
            let eval = run::evaluate(&params, &cfg)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            output::write_task_scores(&cfg.out_dir.join("tasks.csv"), &eval)?;
            let row = ResultRow {
                accuracy: Some(eval.mean),
                ci95: Some(eval.ci95),
                ..ResultRow::empty(&cfg)
            };
            output::write_results(&cfg.out_dir.join("results.csv"), &[row])?;
            println!("{} {} = {:.4} ± {:.4} over {} tasks", eval.method, eval.metric, eval.mean, eval.ci95, eval.tasks.len());
        }
        Command::GridSearch { common, candidates } => {
            let cfg = common.resolve()?;
            let method = cfg.meta.method;
            let candidates = if !candidates.is_empty() {
                candidates
            } else if let Some(c) = cfg.sweep.candidates.get(method.name()) {
                c.clone()
            } else {
                default_candidates(method)
            };
            let result = grid::grid_search_beta(&cfg, method, &candidates)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let mut w = csv::Writer::from_path(cfg.out_dir.join("grid.csv"))?;
            w.write_record(["beta", "val_score"])?;
            for (b, s) in &result.log {
                w.write_record([b.to_string(), s.to_string()])?;
            }
            w.flush()?;
            output::write_json(&cfg.out_dir.join("grid.json"), &result)?;
            if result.capped {
                eprintln!("warning: best rate still on the grid boundary after {} extensions", result.extensions);
            }
            println!("{method}: beta = {} (validation score {:.4})", result.best_beta, result.best_score);
        }
        Command::Sweep {
            common,
            axis,
            values,
            methods,
        } => {
            let cfg = common.resolve()?;
            let methods = if methods.is_empty() { sweep::default_methods(&cfg) } else { methods };
            let cells = sweep::sweep(&cfg, axis, &values, &methods, &cfg.out_dir)?;
            sweep::write_sweep(&cfg.out_dir.join("sweep.csv"), axis, &cells)?;
            for c in &cells {
                match &c.error {
                    Some(e) => eprintln!("{}={} {}: failed: {e}", axis.name(), c.value, c.row.method),
                    None => println!(
                        "{}={} {}: {:.4} ± {:.4}",
                        axis.name(),
                        c.value,
                        c.row.method,
                        c.row.accuracy.unwrap_or(f64::NAN),
                        c.row.ci95.unwrap_or(f64::NAN)
                    ),
                }
            }
        }
        Command::Verify { seed, quick, out } => return verify(seed, quick, out),
    }
    Ok(true)
}
