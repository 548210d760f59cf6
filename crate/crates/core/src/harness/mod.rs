//! Experiment orchestration: configuration, training runs, evaluation,
//! diagnostics bundles, and plots.

pub mod config;
pub mod diag;
pub mod eval;
pub mod plot;
pub mod rollout;
pub mod train;

pub use config::{DiagConfig, ExperimentConfig, SplitConfig};
pub use diag::{run_diag, DiagReport, DomainDistance};
pub use eval::{run_eval, EvalReport};
pub use plot::{aggregate, curves_svg, emit_plots, scatter_svg, Curve};
pub use rollout::{collect_observations, eval_threads, evaluate_domain, features_of, DomainEval};
pub use train::{load_checkpoint, read_metrics, run_train, MetricsRecord, TrainSummary};
