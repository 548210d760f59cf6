use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rollout::{eval_threads, evaluate_domain, par_map, source_of, DomainEval};
use super::train::{eval_seeds, load_checkpoint};
use crate::blockmdp::DomainSplit;
use crate::diagnostics::Source;
use crate::error::{DarlError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub domains: Vec<DomainEval>,
    pub train_mean: Option<f64>,
    pub held_out_mean: Option<f64>,
    pub generalization_gap: Option<f64>,
}

/// Zero-shot eval-mode returns of a checkpoint on every domain of `split`.
pub fn run_eval(ckpt: &Path, split: &DomainSplit, episodes: usize) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(DarlError::Config("episodes must be positive".into()));
    }
    let (agent, cfg) = load_checkpoint(ckpt)?;
    if cfg.env.obs_shape()[0] != agent.in_channels() {
        return Err(DarlError::Config("checkpoint agent does not match its environment config".into()));
    }
    if split.n_train() != agent.n_domains() {
        return Err(DarlError::Config(format!(
            "split has {} training domains, checkpoint was trained on {}",
            split.n_train(),
            agent.n_domains()
        )));
    }
    let seeds = eval_seeds(cfg.run_seed, episodes);
    let domains: Vec<_> = split.all().cloned().collect();
    let evals = par_map(&domains, eval_threads()?, |d| {
        Ok(evaluate_domain(&agent, &cfg.env, d, source_of(split, d.domain_id), &seeds)?.0)
    })?;
    let mean_of = |pred: &dyn Fn(Source) -> bool| {
        let v: Vec<f64> = evals.iter().filter(|e| pred(e.source)).map(|e| e.mean).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let train_mean = mean_of(&|s| s == Source::Train);
    let held_out_mean = mean_of(&|s| s != Source::Train);
    Ok(EvalReport {
        episodes,
        generalization_gap: train_mean.zip(held_out_mean).map(|(a, b)| a - b),
        train_mean,
        held_out_mean,
        domains: evals,
    })
}
