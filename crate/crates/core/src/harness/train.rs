use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::rollout::{eval_threads, evaluate_domain, features_of, par_map, source_of, DomainEval};
use crate::agent::{ActionMode, Agent, LossReport};
use crate::blockmdp::{BlockEnv, DomainSplit};
use crate::diagnostics::{feature_mean_l2, generalization_gap, probe_accuracy, FeatureSet, Source};
use crate::diffcore::Checkpoint;
use crate::error::{DarlError, Result};
use crate::replay::{ReplayBuffer, Transition};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const CONFIG_FILE: &str = "config.json";
pub const SPLIT_FILE: &str = "split.json";
const EXPERIMENT_GROUP: &str = "experiment.config_json";

/// One evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub per_domain_return: BTreeMap<usize, f64>,
    pub train_return: f64,
    pub test_return: f64,
    pub video_return: f64,
    pub losses: LossReport,
    pub probe_accuracy: f64,
    /// Held-out domain → distance between its mean feature and the training domains' mean feature.
    pub feature_distances: BTreeMap<usize, f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub evaluations: usize,
    pub updates: u64,
    pub first_train_return: f64,
    /// Means over the final 10% of evaluations.
    pub final_train_return: f64,
    pub final_test_return: f64,
    pub final_video_return: f64,
    /// Mean over every held-out domain, test and video alike.
    pub final_held_out_return: f64,
    /// Final training-domain return minus final held-out return.
    pub generalization_gap: f64,
    pub update_wall_time_s: f64,
    pub wall_time_s: f64,
}

/// Stream `k` of a run's seed, so every consumer of randomness is independent.
pub fn stream_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

/// Episode seeds shared by every domain and every evaluation point of a run.
pub fn eval_seeds(run_seed: u64, n: usize) -> Vec<u64> {
    let mut r = stream_rng(run_seed, 13);
    (0..n).map(|_| r.gen()).collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub(crate) struct Evaluation {
    pub domains: Vec<DomainEval>,
    pub features: Vec<FeatureSet>,
}

pub(crate) fn evaluate_all(agent: &Agent, cfg: &ExperimentConfig, split: &DomainSplit, seeds: &[u64]) -> Result<Evaluation> {
    let domains: Vec<_> = split.all().cloned().collect();
    let results = par_map(&domains, eval_threads()?, |d| {
        let source = source_of(split, d.domain_id);
        let (ev, obs) = evaluate_domain(agent, &cfg.env, d, source, seeds)?;
        let feats = features_of(agent, &obs, d.domain_id, source)?;
        Ok((ev, feats))
    })?;
    let (domains, features) = results.into_iter().unzip();
    Ok(Evaluation { domains, features })
}

fn record(step: u64, eval: &Evaluation, losses: LossReport, probe_seed: u64, started: Instant) -> Result<MetricsRecord> {
    let by_source = |s: Source| -> Vec<f64> { eval.domains.iter().filter(|d| d.source == s).map(|d| d.mean).collect() };
    let train_sets: Vec<FeatureSet> = eval.features.iter().filter(|f| f.source == Source::Train).cloned().collect();
    let pooled = FeatureSet::pool(&train_sets.iter().collect::<Vec<_>>())?;
    let mut feature_distances = BTreeMap::new();
    for f in eval.features.iter().filter(|f| f.source != Source::Train) {
        feature_distances.insert(f.domain_id, feature_mean_l2(f, &pooled)?);
    }
    Ok(MetricsRecord {
        step,
        per_domain_return: eval.domains.iter().map(|d| (d.domain_id, d.mean)).collect(),
        train_return: mean(&by_source(Source::Train)),
        test_return: mean(&by_source(Source::Test)),
        video_return: mean(&by_source(Source::Video)),
        losses,
        probe_accuracy: probe_accuracy(&train_sets, probe_seed)?,
        feature_distances,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

fn writable_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| DarlError::Io(std::io::Error::new(e.kind(), format!("cannot create {}: {e}", out.display()))))?;
    let probe = out.join(".write_test");
    File::create(&probe).map_err(|e| DarlError::Io(std::io::Error::new(e.kind(), format!("{} is not writable: {e}", out.display()))))?;
    std::fs::remove_file(probe)?;
    Ok(())
}

/// Full training run. Writes the resolved config, the split, metrics as JSON
/// lines (one per evaluation, flushed as written), a summary, and a final checkpoint.
pub fn run_train(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<TrainSummary> {
    let mut cfg = cfg.clone();
    cfg.run_seed = seed;
    cfg.out_dir = Some(PathBuf::from(out));
    cfg.validate()?;
    writable_dir(out)?;
    std::fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(&cfg)?)?;
    let split = cfg.domain_split()?;
    split.save(&out.join(SPLIT_FILE))?;

    let started = Instant::now();
    let n_train = split.n_train();
    let obs_shape = cfg.env.obs_shape();
    let mut agent = Agent::new(cfg.train_cfg.clone(), obs_shape[0], n_train, seed)?;
    let mut replay = ReplayBuffer::new(cfg.replay_capacity, n_train)?;
    let mut rng = stream_rng(seed, 11);
    let mut episode_seeds = stream_rng(seed, 12);
    let seeds = eval_seeds(seed, cfg.eval_episodes);
    let mut envs = split
        .train
        .iter()
        .map(|d| BlockEnv::new(cfg.env.clone(), d.clone()))
        .collect::<Result<Vec<_>>>()?;

    let mut metrics = File::create(out.join(METRICS_FILE))?;
    let mut records = Vec::new();
    let repeat = cfg.env.action_repeat as u64;
    let total_agent_steps = cfg.total_env_steps / repeat;
    let crop = cfg.train_cfg.arch.crop_hw;
    let mut losses = LossReport::default();
    let mut update_time = 0.0;

    let mut episode = 0usize;
    let mut dom = 0usize;
    let mut obs = envs[dom].reset(episode_seeds.gen());
    for t in 0..=total_agent_steps {
        let env_step = t * repeat;
        if env_step.is_multiple_of(cfg.eval_every) {
            losses.lambda_now = crate::agent::lambda_schedule(env_step, cfg.train_cfg.lambda_ramp_steps);
            let eval = evaluate_all(&agent, &cfg, &split, &seeds)?;
            let rec = record(env_step, &eval, losses, cfg.diag.probe_seed, started)?;
            writeln!(metrics, "{}", serde_json::to_string(&rec)?)?;
            metrics.flush()?;
            eprintln!(
                "step {env_step:>7}  train {:8.2}  test {:8.2}  video {:8.2}  probe {:.3}  l_q {:.4}  l_d {:.4}",
                rec.train_return, rec.test_return, rec.video_return, rec.probe_accuracy, losses.l_q, losses.l_d
            );
            records.push(rec);
        }
        if t == total_agent_steps {
            break;
        }
        let action = if t < cfg.initial_steps {
            [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]
        } else {
            let a = agent.select_action(&obs, ActionMode::Sample)?;
            [a[0], a[1]]
        };
        let outcome = envs[dom].step(action)?;
        replay.add(Transition {
            obs: obs.clone(),
            action,
            reward: outcome.reward,
            next_obs: outcome.obs.clone(),
            done: outcome.done,
            domain_id: dom,
        })?;
        obs = outcome.obs;
        if outcome.done {
            episode += 1;
            dom = episode % n_train;
            obs = envs[dom].reset(episode_seeds.gen());
        }
        if t >= cfg.initial_steps {
            let batch = replay.sample(cfg.train_cfg.batch_size, crop, cfg.train_cfg.shared_crop, &mut rng)?;
            let tick = Instant::now();
            losses = agent.update(&batch, env_step + repeat)?;
            update_time += tick.elapsed().as_secs_f64();
        }
    }

    let mut ck = agent.to_checkpoint()?;
    push_experiment(&mut ck, &cfg)?;
    ck.save(&out.join(CHECKPOINT_FILE))?;

    let summary = summarize(&records, n_train, agent.updates(), update_time, started.elapsed().as_secs_f64())?;
    std::fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Number of trailing evaluations that make up the final 10%.
pub fn final_window(n: usize) -> usize {
    ((n as f64 * 0.1).round() as usize).clamp(1, n.max(1))
}

/// Mean return over the held-out domains of one record.
pub fn held_out_return(rec: &MetricsRecord, n_train: usize) -> f64 {
    mean(
        &rec.per_domain_return
            .iter()
            .filter(|(&d, _)| d >= n_train)
            .map(|(_, &r)| r)
            .collect::<Vec<f64>>(),
    )
}

pub fn summarize(
    records: &[MetricsRecord],
    n_train: usize,
    updates: u64,
    update_wall_time_s: f64,
    wall_time_s: f64,
) -> Result<TrainSummary> {
    let first = records
        .first()
        .ok_or(DarlError::InsufficientData("no evaluations recorded".into()))?;
    let tail = &records[records.len() - final_window(records.len())..];
    let pick = |f: &dyn Fn(&MetricsRecord) -> f64| tail.iter().map(f).collect::<Vec<f64>>();
    let train = pick(&|r| r.train_return);
    let held_out = pick(&|r| held_out_return(r, n_train));
    Ok(TrainSummary {
        evaluations: records.len(),
        updates,
        first_train_return: first.train_return,
        final_train_return: mean(&train),
        final_test_return: mean(&pick(&|r| r.test_return)),
        final_video_return: mean(&pick(&|r| r.video_return)),
        final_held_out_return: mean(&held_out),
        generalization_gap: generalization_gap(&train, &held_out)?,
        update_wall_time_s,
        wall_time_s,
    })
}

/// Stores `cfg` in the checkpoint. The output directory is left out so that
/// identical runs written to different places produce identical checkpoints.
pub fn push_experiment(ck: &mut Checkpoint, cfg: &ExperimentConfig) -> Result<()> {
    let cfg = ExperimentConfig {
        out_dir: None,
        ..cfg.clone()
    };
    let bytes: Vec<f64> = serde_json::to_vec(&cfg)?.into_iter().map(f64::from).collect();
    ck.push(EXPERIMENT_GROUP, &[bytes.len()], &bytes)
}

/// Agent and experiment config from a training checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(Agent, ExperimentConfig)> {
    let ck = Checkpoint::load(path)?;
    let agent = Agent::from_checkpoint(&ck)?;
    let bytes: Vec<u8> = ck.get(EXPERIMENT_GROUP)?.data.iter().map(|&b| b as u8).collect();
    let cfg: ExperimentConfig = serde_json::from_slice(&bytes)?;
    Ok((agent, cfg))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
