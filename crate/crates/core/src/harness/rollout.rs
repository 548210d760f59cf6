use serde::{Deserialize, Serialize};

use crate::agent::{ActionMode, Agent};
use crate::blockmdp::{BlockEnv, DomainSpec, EnvConfig, Observation};
use crate::diagnostics::{FeatureSet, Source};
use crate::error::{DarlError, Result};

/// Caps parallel evaluation contexts: `DARL_THREADS` if set, else the core count.
pub fn eval_threads() -> Result<usize> {
    match std::env::var("DARL_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(DarlError::Config(format!("DARL_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs `f` over `items` on up to `threads` scoped threads. Results keep input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation thread panicked")?);
        }
        Ok(out)
    })
}

pub fn source_of(split: &crate::blockmdp::DomainSplit, domain_id: usize) -> Source {
    if split.train.iter().any(|d| d.domain_id == domain_id) {
        Source::Train
    } else if split.test.iter().any(|d| d.domain_id == domain_id) {
        Source::Test
    } else {
        Source::Video
    }
}

/// One eval-mode episode; returns the episodic return and every observation seen.
pub fn run_episode(agent: &mut Agent, env: &mut BlockEnv, seed: u64, keep_obs: bool) -> Result<(f64, Vec<Observation>)> {
    let mut obs = env.reset(seed);
    let mut seen = Vec::new();
    let mut ret = 0.0;
    loop {
        let a = agent.select_action(&obs, ActionMode::Eval)?;
        let out = env.step([a[0], a[1]])?;
        ret += out.reward;
        if keep_obs {
            seen.push(std::mem::replace(&mut obs, out.obs));
        } else {
            obs = out.obs;
        }
        if out.done {
            break;
        }
    }
    if keep_obs {
        seen.push(obs);
    }
    Ok((ret, seen))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEval {
    pub domain_id: usize,
    pub source: Source,
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

/// Eval-mode returns on one domain over `seeds`, plus observations of the first episode.
pub fn evaluate_domain(
    agent: &Agent,
    env_cfg: &EnvConfig,
    domain: &DomainSpec,
    source: Source,
    seeds: &[u64],
) -> Result<(DomainEval, Vec<Observation>)> {
    let mut agent = agent.clone();
    let mut env = BlockEnv::new(env_cfg.clone(), domain.clone())?;
    let mut returns = Vec::with_capacity(seeds.len());
    let mut first = Vec::new();
    for (k, &seed) in seeds.iter().enumerate() {
        let (r, obs) = run_episode(&mut agent, &mut env, seed, k == 0)?;
        returns.push(r);
        if k == 0 {
            first = obs;
        }
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok((
        DomainEval {
            domain_id: domain.domain_id,
            source,
            mean,
            std,
            returns,
        },
        first,
    ))
}

/// Encoder features of center-cropped observations, encoded in chunks.
pub fn features_of(agent: &Agent, obs: &[Observation], domain_id: usize, source: Source) -> Result<FeatureSet> {
    let crop = agent.config().arch.crop_hw;
    let mut feats = Vec::new();
    for chunk in obs.chunks(64) {
        let pixels: Vec<f64> = chunk.iter().flat_map(|o| crate::replay::center_crop(o, crop)).collect();
        feats.extend(agent.encode_pixels(&pixels, chunk.len())?);
    }
    FeatureSet::new(feats, agent.config().arch.z_dim, domain_id, source)
}

/// At least `n_obs` eval-policy observations from `domain`, truncated to exactly `n_obs`.
pub fn collect_observations(
    agent: &Agent,
    env_cfg: &EnvConfig,
    domain: &DomainSpec,
    seeds: impl IntoIterator<Item = u64>,
    n_obs: usize,
) -> Result<Vec<Observation>> {
    let mut agent = agent.clone();
    let mut env = BlockEnv::new(env_cfg.clone(), domain.clone())?;
    let mut all = Vec::with_capacity(n_obs);
    for seed in seeds {
        if all.len() >= n_obs {
            break;
        }
        all.extend(run_episode(&mut agent, &mut env, seed, true)?.1);
    }
    if all.len() < n_obs {
        return Err(DarlError::InsufficientData(format!(
            "collected {} of {n_obs} observations",
            all.len()
        )));
    }
    all.truncate(n_obs);
    Ok(all)
}
