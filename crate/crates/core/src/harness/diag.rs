use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plot::scatter_svg;
use super::rollout::{collect_observations, eval_threads, features_of, par_map, source_of};
use super::train::{eval_seeds, load_checkpoint};
use crate::blockmdp::{EnvConfig, Observation};
use crate::diagnostics::{
    feature_mean_l2, probe_accuracy, tsne_embed, video_dissimilarity, write_embedding_csv, EmbeddingRow, FeatureSet, Source,
};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDistance {
    pub domain_id: usize,
    pub source: Source,
    pub feature_l2: f64,
    pub video_dissimilarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagReport {
    pub observations_per_domain: usize,
    pub probe_accuracy: f64,
    pub chance: f64,
    pub distances: Vec<DomainDistance>,
}

pub const EMBEDDING_CSV: &str = "embedding.csv";
pub const DISTANCES_CSV: &str = "distances.csv";
pub const EMBEDDING_SVG: &str = "embedding.svg";
pub const DIAG_JSON: &str = "diag.json";

/// Newest frame of each observation, flattened to `[0, 1]` values.
fn raw_frames(obs: &[Observation]) -> Vec<Vec<f64>> {
    obs.iter().map(|o| o.newest().iter().map(|&p| p as f64 / 255.0).collect()).collect()
}

/// Collects eval-policy episodes on every domain, then writes the joint feature
/// embedding, per-domain distances, probe accuracy, and a scatter plot.
pub fn run_diag(ckpt: &Path, out: &Path) -> Result<DiagReport> {
    let (agent, cfg) = load_checkpoint(ckpt)?;
    std::fs::create_dir_all(out)?;
    let split = cfg.domain_split()?;
    let n_obs = cfg.diag.episodes * (cfg.env.episode_len + 1);
    let seeds = eval_seeds(cfg.run_seed, cfg.diag.episodes);
    let domains: Vec<_> = split.all().cloned().collect();
    let env: &EnvConfig = &cfg.env;
    let collected = par_map(&domains, eval_threads()?, |d| {
        let obs = collect_observations(&agent, env, d, seeds.iter().copied(), n_obs)?;
        let feats = features_of(&agent, &obs, d.domain_id, source_of(&split, d.domain_id))?;
        Ok((raw_frames(&obs), feats))
    })?;
    let (frames, features): (Vec<Vec<Vec<f64>>>, Vec<FeatureSet>) = collected.into_iter().unzip();

    let dim = features[0].dim;
    let all: Vec<f64> = features.iter().flat_map(|f| f.features.iter().copied()).collect();
    let n = all.len() / dim;
    let emb = tsne_embed(&all, n, dim, &cfg.diag.embedding)?;
    let mut rows = Vec::with_capacity(n);
    let mut point = 0;
    for f in &features {
        for _ in 0..f.len() {
            rows.push(EmbeddingRow {
                point_id: point,
                domain_id: f.domain_id,
                source: f.source,
                x: emb.points[point][0],
                y: emb.points[point][1],
            });
            point += 1;
        }
    }
    write_embedding_csv(&out.join(EMBEDDING_CSV), &rows)?;
    std::fs::write(out.join(EMBEDDING_SVG), scatter_svg("encoder features (t-SNE)", &rows))?;

    let train_idx: Vec<usize> = (0..features.len()).filter(|&i| features[i].source == Source::Train).collect();
    let train_sets: Vec<FeatureSet> = train_idx.iter().map(|&i| features[i].clone()).collect();
    let pooled = FeatureSet::pool(&train_sets.iter().collect::<Vec<_>>())?;
    let train_frames: Vec<Vec<f64>> = train_idx.iter().flat_map(|&i| frames[i].clone()).collect();
    let mut distances = Vec::new();
    for (f, fr) in features.iter().zip(&frames).filter(|(f, _)| f.source != Source::Train) {
        distances.push(DomainDistance {
            domain_id: f.domain_id,
            source: f.source,
            feature_l2: feature_mean_l2(f, &pooled)?,
            video_dissimilarity: video_dissimilarity(fr, &train_frames, &cfg.diag.embedding)?.distance,
        });
    }
    let mut w = csv::Writer::from_path(out.join(DISTANCES_CSV))?;
    for d in &distances {
        w.serialize(d)?;
    }
    w.flush()?;

    let report = DiagReport {
        observations_per_domain: n_obs,
        probe_accuracy: probe_accuracy(&train_sets, cfg.diag.probe_seed)?,
        chance: 1.0 / train_sets.len() as f64,
        distances,
    };
    std::fs::write(out.join(DIAG_JSON), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
