use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DarlError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Stripes,
    Checker,
    Gradient,
    NoiseTile,
    BouncingBalls,
    DriftingNoise,
}

impl DomainKind {
    pub const STATIONARY: [DomainKind; 4] = [
        DomainKind::Stripes,
        DomainKind::Checker,
        DomainKind::Gradient,
        DomainKind::NoiseTile,
    ];
    pub const NON_STATIONARY: [DomainKind; 2] = [DomainKind::BouncingBalls, DomainKind::DriftingNoise];

    pub fn is_stationary(self) -> bool {
        !matches!(self, DomainKind::BouncingBalls | DomainKind::DriftingNoise)
    }
}

/// Motion knobs of a non-stationary background, in pixels per environment step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub speed: f64,
    pub ball_radius: f64,
    pub ball_count: usize,
}

/// One visual domain: an emission function over the shared latent task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub kind: DomainKind,
    pub palette_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<MotionParams>,
}

impl DomainSpec {
    pub fn stationary(domain_id: usize, kind: DomainKind, palette_seed: u64) -> Self {
        Self {
            domain_id,
            kind,
            palette_seed,
            motion: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind.is_stationary(), &self.motion) {
            (true, Some(_)) => Err(DarlError::Config(format!(
                "domain {} ({:?}) is stationary but has motion params",
                self.domain_id, self.kind
            ))),
            (false, None) => Err(DarlError::Config(format!(
                "domain {} ({:?}) needs motion params",
                self.domain_id, self.kind
            ))),
            (false, Some(m)) if m.ball_radius <= 0.0 || !m.speed.is_finite() => {
                Err(DarlError::Config(format!("domain {}: invalid motion params {m:?}", self.domain_id)))
            }
            _ => Ok(()),
        }
    }
}

/// Training domains, held-out stationary domains, and held-out moving-distractor domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub train: Vec<DomainSpec>,
    pub test: Vec<DomainSpec>,
    #[serde(default)]
    pub video: Vec<DomainSpec>,
}

impl DomainSplit {
    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    /// Every domain in label order.
    pub fn all(&self) -> impl Iterator<Item = &DomainSpec> {
        self.train.iter().chain(&self.test).chain(&self.video)
    }

    pub fn held_out(&self) -> impl Iterator<Item = &DomainSpec> {
        self.test.iter().chain(&self.video)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.len() < 2 {
            return Err(DarlError::Config(format!(
                "need at least 2 training domains, got {}",
                self.train.len()
            )));
        }
        let mut ids = HashSet::new();
        let mut looks = HashSet::new();
        for d in self.all() {
            d.validate()?;
            if !ids.insert(d.domain_id) {
                return Err(DarlError::Config(format!("duplicate domain id {}", d.domain_id)));
            }
            if !looks.insert((d.kind, d.palette_seed)) {
                return Err(DarlError::Config(format!(
                    "domain {} duplicates another domain's kind and palette",
                    d.domain_id
                )));
            }
        }
        for (i, d) in self.train.iter().enumerate() {
            if d.domain_id != i {
                return Err(DarlError::Config(format!(
                    "training domain at position {i} has label {}",
                    d.domain_id
                )));
            }
        }
        let train_seeds: HashSet<u64> = self.train.iter().map(|d| d.palette_seed).collect();
        if let Some(d) = self.held_out().find(|d| train_seeds.contains(&d.palette_seed)) {
            return Err(DarlError::Config(format!(
                "held-out domain {} reuses a training palette seed",
                d.domain_id
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let split: DomainSplit = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        split.validate()?;
        Ok(split)
    }
}

/// Draws `n_train` training and `n_test` held-out stationary domains plus one
/// held-out domain per non-stationary kind. Training labels are `0..n_train`;
/// held-out domains continue the numbering.
pub fn make_domain_split(n_train: usize, n_test: usize, seed: u64) -> Result<DomainSplit> {
    if n_train < 2 {
        return Err(DarlError::Config(format!("n_train must be >= 2, got {n_train}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let mut fresh_seed = |rng: &mut ChaCha8Rng| loop {
        let s: u64 = rng.gen();
        if used.insert(s) {
            break s;
        }
    };
    let kinds = DomainKind::STATIONARY;
    let train = (0..n_train)
        .map(|i| DomainSpec::stationary(i, kinds[i % kinds.len()], fresh_seed(&mut rng)))
        .collect();
    let test = (0..n_test)
        .map(|j| DomainSpec::stationary(n_train + j, kinds[j % kinds.len()], fresh_seed(&mut rng)))
        .collect();
    let video = DomainKind::NON_STATIONARY
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            let palette_seed = fresh_seed(&mut rng);
            let motion = match kind {
                DomainKind::BouncingBalls => MotionParams {
                    speed: rng.gen_range(0.8..1.6),
                    ball_radius: rng.gen_range(2.5..4.0),
                    ball_count: 4,
                },
                _ => MotionParams {
                    speed: rng.gen_range(0.4..0.8),
                    ball_radius: 1.0,
                    ball_count: 0,
                },
            };
            DomainSpec {
                domain_id: n_train + n_test + k,
                kind,
                palette_seed,
                motion: Some(motion),
            }
        })
        .collect();
    let split = DomainSplit { train, test, video };
    split.validate()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_cardinality() {
        let s = make_domain_split(4, 2, 7).unwrap();
        assert_eq!(s.train.len(), 4);
        assert_eq!(s.test.len(), 2);
        assert_eq!(s.video.len(), 2);
        assert_eq!(s.train.iter().map(|d| d.domain_id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(s.train.iter().chain(&s.test).all(|d| d.kind.is_stationary()));
        assert!(s.video.iter().all(|d| !d.kind.is_stationary()));
        assert!(s.video.iter().any(|d| d.kind == DomainKind::BouncingBalls));
    }

    #[test]
    fn split_is_deterministic() {
        assert_eq!(make_domain_split(4, 2, 11).unwrap(), make_domain_split(4, 2, 11).unwrap());
        assert_ne!(make_domain_split(4, 2, 11).unwrap(), make_domain_split(4, 2, 12).unwrap());
    }

    #[test]
    fn too_few_training_domains() {
        assert!(matches!(make_domain_split(1, 2, 0), Err(DarlError::Config(_))));
    }

    #[test]
    fn train_and_held_out_palettes_are_disjoint() {
        for seed in 0..100 {
            let s = make_domain_split(4, 2, seed).unwrap();
            let train: HashSet<u64> = s.train.iter().map(|d| d.palette_seed).collect();
            assert!(s.held_out().all(|d| !train.contains(&d.palette_seed)));
        }
    }

    #[test]
    fn json_round_trip() {
        let s = make_domain_split(4, 2, 3).unwrap();
        let back: DomainSplit = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
