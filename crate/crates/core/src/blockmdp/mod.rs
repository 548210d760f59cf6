//! Pixel block MDP: one point-mass goal-reaching task rendered through
//! per-domain backgrounds.
//!
//! Every domain shares the latent state, dynamics, and reward. Only the
//! emission differs, so for a fixed seed and action sequence the latent
//! trajectory and rewards are identical across domains.

pub mod domain;
pub mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use domain::{make_domain_split, DomainKind, DomainSpec, DomainSplit, MotionParams};
pub use render::{render_background, save_png, Background, FrameGeom};

use crate::error::{DarlError, Result};

pub const FRAME_STACK: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub render_hw: usize,
    pub channels: usize,
    pub action_repeat: usize,
    /// Episode length in agent steps.
    pub episode_len: usize,
    pub gamma: f64,
    pub reward_sigma: f64,
    pub dt: f64,
    pub damping: f64,
    pub v_max: f64,
    /// Initial position and goal are drawn uniformly from `[-init_extent, init_extent]²`.
    pub init_extent: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            render_hw: 40,
            channels: 3,
            action_repeat: 2,
            episode_len: 125,
            gamma: 0.99,
            reward_sigma: 0.4,
            dt: 0.1,
            damping: 0.9,
            v_max: 1.0,
            init_extent: 1.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DarlError::Config(m));
        if self.render_hw < 8 {
            return bad(format!("render_hw {} too small", self.render_hw));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.action_repeat == 0 || self.episode_len == 0 {
            return bad("action_repeat and episode_len must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if !(self.reward_sigma > 0.0 && self.dt > 0.0 && self.v_max > 0.0) {
            return bad("reward_sigma, dt and v_max must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.damping) || !(0.0..=1.0).contains(&self.init_extent) {
            return bad("damping and init_extent must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn geom(&self) -> FrameGeom {
        FrameGeom {
            channels: self.channels,
            height: self.render_hw,
            width: self.render_hw,
        }
    }

    /// Shape of a stacked observation: `[3·C, H, W]`.
    pub fn obs_shape(&self) -> [usize; 3] {
        [FRAME_STACK * self.channels, self.render_hw, self.render_hw]
    }

    pub fn env_steps_per_episode(&self) -> usize {
        self.episode_len * self.action_repeat
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub goal: [f64; 2],
    /// Environment (inner) steps since reset.
    pub t: u64,
}

/// Stack of the three most recent frames, oldest first, stored as 8-bit
/// pixels. Pixel value `k` stands for `k / 255`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub frames: Vec<u8>,
    pub shape: [usize; 3],
    pub domain_id: usize,
}

impl Observation {
    pub fn to_f64(&self) -> Vec<f64> {
        self.frames.iter().map(|&p| p as f64 / 255.0).collect()
    }

    /// The newest frame of the stack.
    pub fn newest(&self) -> &[u8] {
        let frame = self.frames.len() / FRAME_STACK;
        &self.frames[self.frames.len() - frame..]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

/// One environment instance bound to a single domain.
#[derive(Clone, Debug)]
pub struct BlockEnv {
    cfg: EnvConfig,
    domain: DomainSpec,
    background: Background,
    state: LatentState,
    stack: Vec<Vec<u8>>,
    agent_steps: usize,
    active: bool,
}

impl BlockEnv {
    pub fn new(cfg: EnvConfig, domain: DomainSpec) -> Result<Self> {
        cfg.validate()?;
        domain.validate()?;
        let background = Background::new(&domain, cfg.geom());
        Ok(Self {
            cfg,
            domain,
            background,
            state: LatentState {
                position: [0.0; 2],
                velocity: [0.0; 2],
                goal: [0.0; 2],
                t: 0,
            },
            stack: Vec::new(),
            agent_steps: 0,
            active: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }

    /// Overrides the latent state (tests and scripted probes).
    pub fn set_state(&mut self, state: LatentState) {
        self.state = state;
    }

    pub fn is_done(&self) -> bool {
        !self.active
    }

    /// Starts an episode. The initial latent state depends on `seed` only,
    /// never on the domain.
    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = self.cfg.init_extent;
        let mut draw = || [rng.gen_range(-e..=e), rng.gen_range(-e..=e)];
        let position = draw();
        let goal = draw();
        self.state = LatentState {
            position,
            velocity: [0.0; 2],
            goal,
            t: 0,
        };
        self.agent_steps = 0;
        self.active = true;
        let frame = self.render();
        self.stack = vec![frame; FRAME_STACK];
        self.observation()
    }

    /// Renders the current latent state through this domain's emission.
    pub fn render(&self) -> Vec<u8> {
        let mut frame = self.background.render(self.state.t);
        render::draw_markers(&mut frame, self.cfg.geom(), self.state.position, self.state.goal);
        frame
    }

    fn observation(&self) -> Observation {
        Observation {
            frames: self.stack.concat(),
            shape: self.cfg.obs_shape(),
            domain_id: self.domain.domain_id,
        }
    }

    pub fn inner_reward(&self) -> f64 {
        let s = &self.state;
        let d2 = (s.position[0] - s.goal[0]).powi(2) + (s.position[1] - s.goal[1]).powi(2);
        (-d2 / (self.cfg.reward_sigma * self.cfg.reward_sigma)).exp()
    }

    /// Applies `action` for `action_repeat` inner steps and returns the summed reward.
    pub fn step(&mut self, action: [f64; 2]) -> Result<StepOutcome> {
        if !self.active {
            return Err(DarlError::Contract("step called on a finished or unreset episode".into()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(DarlError::Contract(format!("non-finite action {action:?}")));
        }
        let a = action.map(|x| x.clamp(-1.0, 1.0));
        let EnvConfig { dt, damping, v_max, .. } = self.cfg;
        let mut reward = 0.0;
        for _ in 0..self.cfg.action_repeat {
            let s = &mut self.state;
            for i in 0..2 {
                s.velocity[i] = (damping * s.velocity[i] + dt * a[i]).clamp(-v_max, v_max);
                s.position[i] = (s.position[i] + dt * s.velocity[i]).clamp(-1.0, 1.0);
            }
            s.t += 1;
            reward += self.inner_reward();
        }
        self.agent_steps += 1;
        let done = self.agent_steps >= self.cfg.episode_len;
        if done {
            self.active = false;
        }
        let frame = self.render();
        self.stack.remove(0);
        self.stack.push(frame);
        Ok(StepOutcome {
            obs: self.observation(),
            reward,
            done,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(kind: DomainKind, seed: u64) -> BlockEnv {
        BlockEnv::new(EnvConfig::default(), DomainSpec::stationary(0, kind, seed)).unwrap()
    }

    #[test]
    fn reset_is_deterministic_and_well_formed() {
        let mut e = env(DomainKind::Stripes, 1);
        let a = e.reset(42);
        let b = e.reset(42);
        assert_eq!(a, b);
        assert_eq!(a.shape, [9, 40, 40]);
        assert_eq!(a.frames.len(), 9 * 40 * 40);
        assert!(a.to_f64().iter().all(|v| (0.0..=1.0).contains(v)));
        let f = 3 * 40 * 40;
        assert_eq!(a.frames[..f], a.frames[f..2 * f]);
        assert_eq!(a.frames[..f], a.frames[2 * f..]);
    }

    #[test]
    fn domains_share_latent_state() {
        let mut e1 = env(DomainKind::Stripes, 1);
        let mut e2 = env(DomainKind::NoiseTile, 2);
        let o1 = e1.reset(9);
        let o2 = e2.reset(9);
        assert_eq!(e1.state(), e2.state());
        assert_ne!(o1.frames, o2.frames);
    }

    #[test]
    fn reward_at_goal_is_one_per_repeat() {
        let mut e = env(DomainKind::Checker, 3);
        e.reset(0);
        e.set_state(LatentState {
            position: [0.2, -0.3],
            velocity: [0.0; 2],
            goal: [0.2, -0.3],
            t: 0,
        });
        let out = e.step([0.0, 0.0]).unwrap();
        assert_eq!(out.reward, 2.0);
        assert_eq!(e.state().position, [0.2, -0.3]);
    }

    #[test]
    fn step_after_done_is_an_error() {
        let mut e = BlockEnv::new(
            EnvConfig {
                episode_len: 3,
                ..EnvConfig::default()
            },
            DomainSpec::stationary(0, DomainKind::Gradient, 1),
        )
        .unwrap();
        e.reset(1);
        assert!(!e.step([0.1, 0.1]).unwrap().done);
        assert!(!e.step([0.1, 0.1]).unwrap().done);
        assert!(e.step([0.1, 0.1]).unwrap().done);
        assert!(matches!(e.step([0.0, 0.0]), Err(DarlError::Contract(_))));
    }

    #[test]
    fn frame_stack_shifts_oldest_out() {
        let mut e = env(DomainKind::Stripes, 8);
        let o0 = e.reset(3);
        let o1 = e.step([1.0, 1.0]).unwrap().obs;
        let f = 3 * 40 * 40;
        assert_eq!(o1.frames[..2 * f], o0.frames[f..]);
        assert_ne!(o1.newest(), o0.newest());
    }

    #[test]
    fn state_stays_bounded() {
        let mut e = env(DomainKind::Stripes, 8);
        e.reset(5);
        for _ in 0..124 {
            let out = e.step([1.0, -1.0]).unwrap();
            assert!(out.reward > 0.0 && out.reward <= 2.0);
            let s = e.state();
            assert!(s.position.iter().all(|p| (-1.0..=1.0).contains(p)));
            assert!(s.velocity.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = EnvConfig {
            channels: 2,
            ..EnvConfig::default()
        };
        assert!(BlockEnv::new(cfg, DomainSpec::stationary(0, DomainKind::Stripes, 0)).is_err());
    }
}
