//! The learner: pixel encoder, squashed-Gaussian actor, twin critics with
//! targets, learned temperature, and a domain discriminator.
//!
//! The encoder is shaped only by the critic loss and the domain term. The
//! actor and temperature always see detached features.

pub mod config;
pub mod losses;
pub mod nets;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use config::{AdversarialMode, ArchConfig, TrainConfig};
pub use losses::{actor_loss, adv_confusion_loss, bellman_target, critic_loss, discriminator_loss, lambda_schedule, temperature_loss};
pub use nets::{Actor, Critic, Discriminator, Encoder};

use crate::blockmdp::Observation;
use crate::diffcore::tape::nan_min;
use crate::diffcore::{Binder, Checkpoint, GrlConfig, Module, Optimizer, Tape, Tensor, Track, Var};
use crate::error::{DarlError, Result};
use crate::replay::{center_crop, Batch};

/// All learnable parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentParams {
    pub encoder: Encoder,
    pub actor: Actor,
    pub critic: Critic,
    pub critic_target: Critic,
    pub disc: Discriminator,
    pub log_alpha: LogAlpha,
}

/// The log-temperature as a one-element module.
#[derive(Clone, Debug, PartialEq)]
pub struct LogAlpha(pub Tensor);

impl Module for LogAlpha {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.0]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.0]
    }
    fn param_names(&self) -> Vec<String> {
        vec!["value".into()]
    }
}

impl AgentParams {
    /// Network groups draw from separate streams of `seed`, so adding or
    /// dropping the discriminator never perturbs the other initializations.
    pub fn new(in_channels: usize, n_domains: usize, cfg: &TrainConfig, seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        let arch = &cfg.arch;
        let encoder = Encoder::new(in_channels, arch, &mut stream(1));
        let actor = Actor::new(arch, &mut stream(2));
        let critic = Critic::new(arch, &mut stream(3));
        let disc = Discriminator::new(arch, n_domains, &mut stream(4));
        Self {
            critic_target: critic.clone(),
            encoder,
            actor,
            critic,
            disc,
            log_alpha: LogAlpha(Tensor::scalar(cfg.init_temperature.ln()).with_grad()),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.0.item().exp()
    }

    /// `(group, module)` pairs in checkpoint order.
    fn groups(&self) -> [(&'static str, &dyn Module); 6] {
        [
            ("encoder", &self.encoder),
            ("actor", &self.actor),
            ("critic", &self.critic),
            ("critic_target", &self.critic_target),
            ("disc", &self.disc),
            ("log_alpha", &self.log_alpha),
        ]
    }

    fn groups_mut(&mut self) -> [(&'static str, &mut dyn Module); 6] {
        [
            ("encoder", &mut self.encoder),
            ("actor", &mut self.actor),
            ("critic", &mut self.critic),
            ("critic_target", &mut self.critic_target),
            ("disc", &mut self.disc),
            ("log_alpha", &mut self.log_alpha),
        ]
    }

    /// Flattened copy of every parameter value, for snapshot comparisons.
    pub fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        self.groups()
            .iter()
            .flat_map(|(g, m)| {
                m.param_names()
                    .into_iter()
                    .zip(m.params())
                    .map(move |(n, t)| (format!("{g}.{n}"), t.data().to_vec()))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_q: f64,
    pub l_pi: f64,
    pub l_d: f64,
    pub l_alpha: f64,
    pub lambda_now: f64,
    pub disc_train_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
struct Optimizers {
    encoder: Optimizer,
    actor: Optimizer,
    critic: Optimizer,
    disc: Optimizer,
    alpha: Optimizer,
}

impl Optimizers {
    fn new(p: &AgentParams, cfg: &TrainConfig) -> Self {
        Self {
            encoder: Optimizer::new(&p.encoder, cfg.adam(cfg.lr_critic, cfg.beta1_critic)),
            actor: Optimizer::new(&p.actor, cfg.adam(cfg.lr_actor, cfg.beta1_actor)),
            critic: Optimizer::new(&p.critic, cfg.adam(cfg.lr_critic, cfg.beta1_critic)),
            disc: Optimizer::new(&p.disc, cfg.adam(cfg.lr_disc, cfg.beta1_disc)),
            alpha: Optimizer::new(&p.log_alpha, cfg.adam(cfg.lr_alpha, cfg.beta1_alpha)),
        }
    }

    fn named(&self) -> [(&'static str, &Optimizer); 5] {
        [
            ("encoder", &self.encoder),
            ("actor", &self.actor),
            ("critic", &self.critic),
            ("disc", &self.disc),
            ("log_alpha", &self.alpha),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Optimizer); 5] {
        [
            ("encoder", &mut self.encoder),
            ("actor", &mut self.actor),
            ("critic", &mut self.critic),
            ("disc", &mut self.disc),
            ("log_alpha", &mut self.alpha),
        ]
    }
}

/// The learner state: parameters, optimizers, update counter, and the noise stream.
#[derive(Clone, Debug)]
pub struct Agent {
    cfg: TrainConfig,
    in_channels: usize,
    n_domains: usize,
    params: AgentParams,
    opts: Optimizers,
    rng: ChaCha8Rng,
    updates: u64,
    last_actor: (f64, f64),
}

fn check_finite(v: f64, loss: &'static str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DarlError::NonFinite { loss, step })
    }
}

impl Agent {
    pub fn new(cfg: TrainConfig, in_channels: usize, n_domains: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_domains < 2 {
            return Err(DarlError::Config(format!("the discriminator needs >= 2 domains, got {n_domains}")));
        }
        let params = AgentParams::new(in_channels, n_domains, &cfg, seed);
        let opts = Optimizers::new(&params, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(5);
        Ok(Self {
            cfg,
            in_channels,
            n_domains,
            params,
            opts,
            rng,
            updates: 0,
            last_actor: (0.0, 0.0),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &AgentParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut AgentParams {
        &mut self.params
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn alpha(&self) -> f64 {
        self.params.alpha()
    }

    fn pixels(&self, tape: &mut Tape, data: &[f64], n: usize) -> Result<Var> {
        let crop = self.cfg.arch.crop_hw;
        tape.constant(&[n, self.in_channels, crop, crop], data.to_vec())
    }

    fn noise(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.sample(StandardNormal)).collect()
    }

    /// Encoder features of `n` cropped observations, no gradient.
    pub fn encode_pixels(&self, pixels: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = self.pixels(&mut tape, pixels, n)?;
        let z = self.params.encoder.forward(&mut tape, x, &mut Binder::new(Track::Frozen))?;
        Ok(tape.value(z).to_vec())
    }

    /// Features of a full-resolution observation after a center crop.
    pub fn encode(&self, obs: &Observation) -> Result<Vec<f64>> {
        let crop = self.cfg.arch.crop_hw;
        if obs.shape[0] != self.in_channels || obs.shape[1] < crop || obs.shape[2] < crop {
            return Err(DarlError::dim(
                "encode",
                format!("observation {:?} for {} channels, crop {crop}", obs.shape, self.in_channels),
            ));
        }
        self.encode_pixels(&center_crop(obs, crop), 1)
    }

    pub fn select_action(&mut self, obs: &Observation, mode: ActionMode) -> Result<Vec<f64>> {
        let z = self.encode(obs)?;
        let mut tape = Tape::new();
        let zv = tape.constant(&[1, self.cfg.arch.z_dim], z)?;
        let (mu, log_std) = self.params.actor.forward(&mut tape, zv, &mut Binder::new(Track::Frozen))?;
        match mode {
            ActionMode::Eval => Ok(tape.value(mu).iter().map(|m| m.tanh()).collect()),
            ActionMode::Sample => {
                let noise = self.noise(self.cfg.arch.action_dim);
                let (a, _) = tape.gaussian_rsample(mu, log_std, &noise)?;
                Ok(tape.value(a).to_vec())
            }
        }
    }

    /// Soft target `r + γ(1 - done)·(min Q̄(z', a') - α ln π(a'|z'))`, with `a'`
    /// drawn fresh from the current policy and no gradient anywhere.
    fn critic_target(&mut self, batch: &Batch) -> Result<Vec<f64>> {
        let n = batch.size;
        let noise = self.noise(n * self.cfg.arch.action_dim);
        let mut tape = Tape::new();
        let mut frozen = Binder::new(Track::Frozen);
        let x = self.pixels(&mut tape, &batch.next_obs, n)?;
        let z = self.params.encoder.forward(&mut tape, x, &mut frozen)?;
        let (mu, log_std) = self.params.actor.forward(&mut tape, z, &mut frozen)?;
        let (a, logp) = tape.gaussian_rsample(mu, log_std, &noise)?;
        let (q1, q2) = self.params.critic_target.forward(&mut tape, z, a, &mut frozen)?;
        let alpha = self.alpha();
        let v: Vec<f64> = tape
            .value(q1)
            .iter()
            .zip(tape.value(q2))
            .zip(tape.value(logp))
            .map(|((a, b), lp)| nan_min(*a, *b) - alpha * lp)
            .collect();
        Ok(bellman_target(&batch.rewards, &batch.dones, self.cfg.gamma, &v))
    }

    /// One learner update on `batch`. `env_step` drives the reversal-scale
    /// ramp; actor, temperature, and target cadences count updates.
    pub fn update(&mut self, batch: &Batch, env_step: u64) -> Result<LossReport> {
        if batch.obs_shape != [self.in_channels, self.cfg.arch.crop_hw, self.cfg.arch.crop_hw] {
            return Err(DarlError::dim("update", format!("batch pixels {:?}", batch.obs_shape)));
        }
        if let Some(&bad) = batch.domain_ids.iter().find(|&&y| y >= self.n_domains) {
            return Err(DarlError::LabelOutOfRange {
                label: bad,
                n_domains: self.n_domains,
            });
        }
        self.updates += 1;
        let lambda = lambda_schedule(env_step, self.cfg.lambda_ramp_steps);
        let mut report = LossReport {
            lambda_now: lambda,
            ..LossReport::default()
        };

        let target = self.critic_target(batch)?;
        if self.cfg.adversarial_mode == AdversarialMode::Adv {
            let (l_d, acc) = self.discriminator_step(batch)?;
            report.l_d = check_finite(l_d, "discriminator", env_step)?;
            report.disc_train_accuracy = acc;
        }
        self.encoder_critic_step(batch, &target, lambda, env_step, &mut report)?;

        if self.updates.is_multiple_of(self.cfg.actor_update_every) {
            self.last_actor = self.actor_and_alpha_step(batch, env_step)?;
        }
        (report.l_pi, report.l_alpha) = self.last_actor;

        if self.updates.is_multiple_of(self.cfg.target_update_every) {
            let online = self.params.critic.clone();
            self.params.critic_target.soft_update_from(&online, self.cfg.tau);
        }
        Ok(report)
    }

    /// Joint step on encoder, critics and (in GRL mode) the discriminator.
    fn encoder_critic_step(&mut self, batch: &Batch, target: &[f64], lambda: f64, step: u64, report: &mut LossReport) -> Result<()> {
        let n = batch.size;
        let mut tape = Tape::new();
        let mut b_enc = Binder::new(Track::Grad);
        let mut b_critic = Binder::new(Track::Grad);
        let mut b_disc = Binder::new(Track::Grad);
        let x = self.pixels(&mut tape, &batch.obs, n)?;
        let z = self.params.encoder.forward(&mut tape, x, &mut b_enc)?;
        let a = tape.constant(&[n, self.cfg.arch.action_dim], batch.actions.clone())?;
        let (q1, q2) = self.params.critic.forward(&mut tape, z, a, &mut b_critic)?;
        let l_q = critic_loss(&mut tape, q1, q2, target)?;
        report.l_q = check_finite(tape.value(l_q)[0], "critic", step)?;

        let total = match self.cfg.adversarial_mode {
            AdversarialMode::Off => l_q,
            AdversarialMode::Grl => {
                let zr = tape.grad_reverse(z, GrlConfig::new(lambda)?);
                let logp = self.params.disc.forward(&mut tape, zr, &mut b_disc)?;
                let l_d = discriminator_loss(&mut tape, logp, &batch.domain_ids)?;
                report.l_d = check_finite(tape.value(l_d)[0], "discriminator", step)?;
                report.disc_train_accuracy = accuracy(tape.value(logp), &batch.domain_ids, self.n_domains);
                let weighted = tape.scale(l_d, self.cfg.beta);
                tape.add(l_q, weighted)?
            }
            AdversarialMode::Adv => {
                let logp = self.params.disc.forward(&mut tape, z, &mut Binder::new(Track::Frozen))?;
                let l_conf = adv_confusion_loss(&mut tape, logp);
                check_finite(tape.value(l_conf)[0], "confusion", step)?;
                let weighted = tape.scale(l_conf, self.cfg.beta);
                tape.add(l_q, weighted)?
            }
        };
        let grads = tape.backward(total)?;
        b_enc.accumulate(&grads, &mut self.params.encoder)?;
        b_critic.accumulate(&grads, &mut self.params.critic)?;
        self.opts.encoder.step(&mut self.params.encoder)?;
        self.opts.critic.step(&mut self.params.critic)?;
        if self.cfg.adversarial_mode == AdversarialMode::Grl {
            b_disc.accumulate(&grads, &mut self.params.disc)?;
            self.opts.disc.step(&mut self.params.disc)?;
        }
        Ok(())
    }

    /// ADV step one: fit the discriminator to true labels on frozen features.
    fn discriminator_step(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let z = self.encode_pixels(&batch.obs, batch.size)?;
        let mut tape = Tape::new();
        let zv = tape.constant(&[batch.size, self.cfg.arch.z_dim], z)?;
        let mut b_disc = Binder::new(Track::Grad);
        let logp = self.params.disc.forward(&mut tape, zv, &mut b_disc)?;
        let l_d = discriminator_loss(&mut tape, logp, &batch.domain_ids)?;
        let acc = accuracy(tape.value(logp), &batch.domain_ids, self.n_domains);
        let grads = tape.backward(l_d)?;
        b_disc.accumulate(&grads, &mut self.params.disc)?;
        self.opts.disc.step(&mut self.params.disc)?;
        Ok((tape.value(l_d)[0], acc))
    }

    /// Policy and temperature updates on detached features.
    fn actor_and_alpha_step(&mut self, batch: &Batch, step: u64) -> Result<(f64, f64)> {
        let n = batch.size;
        let z = self.encode_pixels(&batch.obs, n)?;
        let noise = self.noise(n * self.cfg.arch.action_dim);
        let alpha = self.alpha();

        let mut tape = Tape::new();
        let zv = tape.constant(&[n, self.cfg.arch.z_dim], z)?;
        let mut b_actor = Binder::new(Track::Grad);
        let (mu, log_std) = self.params.actor.forward(&mut tape, zv, &mut b_actor)?;
        let (a, logp) = tape.gaussian_rsample(mu, log_std, &noise)?;
        let (q1, q2) = self.params.critic.forward(&mut tape, zv, a, &mut Binder::new(Track::Frozen))?;
        let l_pi = actor_loss(&mut tape, logp, q1, q2, alpha)?;
        let l_pi_value = check_finite(tape.value(l_pi)[0], "actor", step)?;
        let grads = tape.backward(l_pi)?;
        b_actor.accumulate(&grads, &mut self.params.actor)?;
        self.opts.actor.step(&mut self.params.actor)?;

        let logp_detached = tape.value(logp).to_vec();
        let mut tape = Tape::new();
        let la = tape.leaf(&self.params.log_alpha.0);
        let l_alpha = temperature_loss(&mut tape, la, &logp_detached, self.cfg.target_entropy)?;
        let l_alpha_value = check_finite(tape.value(l_alpha)[0], "temperature", step)?;
        let grads = tape.backward(l_alpha)?;
        grads.accumulate_into(la, &mut self.params.log_alpha.0)?;
        self.opts.alpha.step(&mut self.params.log_alpha)?;
        Ok((l_pi_value, l_alpha_value))
    }

    /// Full learner state: config, parameters, optimizer moments, counters, and noise stream.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        let cfg_json = serde_json::to_vec(&self.cfg)?;
        let bytes: Vec<f64> = cfg_json.iter().map(|&b| b as f64).collect();
        ck.push("agent.config_json", &[bytes.len()], &bytes)?;
        ck.push("agent.dims", &[2], &[self.in_channels as f64, self.n_domains as f64])?;
        ck.push("agent.updates", &[1], &[self.updates as f64])?;
        ck.push("agent.last_actor", &[2], &[self.last_actor.0, self.last_actor.1])?;
        ck.push("agent.rng", &[RNG_WORDS], &rng_to_words(&self.rng))?;
        for (g, m) in self.params.groups() {
            for (name, t) in m.param_names().into_iter().zip(m.params()) {
                ck.push(format!("param.{g}.{name}"), t.shape(), t.data())?;
            }
        }
        for (g, opt) in self.opts.named() {
            for (i, st) in opt.states.iter().enumerate() {
                ck.push(format!("adam.{g}.{i}.m"), &[st.m.len()], &st.m)?;
                ck.push(format!("adam.{g}.{i}.v"), &[st.v.len()], &st.v)?;
                ck.push(format!("adam.{g}.{i}.t"), &[1], &[st.t as f64])?;
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg_bytes: Vec<u8> = ck.get("agent.config_json")?.data.iter().map(|&b| b as u8).collect();
        let cfg: TrainConfig = serde_json::from_slice(&cfg_bytes)?;
        let dims = ck.data("agent.dims", 2)?;
        let mut agent = Agent::new(cfg, dims[0] as usize, dims[1] as usize, 0)?;
        agent.updates = ck.data("agent.updates", 1)?[0] as u64;
        let la = ck.data("agent.last_actor", 2)?;
        agent.last_actor = (la[0], la[1]);
        agent.rng = rng_from_words(ck.data("agent.rng", RNG_WORDS)?)?;
        for (g, m) in agent.params.groups_mut() {
            let names = m.param_names();
            for (name, t) in names.into_iter().zip(m.params_mut()) {
                let key = format!("param.{g}.{name}");
                let grp = ck.get(&key)?;
                if grp.shape != t.shape() {
                    return Err(DarlError::Format(format!(
                        "{key}: shape {:?} vs architecture {:?}",
                        grp.shape,
                        t.shape()
                    )));
                }
                t.data_mut().copy_from_slice(&grp.data);
            }
        }
        for (g, opt) in agent.opts.named_mut() {
            for (i, st) in opt.states.iter_mut().enumerate() {
                let len = st.m.len();
                st.m.copy_from_slice(ck.data(&format!("adam.{g}.{i}.m"), len)?);
                st.v.copy_from_slice(ck.data(&format!("adam.{g}.{i}.v"), len)?);
                st.t = ck.data(&format!("adam.{g}.{i}.t"), 1)?[0] as u64;
            }
        }
        Ok(agent)
    }
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(log_probs: &[f64], labels: &[usize], k: usize) -> f64 {
    let hits = log_probs
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

const RNG_WORDS: usize = 14;

/// ChaCha state as 32-bit words stored exactly in `f64`s: 8 seed, 2 stream, 4 position.
fn rng_to_words(rng: &ChaCha8Rng) -> Vec<f64> {
    let seed = rng.get_seed();
    let mut words: Vec<f64> = seed.chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    let stream = rng.get_stream();
    words.push((stream & 0xffff_ffff) as f64);
    words.push((stream >> 32) as f64);
    let pos = rng.get_word_pos();
    for k in 0..4 {
        words.push(((pos >> (32 * k)) & 0xffff_ffff) as f64);
    }
    words
}

fn rng_from_words(words: &[f64]) -> Result<ChaCha8Rng> {
    if words.iter().any(|w| w.fract() != 0.0 || *w < 0.0 || *w > u32::MAX as f64) {
        return Err(DarlError::Format("rng words must be u32 values".into()));
    }
    let w: Vec<u64> = words.iter().map(|&x| x as u64).collect();
    let mut seed = [0u8; 32];
    for (i, word) in w[..8].iter().enumerate() {
        seed[4 * i..4 * i + 4].copy_from_slice(&(*word as u32).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[8] | (w[9] << 32));
    let pos = (0..4).fold(0u128, |acc, k| acc | ((w[10 + k] as u128) << (32 * k)));
    rng.set_word_pos(pos);
    Ok(rng)
}
