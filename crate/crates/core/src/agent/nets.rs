use rand::Rng;

use crate::agent::config::ArchConfig;
use crate::diffcore::{Binder, Conv2d, LayerNorm, Linear, Mlp, Module, Tape, Tensor, Var};
use crate::error::Result;

/// Conv stack → flatten → linear → layernorm.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub convs: Vec<Conv2d>,
    pub fc: Linear,
    pub ln: LayerNorm,
}

impl Encoder {
    pub fn new(in_channels: usize, arch: &ArchConfig, rng: &mut impl Rng) -> Self {
        let mut ch = in_channels;
        let convs = arch
            .conv_filters
            .iter()
            .zip(&arch.conv_strides)
            .map(|(&f, &s)| {
                let c = Conv2d::new(ch, f, arch.kernel, s, rng);
                ch = f;
                c
            })
            .collect();
        let flat = arch.flat_features().expect("validated architecture");
        Self {
            convs,
            fc: Linear::new(flat, arch.z_dim, rng),
            ln: LayerNorm::new(arch.z_dim),
        }
    }

    /// `pixels: [N, C, H, W]` in `[0, 1]` → features `[N, z_dim]`.
    pub fn forward(&self, tape: &mut Tape, pixels: Var, binder: &mut Binder) -> Result<Var> {
        let mut h = pixels;
        for conv in &self.convs {
            h = conv.forward(tape, h, binder)?;
            h = tape.relu(h);
        }
        let n = tape.shape(h)[0];
        let flat = tape.value(h).len() / n;
        let h = tape.reshape(h, &[n, flat])?;
        let h = self.fc.forward(tape, h, binder)?;
        self.ln.forward(tape, h, binder)
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.convs.iter().flat_map(|c| c.params()).collect();
        p.extend(self.fc.params());
        p.extend(self.ln.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        p.extend(self.fc.params_mut());
        p.extend(self.ln.params_mut());
        p
    }
    fn param_names(&self) -> Vec<String> {
        let mut n: Vec<String> = self
            .convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.param_names().into_iter().map(move |s| format!("conv{i}.{s}")))
            .collect();
        n.extend(self.fc.param_names().into_iter().map(|s| format!("fc.{s}")));
        n.extend(self.ln.param_names().into_iter().map(|s| format!("ln.{s}")));
        n
    }
}

/// Squashed-Gaussian policy head over encoder features.
#[derive(Clone, Debug, PartialEq)]
pub struct Actor {
    pub trunk: Mlp,
    pub action_dim: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Actor {
    pub fn new(arch: &ArchConfig, rng: &mut impl Rng) -> Self {
        Self {
            trunk: Mlp::new(&[arch.z_dim, arch.hidden_dim, arch.hidden_dim, 2 * arch.action_dim], rng),
            action_dim: arch.action_dim,
            log_std_min: arch.log_std_min,
            log_std_max: arch.log_std_max,
        }
    }

    /// Returns `(mean, log_std)`; log-stdev is tanh-rescaled into its bounds.
    pub fn forward(&self, tape: &mut Tape, z: Var, binder: &mut Binder) -> Result<(Var, Var)> {
        let out = self.trunk.forward(tape, z, binder)?;
        let mu = tape.narrow(out, 0, self.action_dim)?;
        let raw = tape.narrow(out, self.action_dim, self.action_dim)?;
        let squashed = tape.tanh(raw);
        let half = 0.5 * (self.log_std_max - self.log_std_min);
        let log_std = tape.affine(squashed, half, self.log_std_min + half);
        Ok((mu, log_std))
    }
}

impl Module for Actor {
    fn params(&self) -> Vec<&Tensor> {
        self.trunk.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk.params_mut()
    }
    fn param_names(&self) -> Vec<String> {
        self.trunk.param_names()
    }
}

/// Twin Q-functions over `(features, action)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub q1: Mlp,
    pub q2: Mlp,
}

impl Critic {
    pub fn new(arch: &ArchConfig, rng: &mut impl Rng) -> Self {
        let dims = [arch.z_dim + arch.action_dim, arch.hidden_dim, arch.hidden_dim, 1];
        Self {
            q1: Mlp::new(&dims, rng),
            q2: Mlp::new(&dims, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, z: Var, action: Var, binder: &mut Binder) -> Result<(Var, Var)> {
        let x = tape.concat(z, action)?;
        let q1 = self.q1.forward(tape, x, binder)?;
        let q2 = self.q2.forward(tape, x, binder)?;
        Ok((q1, q2))
    }

    /// `self ← (1 - tau)·self + tau·online`.
    pub fn soft_update_from(&mut self, online: &Critic, tau: f64) {
        for (t, o) in self.params_mut().into_iter().zip(online.params()) {
            for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
                *a = (1.0 - tau) * *a + tau * b;
            }
        }
    }
}

impl Module for Critic {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.q1.params();
        p.extend(self.q2.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.q1.params_mut();
        p.extend(self.q2.params_mut());
        p
    }
    fn param_names(&self) -> Vec<String> {
        let mut n: Vec<String> = self.q1.param_names().into_iter().map(|s| format!("q1.{s}")).collect();
        n.extend(self.q2.param_names().into_iter().map(|s| format!("q2.{s}")));
        n
    }
}

/// Domain classifier emitting row-wise log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub trunk: Mlp,
}

impl Discriminator {
    pub fn new(arch: &ArchConfig, n_domains: usize, rng: &mut impl Rng) -> Self {
        Self {
            trunk: Mlp::new(&[arch.z_dim, arch.disc_hidden, n_domains], rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, z: Var, binder: &mut Binder) -> Result<Var> {
        let logits = self.trunk.forward(tape, z, binder)?;
        Ok(tape.log_softmax(logits))
    }
}

impl Module for Discriminator {
    fn params(&self) -> Vec<&Tensor> {
        self.trunk.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk.params_mut()
    }
    fn param_names(&self) -> Vec<String> {
        self.trunk.param_names()
    }
}
