//! Parameter containers for the layer types used by the agent's networks.

use rand::Rng;

use crate::diffcore::adam::{adam_step, AdamConfig, AdamState};
use crate::diffcore::tape::{Gradients, Tape, Var};
use crate::diffcore::tensor::Tensor;
use crate::error::{DarlError, Result};

/// Anything owning trainable tensors in a fixed order.
pub trait Module {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn param_names(&self) -> Vec<String>;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// Whether a forward pass should make parameters differentiable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    Grad,
    Frozen,
}

/// Records the tape vars a module's parameters were bound to, in
/// [`Module::params`] order, so gradients can be routed back afterwards.
#[derive(Debug)]
pub struct Binder {
    track: Track,
    vars: Vec<Var>,
}

impl Binder {
    pub fn new(track: Track) -> Self {
        Self { track, vars: Vec::new() }
    }

    pub fn bind(&mut self, tape: &mut Tape, t: &Tensor) -> Var {
        match self.track {
            Track::Grad => {
                let v = tape.leaf(t);
                self.vars.push(v);
                v
            }
            Track::Frozen => tape.constant(t.shape(), t.data().to_vec()).expect("parameter shapes are valid"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Adds this pass's gradients into `module`'s parameter buffers.
    pub fn accumulate<M: Module + ?Sized>(&self, grads: &Gradients, module: &mut M) -> Result<()> {
        if self.track == Track::Frozen {
            return Ok(());
        }
        let params = module.params_mut();
        if params.len() != self.vars.len() {
            return Err(DarlError::Contract(format!(
                "binder holds {} vars for a module with {} tensors",
                self.vars.len(),
                params.len()
            )));
        }
        for (p, &v) in params.into_iter().zip(&self.vars) {
            grads.accumulate_into(v, p)?;
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents").with_grad()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Uniform(±1/√fan_in) initialization for both weight and bias.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: uniform(rng, &[fan_out, fan_in], bound),
            b: uniform(rng, &[fan_out], bound),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, binder: &mut Binder) -> Result<Var> {
        let w = binder.bind(tape, &self.w);
        let b = binder.bind(tape, &self.b);
        tape.linear(x, w, b)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
    fn param_names(&self) -> Vec<String> {
        vec!["w".into(), "b".into()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Self {
            w: uniform(rng, &[out_ch, in_ch, kernel, kernel], bound),
            b: uniform(rng, &[out_ch], bound),
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, binder: &mut Binder) -> Result<Var> {
        let w = binder.bind(tape, &self.w);
        let b = binder.bind(tape, &self.b);
        tape.conv2d(x, w, b, self.stride)
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
    fn param_names(&self) -> Vec<String> {
        vec!["w".into(), "b".into()]
    }
}

/// Layer normalization with elementwise affine terms (scale 1, shift 0 at init).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[dim], 1.0).with_grad(),
            beta: Tensor::zeros(&[dim]).with_grad(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, binder: &mut Binder) -> Result<Var> {
        let g = binder.bind(tape, &self.gamma);
        let b = binder.bind(tape, &self.beta);
        tape.layernorm(x, g, b, self.eps)
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
    fn param_names(&self) -> Vec<String> {
        vec!["gamma".into(), "beta".into()]
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var, binder: &mut Binder) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x, binder)?;
            if i < last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
    fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.param_names().into_iter().map(move |n| format!("{i}.{n}")))
            .collect()
    }
}

/// Adam states for every tensor of one module.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new<M: Module + ?Sized>(module: &M, cfg: AdamConfig) -> Self {
        Self {
            states: module.params().iter().map(|p| AdamState::new(p.numel(), cfg)).collect(),
        }
    }

    /// Applies one Adam step to every tensor holding a gradient, then clears
    /// the gradients. Tensors without a gradient keep their value and state.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M) -> Result<()> {
        let params = module.params_mut();
        if params.len() != self.states.len() {
            return Err(DarlError::Contract("optimizer/module tensor count mismatch".into()));
        }
        for (p, st) in params.into_iter().zip(self.states.iter_mut()) {
            if p.grad().is_none() {
                continue;
            }
            adam_step(p, st)?;
            p.zero_grad();
        }
        Ok(())
    }
}
