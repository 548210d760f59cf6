#![allow(dead_code, clippy::needless_range_loop)]

pub mod grad;

use darl::diffcore::{Binder, Module, Tape, Tensor, Track, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

/// Below this magnitude a gradient entry counts as zero for the relative error.
pub const FLOOR: f64 = 1e-9;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
        .unwrap()
        .with_grad()
}

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(FLOOR, f64::max);
    diff / scale
}

/// Outcome of one gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct Check {
    pub rel_err: f64,
    /// Coordinates whose perturbation crossed a kink and were left out.
    pub skipped: usize,
    pub checked: usize,
}

fn eval<F>(leaves: &[Tensor], build: &F) -> (f64, Vec<bool>)
where
    F: Fn(&mut Tape, &[Var]) -> darl::Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars).unwrap();
    (tape.value(loss)[0], tape.kink_signature())
}

/// Central differences on every coordinate of every leaf against the tape's gradient.
pub fn fd_check<F>(leaves: &[Tensor], build: F) -> Check
where
    F: Fn(&mut Tape, &[Var]) -> darl::Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let base_sig = tape.kink_signature();
    let grads = tape.backward(loss).unwrap();

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    let mut work = leaves.to_vec();
    for (li, &v) in vars.iter().enumerate() {
        let g = grads.get(v).unwrap_or_else(|| vec![0.0; leaves[li].numel()]);
        for j in 0..leaves[li].numel() {
            let x0 = leaves[li].data()[j];
            work[li].data_mut()[j] = x0 + H;
            let (lp, sp) = eval(&work, &build);
            work[li].data_mut()[j] = x0 - H;
            let (lm, sm) = eval(&work, &build);
            work[li].data_mut()[j] = x0;
            if sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            analytic.push(g[j]);
            numeric.push((lp - lm) / (2.0 * H));
        }
    }
    Check {
        rel_err: rel_err(&analytic, &numeric),
        skipped,
        checked: analytic.len(),
    }
}

fn module_loss<M, F>(module: &M, forward: &F) -> (f64, Vec<bool>)
where
    M: Module,
    F: Fn(&M, &mut Tape, &mut Binder) -> darl::Result<Var>,
{
    let mut tape = Tape::new();
    let mut binder = Binder::new(Track::Grad);
    let loss = forward(module, &mut tape, &mut binder).unwrap();
    (tape.value(loss)[0], tape.kink_signature())
}

/// Gradient check for a whole network: one random directional derivative over
/// all parameters plus `coords` randomly chosen single coordinates.
/// Returns `None` when the base point sits within `H` of a kink.
pub fn module_check<M, F>(module: &M, forward: F, coords: usize, rng: &mut impl Rng) -> Option<Check>
where
    M: Module + Clone,
    F: Fn(&M, &mut Tape, &mut Binder) -> darl::Result<Var>,
{
    let mut tape = Tape::new();
    let mut binder = Binder::new(Track::Grad);
    let loss = forward(module, &mut tape, &mut binder).unwrap();
    let base_sig = tape.kink_signature();
    let grads = tape.backward(loss).unwrap();
    let mut with_grads = module.clone();
    with_grads.zero_grads();
    binder.accumulate(&grads, &mut with_grads).unwrap();
    let g: Vec<f64> = with_grads
        .params()
        .iter()
        .flat_map(|p| p.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let n = g.len();

    let shifted = |delta: &dyn Fn(usize) -> f64| -> (f64, Vec<bool>) {
        let mut m = module.clone();
        let mut k = 0;
        for p in m.params_mut() {
            for x in p.data_mut() {
                *x += delta(k);
                k += 1;
            }
        }
        module_loss(&m, &forward)
    };

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    let dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    let dir: Vec<f64> = dir.iter().map(|d| d / norm).collect();
    let (lp, sp) = shifted(&|k| H * dir[k]);
    let (lm, sm) = shifted(&|k| -H * dir[k]);
    if sp != base_sig || sm != base_sig {
        return None;
    }
    analytic.push(g.iter().zip(&dir).map(|(a, b)| a * b).sum());
    numeric.push((lp - lm) / (2.0 * H));

    for _ in 0..coords {
        let j = rng.gen_range(0..n);
        let (lp, sp) = shifted(&|k| if k == j { H } else { 0.0 });
        let (lm, sm) = shifted(&|k| if k == j { -H } else { 0.0 });
        if sp != base_sig || sm != base_sig {
            skipped += 1;
            continue;
        }
        analytic.push(g[j]);
        numeric.push((lp - lm) / (2.0 * H));
    }
    Some(Check {
        rel_err: rel_err(&analytic, &numeric),
        skipped,
        checked: analytic.len(),
    })
}

/// Scalar `Σ c ⊙ x` with weights drawn from `seed`, so every output entry matters.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> darl::Result<Var> {
    let mut rng = rng(seed);
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let c = tape.constant(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let p = tape.mul(x, c)?;
    let m = tape.mean(p);
    Ok(tape.scale(m, n as f64))
}
