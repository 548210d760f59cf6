use super::{fd_check, module_check, rel_err, rng, uniform, weighted_sum, Check};
use darl::agent::{Actor, ArchConfig, Critic, Discriminator, Encoder};
use darl::diffcore::{Binder, GrlConfig, Tape, Tensor, Var};
use rand::Rng;

pub const TRIALS: u64 = 100;
pub const TOL: f64 = 1e-4;

type Build = fn(&mut Tape, &[Var]) -> darl::Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub leaves: fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor>,
    pub build: Build,
}

fn u(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(r, shape, -1.0, 1.0)
}

pub fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv2d",
            leaves: |r| vec![u(r, &[2, 3, 6, 6]), u(r, &[4, 3, 3, 3]), u(r, &[4])],
            build: |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1)?;
                weighted_sum(t, y, 1)
            },
        },
        OpCase {
            name: "conv2d_stride2",
            leaves: |r| vec![u(r, &[1, 2, 7, 7]), u(r, &[3, 2, 3, 3]), u(r, &[3])],
            build: |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2)?;
                weighted_sum(t, y, 2)
            },
        },
        OpCase {
            name: "linear",
            leaves: |r| vec![u(r, &[3, 5]), u(r, &[4, 5]), u(r, &[4])],
            build: |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                weighted_sum(t, y, 3)
            },
        },
        OpCase {
            name: "relu",
            leaves: |r| vec![u(r, &[4, 5])],
            build: |t, v| {
                let y = t.relu(v[0]);
                weighted_sum(t, y, 4)
            },
        },
        OpCase {
            name: "tanh",
            leaves: |r| vec![uniform(r, &[4, 5], -2.0, 2.0)],
            build: |t, v| {
                let y = t.tanh(v[0]);
                weighted_sum(t, y, 5)
            },
        },
        OpCase {
            name: "exp",
            leaves: |r| vec![u(r, &[4, 5])],
            build: |t, v| {
                let y = t.exp(v[0]);
                weighted_sum(t, y, 6)
            },
        },
        OpCase {
            name: "ln",
            leaves: |r| vec![uniform(r, &[4, 5], 0.5, 2.0)],
            build: |t, v| {
                let y = t.ln(v[0]);
                weighted_sum(t, y, 7)
            },
        },
        OpCase {
            name: "square",
            leaves: |r| vec![u(r, &[4, 5])],
            build: |t, v| {
                let y = t.square(v[0]);
                weighted_sum(t, y, 8)
            },
        },
        OpCase {
            name: "affine",
            leaves: |r| vec![u(r, &[4, 5])],
            build: |t, v| {
                let y = t.affine(v[0], -2.5, 0.3);
                weighted_sum(t, y, 9)
            },
        },
        OpCase {
            name: "layernorm",
            leaves: |r| vec![uniform(r, &[3, 6], -2.0, 2.0), u(r, &[6]), u(r, &[6])],
            build: |t, v| {
                let y = t.layernorm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, 10)
            },
        },
        OpCase {
            name: "log_softmax",
            leaves: |r| vec![uniform(r, &[3, 4], -3.0, 3.0)],
            build: |t, v| {
                let y = t.log_softmax(v[0]);
                weighted_sum(t, y, 11)
            },
        },
        OpCase {
            name: "add",
            leaves: |r| vec![u(r, &[3, 4]), u(r, &[3, 4]), u(r, &[1])],
            build: |t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.add(y, v[2])?;
                weighted_sum(t, y, 12)
            },
        },
        OpCase {
            name: "sub",
            leaves: |r| vec![u(r, &[3, 4]), u(r, &[3, 4]), u(r, &[1])],
            build: |t, v| {
                let y = t.sub(v[0], v[1])?;
                let y = t.sub(v[2], y)?;
                weighted_sum(t, y, 13)
            },
        },
        OpCase {
            name: "mul",
            leaves: |r| vec![u(r, &[3, 4]), u(r, &[3, 4]), u(r, &[1])],
            build: |t, v| {
                let y = t.mul(v[0], v[1])?;
                let y = t.mul(y, v[2])?;
                weighted_sum(t, y, 14)
            },
        },
        OpCase {
            name: "minimum",
            leaves: |r| vec![u(r, &[3, 4]), u(r, &[3, 4])],
            build: |t, v| {
                let y = t.minimum(v[0], v[1])?;
                weighted_sum(t, y, 15)
            },
        },
        OpCase {
            name: "concat",
            leaves: |r| vec![u(r, &[3, 2]), u(r, &[3, 4])],
            build: |t, v| {
                let y = t.concat(v[0], v[1])?;
                weighted_sum(t, y, 16)
            },
        },
        OpCase {
            name: "narrow",
            leaves: |r| vec![u(r, &[3, 6])],
            build: |t, v| {
                let y = t.narrow(v[0], 2, 3)?;
                weighted_sum(t, y, 17)
            },
        },
        OpCase {
            name: "reshape",
            leaves: |r| vec![u(r, &[2, 6])],
            build: |t, v| {
                let y = t.reshape(v[0], &[3, 4])?;
                weighted_sum(t, y, 18)
            },
        },
        OpCase {
            name: "mean",
            leaves: |r| vec![u(r, &[3, 4])],
            build: |t, v| {
                let y = t.square(v[0]);
                Ok(t.mean(y))
            },
        },
        OpCase {
            name: "sum_rows",
            leaves: |r| vec![u(r, &[3, 4])],
            build: |t, v| {
                let y = t.sum_rows(v[0]);
                weighted_sum(t, y, 19)
            },
        },
        OpCase {
            name: "sum_squares",
            leaves: |r| vec![u(r, &[3, 4])],
            build: |t, v| Ok(t.sum_squares(v[0])),
        },
        OpCase {
            name: "nll",
            leaves: |r| vec![uniform(r, &[4, 3], -3.0, 3.0)],
            build: |t, v| {
                let lp = t.log_softmax(v[0]);
                t.nll(lp, &[0, 2, 1, 2])
            },
        },
        OpCase {
            name: "gaussian_rsample",
            leaves: |r| vec![u(r, &[3, 2]), uniform(r, &[3, 2], -1.5, 0.5)],
            build: |t, v| {
                let noise = [0.3, -1.2, 0.8, 0.1, -0.5, 1.7];
                let (a, lp) = t.gaussian_rsample(v[0], v[1], &noise)?;
                let sa = weighted_sum(t, a, 20)?;
                let sl = weighted_sum(t, lp, 21)?;
                t.add(sa, sl)
            },
        },
    ]
}

/// Worst relative error over all trials of one op.
pub fn op_worst(case: &OpCase) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for trial in 0..TRIALS {
        let mut r = rng(1000 + trial);
        let leaves = (case.leaves)(&mut r);
        let c = fd_check(&leaves, case.build);
        assert!(c.checked > 0, "{}: every coordinate sat on a kink", case.name);
        worst = worst.max(c.rel_err);
        skipped += c.skipped;
    }
    (worst, skipped)
}

/// Worst relative error of each op, checked over `TRIALS` random inputs.
pub fn all_ops() -> Vec<(&'static str, f64)> {
    cases().iter().map(|c| (c.name, op_worst(c).0)).collect()
}

pub fn grl_worst() -> f64 {
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut r = rng(5000 + trial);
        let leaves = vec![u(&mut r, &[3, 4])];
        let lambda = r.gen_range(0.0..1.0);
        let plain = fd_check(&leaves, |t, v| weighted_sum(t, v[0], 22));
        assert!(plain.rel_err < TOL);
        let mut tape = Tape::new();
        let x = tape.leaf(&leaves[0]);
        let y = tape.grad_reverse(x, GrlConfig::new(lambda).unwrap());
        let loss = weighted_sum(&mut tape, y, 22).unwrap();
        let g = tape.backward(loss).unwrap().get(x).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(&leaves[0]);
        let loss = weighted_sum(&mut tape, x, 22).unwrap();
        let g0 = tape.backward(loss).unwrap().get(x).unwrap();
        let expect: Vec<f64> = g0.iter().map(|v| -lambda * v).collect();
        worst = worst.max(rel_err(&g, &expect));
    }
    worst
}

fn desk() -> ArchConfig {
    ArchConfig::default()
}

fn pixels(r: &mut impl Rng, n: usize, c: usize, hw: usize) -> Tensor {
    Tensor::new(vec![n, c, hw, hw], (0..n * c * hw * hw).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

fn features(r: &mut impl Rng, n: usize, d: usize) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn run_module<F>(name: &str, mut one: F) -> f64
where
    F: FnMut(u64) -> Option<Check>,
{
    let mut worst = 0.0f64;
    let (mut done, mut seed, mut rejected) = (0, 0u64, 0);
    while done < TRIALS {
        match one(seed) {
            Some(c) => {
                worst = worst.max(c.rel_err);
                done += 1;
            }
            None => rejected += 1,
        }
        seed += 1;
        assert!(rejected < TRIALS, "{name}: too many trials straddled a kink");
    }
    worst
}

const COORDS: usize = 8;

pub fn encoder_worst() -> f64 {
    let arch = desk();
    run_module("encoder", |seed| {
        let mut r = rng(seed);
        let enc = Encoder::new(9, &arch, &mut r);
        let x = pixels(&mut r, 2, 9, arch.crop_hw);
        let fwd = |m: &Encoder, t: &mut Tape, b: &mut Binder| {
            let xv = t.leaf(&x);
            let z = m.forward(t, xv, b)?;
            weighted_sum(t, z, seed)
        };
        module_check(&enc, fwd, COORDS, &mut r)
    })
}

pub fn actor_worst() -> f64 {
    let arch = desk();
    run_module("actor", |seed| {
        let mut r = rng(seed);
        let actor = Actor::new(&arch, &mut r);
        let z = features(&mut r, 3, arch.z_dim);
        let noise: Vec<f64> = (0..3 * arch.action_dim).map(|_| r.gen_range(-1.5..1.5)).collect();
        let fwd = |m: &Actor, t: &mut Tape, b: &mut Binder| {
            let zv = t.leaf(&z);
            let (mu, ls) = m.forward(t, zv, b)?;
            let (a, lp) = t.gaussian_rsample(mu, ls, &noise)?;
            let sa = weighted_sum(t, a, seed)?;
            let sl = t.mean(lp);
            t.add(sa, sl)
        };
        module_check(&actor, fwd, COORDS, &mut r)
    })
}

pub fn critic_worst() -> f64 {
    let arch = desk();
    run_module("critic", |seed| {
        let mut r = rng(seed);
        let critic = Critic::new(&arch, &mut r);
        let z = features(&mut r, 3, arch.z_dim);
        let a = Tensor::new(
            vec![3, arch.action_dim],
            (0..3 * arch.action_dim).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let fwd = |m: &Critic, t: &mut Tape, b: &mut Binder| {
            let zv = t.leaf(&z);
            let av = t.leaf(&a);
            let (q1, q2) = m.forward(t, zv, av, b)?;
            let q = t.minimum(q1, q2)?;
            let s = weighted_sum(t, q, seed)?;
            let s1 = weighted_sum(t, q1, seed + 1)?;
            t.add(s, s1)
        };
        module_check(&critic, fwd, COORDS, &mut r)
    })
}

pub fn discriminator_worst() -> f64 {
    let arch = desk();
    run_module("discriminator", |seed| {
        let mut r = rng(seed);
        let disc = Discriminator::new(&arch, 4, &mut r);
        let z = features(&mut r, 6, arch.z_dim);
        let labels: Vec<usize> = (0..6).map(|_| r.gen_range(0..4)).collect();
        let fwd = |m: &Discriminator, t: &mut Tape, b: &mut Binder| {
            let zv = t.leaf(&z);
            let lp = m.forward(t, zv, b)?;
            t.nll(lp, &labels)
        };
        module_check(&disc, fwd, COORDS, &mut r)
    })
}
