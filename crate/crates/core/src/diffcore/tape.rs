//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! Every op appends a node holding its output value to the [`Tape`]; node ids
//! are handed out in creation order, so the tape is always topologically
//! sorted. [`Tape::backward`] walks the nodes once in reverse.
//!
//! Gradients travel with a pending scale factor. A gradient-reversal node does
//! not touch the gradient vector; it multiplies the pending scale by `-lambda`.
//! The scale is folded into the vector only where two differently-scaled
//! gradients meet, or when a gradient is read out. As a result a reversed
//! gradient is exactly `-lambda` times the unreversed one, bit for bit.

use crate::diffcore::tensor::Tensor;
use crate::error::{DarlError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Reversal scale of a gradient-reversal node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrlConfig {
    lambda: f64,
}

impl GrlConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(DarlError::Config(format!("GRL lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        cols: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSoftmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Concat(Var, Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Mean(Var),
    SumRows(Var),
    SumSquares(Var),
    Minimum(Var, Var),
    Nll {
        x: Var,
        labels: Vec<usize>,
    },
    GradReverse {
        x: Var,
        lambda: f64,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradient buffer plus the scale still to be applied to it.
#[derive(Clone, Debug)]
struct Pending {
    vec: Vec<f64>,
    scale: f64,
}

impl Pending {
    fn materialize(&self) -> Vec<f64> {
        if self.scale == 1.0 {
            self.vec.clone()
        } else {
            self.vec.iter().map(|g| self.scale * g).collect()
        }
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Pending>>,
}

impl Gradients {
    /// `d loss / d var`, or `None` when no gradient reached the node.
    pub fn get(&self, var: Var) -> Option<Vec<f64>> {
        self.slots.get(var.0).and_then(|s| s.as_ref()).map(Pending::materialize)
    }

    /// Accumulates the gradient of `var` into `param`'s buffer.
    pub fn accumulate_into(&self, var: Var, param: &mut Tensor) -> Result<()> {
        if let Some(g) = self.get(var) {
            param.accumulate_grad(&g)?;
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid shapes")
    }

    /// Smallest |pre-activation| over all ReLU nodes (finite-difference checks
    /// use it to stay clear of kinks).
    pub fn min_relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .flat_map(|vals| vals.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Branch taken at every non-smooth point on the tape: each ReLU unit's
    /// active flag, then each element-wise minimum's choice. Two forward passes
    /// with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig: Vec<bool> = Vec::new();
        for n in &self.nodes {
            match n.op {
                Op::Relu(x) => sig.extend(self.nodes[x.0].value.iter().map(|&v| v > 0.0)),
                Op::Minimum(a, b) => sig.extend(self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x <= y)),
                _ => {}
            }
        }
        sig
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a tensor on the tape. It is differentiable iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(shape.to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Value-equal copy with no link to `v`'s producers.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Valid (unpadded) 2-D convolution. `x: [N,C,H,W]`, `w: [O,C,KH,KW]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(DarlError::dim(
                "conv2d",
                format!("input rank {} / kernel rank {} (expected 4/4)", xs.len(), ws.len()),
            ));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kc != c {
            return Err(DarlError::dim(
                "conv2d",
                format!("input channels axis 1 = {c}, kernel axis 1 = {kc}"),
            ));
        }
        if bs != [o] {
            return Err(DarlError::dim("conv2d", format!("bias {bs:?} vs {o} output channels")));
        }
        if stride == 0 || kh > h || kw > wd {
            return Err(DarlError::dim(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} on spatial axes 2,3 = {h}x{wd}"),
            ));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (wd - kw) / stride + 1;
        let p = oh * ow;
        let ck = c * kh * kw;
        let np = n * p;
        let xv = &self.nodes[x.0].value;
        let mut cols = vec![0.0; ck * np];
        for ni in 0..n {
            for ci in 0..c {
                let plane = &xv[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let r = (ci * kh + ki) * kw + kj;
                        let row = &mut cols[r * np + ni * p..r * np + (ni + 1) * p];
                        for y in 0..oh {
                            let src = &plane[(y * stride + ki) * wd + kj..];
                            let dst = &mut row[y * ow..(y + 1) * ow];
                            for (xo, d) in dst.iter_mut().enumerate() {
                                *d = src[xo * stride];
                            }
                        }
                    }
                }
            }
        }
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; n * o * p];
        for ni in 0..n {
            let dst = &mut out[ni * o * p..(ni + 1) * o * p];
            for (oi, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bv[oi]);
            }
            gemm(o, ck, p, wv, (ck, 1), &cols[ni * p..], (np, 1), 1.0, dst, (p, 1));
        }
        let needs = self.ng(&[x, w, b]);
        Ok(self.push(
            vec![n, o, oh, ow],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                cols: if needs { cols } else { Vec::new() },
            },
            needs,
        ))
    }

    /// `x: [N,in]`, `w: [out,in]`, `b: [out]` → `x wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(DarlError::dim(
                "linear",
                format!("input rank {} / weight rank {} (expected 2/2)", xs.len(), ws.len()),
            ));
        }
        let (n, fin) = (xs[0], xs[1]);
        let (fout, wfin) = (ws[0], ws[1]);
        if fin != wfin {
            return Err(DarlError::dim("linear", format!("input axis 1 = {fin}, weight axis 1 = {wfin}")));
        }
        if bs != [fout] {
            return Err(DarlError::dim("linear", format!("bias {bs:?} vs weight axis 0 = {fout}")));
        }
        let mut out = vec![0.0; n * fout];
        let bv = &self.nodes[b.0].value;
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(bv);
        }
        gemm(
            n,
            fin,
            fout,
            &self.nodes[x.0].value,
            (fin, 1),
            &self.nodes[w.0].value,
            (1, fin),
            1.0,
            &mut out,
            (fout, 1),
        );
        let needs = self.ng(&[x, w, b]);
        Ok(self.push(vec![n, fout], out, Op::Linear { x, w, b }, needs))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = &self.nodes[x.0];
        let value = n.value.iter().map(|&v| f(v)).collect();
        let shape = n.shape.clone();
        let needs = n.needs_grad;
        self.push(shape, value, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 || v.is_nan() { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.unary(x, |v| scale * v, Op::Affine { x, scale })
    }

    /// Normalizes each vector along the last axis, then applies `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().expect("non-empty shape");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(DarlError::dim(
                "layernorm",
                format!("last axis {d} vs gamma {:?} / beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let needs = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            xs,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().expect("non-empty shape");
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + src.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, v) in dst.iter_mut().zip(src) {
                *o = v - lse;
            }
        }
        let needs = self.needs_grad(x);
        self.push(xs, out, Op::LogSoftmax(x), needs)
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        if sa == sb || nb == 1 {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else {
            Err(DarlError::dim(
                op,
                format!("operand shapes {sa:?} and {sb:?} differ (only one-element broadcast is supported)"),
            ))
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.binary_shape(name, a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n: usize = shape.iter().product();
        let value = (0..n)
            .map(|i| f(av[if av.len() == 1 { 0 } else { i }], bv[if bv.len() == 1 { 0 } else { i }]))
            .collect();
        let needs = self.ng(&[a, b]);
        Ok(self.push(shape, value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Element-wise minimum of two same-shape tensors.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(DarlError::dim("minimum", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        self.binary("minimum", a, b, nan_min, Op::Minimum(a, b))
    }

    /// Concatenates two `[N, *]` tensors along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(DarlError::dim(
                "concat",
                format!("axis 0 mismatch or non-matrix operands: {sa:?} vs {sb:?}"),
            ));
        }
        let (n, da, db) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            out.extend_from_slice(&av[r * da..(r + 1) * da]);
            out.extend_from_slice(&bv[r * db..(r + 1) * db]);
        }
        let needs = self.ng(&[a, b]);
        Ok(self.push(vec![n, da + db], out, Op::Concat(a, b), needs))
    }

    /// Columns `start..start+len` of an `[N, D]` tensor.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(DarlError::dim("narrow", format!("columns {start}..{} of {s:?}", start + len)));
        }
        let (n, d) = (s[0], s[1]);
        let xv = &self.nodes[x.0].value;
        let out = (0..n)
            .flat_map(|r| xv[r * d + start..r * d + start + len].iter().copied())
            .collect();
        let needs = self.needs_grad(x);
        Ok(self.push(vec![n, len], out, Op::Narrow { x, start }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.len() || shape.contains(&0) {
            return Err(DarlError::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.nodes[x.0].value.clone();
        let needs = self.needs_grad(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), needs))
    }

    /// Mean of all entries, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let m = xv.iter().sum::<f64>() / xv.len() as f64;
        let needs = self.needs_grad(x);
        self.push(vec![1], vec![m], Op::Mean(x), needs)
    }

    /// Sum along the last axis: `[N, D]` → `[N]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("non-empty shape");
        let out: Vec<f64> = self.nodes[x.0].value.chunks(d).map(|r| r.iter().sum()).collect();
        let n = out.len();
        let needs = self.needs_grad(x);
        self.push(vec![n], out, Op::SumRows(x), needs)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().map(|v| v * v).sum();
        let needs = self.needs_grad(x);
        self.push(vec![1], vec![s], Op::SumSquares(x), needs)
    }

    /// Mean negative log-likelihood of `labels` under row-wise log-probabilities `x: [N, K]`.
    pub fn nll(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(DarlError::dim("nll", format!("log-probs {s:?} vs {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(DarlError::LabelOutOfRange { label: bad, n_domains: k });
        }
        let xv = &self.nodes[x.0].value;
        let total: f64 = labels.iter().enumerate().map(|(r, &y)| -xv[r * k + y]).sum();
        let needs = self.needs_grad(x);
        Ok(self.push(
            vec![1],
            vec![total / labels.len() as f64],
            Op::Nll {
                x,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Identity forward; scales the backward gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, cfg: GrlConfig) -> Var {
        let n = &self.nodes[x.0];
        let (shape, value, needs) = (n.shape.clone(), n.value.clone(), n.needs_grad);
        self.push(shape, value, Op::GradReverse { x, lambda: cfg.lambda }, needs)
    }

    /// Reparameterized tanh-squashed Gaussian sample.
    ///
    /// `mu`, `log_std`: `[N, A]`; `noise`: standard-normal draws of the same
    /// length. Returns `(action [N, A], log_prob [N])` where the log-probability
    /// includes the tanh change-of-variables term `Σ ln(1 - a² + 1e-6)`.
    pub fn gaussian_rsample(&mut self, mu: Var, log_std: Var, noise: &[f64]) -> Result<(Var, Var)> {
        let s = self.shape(mu).to_vec();
        if self.shape(log_std) != s.as_slice() || s.len() != 2 {
            return Err(DarlError::dim(
                "gaussian_rsample",
                format!("mean {s:?} vs log-std {:?}", self.shape(log_std)),
            ));
        }
        let eps = self.constant(&s, noise.to_vec())?;
        let std = self.exp(log_std);
        let spread = self.mul(std, eps)?;
        let pre = self.add(mu, spread)?;
        let action = self.tanh(pre);

        let eps_sq = self.square(eps);
        let gauss = self.affine(eps_sq, -0.5, -0.5 * LN_2PI);
        let gauss = self.sum_rows(gauss);
        let log_std_sum = self.sum_rows(log_std);
        let base = self.sub(gauss, log_std_sum)?;
        let a_sq = self.square(action);
        let jac = self.affine(a_sq, -1.0, 1.0 + 1e-6);
        let jac = self.ln(jac);
        let jac = self.sum_rows(jac);
        let log_prob = self.sub(base, jac)?;
        Ok((action, log_prob))
    }

    /// Computes gradients of the one-element `loss` w.r.t. every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(DarlError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut slots: Vec<Option<Pending>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { slots });
        }
        slots[loss.0] = Some(Pending {
            vec: vec![1.0],
            scale: 1.0,
        });
        for i in (0..=loss.0).rev() {
            let Some(pending) = slots[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                slots[i] = Some(pending);
                continue;
            }
            let scale = pending.scale;
            let g = &pending.vec;
            self.backprop_node(node, g, scale, &mut slots);
            slots[i] = Some(pending);
        }
        Ok(Gradients { slots })
    }

    fn send(&self, slots: &mut [Option<Pending>], to: Var, vec: Vec<f64>, scale: f64) {
        if !self.nodes[to.0].needs_grad {
            return;
        }
        match &mut slots[to.0] {
            None => slots[to.0] = Some(Pending { vec, scale }),
            Some(acc) if acc.scale == scale => acc.vec.iter_mut().zip(&vec).for_each(|(a, b)| *a += b),
            Some(acc) => {
                let (s0, s1) = (acc.scale, scale);
                acc.vec.iter_mut().zip(&vec).for_each(|(a, b)| *a = s0 * *a + s1 * b);
                acc.scale = 1.0;
            }
        }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], scale: f64, slots: &mut [Option<Pending>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, cols } => {
                let (xs, ws) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let p = oh * ow;
                let ck = c * kh * kw;
                let np = n * p;
                if wants(*w) {
                    let mut dw = vec![0.0; o * ck];
                    for ni in 0..n {
                        gemm(o, p, ck, &g[ni * o * p..], (p, 1), &cols[ni * p..], (1, np), 1.0, &mut dw, (ck, 1));
                    }
                    self.send(slots, *w, dw, scale);
                }
                if wants(*b) {
                    let mut db = vec![0.0; o];
                    for chunk in g.chunks(p).enumerate() {
                        db[chunk.0 % o] += chunk.1.iter().sum::<f64>();
                    }
                    self.send(slots, *b, db, scale);
                }
                if wants(*x) {
                    let wv = val(*w);
                    let mut dx = vec![0.0; n * c * h * wd];
                    let mut dcols = vec![0.0; ck * p];
                    for ni in 0..n {
                        gemm(ck, o, p, wv, (1, ck), &g[ni * o * p..], (p, 1), 0.0, &mut dcols, (p, 1));
                        for ci in 0..c {
                            let plane = &mut dx[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let r = (ci * kh + ki) * kw + kj;
                                    let row = &dcols[r * p..(r + 1) * p];
                                    for y in 0..oh {
                                        let base = (y * stride + ki) * wd + kj;
                                        for xo in 0..ow {
                                            plane[base + xo * stride] += row[y * ow + xo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.send(slots, *x, dx, scale);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let fout = node.shape[1];
                if wants(*x) {
                    let mut dx = vec![0.0; n * fin];
                    gemm(n, fout, fin, g, (fout, 1), val(*w), (fin, 1), 0.0, &mut dx, (fin, 1));
                    self.send(slots, *x, dx, scale);
                }
                if wants(*w) {
                    let mut dw = vec![0.0; fout * fin];
                    gemm(fout, n, fin, g, (1, fout), val(*x), (fin, 1), 0.0, &mut dw, (fin, 1));
                    self.send(slots, *w, dw, scale);
                }
                if wants(*b) {
                    let mut db = vec![0.0; fout];
                    for row in g.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    self.send(slots, *b, db, scale);
                }
            }
            Op::Relu(x) => {
                let d = val(*x).iter().zip(g).map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 }).collect();
                self.send(slots, *x, d, scale);
            }
            Op::Tanh(x) => {
                let d = node.value.iter().zip(g).map(|(&y, &gi)| gi * (1.0 - y * y)).collect();
                self.send(slots, *x, d, scale);
            }
            Op::Exp(x) => {
                let d = node.value.iter().zip(g).map(|(&y, &gi)| gi * y).collect();
                self.send(slots, *x, d, scale);
            }
            Op::Ln(x) => {
                let d = val(*x).iter().zip(g).map(|(&v, &gi)| gi / v).collect();
                self.send(slots, *x, d, scale);
            }
            Op::Square(x) => {
                let d = val(*x).iter().zip(g).map(|(&v, &gi)| 2.0 * v * gi).collect();
                self.send(slots, *x, d, scale);
            }
            Op::Affine { x, scale: a } => {
                let d = g.iter().map(|gi| a * gi).collect();
                self.send(slots, *x, d, scale);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.shape.last().expect("non-empty shape");
                let gv = val(*gamma);
                if wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    self.send(slots, *gamma, dg, scale);
                }
                if wants(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    self.send(slots, *beta, db, scale);
                }
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let df = d as f64;
                    for (r, ((gr, hr), dr)) in g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let k = inv_std[r] / df;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dr[j] = k * (df * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    self.send(slots, *x, dx, scale);
                }
            }
            Op::LogSoftmax(x) => {
                let d = *node.shape.last().expect("non-empty shape");
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(d).zip(node.value.chunks(d)).zip(dx.chunks_mut(d)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..d {
                        dr[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                self.send(slots, *x, dx, scale);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    self.send(slots, *a, reduce_to(g, val(*a).len(), 1.0), scale);
                }
                if wants(*b) {
                    self.send(slots, *b, reduce_to(g, val(*b).len(), sign), scale);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let at = |v: &[f64], i: usize| v[if v.len() == 1 { 0 } else { i }];
                if wants(*a) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(bv, i)).collect();
                    self.send(slots, *a, reduce_to(&full, av.len(), 1.0), scale);
                }
                if wants(*b) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(av, i)).collect();
                    self.send(slots, *b, reduce_to(&full, bv.len(), 1.0), scale);
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let d = g.iter().enumerate().map(|(i, gi)| if av[i] <= bv[i] { *gi } else { 0.0 }).collect();
                    self.send(slots, *a, d, scale);
                }
                if wants(*b) {
                    let d = g.iter().enumerate().map(|(i, gi)| if av[i] <= bv[i] { 0.0 } else { *gi }).collect();
                    self.send(slots, *b, d, scale);
                }
            }
            Op::Concat(a, b) => {
                let (da, db) = (self.nodes[a.0].shape[1], self.nodes[b.0].shape[1]);
                let dt = da + db;
                if wants(*a) {
                    let d = g.chunks(dt).flat_map(|r| r[..da].iter().copied()).collect();
                    self.send(slots, *a, d, scale);
                }
                if wants(*b) {
                    let d = g.chunks(dt).flat_map(|r| r[da..].iter().copied()).collect();
                    self.send(slots, *b, d, scale);
                }
            }
            Op::Narrow { x, start } => {
                let d = self.nodes[x.0].shape[1];
                let len = node.shape[1];
                let mut dx = vec![0.0; val(*x).len()];
                for (dr, gr) in dx.chunks_mut(d).zip(g.chunks(len)) {
                    dr[*start..start + len].copy_from_slice(gr);
                }
                self.send(slots, *x, dx, scale);
            }
            Op::Reshape(x) => self.send(slots, *x, g.to_vec(), scale),
            Op::Mean(x) => {
                let n = val(*x).len();
                self.send(slots, *x, vec![g[0] / n as f64; n], scale);
            }
            Op::SumRows(x) => {
                let d = *self.nodes[x.0].shape.last().expect("non-empty shape");
                let dx = g.iter().flat_map(|&gi| std::iter::repeat_n(gi, d)).collect();
                self.send(slots, *x, dx, scale);
            }
            Op::SumSquares(x) => {
                let dx = val(*x).iter().map(|v| 2.0 * v * g[0]).collect();
                self.send(slots, *x, dx, scale);
            }
            Op::Nll { x, labels } => {
                let k = self.nodes[x.0].shape[1];
                let mut dx = vec![0.0; val(*x).len()];
                let w = -g[0] / labels.len() as f64;
                for (r, &y) in labels.iter().enumerate() {
                    dx[r * k + y] = w;
                }
                self.send(slots, *x, dx, scale);
            }
            Op::GradReverse { x, lambda } => {
                self.send(slots, *x, g.to_vec(), -lambda * scale);
            }
        }
    }
}

/// Sums a full-size gradient down to a one-element operand when broadcast.
fn reduce_to(g: &[f64], len: usize, sign: f64) -> Vec<f64> {
    if len == g.len() {
        if sign == 1.0 {
            g.to_vec()
        } else {
            g.iter().map(|v| sign * v).collect()
        }
    } else {
        vec![sign * g.iter().sum::<f64>()]
    }
}

/// `c = a·b + beta·c` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(m == 0 || n == 0 || c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `min` that propagates NaN instead of skipping it.
pub fn nan_min(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.min(b)
    }
}
