use std::collections::BTreeMap;

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Stabilizer added to the variance inside every normalization's square root.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Conv3x3 {
        x: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPoolTime {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelsToFrames(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    PickSum {
        x: Var,
        picks: Vec<(usize, T)>,
    },
    ScalarFn {
        x: Var,
        grad: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of one forward pass.
///
/// Nodes are appended in execution order, so index order is a topological
/// order and the backward sweep is a single reverse scan.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.grads.keys().copied()
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    let b_numel: usize = b.iter().product();
    if b_numel == 1 {
        return true;
    }
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        needs: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric {
                op: op_name,
                detail: "produced a non-finite value".into(),
            });
        }
        Ok(self.push(value, op, needs))
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(
                op,
                format!("expected a matrix, got shape {s:?}"),
            )),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("[{m}, {k}] x [{n}, {k2}]^T"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), needs))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !suffix_broadcast(av.shape(), bv.shape()) {
            return Err(Error::shape(
                name,
                format!("cannot broadcast {:?} onto {:?}", bv.shape(), av.shape()),
            ));
        }
        let bn = bv.numel();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % bn]))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push_checked(name, out, op, needs)
    }

    /// `a + b`, where `b` is either shaped like `a`, a trailing-dimension suffix of it, or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let needs = self.needs(x);
        self.push_checked("scale", out, Op::Scale(x, s), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.exp());
        let needs = self.needs(x);
        self.push_checked("exp", out, Op::Exp(x), needs)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v <= T::zero()) {
            return Err(Error::Numeric {
                op: "log",
                detail: format!("argument {bad} outside the domain (0, inf)"),
            });
        }
        let out = self.value(x).map(|v| v.ln());
        let needs = self.needs(x);
        self.push_checked("log", out, Op::Log(x), needs)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let src = self.value(x).data();
        let data = (0..r * c).map(|i| src[(i % r) * c + i / r]).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(x)
            .clone()
            .reshape(shape)?
            .with_requires_grad(false);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims2("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape("concat_cols", "row count mismatch"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        for v in &values {
            if v.shape().len() != 2 {
                return Err(Error::shape("concat_rows", "expected matrices"));
            }
        }
        let out = Tensor::concat_rows(&values)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if start + width > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {c} cols", start + width),
            ));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + width]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![r, width], data)?,
            Op::SliceCols(x, start),
            needs,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.dims2("slice_rows", x)?;
        let out = self.value(x).slice_rows(start, end)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceRows(x, start), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / T::lit(v.numel() as f64);
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                z = z + *e;
            }
            for e in row.iter_mut() {
                *e = *e / z;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Softmax(x), needs)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            for e in row.iter_mut() {
                *e = *e - lse;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::LogSoftmax(x), needs)
    }

    /// Per-row normalization over the last axis followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.dims2("layer_norm", x)?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                "affine parameters must match feature dim",
            ));
        }
        let eps = T::lit(NORM_EPS);
        let src = self.value(x).data();
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        let dn = T::lit(d as f64);
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| g[i % d] * h + b[i % d])
            .collect();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = Tensor::new(vec![n, d], data)?;
        self.push_checked(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    /// Per-feature normalization over the frame (row) axis using batch statistics.
    ///
    /// Returns the output plus the batch mean and biased batch variance so the
    /// caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, d) = self.dims2("frame_batch_norm", x)?;
        if n == 0 {
            return Err(Error::shape("frame_batch_norm", "empty batch"));
        }
        let src = self.value(x).data();
        let nn = T::lit(n as f64);
        let mut mean = vec![T::zero(); d];
        let mut var = vec![T::zero(); d];
        for r in 0..n {
            for c in 0..d {
                mean[c] = mean[c] + src[r * d + c];
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nn);
        for r in 0..n {
            for c in 0..d {
                let dv = src[r * d + c] - mean[c];
                var[c] = var[c] + dv * dv;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / nn);
        let out = self.batch_norm_with(x, gamma, beta, &mean, &var, true)?;
        Ok((out, mean, var))
    }

    /// Per-feature normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
    ) -> Result<Var> {
        self.batch_norm_with(x, gamma, beta, mean, var, false)
    }

    fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, d) = self.dims2("frame_batch_norm", x)?;
        if mean.len() != d
            || var.len() != d
            || self.value(gamma).numel() != d
            || self.value(beta).numel() != d
        {
            return Err(Error::shape(
                "frame_batch_norm",
                "statistics must match feature dim",
            ));
        }
        let eps = T::lit(NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let src = self.value(x).data();
        let xhat: Vec<T> = src
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % d]) * inv_std[i % d])
            .collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| g[i % d] * h + b[i % d])
            .collect();
        let out = Tensor::new(vec![n, d], data)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push_checked(
            "frame_batch_norm",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        )
    }

    /// 3×3 same-padded convolution of `x: [cin, h, w]` with `weight: [cout, cin, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (cin, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(Error::shape(
                    "conv3x3",
                    format!("input must be [c, h, w], got {s:?}"),
                ))
            }
        };
        let cout = match self.shape(weight) {
            [o, c, 3, 3] if *c == cin => *o,
            s => {
                return Err(Error::shape(
                    "conv3x3",
                    format!("weight must be [cout, {cin}, 3, 3], got {s:?}"),
                ))
            }
        };
        if self.value(bias).numel() != cout {
            return Err(Error::shape("conv3x3", "bias must have cout entries"));
        }
        let geom = ConvGeom { cin, cout, h, w };
        let out = kernels::conv3x3_forward(
            geom,
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let needs = self.needs(x) || self.needs(weight) || self.needs(bias);
        let out = Tensor::new(vec![cout, h, w], out)?;
        self.push_checked(
            "conv3x3",
            out,
            Op::Conv3x3 {
                x,
                weight,
                bias,
                geom,
            },
            needs,
        )
    }

    /// Max-pool with window 2 and stride 2 along the time axis of `[c, t, f]`; an odd last frame is dropped.
    pub fn max_pool_time(&mut self, x: Var) -> Result<Var> {
        let (c, t, f) = match self.shape(x) {
            [c, t, f] => (*c, *t, *f),
            s => {
                return Err(Error::shape(
                    "max_pool_time",
                    format!("expected [c, t, f], got {s:?}"),
                ))
            }
        };
        let to = t / 2;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * to * f);
        let mut argmax = Vec::with_capacity(c * to * f);
        for ch in 0..c {
            for i in 0..to {
                for j in 0..f {
                    let a = ch * t * f + 2 * i * f + j;
                    let b = a + f;
                    let pick = if src[b] > src[a] { b } else { a };
                    data.push(src[pick]);
                    argmax.push(pick);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![c, to, f], data)?,
            Op::MaxPoolTime { x, argmax },
            needs,
        ))
    }

    /// `[c, t, f] -> [t, c·f]`, channel-major within each frame.
    pub fn channels_to_frames(&mut self, x: Var) -> Result<Var> {
        let (c, t, f) = match self.shape(x) {
            [c, t, f] => (*c, *t, *f),
            s => {
                return Err(Error::shape(
                    "channels_to_frames",
                    format!("expected [c, t, f], got {s:?}"),
                ))
            }
        };
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * t * f);
        for i in 0..t {
            for ch in 0..c {
                data.extend_from_slice(&src[ch * t * f + i * f..ch * t * f + (i + 1) * f]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![t, c * f], data)?,
            Op::ChannelsToFrames(x),
            needs,
        ))
    }

    /// Inverted dropout. A rate of zero records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be < 1")));
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, needs))
    }

    /// `Σ weight · x.flat[index]` over the given picks.
    pub fn pick_sum(&mut self, x: Var, picks: Vec<(usize, T)>) -> Result<Var> {
        let v = self.value(x);
        if let Some((i, _)) = picks.iter().find(|(i, _)| *i >= v.numel()) {
            return Err(Error::shape(
                "pick_sum",
                format!("index {i} out of {}", v.numel()),
            ));
        }
        let s = picks.iter().map(|&(i, w)| w * v.data()[i]).sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::PickSum { x, picks }, needs))
    }

    /// Records a scalar function of `x` whose value and gradient were computed elsewhere.
    pub fn scalar_fn(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(Error::shape(
                "scalar_fn",
                "gradient shape must match the input",
            ));
        }
        let needs = self.needs(x);
        self.push_checked(
            "scalar_fn",
            Tensor::scalar(value),
            Op::ScalarFn {
                x,
                grad: grad.into_data(),
            },
            needs,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every `requires_grad` leaf gets an entry; leaves with no path to the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = match grads.get_mut(i).and_then(Option::take) {
                    Some(g) => Tensor::new(node.value.shape().to_vec(), g)?,
                    None => Tensor::zeros(node.value.shape()),
                };
                out.insert(Var(i), g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if v.0 >= grads.len() || !self.nodes[v.0].needs_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc(*a, &|s| kernels::matmul_nt_acc(g, val(*b), s, m, n, k));
                acc(*b, &|s| kernels::matmul_tn_acc(val(*a), g, s, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                acc(*a, &|s| kernels::matmul_acc(g, val(*b), s, m, n, k));
                acc(*b, &|s| kernels::matmul_tn_acc(g, val(*a), s, m, n, k));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                acc(*a, &|s| {
                    s.iter_mut().zip(g).for_each(|(o, &gv)| *o = *o + gv)
                });
                acc(*b, &|s| {
                    let bn = s.len();
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % bn] = s[i % bn] + sign * gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let bn = bv.len();
                acc(*a, &|s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i] = s[i] + gv * bv[i % bn];
                    }
                });
                acc(*b, &|s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % bn] = s[i % bn] + gv * av[i];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|s| {
                s.iter_mut().zip(g).for_each(|(o, &gv)| *o = *o + gv * *c)
            }),
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        if xv[i] > T::zero() {
                            s[i] = s[i] + g[i];
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &|s| {
                    s.iter_mut()
                        .enumerate()
                        .for_each(|(i, o)| *o = *o + g[i] * y[i])
                });
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &|s| {
                    s.iter_mut()
                        .enumerate()
                        .for_each(|(i, o)| *o = *o + g[i] / xv[i])
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                // output is [c, r]; out[j, i] = x[i, j]
                acc(*x, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] = s[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &|s| {
                    s.iter_mut().zip(g).for_each(|(o, &gv)| *o = *o + gv)
                });
            }
            Op::ChannelsToFrames(x) => {
                let (c, t, f) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                acc(*x, &|s| {
                    for i in 0..t {
                        for ch in 0..c {
                            for j in 0..f {
                                let si = ch * t * f + i * f + j;
                                s[si] = s[si] + g[i * c * f + ch * f + j];
                            }
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &|s| {
                        for r in 0..rows {
                            for j in 0..w {
                                s[r * w + j] = s[r * w + j] + g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, &|s| {
                        s.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(o, &gv)| *o = *o + gv)
                    });
                    offset += n;
                }
            }
            Op::SliceCols(x, start) => {
                let c = self.value(*x).cols();
                let (r, w) = (node.value.rows(), node.value.cols());
                acc(*x, &|s| {
                    for i in 0..r {
                        for j in 0..w {
                            s[i * c + start + j] = s[i * c + start + j] + g[i * w + j];
                        }
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let c = self.value(*x).cols();
                let off = start * c;
                acc(*x, &|s| {
                    s[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, &gv)| *o = *o + gv)
                });
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|o| *o = *o + g[0])),
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).numel() as f64);
                acc(*x, &|s| s.iter_mut().for_each(|o| *o = *o + g[0] / n));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*x, &|s| {
                    for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            s[r * c + j] = s[r * c + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*x, &|s| {
                    for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let gs: T = gr.iter().copied().sum();
                        for j in 0..c {
                            s[r * c + j] = s[r * c + j] + gr[j] - yr[j].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let n = node.value.rows();
                let gam = val(*gamma);
                acc(*gamma, &|s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % d] = s[i % d] + gv * xhat[i];
                    }
                });
                acc(*beta, &|s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % d] = s[i % d] + gv;
                    }
                });
                let dn = T::lit(d as f64);
                acc(*x, &|s| {
                    for r in 0..n {
                        let range = r * d..(r + 1) * d;
                        let dxhat: Vec<T> = g[range.clone()]
                            .iter()
                            .zip(gam)
                            .map(|(&gv, &gm)| gv * gm)
                            .collect();
                        let sum_d: T = dxhat.iter().copied().sum();
                        let sum_dx: T = dxhat
                            .iter()
                            .zip(&xhat[range.clone()])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        for j in 0..d {
                            let h = xhat[r * d + j];
                            s[r * d + j] = s[r * d + j]
                                + inv_std[r] / dn * (dn * dxhat[j] - sum_d - h * sum_dx);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let d = node.value.cols();
                let n = node.value.rows();
                let gam = val(*gamma);
                acc(*gamma, &|s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % d] = s[i % d] + gv * xhat[i];
                    }
                });
                acc(*beta, &|s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % d] = s[i % d] + gv;
                    }
                });
                let nn = T::lit(n as f64);
                acc(*x, &|s| {
                    if !*batch_stats {
                        for (i, &gv) in g.iter().enumerate() {
                            s[i] = s[i] + gv * gam[i % d] * inv_std[i % d];
                        }
                        return;
                    }
                    let mut sum_d = vec![T::zero(); d];
                    let mut sum_dx = vec![T::zero(); d];
                    for (i, &gv) in g.iter().enumerate() {
                        let dh = gv * gam[i % d];
                        sum_d[i % d] = sum_d[i % d] + dh;
                        sum_dx[i % d] = sum_dx[i % d] + dh * xhat[i];
                    }
                    for (i, &gv) in g.iter().enumerate() {
                        let c = i % d;
                        let dh = gv * gam[c];
                        s[i] = s[i] + inv_std[c] / nn * (nn * dh - sum_d[c] - xhat[i] * sum_dx[c]);
                    }
                });
            }
            Op::Conv3x3 {
                x,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) = kernels::conv3x3_backward(*geom, val(*x), val(*weight), g);
                acc(*x, &|s| {
                    s.iter_mut().zip(&dx).for_each(|(o, &v)| *o = *o + v)
                });
                acc(*weight, &|s| {
                    s.iter_mut().zip(&dw).for_each(|(o, &v)| *o = *o + v)
                });
                acc(*bias, &|s| {
                    s.iter_mut().zip(&db).for_each(|(o, &v)| *o = *o + v)
                });
            }
            Op::MaxPoolTime { x, argmax } => {
                acc(*x, &|s| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        s[src] = s[src] + gv;
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * mask[i];
                    }
                });
            }
            Op::PickSum { x, picks } => {
                acc(*x, &|s| {
                    for &(i, w) in picks {
                        s[i] = s[i] + g[0] * w;
                    }
                });
            }
            Op::ScalarFn { x, grad } => {
                acc(*x, &|s| {
                    for (o, &d) in s.iter_mut().zip(grad) {
                        *o = *o + g[0] * d;
                    }
                });
            }
        }
    }
}

pub(crate) fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}
