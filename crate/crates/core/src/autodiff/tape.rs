//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs to run backward. [`Tape::backward`] consumes the tape, so a
//! recording can never be replayed against stale values.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Exp(Var),
    Softmax(Var),
    CausalConv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Reparam {
        mu: Var,
        logvar: Var,
        eps: Vec<f64>,
    },
    Mse(Var, Var),
    KlStandardNormal {
        mu: Var,
        logvar: Var,
    },
    Sum(Var),
    Reshape(Var),
    LastStep(Var),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    OuterAdd(Var, Var),
    Kinematic {
        accel: Var,
        prev: Var,
        curr: Var,
        dt: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) | Op::OuterAdd(a, b) => {
                vec![*a, *b]
            }
            Op::Linear { input, weight, bias }
            | Op::CausalConv1d {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Elu(a)
            | Op::Exp(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::LastStep(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Dropout { input, .. } | Op::GatherRows { input, .. } => vec![*input],
            Op::Reparam { mu, logvar, .. } | Op::KlStandardNormal { mu, logvar } => {
                vec![*mu, *logvar]
            }
            Op::Kinematic { accel, prev, curr, .. } => vec![*accel, *prev, *curr],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` requires grad.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
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

    /// Leaf that gradients flow into.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant by `backward`.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(name));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// Affine map `x W^T + b` with `W: [out, in]`. Accepts `x` as `[in]` or `[batch, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let (batch, fan_in, batched) = match sx.as_slice() {
            [i] => (1, *i, false),
            [b, i] => (*b, *i, true),
            _ => return Err(Error::shape("linear", format!("input {:?}", sx))),
        };
        if sw.len() != 2 || sw[1] != fan_in {
            return Err(Error::shape("linear", format!("input {:?} vs weight {:?}", sx, sw)));
        }
        let fan_out = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [fan_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs weight {:?}", self.shape(b), sw),
                ));
            }
        }
        let (x, w) = (self.data(input), self.data(weight));
        let mut out = vec![0.0; batch * fan_out];
        for bi in 0..batch {
            let xr = &x[bi * fan_in..(bi + 1) * fan_in];
            for o in 0..fan_out {
                let wr = &w[o * fan_in..(o + 1) * fan_in];
                out[bi * fan_out + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = bias {
            let bd = self.data(b);
            for row in out.chunks_mut(fan_out) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let shape = if batched { vec![batch, fan_out] } else { vec![fan_out] };
        self.push(
            "linear",
            Tensor::from_parts(shape, out),
            Op::Linear { input, weight, bias },
        )
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.map("scale", a, |x| x * factor, Op::Scale(a, factor))
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push(name, value, op)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map(
            "leaky_relu",
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.map("elu", a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    /// Concatenate tensors of equal rank along `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return Err(Error::shape("concat", "no inputs")),
        };
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {} out of range for {:?}", axis, first),
            ));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {}", s, first, axis),
                ));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.data(*v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Softmax over the last axis. Entries where `mask` is false get exactly
    /// zero weight; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let x = self.data(a);
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(Error::shape(
                    "softmax",
                    format!("mask of {} entries for {:?}", m.len(), shape),
                ));
            }
        }
        let keep = |i: usize| mask.map_or(true, |m| m[i]);
        let mut out = vec![0.0; x.len()];
        for (r, row) in out.chunks_mut(width.max(1)).enumerate() {
            let base = r * width;
            let max = (0..width)
                .filter(|&j| keep(base + j))
                .map(|j| x[base + j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for (j, o) in row.iter_mut().enumerate() {
                if keep(base + j) {
                    *o = (x[base + j] - max).exp();
                    total += *o;
                }
            }
            for o in row.iter_mut() {
                *o /= total;
            }
        }
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(a))
    }

    /// Dilated causal 1-D convolution.
    ///
    /// `input: [batch, in_ch, time]`, `weight: [out_ch, in_ch, kernel]`.
    /// Tap `j` reads `input[t - (kernel-1-j)*dilation]`; indices before the
    /// start are zero, so `out[t]` depends only on `input[..=t]`.
    pub fn causal_conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let sx = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || dilation == 0 {
            return Err(Error::shape(
                "dilated_causal_conv1d",
                format!("input {:?}, kernel {:?}, dilation {}", sx, sw, dilation),
            ));
        }
        let (batch, cin, time) = (sx[0], sx[1], sx[2]);
        let (cout, ksize) = (sw[0], sw[2]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "dilated_causal_conv1d",
                    format!("bias {:?} for {} output channels", self.shape(b), cout),
                ));
            }
        }
        let (x, w) = (self.data(input), self.data(weight));
        let mut out = vec![0.0; batch * cout * time];
        for b in 0..batch {
            for o in 0..cout {
                let orow = &mut out[(b * cout + o) * time..(b * cout + o + 1) * time];
                if let Some(bv) = bias {
                    orow.fill(self.nodes[bv.0].value.data()[o]);
                }
                for i in 0..cin {
                    let xrow = &x[(b * cin + i) * time..(b * cin + i + 1) * time];
                    for j in 0..ksize {
                        let wv = w[(o * cin + i) * ksize + j];
                        let shift = (ksize - 1 - j) * dilation;
                        if shift >= time {
                            continue;
                        }
                        for t in shift..time {
                            orow[t] += wv * xrow[t - shift];
                        }
                    }
                }
            }
        }
        self.push(
            "dilated_causal_conv1d",
            Tensor::from_parts(vec![batch, cout, time], out),
            Op::CausalConv1d {
                input,
                weight,
                bias,
                dilation,
            },
        )
    }

    /// Inverted dropout. With `spatial`, a `[batch, channels, time]` input
    /// drops whole channels. Callers skip this in inference mode, where
    /// dropout is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, spatial: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", rate)));
        }
        if rate == 0.0 {
            return Ok(input);
        }
        let shape = self.shape(input).to_vec();
        let keep = 1.0 / (1.0 - rate);
        let mut draw = || if rng.random::<f64>() < rate { 0.0 } else { keep };
        let mask: Vec<f64> = if spatial && shape.len() == 3 {
            let time = shape[2];
            let mut m = Vec::with_capacity(shape.iter().product());
            for _ in 0..shape[0] * shape[1] {
                let v = draw();
                m.extend(std::iter::repeat_n(v, time));
            }
            m
        } else {
            (0..self.data(input).len()).map(|_| draw()).collect()
        };
        let out = self.data(input).iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.push("dropout", Tensor::from_parts(shape, out), Op::Dropout { input, mask })
    }

    /// `mu + exp(logvar / 2) * eps` with a caller-supplied `eps`.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eps: Tensor) -> Result<Var> {
        self.same_shape("gaussian_sample_reparam", mu, logvar)?;
        if eps.shape() != self.shape(mu) {
            return Err(Error::shape(
                "gaussian_sample_reparam",
                format!("eps {:?} vs mu {:?}", eps.shape(), self.shape(mu)),
            ));
        }
        let eps = eps.into_data();
        let out = self
            .data(mu)
            .iter()
            .zip(self.data(logvar))
            .zip(&eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let value = Tensor::from_parts(self.shape(mu).to_vec(), out);
        self.push("gaussian_sample_reparam", value, Op::Reparam { mu, logvar, eps })
    }

    /// Reparameterized draw with `eps ~ N(0, I)` taken from `rng`.
    pub fn gaussian_sample_reparam<R: Rng + ?Sized>(&mut self, mu: Var, logvar: Var, rng: &mut R) -> Result<Var> {
        let shape = self.shape(mu).to_vec();
        let eps = Tensor::standard_normal(shape, rng);
        self.reparameterize(mu, logvar, eps)
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.data(a).len();
        if n == 0 {
            return Err(Error::shape("mse", "empty input"));
        }
        let total: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push("mse", Tensor::scalar(total / n as f64), Op::Mse(a, b))
    }

    /// `KL(N(mu, diag(exp(logvar))) || N(0, I))`, summed over all elements.
    pub fn kl_standard_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        self.same_shape("kl_standard_normal", mu, logvar)?;
        let total: f64 = self
            .data(mu)
            .iter()
            .zip(self.data(logvar))
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum();
        self.push(
            "kl_standard_normal",
            Tensor::scalar(0.5 * total),
            Op::KlStandardNormal { mu, logvar },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.data(a).iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a))
    }

    /// `[batch, channels, time] -> [batch, channels]`, keeping the final step.
    pub fn last_step(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[2] == 0 {
            return Err(Error::shape("last_step", format!("input {:?}", s)));
        }
        let time = s[2];
        let out = self.data(a).chunks(time).map(|c| c[time - 1]).collect();
        self.push("last_step", Tensor::from_parts(vec![s[0], s[1]], out), Op::LastStep(a))
    }

    /// Select rows of a `[n, features]` tensor.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::shape("gather_rows", format!("rows {:?} from {:?}", rows, s)));
        }
        let width = s[1];
        let x = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&x[r * width..(r + 1) * width]);
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![rows.len(), width], out),
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
        )
    }

    /// `out[i, j] = a[i] + b[j]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sb.len() != 1 {
            return Err(Error::shape("outer_add", format!("{:?} and {:?}", sa, sb)));
        }
        let (x, y) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(sa[0] * sb[0]);
        for xi in x {
            out.extend(y.iter().map(|yj| xi + yj));
        }
        self.push(
            "outer_add",
            Tensor::from_parts(vec![sa[0], sb[0]], out),
            Op::OuterAdd(a, b),
        )
    }

    /// Double integration of per-step accelerations.
    ///
    /// `accel: [batch, steps, dims]`, `prev`/`curr: [batch, dims]`. Runs
    /// `p[j+1] = 2 p[j] - p[j-1] + a[j] dt^2` from `p[-1] = prev`,
    /// `p[0] = curr` and returns `p[1..=steps]`.
    pub fn kinematic_integrate(&mut self, accel: Var, prev: Var, curr: Var, dt: f64) -> Result<Var> {
        let sa = self.shape(accel).to_vec();
        if sa.len() != 3 || self.shape(prev) != [sa[0], sa[2]] || self.shape(curr) != [sa[0], sa[2]] {
            return Err(Error::shape(
                "kinematic_integrate",
                format!(
                    "accel {:?}, prev {:?}, curr {:?}",
                    sa,
                    self.shape(prev),
                    self.shape(curr)
                ),
            ));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!("integration step {} must be positive", dt)));
        }
        let (batch, steps, dims) = (sa[0], sa[1], sa[2]);
        let dt2 = dt * dt;
        let (a, p0, p1) = (self.data(accel), self.data(prev), self.data(curr));
        let mut out = vec![0.0; batch * steps * dims];
        for b in 0..batch {
            for d in 0..dims {
                let mut before = p0[b * dims + d];
                let mut now = p1[b * dims + d];
                for j in 0..steps {
                    let next = 2.0 * now - before + a[(b * steps + j) * dims + d] * dt2;
                    out[(b * steps + j) * dims + d] = next;
                    before = now;
                    now = next;
                }
            }
        }
        self.push(
            "kinematic_integrate",
            Tensor::from_parts(sa, out),
            Op::Kinematic { accel, prev, curr, dt },
        )
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::shape("backward", "empty tape"));
        }
        let loss_shape = self.shape(loss);
        if !(loss_shape.is_empty() || loss_shape == [1]) {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", loss_shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let target = &self.nodes[v.0];
            if !target.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; target.value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += (0..n).map(|j| g[i * n + j] * db[p * n + j]).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = da[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let sw = self.shape(*weight);
                let (fan_out, fan_in) = (sw[0], sw[1]);
                let batch = g.len() / fan_out;
                let (x, w) = (self.data(*input), self.data(*weight));
                acc(*input, &mut |gx| {
                    for b in 0..batch {
                        for o in 0..fan_out {
                            let go = g[b * fan_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for i in 0..fan_in {
                                gx[b * fan_in + i] += go * w[o * fan_in + i];
                            }
                        }
                    }
                });
                acc(*weight, &mut |gw| {
                    for b in 0..batch {
                        for o in 0..fan_out {
                            let go = g[b * fan_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for i in 0..fan_in {
                                gw[o * fan_in + i] += go * x[b * fan_in + i];
                            }
                        }
                    }
                });
                if let Some(bias) = bias {
                    acc(*bias, &mut |gb| {
                        for row in g.chunks(fan_out) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for ((o, v), y) in ga.iter_mut().zip(g).zip(db) {
                        *o += v * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, v), x) in gb.iter_mut().zip(g).zip(da) {
                        *o += v * x;
                    }
                });
            }
            Op::Scale(a, factor) => acc(*a, &mut |ga| {
                for (o, v) in ga.iter_mut().zip(g) {
                    *o += v * factor;
                }
            }),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis] * inner;
                    acc(*v, &mut |gv| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            add_into(&mut gv[o * len..(o + 1) * len], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((o, v), xi) in ga.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *o += v;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((o, v), xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += if *xi > 0.0 { *v } else { v * slope };
                    }
                });
            }
            Op::Elu(a) => {
                let x = self.data(*a);
                acc(*a, &mut |ga| {
                    for (((o, v), xi), yi) in ga.iter_mut().zip(g).zip(x).zip(out) {
                        *o += if *xi > 0.0 { *v } else { v * (yi + 1.0) };
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((o, v), y) in ga.iter_mut().zip(g).zip(out) {
                    *o += v * y;
                }
            }),
            Op::Softmax(a) => {
                let width = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &mut |ga| {
                    for ((gr, yr), orow) in g.chunks(width).zip(out.chunks(width)).zip(ga.chunks_mut(width)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in orow.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::CausalConv1d {
                input,
                weight,
                bias,
                dilation,
            } => {
                let sx = self.shape(*input);
                let sw = self.shape(*weight);
                let (batch, cin, time) = (sx[0], sx[1], sx[2]);
                let (cout, ksize) = (sw[0], sw[2]);
                let (x, w) = (self.data(*input), self.data(*weight));
                acc(*input, &mut |gx| {
                    for b in 0..batch {
                        for o in 0..cout {
                            let grow = &g[(b * cout + o) * time..(b * cout + o + 1) * time];
                            for i in 0..cin {
                                let gxrow = &mut gx[(b * cin + i) * time..(b * cin + i + 1) * time];
                                for j in 0..ksize {
                                    let wv = w[(o * cin + i) * ksize + j];
                                    let shift = (ksize - 1 - j) * dilation;
                                    for t in shift..time {
                                        gxrow[t - shift] += wv * grow[t];
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*weight, &mut |gw| {
                    for b in 0..batch {
                        for o in 0..cout {
                            let grow = &g[(b * cout + o) * time..(b * cout + o + 1) * time];
                            for i in 0..cin {
                                let xrow = &x[(b * cin + i) * time..(b * cin + i + 1) * time];
                                for j in 0..ksize {
                                    let shift = (ksize - 1 - j) * dilation;
                                    let mut s = 0.0;
                                    for t in shift..time {
                                        s += grow[t] * xrow[t - shift];
                                    }
                                    gw[(o * cin + i) * ksize + j] += s;
                                }
                            }
                        }
                    }
                });
                if let Some(bias) = bias {
                    acc(*bias, &mut |gb| {
                        for b in 0..batch {
                            for (o, slot) in gb.iter_mut().enumerate() {
                                *slot += g[(b * cout + o) * time..(b * cout + o + 1) * time].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::Dropout { input, mask } => acc(*input, &mut |gx| {
                for ((o, v), m) in gx.iter_mut().zip(g).zip(mask) {
                    *o += v * m;
                }
            }),
            Op::Reparam { mu, logvar, eps } => {
                let lv = self.data(*logvar);
                acc(*mu, &mut |gm| add_into(gm, g));
                acc(*logvar, &mut |gl| {
                    for (((o, v), l), e) in gl.iter_mut().zip(g).zip(lv).zip(eps) {
                        *o += v * 0.5 * (0.5 * l).exp() * e;
                    }
                });
            }
            Op::Mse(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let scale = 2.0 * g[0] / da.len() as f64;
                acc(*a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(da).zip(db) {
                        *o += scale * (x - y);
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(da).zip(db) {
                        *o -= scale * (x - y);
                    }
                });
            }
            Op::KlStandardNormal { mu, logvar } => {
                let (m, lv) = (self.data(*mu), self.data(*logvar));
                acc(*mu, &mut |gm| {
                    for (o, x) in gm.iter_mut().zip(m) {
                        *o += g[0] * x;
                    }
                });
                acc(*logvar, &mut |gl| {
                    for (o, l) in gl.iter_mut().zip(lv) {
                        *o += g[0] * 0.5 * (l.exp() - 1.0);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::LastStep(a) => {
                let time = self.shape(*a)[2];
                acc(*a, &mut |ga| {
                    for (row, v) in ga.chunks_mut(time).zip(g) {
                        row[time - 1] += v;
                    }
                });
            }
            Op::GatherRows { input, rows } => {
                let width = self.shape(*input)[1];
                acc(*input, &mut |ga| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * width..(r + 1) * width], &g[k * width..(k + 1) * width]);
                    }
                });
            }
            Op::OuterAdd(a, b) => {
                let m = self.shape(*b)[0];
                acc(*a, &mut |ga| {
                    for (o, row) in ga.iter_mut().zip(g.chunks(m)) {
                        *o += row.iter().sum::<f64>();
                    }
                });
                acc(*b, &mut |gb| {
                    for row in g.chunks(m) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Kinematic { accel, prev, curr, dt } => {
                let sa = self.shape(*accel);
                let (batch, steps, dims) = (sa[0], sa[1], sa[2]);
                let dt2 = dt * dt;
                // p[j] = curr + (j+1)(curr - prev) + dt^2 sum_{m<=j} (j-m+1) a[m], j = 0-based
                acc(*accel, &mut |ga| {
                    for b in 0..batch {
                        for d in 0..dims {
                            let mut tail = 0.0;
                            let mut weighted = 0.0;
                            for m in (0..steps).rev() {
                                let at = (b * steps + m) * dims + d;
                                tail += g[at];
                                weighted += tail;
                                ga[at] += dt2 * weighted;
                            }
                        }
                    }
                });
                acc(*curr, &mut |gc| {
                    for b in 0..batch {
                        for j in 0..steps {
                            for d in 0..dims {
                                gc[b * dims + d] += (j as f64 + 2.0) * g[(b * steps + j) * dims + d];
                            }
                        }
                    }
                });
                acc(*prev, &mut |gp| {
                    for b in 0..batch {
                        for j in 0..steps {
                            for d in 0..dims {
                                gp[b * dims + d] -= (j as f64 + 1.0) * g[(b * steps + j) * dims + d];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
