//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and the reverse pass is a single backwards sweep.
//! Gradients flowing into a node from several consumers are summed.

use super::conv::{conv2d_backward, conv2d_forward};
use super::tensor::{broadcast_zip, reduce_to, Real, Tensor};
use crate::error::{Result, SimiError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Logistic { x: Var, sharpness: T },
    Silu(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Clamp { x: Var, lo: T, hi: T },
    Conv2d { x: Var, weight: Var, bias: Var, stride: usize, padding: usize },
    Sum(Var),
    Mean(Var),
    MeanSpatial(Var),
    MaxSpatial { x: Var, argmax: Vec<usize> },
    SumChannels(Var),
    MaxChannels { x: Var, argmax: Vec<usize> },
    Concat(Vec<Var>),
    DiffX(Var),
    DiffY(Var),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// `f(upstream, input, output)` elementwise.
fn unary_grad<T: Real>(g: &Tensor<T>, x: &Tensor<T>, out: &Tensor<T>, f: impl Fn(T, T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(x.data()).zip(out.data()).map(|((&u, &v), &y)| f(u, v, y)).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Logistic `1 / (1 + e^{-k x})`, evaluated without overflow.
pub fn logistic<T: Real>(x: T, sharpness: T) -> T {
    let z = sharpness * x;
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    div_floor: T,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Smallest admissible denominator magnitude for [`Graph::div`].
    pub const DEFAULT_DIV_FLOOR: f64 = 1e-12;

    pub fn new() -> Self {
        Self { nodes: Vec::new(), div_floor: T::of(Self::DEFAULT_DIV_FLOOR) }
    }

    pub fn with_div_floor(floor: T) -> Self {
        Self { nodes: Vec::new(), div_floor: floor }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), f)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise quotient; fails if any denominator is within the floor of zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let floor = self.div_floor;
        if let Some(&bad) = self.value(b).data().iter().find(|d| !(d.abs() >= floor)) {
            return Err(SimiError::DivisionRangeViolation { value: bad.as_f64(), floor: floor.as_f64() });
        }
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let value = self.value(x).map(|v| v * k);
        self.push(value, Op::Scale(x, k), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::Offset(x), &[x])
    }

    /// `1 / (1 + e^{-k x})`; `k = 1` is the standard logistic.
    pub fn logistic(&mut self, x: Var, sharpness: T) -> Var {
        let value = self.value(x).map(|v| logistic(v, sharpness));
        self.push(value, Op::Logistic { x, sharpness }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.logistic(x, T::one())
    }

    /// The gate of the recursive update, `1 / (1 + e^{-10 x})`.
    pub fn sharp_sigmoid(&mut self, x: Var) -> Var {
        self.logistic(x, T::of(10.0))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * logistic(v, T::one()));
        self.push(value, Op::Silu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push(value, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(value, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let value = conv2d_forward(self.value(x), self.value(weight), self.value(bias), stride, padding)?;
        Ok(self.push(value, Op::Conv2d { x, weight, bias, stride, padding }, &[x, weight, bias]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::Mean(x), &[x])
    }

    /// Global average pool: `(N, C, H, W) -> (N, C, 1, 1)`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        let hw = h * w;
        let data = t.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() / T::of(hw as f64)).collect();
        let value = Tensor::new(&[n, c, 1, 1], data)?;
        Ok(self.push(value, Op::MeanSpatial(x), &[x]))
    }

    /// Global max pool: `(N, C, H, W) -> (N, C, 1, 1)`; ties go to the first index.
    pub fn max_spatial(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        let hw = h * w;
        let mut argmax = Vec::with_capacity(n * c);
        let mut data = Vec::with_capacity(n * c);
        for (p, plane) in t.data().chunks(hw).enumerate() {
            let (best, v) = plane
                .iter()
                .enumerate()
                .fold((0, plane[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            argmax.push(p * hw + best);
            data.push(v);
        }
        let value = Tensor::new(&[n, c, 1, 1], data)?;
        Ok(self.push(value, Op::MaxSpatial { x, argmax }, &[x]))
    }

    /// `(N, C, H, W) -> (N, 1, H, W)` sum over channels.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        let hw = h * w;
        let mut data = vec![T::zero(); n * hw];
        for b in 0..n {
            for ch in 0..c {
                let src = &t.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (d, &s) in data[b * hw..(b + 1) * hw].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let value = Tensor::new(&[n, 1, h, w], data)?;
        Ok(self.push(value, Op::SumChannels(x), &[x]))
    }

    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).dims4()?.1;
        let s = self.sum_channels(x)?;
        Ok(self.scale(s, T::one() / T::of(c as f64)))
    }

    /// `(N, C, H, W) -> (N, 1, H, W)` max over channels.
    pub fn max_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        let hw = h * w;
        let mut data = Vec::with_capacity(n * hw);
        let mut argmax = Vec::with_capacity(n * hw);
        for b in 0..n {
            for p in 0..hw {
                let mut best = (b * c) * hw + p;
                for ch in 1..c {
                    let at = (b * c + ch) * hw + p;
                    if t.data()[at] > t.data()[best] {
                        best = at;
                    }
                }
                argmax.push(best);
                data.push(t.data()[best]);
            }
        }
        let value = Tensor::new(&[n, 1, h, w], data)?;
        Ok(self.push(value, Op::MaxChannels { x, argmax }, &[x]))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(SimiError::ShapeMismatch("concat of zero tensors".into()));
        };
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(SimiError::ShapeMismatch(format!(
                    "concat {:?} with {:?}",
                    self.shape(p),
                    self.shape(first)
                )));
            }
            total += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let value = Tensor::new(&[n, total, h, w], data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Forward differences along width and height; the last column (resp.
    /// row) is zero.
    pub fn spatial_gradient(&mut self, x: Var) -> Result<(Var, Var)> {
        let t = self.value(x);
        let (_, _, h, w) = t.dims4()?;
        let mut dx = Tensor::zeros(t.shape());
        let mut dy = Tensor::zeros(t.shape());
        for (p, plane) in t.data().chunks(h * w).enumerate() {
            let base = p * h * w;
            for r in 0..h {
                for c in 0..w {
                    let at = r * w + c;
                    if c + 1 < w {
                        dx.data_mut()[base + at] = plane[at + 1] - plane[at];
                    }
                    if r + 1 < h {
                        dy.data_mut()[base + at] = plane[at + w] - plane[at];
                    }
                }
            }
        }
        let gx = self.push(dx, Op::DiffX(x), &[x]);
        let gy = self.push(dy, Op::DiffY(x), &[x]);
        Ok((gx, gy))
    }

    /// Runs the reverse pass from a scalar `loss`, leaving `∂loss/∂node` on
    /// every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(SimiError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (v, contrib) in self.local_grads(i, &g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let unary = |x: Var, f: fn(T, T, T, T) -> T, k: T| unary_grad(g, val(x), out, |u, v, y| f(u, v, y, k));
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, reduce_to(g, val(*a).shape())), (*b, reduce_to(g, val(*b).shape()))],
            Op::Sub(a, b) => {
                let neg = g.map(|v| -v);
                vec![(*a, reduce_to(g, val(*a).shape())), (*b, reduce_to(&neg, val(*b).shape()))]
            }
            Op::Mul(a, b) => {
                let ga = broadcast_zip(g, val(*b), |u, y| u * y)?;
                let gb = broadcast_zip(g, val(*a), |u, x| u * x)?;
                vec![(*a, reduce_to(&ga, val(*a).shape())), (*b, reduce_to(&gb, val(*b).shape()))]
            }
            Op::Div(a, b) => {
                let g_over_b = broadcast_zip(g, val(*b), |u, y| u / y)?;
                let gb = broadcast_zip(&g_over_b, out, |t, q| -t * q)?;
                vec![(*a, reduce_to(&g_over_b, val(*a).shape())), (*b, reduce_to(&gb, val(*b).shape()))]
            }
            Op::Scale(x, k) => vec![(*x, g.map(|u| u * *k))],
            Op::Offset(x) => vec![(*x, g.clone())],
            Op::Logistic { x, sharpness } => {
                vec![(*x, unary(*x, |u, _, y, k| u * k * y * (T::one() - y), *sharpness))]
            }
            Op::Silu(x) => vec![(
                *x,
                unary(
                    *x,
                    |u, v, _, _| {
                        let s = logistic(v, T::one());
                        u * s * (T::one() + v * (T::one() - s))
                    },
                    T::zero(),
                ),
            )],
            Op::Relu(x) => vec![(*x, unary(*x, |u, v, _, _| if v > T::zero() { u } else { T::zero() }, T::zero()))],
            Op::Abs(x) => vec![(
                *x,
                unary(
                    *x,
                    |u, v, _, _| {
                        if v > T::zero() {
                            u
                        } else if v < T::zero() {
                            -u
                        } else {
                            T::zero()
                        }
                    },
                    T::zero(),
                ),
            )],
            Op::Square(x) => vec![(*x, unary(*x, |u, v, _, _| u * (v + v), T::zero()))],
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                vec![(*x, unary_grad(g, val(*x), out, |u, v, _| if v >= lo && v <= hi { u } else { T::zero() }))]
            }
            Op::Conv2d { x, weight, bias, stride, padding } => {
                let input_grad = self.nodes[x.0].requires_grad;
                let (gx, gw, gb) = conv2d_backward(val(*x), val(*weight), g, *stride, *padding, input_grad)?;
                let mut res = vec![(*weight, gw), (*bias, gb)];
                res.extend(gx.map(|gx| (*x, gx)));
                res
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Mean(x) => {
                let n = T::of(val(*x).numel() as f64);
                vec![(*x, Tensor::full(val(*x).shape(), g.item() / n))]
            }
            Op::MeanSpatial(x) => {
                let xs = val(*x);
                let (_, _, h, w) = xs.dims4()?;
                let hw = h * w;
                let inv = T::one() / T::of(hw as f64);
                vec![(*x, Tensor::from_fn(xs.shape(), |k| g.data()[k / hw] * inv))]
            }
            Op::MaxSpatial { x, argmax } | Op::MaxChannels { x, argmax } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (&at, &u) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[at] = gx.data()[at] + u;
                }
                vec![(*x, gx)]
            }
            Op::SumChannels(x) => {
                let xs = val(*x);
                let (_, c, h, w) = xs.dims4()?;
                let hw = h * w;
                vec![(*x, Tensor::from_fn(xs.shape(), |k| g.data()[(k / (c * hw)) * hw + k % hw]))]
            }
            Op::Concat(parts) => {
                let (n, total, h, w) = out.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = val(p).shape()[1];
                    let mut gp = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        let start = (b * total + offset) * hw;
                        gp.extend_from_slice(&g.data()[start..start + c * hw]);
                    }
                    res.push((p, Tensor::new(val(p).shape(), gp)?));
                    offset += c;
                }
                res
            }
            Op::DiffX(x) | Op::DiffY(x) => {
                let xs = val(*x);
                let (_, _, h, w) = xs.dims4()?;
                let along_x = matches!(node.op, Op::DiffX(_));
                let mut gx = Tensor::zeros(xs.shape());
                let gd = gx.data_mut();
                for p in 0..xs.numel() / (h * w) {
                    let base = p * h * w;
                    for r in 0..h {
                        for c in 0..w {
                            let at = base + r * w + c;
                            let next = if along_x {
                                (c + 1 < w).then_some(at + 1)
                            } else {
                                (r + 1 < h).then_some(at + w)
                            };
                            if let Some(nx) = next {
                                let u = g.data()[at];
                                gd[nx] = gd[nx] + u;
                                gd[at] = gd[at] - u;
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
        })
    }
}
