//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is a topological
//! order by construction and [`Graph::backward`] is a single reverse sweep.
//! Gradients are only propagated into nodes that depend on a leaf.
//!
//! Conventions at non-differentiable points: `abs'(0) = relu'(0) = 0`;
//! `max` and `inf_norm` route the gradient to the first arg-max; `clamp`
//! passes the gradient wherever the input was inside `[lo, hi]`.

use crate::error::{Error, Result};
use crate::learn::conv;
use crate::tensor::{avg_pool_same, avg_pool_same_adjoint, resize_bilinear, resize_bilinear_adjoint, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: T },
    ClampMin { x: Var, min: T },
    Clamp { x: Var, lo: T, hi: T },
    Abs(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    Max { x: Var, arg: usize },
    InfNorm { x: Var, arg: usize },
    Maximum(Var, Var),
    ChannelMean(Var),
    ChannelAffine { x: Var, scale: Vec<T> },
    ChannelMaskedSum { x: Var, mask: Vec<T> },
    Conv { x: Var, w: Var, b: Var, dilation: usize },
    AvgPool { x: Var, kh: usize, kw: usize },
    Resize { x: Var, in_h: usize, in_w: usize },
    Paste { base: Var, patch: Var, top: usize, left: usize },
    CrossEntropy { logits: Var, softmax: Vec<T>, labels: Vec<usize> },
    Bce { pred: Var, target: Vec<T> },
    Smoothness(Var),
    NonPrintability { x: Var, palette: Vec<[T; 3]> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` if the output does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

fn broadcast_ok<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(())
    } else {
        Err(Error::shape(format!("cannot combine {:?} with {:?}", a.shape(), b.shape())))
    }
}

fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = if b.numel() == 1 && a.numel() != 1 {
        let s = b.data()[0];
        a.data().iter().map(|&x| f(x, s)).collect()
    } else {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    };
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

/// Gradient for a possibly-broadcast right operand: sums down to one element
/// when `b` was broadcast.
fn reduce_to<T: Real>(g: Tensor<T>, b_shape: &[usize]) -> Tensor<T> {
    if g.shape() == b_shape {
        g
    } else {
        Tensor::new(b_shape.to_vec(), vec![T::of(g.sum())]).expect("scalar")
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, tracked: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Constant, tracked: false });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        broadcast_ok(self.value(a), self.value(b))?;
        let v = binary(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        broadcast_ok(self.value(a), self.value(b))?;
        let v = binary(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        broadcast_ok(self.value(a), self.value(b))?;
        let v = binary(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        broadcast_ok(self.value(a), self.value(b))?;
        let v = binary(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    /// `x * scale + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let v = self.value(x).map(|e| e * scale + shift);
        self.push(v, Op::Affine { x, scale }, &[x])
    }

    /// `max(x, min)`; used to guard denominators.
    pub fn clamp_min(&mut self, x: Var, min: T) -> Var {
        let v = self.value(x).map(|e| e.max(min));
        self.push(v, Op::ClampMin { x, min }, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).map(|e| e.max(lo).min(hi));
        self.push(v, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.abs());
        self.push(v, Op::Abs(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(T::zero()));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.tanh());
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.sqrt());
        self.push(v, Op::Sqrt(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(T::of(self.value(x).sum()));
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(T::of(self.value(x).mean()));
        self.push(v, Op::Mean(x), &[x])
    }

    /// Global maximum.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let arg =
            first_argmax(self.value(x).data().iter().copied()).ok_or_else(|| Error::shape("max of an empty tensor"))?;
        let v = Tensor::scalar(self.value(x).data()[arg]);
        Ok(self.push(v, Op::Max { x, arg }, &[x]))
    }

    /// `max |x|` over every element.
    pub fn inf_norm(&mut self, x: Var) -> Result<Var> {
        let arg = first_argmax(self.value(x).data().iter().map(|e| e.abs()))
            .ok_or_else(|| Error::shape("norm of an empty tensor"))?;
        let v = Tensor::scalar(self.value(x).data()[arg].abs());
        Ok(self.push(v, Op::InfNorm { x, arg }, &[x]))
    }

    /// Elementwise maximum; ties go to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| if x >= y { x } else { y })?;
        Ok(self.push(v, Op::Maximum(a, b), &[a, b]))
    }

    /// `C x H x W -> 1 x H x W` mean over channels.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x);
        let inv = T::of(1.0 / c as f64);
        let data = (0..h * w)
            .map(|p| {
                let s: f64 = (0..c).map(|ch| src.plane(ch)[p].f64()).sum();
                T::of(s) * inv
            })
            .collect();
        let v = Tensor::new(vec![1, h, w], data)?;
        Ok(self.push(v, Op::ChannelMean(x), &[x]))
    }

    /// Per-channel `x * scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: Vec<T>, shift: Vec<T>) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape(format!("{c} channels, {} coefficients", scale.len())));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let data = (0..c * hw).map(|i| src[i] * scale[i / hw] + shift[i / hw]).collect();
        let v = Tensor::new(vec![c, h, w], data)?;
        Ok(self.push(v, Op::ChannelAffine { x, scale }, &[x]))
    }

    /// `s[c] = sum_{i,j} x[c, i, j] * mask[i, j]`, a length-`C` vector.
    pub fn channel_masked_sum(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if mask.numel() != h * w {
            return Err(Error::shape(format!("mask {:?} does not cover {h}x{w}", mask.shape())));
        }
        let m = mask.data();
        let data =
            (0..c).map(|ch| T::of(self.value(x).plane(ch).iter().zip(m).map(|(a, b)| (*a * *b).f64()).sum())).collect();
        let v = Tensor::new(vec![c], data)?;
        Ok(self.push(v, Op::ChannelMaskedSum { x, mask: m.to_vec() }, &[x]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let v = conv::conv2d_forward(self.value(x), self.value(w), self.value(b), dilation)?;
        Ok(self.push(v, Op::Conv { x, w, b, dilation }, &[x, w, b]))
    }

    pub fn avg_pool(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let v = avg_pool_same(self.value(x), kh, kw)?;
        Ok(self.push(v, Op::AvgPool { x, kh, kw }, &[x]))
    }

    /// Bilinear resize; returns `x` itself when the size already matches.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, in_h, in_w) = self.value(x).dims3()?;
        if (in_h, in_w) == (out_h, out_w) {
            return Ok(x);
        }
        let v = resize_bilinear(self.value(x), out_h, out_w)?;
        Ok(self.push(v, Op::Resize { x, in_h, in_w }, &[x]))
    }

    /// Copies `patch` over `base` with its top-left corner at `(top, left)`.
    pub fn paste(&mut self, base: Var, patch: Var, top: usize, left: usize) -> Result<Var> {
        let (c, h, w) = self.value(base).dims3()?;
        let (pc, ph, pw) = self.value(patch).dims3()?;
        if pc != c || top + ph > h || left + pw > w {
            return Err(Error::invalid(format!("patch {pc}x{ph}x{pw} at ({top}, {left}) does not fit {c}x{h}x{w}")));
        }
        let mut v = self.value(base).clone();
        let src = self.value(patch).data().to_vec();
        let dst = v.data_mut();
        for ch in 0..c {
            for y in 0..ph {
                let d = (ch * h + top + y) * w + left;
                let s = (ch * ph + y) * pw;
                dst[d..d + pw].copy_from_slice(&src[s..s + pw]);
            }
        }
        Ok(self.push(v, Op::Paste { base, patch, top, left }, &[base, patch]))
    }

    /// Mean per-pixel softmax cross-entropy of `N x H x W` logits against a
    /// label map of `H * W` class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, h, w) = self.value(logits).dims3()?;
        let hw = h * w;
        if labels.len() != hw {
            return Err(Error::shape(format!("{} labels for {h}x{w} logits", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::invalid(format!("label {bad} outside {n} classes")));
        }
        let z = self.value(logits).data();
        let mut softmax = vec![T::zero(); n * hw];
        let mut total = 0.0f64;
        for p in 0..hw {
            let m = (0..n).map(|c| z[c * hw + p]).fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for c in 0..n {
                let e = (z[c * hw + p] - m).exp();
                softmax[c * hw + p] = e;
                denom += e;
            }
            for c in 0..n {
                softmax[c * hw + p] = softmax[c * hw + p] / denom;
            }
            let lse = m.f64() + denom.f64().ln();
            total += lse - z[labels[p] * hw + p].f64();
        }
        let v = Tensor::scalar(T::of(total / hw as f64));
        Ok(self.push(v, Op::CrossEntropy { logits, softmax, labels: labels.to_vec() }, &[logits]))
    }

    /// Mean binary cross-entropy; predictions are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        self.value(pred).expect_same_shape(target)?;
        let v = Tensor::scalar(T::of(bce_value(self.value(pred).data(), target.data())));
        Ok(self.push(v, Op::Bce { pred, target: target.data().to_vec() }, &[pred]))
    }

    /// Sum of squared forward differences along rows and columns, all channels.
    pub fn smoothness(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(T::of(smoothness_value(self.value(x))?));
        Ok(self.push(v, Op::Smoothness(x), &[x]))
    }

    /// Mean over pixels of the product of Euclidean distances to each palette colour.
    pub fn non_printability(&mut self, x: Var, palette: &[[T; 3]]) -> Result<Var> {
        let (c, _, _) = self.value(x).dims3()?;
        if c != 3 {
            return Err(Error::shape("non-printability needs an RGB patch"));
        }
        if palette.is_empty() {
            return Err(Error::invalid("empty palette"));
        }
        let t = self.value(x);
        let hw = t.numel() / 3;
        let total: f64 =
            (0..hw).map(|p| palette.iter().map(|col| pixel_distance(t, hw, p, col).f64()).product::<f64>()).sum();
        let v = Tensor::scalar(T::of(total / hw as f64));
        Ok(self.push(v, Op::NonPrintability { x, palette: palette.to_vec() }, &[x]))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar output, got {:?}", self.value(output).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(self.value(output).shape().to_vec(), vec![T::one()])?);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let tracked = |v: &Var| self.nodes[v.0].tracked;
        let mut send = |v: Var, t: Tensor<T>| accumulate(grads, v, t);
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if tracked(a) {
                    send(*a, g.clone());
                }
                if tracked(b) {
                    send(*b, reduce_to(g.clone(), self.value(*b).shape()));
                }
            }
            Op::Sub(a, b) => {
                if tracked(a) {
                    send(*a, g.clone());
                }
                if tracked(b) {
                    send(*b, reduce_to(g.map(|e| -e), self.value(*b).shape()));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if tracked(a) {
                    send(*a, binary(g, vb, |x, y| x * y));
                }
                if tracked(b) {
                    let prod = g.zip_map(va, |x, y| x * y)?;
                    send(*b, reduce_to(prod, vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if tracked(a) {
                    send(*a, binary(g, vb, |x, y| x / y));
                }
                if tracked(b) {
                    // d(a/b)/db = -a / b^2 = -out / b
                    let t = binary(&g.zip_map(&node.value, |x, y| -x * y)?, vb, |x, y| x / y);
                    send(*b, reduce_to(t, vb.shape()));
                }
            }
            Op::Affine { x, scale } => send(*x, g.map(|e| e * *scale)),
            Op::ClampMin { x, min } => {
                let m = *min;
                send(*x, g.zip_map(self.value(*x), |e, v| if v >= m { e } else { T::zero() })?);
            }
            Op::Clamp { x, lo, hi } => {
                let (l, h) = (*lo, *hi);
                send(*x, g.zip_map(self.value(*x), |e, v| if v >= l && v <= h { e } else { T::zero() })?);
            }
            Op::Abs(x) => send(*x, g.zip_map(self.value(*x), |e, v| e * sign(v))?),
            Op::Relu(x) => send(*x, g.zip_map(self.value(*x), |e, v| if v > T::zero() { e } else { T::zero() })?),
            Op::Tanh(x) => send(*x, g.zip_map(&node.value, |e, y| e * (T::one() - y * y))?),
            Op::Sigmoid(x) => send(*x, g.zip_map(&node.value, |e, y| e * y * (T::one() - y))?),
            Op::Sqrt(x) => {
                send(*x, g.zip_map(&node.value, |e, y| if y > T::zero() { e / (y + y) } else { T::zero() })?)
            }
            Op::Sum(x) => send(*x, Tensor::full(self.value(*x).shape(), gd[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1);
                send(*x, Tensor::full(self.value(*x).shape(), gd[0] / T::of(n as f64)));
            }
            Op::Max { x, arg } => {
                let mut t = Tensor::zeros(self.value(*x).shape());
                t.data_mut()[*arg] = gd[0];
                send(*x, t);
            }
            Op::InfNorm { x, arg } => {
                let mut t = Tensor::zeros(self.value(*x).shape());
                t.data_mut()[*arg] = gd[0] * sign(self.value(*x).data()[*arg]);
                send(*x, t);
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let shape = self.value(*a).shape();
                if tracked(a) {
                    let d = (0..gd.len()).map(|i| if va[i] >= vb[i] { gd[i] } else { T::zero() }).collect();
                    send(*a, Tensor::new(shape.to_vec(), d)?);
                }
                if tracked(b) {
                    let d = (0..gd.len()).map(|i| if va[i] >= vb[i] { T::zero() } else { gd[i] }).collect();
                    send(*b, Tensor::new(shape.to_vec(), d)?);
                }
            }
            Op::ChannelMean(x) => {
                let (c, h, w) = self.value(*x).dims3()?;
                let inv = T::of(1.0 / c as f64);
                let d = (0..c * h * w).map(|i| gd[i % (h * w)] * inv).collect();
                send(*x, Tensor::new(vec![c, h, w], d)?);
            }
            Op::ChannelAffine { x, scale } => {
                let (c, h, w) = self.value(*x).dims3()?;
                let hw = h * w;
                let d = (0..c * hw).map(|i| gd[i] * scale[i / hw]).collect();
                send(*x, Tensor::new(vec![c, h, w], d)?);
            }
            Op::ChannelMaskedSum { x, mask } => {
                let (c, h, w) = self.value(*x).dims3()?;
                let hw = h * w;
                let d = (0..c * hw).map(|i| gd[i / hw] * mask[i % hw]).collect();
                send(*x, Tensor::new(vec![c, h, w], d)?);
            }
            Op::Conv { x, w, b, dilation } => {
                if tracked(x) {
                    send(*x, conv::conv2d_backward_input(g, self.value(*w), *dilation)?);
                }
                if tracked(w) || tracked(b) {
                    let (gw, gb) = conv::conv2d_backward_params(g, self.value(*x), *dilation)?;
                    if tracked(w) {
                        send(*w, gw);
                    }
                    if tracked(b) {
                        send(*b, gb);
                    }
                }
            }
            Op::AvgPool { x, kh, kw } => send(*x, avg_pool_same_adjoint(g, *kh, *kw)?),
            Op::Resize { x, in_h, in_w } => send(*x, resize_bilinear_adjoint(g, *in_h, *in_w)?),
            Op::Paste { base, patch, top, left } => {
                let (c, h, w) = self.value(*base).dims3()?;
                let (_, ph, pw) = self.value(*patch).dims3()?;
                let mut gb = g.clone();
                let mut gp = Vec::with_capacity(c * ph * pw);
                for ch in 0..c {
                    for y in 0..ph {
                        let d = (ch * h + top + y) * w + left;
                        gp.extend_from_slice(&gd[d..d + pw]);
                        gb.data_mut()[d..d + pw].iter_mut().for_each(|e| *e = T::zero());
                    }
                }
                if tracked(base) {
                    send(*base, gb);
                }
                if tracked(patch) {
                    send(*patch, Tensor::new(vec![c, ph, pw], gp)?);
                }
            }
            Op::CrossEntropy { logits, softmax, labels } => {
                let shape = self.value(*logits).shape().to_vec();
                let hw = labels.len();
                let scale = gd[0] / T::of(hw as f64);
                let mut d: Vec<T> = softmax.iter().map(|&s| s * scale).collect();
                for (p, &l) in labels.iter().enumerate() {
                    d[l * hw + p] -= scale;
                }
                send(*logits, Tensor::new(shape, d)?);
            }
            Op::Bce { pred, target } => {
                let p = self.value(*pred);
                let n = T::of(p.numel().max(1) as f64);
                let (lo, hi) = (T::of(BCE_CLAMP), T::one() - T::of(BCE_CLAMP));
                let d = p
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&q, &t)| {
                        let q = q.max(lo).min(hi);
                        gd[0] * (q - t) / (q * (T::one() - q)) / n
                    })
                    .collect();
                send(*pred, Tensor::new(p.shape().to_vec(), d)?);
            }
            Op::Smoothness(x) => {
                let t = self.value(*x);
                let (c, h, w) = t.dims3()?;
                let v = t.data();
                let two = T::of(2.0) * gd[0];
                let mut d = vec![T::zero(); v.len()];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let i = (ch * h + y) * w + xx;
                            if y + 1 < h {
                                let diff = two * (v[i + w] - v[i]);
                                d[i + w] += diff;
                                d[i] -= diff;
                            }
                            if xx + 1 < w {
                                let diff = two * (v[i + 1] - v[i]);
                                d[i + 1] += diff;
                                d[i] -= diff;
                            }
                        }
                    }
                }
                send(*x, Tensor::new(t.shape().to_vec(), d)?);
            }
            Op::NonPrintability { x, palette } => {
                let t = self.value(*x);
                let hw = t.numel() / 3;
                let scale = gd[0] / T::of(hw as f64);
                let mut d = vec![T::zero(); t.numel()];
                let k = palette.len();
                for p in 0..hw {
                    let dist: Vec<T> = palette.iter().map(|c| pixel_distance(t, hw, p, c)).collect();
                    // products of all distances except the j-th, via prefix/suffix scans
                    let mut prefix = vec![T::one(); k + 1];
                    for j in 0..k {
                        prefix[j + 1] = prefix[j] * dist[j];
                    }
                    let mut suffix = T::one();
                    for j in (0..k).rev() {
                        let others = prefix[j] * suffix;
                        suffix *= dist[j];
                        if dist[j] > T::zero() {
                            for ch in 0..3 {
                                let diff = t.data()[ch * hw + p] - palette[j][ch];
                                d[ch * hw + p] += scale * others * diff / dist[j];
                            }
                        }
                    }
                }
                send(*x, Tensor::new(t.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += *b),
        slot @ None => *slot = Some(t),
    }
}

fn first_argmax<T: Real>(it: impl Iterator<Item = T>) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in it.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[inline]
fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub const BCE_CLAMP: f64 = 1e-7;

pub(crate) fn bce_value<T: Real>(pred: &[T], target: &[T]) -> f64 {
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let t = t.f64();
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    total / pred.len().max(1) as f64
}

pub(crate) fn smoothness_value<T: Real>(t: &Tensor<T>) -> Result<f64> {
    let (c, h, w) = t.dims3()?;
    let v = t.data();
    let mut s = 0.0f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = (ch * h + y) * w + x;
                if y + 1 < h {
                    s += (v[i + w] - v[i]).f64().powi(2);
                }
                if x + 1 < w {
                    s += (v[i + 1] - v[i]).f64().powi(2);
                }
            }
        }
    }
    Ok(s)
}

fn pixel_distance<T: Real>(t: &Tensor<T>, hw: usize, p: usize, col: &[T; 3]) -> T {
    let d = t.data();
    let s = (0..3).map(|ch| (d[ch * hw + p] - col[ch]).powi(2)).fold(T::zero(), |a, b| a + b);
    s.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_and_sigmoid_slopes_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let t = g.tanh(x);
        let grads = g.backward(t).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[3]));
        let y = g.abs(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn abs_and_relu_have_zero_slope_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let a = g.abs(x);
        let r = g.relu(x);
        let s = g.add(a, r).unwrap();
        let out = g.sum(s);
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, 0.0, 2.0]);
    }

    #[test]
    fn max_routes_to_first_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![4], vec![1.0, 3.0, 3.0, -5.0]).unwrap());
        let m = g.max(x).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, -4.0, 4.0]).unwrap());
        let n = g.inf_norm(x).unwrap();
        assert_eq!(g.scalar(n), 4.0);
        assert_eq!(g.backward(n).unwrap().get(x).unwrap().data(), &[0.0, -1.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn broadcast_scalar_gradient_sums() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = g.leaf(Tensor::scalar(0.5));
        let y = g.mul(x, w).unwrap();
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap().get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn bce_known_values() {
        let p = [0.9f64, 0.2];
        let t = [1.0f64, 0.0];
        let expect = -((0.9f64).ln() + (0.8f64).ln()) / 2.0;
        assert!((bce_value(&p, &t) - expect).abs() < 1e-15);
        assert!((bce_value(&[0.5f64; 4], &[0.0, 1.0, 1.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_value(&[1.0f64, 0.0], &[1.0, 0.0]) <= 1e-6);
    }

    #[test]
    fn paste_gradient_splits_between_base_and_patch() {
        let mut g = Graph::<f64>::new();
        let base = g.leaf(Tensor::zeros(&[1, 3, 3]));
        let patch = g.leaf(Tensor::ones(&[1, 2, 2]));
        let y = g.paste(base, patch, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let w = g.constant(Tensor::from_fn(&[1, 3, 3], |i| i as f64));
        let p = g.mul(y, w).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(patch).unwrap().data(), &[3.0, 4.0, 6.0, 7.0]);
        assert_eq!(grads.get(base).unwrap().data(), &[0.0, 1.0, 2.0, 0.0, 0.0, 5.0, 0.0, 0.0, 8.0]);
        assert!(g.paste(base, patch, 2, 2).is_err());
    }
}
