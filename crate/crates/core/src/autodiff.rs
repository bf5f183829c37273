//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] evaluates eagerly and, when any operand
//! requires a gradient, records a closure mapping the output gradient to
//! operand gradients. Nodes are appended in evaluation order, so a reverse
//! sweep over the tape is a valid topological order.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{ensure, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A graph that never records backward closures; for inference.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Rc::new(value), self.record)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Rc::new(value), false)
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push_op(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.record && parents.iter().any(|p| nodes[p.id].requires_grad);
        let (parent_ids, backward): (Vec<usize>, Option<BackwardFn<T>>) = if requires_grad {
            (parents.iter().map(|p| p.id).collect(), Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parent_ids,
            backward,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        ensure!(
            loss.value().len() == 1,
            Dimension,
            "backward needs a scalar loss, got shape {:?}",
            loss.value().shape()
        );
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(loss.value().shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad_out, &mask);
            for (&parent, grad) in node.parents.iter().zip(parent_grads) {
                let Some(grad) = grad else { continue };
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Graph::backward`], addressable by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like it if it never influenced the loss.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

fn unary<T: Scalar>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    local: impl Fn(T) -> T,
) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| g * local(v))
        .collect();
    Tensor::new(x.shape(), data).expect("shape preserved")
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant_rc(self.value())
    }

    fn same_graph(&self, other: &Var<'g, T>) {
        assert!(std::ptr::eq(self.graph, other.graph), "operands live on different graphs");
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let out = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.graph.push_op(out, &[*self, other], |g, mask| {
            vec![mask[0].then(|| g.clone()), mask[1].then(|| g.clone())]
        }))
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let out = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.graph.push_op(out, &[*self, other], |g, mask| {
            vec![mask[0].then(|| g.clone()), mask[1].then(|| g.map(|v| -v))]
        }))
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.graph.push_op(out, &[*self, other], move |g, mask| {
            vec![
                mask[0].then(|| g.zip_map(&b, |gv, bv| gv * bv).expect("shape")),
                mask[1].then(|| g.zip_map(&a, |gv, av| gv * av).expect("shape")),
            ]
        }))
    }

    pub fn add_scalar(&self, k: T) -> Var<'g, T> {
        let out = self.value().map(|v| v + k);
        self.graph.push_op(out, &[*self], |g, _| vec![Some(g.clone())])
    }

    pub fn mul_scalar(&self, k: T) -> Var<'g, T> {
        let out = self.value().map(|v| v * k);
        self.graph.push_op(out, &[*self], move |g, _| vec![Some(g.map(|v| v * k))])
    }

    pub fn abs(&self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(T::abs);
        self.graph.push_op(out, &[*self], move |g, _| {
            vec![Some(unary(&x, g, |v| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }))]
        })
    }

    pub fn square(&self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v * v);
        let two = T::of(2.0);
        self.graph
            .push_op(out, &[*self], move |g, _| vec![Some(unary(&x, g, |v| two * v))])
    }

    pub fn tanh(&self) -> Var<'g, T> {
        let out = self.value().map(T::tanh);
        let y = out.clone();
        self.graph
            .push_op(out, &[*self], move |g, _| vec![Some(unary(&y, g, |t| T::one() - t * t))])
    }

    /// `atanh(clamp(x, -1 + eps, 1 - eps))`; zero gradient where clamped.
    pub fn atanh_clamped(&self, eps: T) -> Var<'g, T> {
        let x = self.value();
        let lim = T::one() - eps;
        let out = x.map(|v| v.max(-lim).min(lim).atanh());
        self.graph.push_op(out, &[*self], move |g, _| {
            vec![Some(unary(&x, g, |v| {
                if v.abs() < lim {
                    T::one() / (T::one() - v * v)
                } else {
                    T::zero()
                }
            }))]
        })
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.leaky_relu(T::zero())
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { v * slope });
        self.graph.push_op(out, &[*self], move |g, _| {
            vec![Some(unary(&x, g, |v| if v > T::zero() { T::one() } else { slope }))]
        })
    }

    pub fn sum(&self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.graph
            .push_op(out, &[*self], move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    pub fn mean(&self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = T::from_usize_lossy(x.len());
        let out = Tensor::scalar(x.mean());
        self.graph
            .push_op(out, &[*self], move |g, _| vec![Some(Tensor::full(&shape, g.data()[0] / n))])
    }

    /// Mean absolute value.
    pub fn mean_abs(&self) -> Var<'g, T> {
        self.abs().mean()
    }

    /// 2-D convolution with zero padding. `weight` is `[c_out, c_in, k, k]`,
    /// `bias` is `[c_out]`.
    pub fn conv2d(&self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let w = weight.value();
        let (n, c_in, h, wd) = x.expect_rank4("conv2d input")?;
        ensure!(
            w.shape().len() == 4 && w.shape()[1] == c_in && w.shape()[2] == w.shape()[3],
            Dimension,
            "conv2d weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        );
        let c_out = w.shape()[0];
        let k = w.shape()[2];
        let geom = ConvGeom::conv(c_in, h, wd, k, stride, pad).ok_or_else(|| {
            crate::Error::Dimension(format!("kernel {k} stride {stride} pad {pad} does not fit {h}x{wd}"))
        })?;
        let b = match bias {
            Some(b) => {
                let bv = b.value();
                ensure!(bv.len() == c_out, Dimension, "conv2d bias length {} != {c_out}", bv.len());
                Some(bv)
            }
            None => None,
        };
        let out_plane = c_out * geom.col_cols();
        let mut out = vec![T::zero(); n * out_plane];
        let mut cols = Vec::new();
        for (item, dst) in x.data().chunks_exact(geom.image_len()).zip(out.chunks_exact_mut(out_plane)) {
            kernels::conv_forward(item, &geom, w.data(), b.as_ref().map(|b| b.data()), c_out, &mut cols, dst);
        }
        let out = Tensor::new(&[n, c_out, geom.out_h, geom.out_w], out)?;
        let mut parents = vec![*self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(self.graph.push_op(out, &parents, move |g, mask| {
            let mut gx = mask[0].then(|| Tensor::zeros(x.shape()));
            let mut gw = mask[1].then(|| Tensor::zeros(w.shape()));
            let mut gb = (has_bias && mask[2]).then(|| Tensor::zeros(&[c_out]));
            let mut cols = Vec::new();
            let img = geom.image_len();
            for i in 0..n {
                kernels::conv_backward(
                    &x.data()[i * img..(i + 1) * img],
                    &geom,
                    w.data(),
                    c_out,
                    &g.data()[i * out_plane..(i + 1) * out_plane],
                    &mut cols,
                    gx.as_mut().map(|t| &mut t.data_mut()[i * img..(i + 1) * img]),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
            }
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(gb);
            }
            res
        }))
    }

    /// Transposed 2-D convolution. `weight` is `[c_in, c_out, k, k]`, output
    /// size is `(in - 1)·stride − 2·pad + k + output_pad`.
    pub fn conv_transpose2d(
        &self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let w = weight.value();
        let (n, c_in, h, wd) = x.expect_rank4("conv_transpose2d input")?;
        ensure!(
            w.shape().len() == 4 && w.shape()[0] == c_in && w.shape()[2] == w.shape()[3],
            Dimension,
            "conv_transpose2d weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        );
        let c_out = w.shape()[1];
        let k = w.shape()[2];
        let geom = ConvGeom::transposed(c_out, h, wd, k, stride, pad, output_pad).ok_or_else(|| {
            crate::Error::Dimension(format!(
                "transposed kernel {k} stride {stride} pad {pad} output_pad {output_pad} invalid for {h}x{wd}"
            ))
        })?;
        let b = match bias {
            Some(b) => {
                let bv = b.value();
                ensure!(bv.len() == c_out, Dimension, "conv_transpose2d bias length {} != {c_out}", bv.len());
                Some(bv)
            }
            None => None,
        };
        let in_plane = c_in * h * wd;
        let out_plane = geom.image_len();
        let mut out = vec![T::zero(); n * out_plane];
        let mut cols = Vec::new();
        for (item, dst) in x.data().chunks_exact(in_plane).zip(out.chunks_exact_mut(out_plane)) {
            kernels::conv_transpose_forward(item, &geom, w.data(), b.as_ref().map(|b| b.data()), c_in, &mut cols, dst);
        }
        let out = Tensor::new(&[n, c_out, geom.height, geom.width], out)?;
        let mut parents = vec![*self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(self.graph.push_op(out, &parents, move |g, mask| {
            let mut gx = mask[0].then(|| Tensor::zeros(x.shape()));
            let mut gw = mask[1].then(|| Tensor::zeros(w.shape()));
            let mut gb = (has_bias && mask[2]).then(|| Tensor::zeros(&[c_out]));
            let mut cols = Vec::new();
            for i in 0..n {
                kernels::conv_transpose_backward(
                    &x.data()[i * in_plane..(i + 1) * in_plane],
                    &geom,
                    w.data(),
                    c_in,
                    &g.data()[i * out_plane..(i + 1) * out_plane],
                    &mut cols,
                    gx.as_mut().map(|t| &mut t.data_mut()[i * in_plane..(i + 1) * in_plane]),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
            }
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(gb);
            }
            res
        }))
    }

    /// Per-sample, per-channel normalization over the spatial axes, no affine.
    pub fn instance_norm(&self, eps: T) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, c, h, w) = x.expect_rank4("instance_norm input")?;
        let plane = h * w;
        let count = T::from_usize_lossy(plane);
        let mut normed = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); n * c];
        for (idx, (src, dst)) in x.data().chunks_exact(plane).zip(normed.chunks_exact_mut(plane)).enumerate() {
            let mean = src.iter().copied().sum::<T>() / count;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[idx] = inv;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
        }
        let out = Tensor::new(&[n, c, h, w], normed)?;
        let xhat = out.clone();
        Ok(self.graph.push_op(out, &[*self], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for (idx, ((gs, xs), dst)) in g
                .data()
                .chunks_exact(plane)
                .zip(xhat.data().chunks_exact(plane))
                .zip(gx.chunks_exact_mut(plane))
                .enumerate()
            {
                let mean_g = gs.iter().copied().sum::<T>() / count;
                let mean_gx = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>() / count;
                for ((d, &gv), &xv) in dst.iter_mut().zip(gs).zip(xs) {
                    *d = inv_std[idx] * (gv - mean_g - xv * mean_gx);
                }
            }
            vec![Some(Tensor::new(xhat.shape(), gx).expect("shape"))]
        }))
    }

    pub fn upsample_nearest2x(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, c, h, w) = x.expect_rank4("upsample input")?;
        let out = Tensor::from_fn4([n, c, 2 * h, 2 * w], |b, ch, y, xx| x.at(b, ch, y / 2, xx / 2));
        Ok(self.graph.push_op(out, &[*self], move |g, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            *gx.at_mut(b, ch, y / 2, xx / 2) += g.at(b, ch, y, xx);
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn concat_channels(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let (n, ca, h, w) = a.expect_rank4("concat input")?;
        let (nb, cb, hb, wb) = b.expect_rank4("concat input")?;
        ensure!(
            (n, h, w) == (nb, hb, wb),
            Dimension,
            "concat_channels: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            data.extend_from_slice(&a.data()[i * pa..(i + 1) * pa]);
            data.extend_from_slice(&b.data()[i * pb..(i + 1) * pb]);
        }
        let out = Tensor::new(&[n, ca + cb, h, w], data)?;
        Ok(self.graph.push_op(out, &[*self, other], move |g, mask| {
            let split = |offset: usize, len: usize, c: usize| {
                let mut d = Vec::with_capacity(n * len);
                for i in 0..n {
                    let start = i * (pa + pb) + offset;
                    d.extend_from_slice(&g.data()[start..start + len]);
                }
                Tensor::new(&[n, c, h, w], d).expect("shape")
            };
            vec![mask[0].then(|| split(0, pa, ca)), mask[1].then(|| split(pa, pb, cb))]
        }))
    }

    /// Forward difference along the width axis: `x[.., y, x+1] − x[.., y, x]`.
    pub fn diff_h(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, c, h, w) = x.expect_rank4("diff_h input")?;
        ensure!(w >= 2, Dimension, "diff_h needs width >= 2");
        let out = Tensor::from_fn4([n, c, h, w - 1], |b, ch, y, xx| x.at(b, ch, y, xx + 1) - x.at(b, ch, y, xx));
        Ok(self.graph.push_op(out, &[*self], move |g, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w - 1 {
                            let v = g.at(b, ch, y, xx);
                            *gx.at_mut(b, ch, y, xx + 1) += v;
                            *gx.at_mut(b, ch, y, xx) -= v;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Forward difference along the height axis.
    pub fn diff_v(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, c, h, w) = x.expect_rank4("diff_v input")?;
        ensure!(h >= 2, Dimension, "diff_v needs height >= 2");
        let out = Tensor::from_fn4([n, c, h - 1, w], |b, ch, y, xx| x.at(b, ch, y + 1, xx) - x.at(b, ch, y, xx));
        Ok(self.graph.push_op(out, &[*self], move |g, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                for ch in 0..c {
                    for y in 0..h - 1 {
                        for xx in 0..w {
                            let v = g.at(b, ch, y, xx);
                            *gx.at_mut(b, ch, y + 1, xx) += v;
                            *gx.at_mut(b, ch, y, xx) -= v;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Smooth dark channel: negative log-sum-exp over all channels and the
    /// in-bounds part of a `patch × patch` window, output `[n, 1, h, w]`.
    /// Replicated border pixels would be counted more than once and bias the
    /// sum; the hard limit is the same either way.
    pub fn soft_dark_channel(&self, patch: usize, sharpness: T) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, c, h, w) = x.expect_rank4("dark channel input")?;
        ensure!(patch % 2 == 1, Domain, "patch must be odd and positive, got {patch}");
        ensure!(sharpness > T::zero(), Domain, "sharpness must be positive");
        let r = patch / 2;
        let span = move |v: usize, hi: usize| v.saturating_sub(r)..(v + r + 1).min(hi);
        // Per-pixel (min, Σ exp(−k(v − min))) for the backward pass.
        let mut stats = vec![(T::zero(), T::zero()); n * h * w];
        let mut out = Tensor::zeros(&[n, 1, h, w]);
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let mut m = T::infinity();
                    for ch in 0..c {
                        for yy in span(y, h) {
                            for xs in span(xx, w) {
                                m = m.min(x.at(b, ch, yy, xs));
                            }
                        }
                    }
                    let mut s = T::zero();
                    for ch in 0..c {
                        for yy in span(y, h) {
                            for xs in span(xx, w) {
                                s += (-sharpness * (x.at(b, ch, yy, xs) - m)).exp();
                            }
                        }
                    }
                    stats[(b * h + y) * w + xx] = (m, s);
                    *out.at_mut(b, 0, y, xx) = m - s.ln() / sharpness;
                }
            }
        }
        Ok(self.graph.push_op(out, &[*self], move |g, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let (m, s) = stats[(b * h + y) * w + xx];
                        let go = g.at(b, 0, y, xx) / s;
                        for ch in 0..c {
                            for yy in span(y, h) {
                                for xs in span(xx, w) {
                                    let v = x.at(b, ch, yy, xs);
                                    *gx.at_mut(b, ch, yy, xs) += go * (-sharpness * (v - m)).exp();
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

/// `Σ wᵢ·termᵢ`; terms must be on the same graph and share a shape.
pub fn weighted_sum<'g, T: Scalar>(terms: &[(Var<'g, T>, T)]) -> Result<Var<'g, T>> {
    let (first, w0) = terms
        .first()
        .copied()
        .ok_or_else(|| crate::Error::Dimension("weighted_sum of nothing".into()))?;
    let mut acc = first.mul_scalar(w0);
    for &(term, w) in &terms[1..] {
        acc = acc.add(term.mul_scalar(w))?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_through_shared_node() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        let y = x.mul(x).unwrap().add(x).unwrap().sum();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, -3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(2.0));
        let y = x.mul(c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let g = Graph::<f32>::no_grad();
        let x = g.param(Tensor::scalar(3.0));
        let y = x.square();
        assert!(!y.requires_grad());
        assert_eq!(y.value().data(), &[9.0]);
    }

    #[test]
    fn detach_blocks_flow() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = x.square().detach().mul(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[9.0]);
    }
}
