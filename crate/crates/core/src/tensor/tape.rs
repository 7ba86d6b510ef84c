use std::cell::{Ref, RefCell};

use super::conv::{conv3d_backward, conv3d_forward};
use super::{Element, Stencil, Tensor};
use crate::error::invalid;
use crate::kspace::fourier;
use crate::Result;

/// Lower bound applied to the argument of `sqrt` before taking the reciprocal
/// in its derivative.
const SQRT_GRAD_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Square(usize),
    Sqrt(usize),
    Abs(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    SumChannels(usize),
    Conv3d {
        input: usize,
        kernel: usize,
        bias: usize,
        padding: [usize; 3],
    },
    Stencil(usize, Box<Stencil>),
    Fft2 {
        input: usize,
        inverse: bool,
    },
}

/// Operation kind of a recorded node, for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Square,
    Sqrt,
    Abs,
    Relu,
    Sum,
    Mean,
    Concat,
    SumChannels,
    Conv3d,
    Stencil,
    Fft2,
    Ifft2,
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Square(_) => OpKind::Square,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Abs(_) => OpKind::Abs,
            Op::Relu(_) => OpKind::Relu,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Concat(_) => OpKind::Concat,
            Op::SumChannels(_) => OpKind::SumChannels,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::Stencil(..) => OpKind::Stencil,
            Op::Fft2 { inverse: false, .. } => OpKind::Fft2,
            Op::Fft2 { inverse: true, .. } => OpKind::Ifft2,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    label: Option<String>,
}

/// Ordered record of a forward computation.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        Var {
            tape: self,
            id: self.push(value, Op::Leaf, requires_grad),
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Attaches a human-readable name to a node (used by diagnostics).
    pub fn set_label(&self, var: Var<'_, T>, label: impl Into<String>) {
        self.nodes.borrow_mut()[var.id].label = Some(label.into());
    }

    /// First node (in recording order) whose value holds NaN or Inf.
    pub fn first_non_finite(&self) -> Option<String> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(id, n)| {
                let kind = n.op.kind();
                match &n.label {
                    Some(l) => format!("node {id} ({kind:?} '{l}', shape {:?})", n.value.shape()),
                    None => format!("node {id} ({kind:?}, shape {:?})", n.value.shape()),
                }
            })
    }

    pub fn kind(&self, var: Var<'_, T>) -> OpKind {
        self.nodes.borrow()[var.id].op.kind()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        nodes.len() - 1
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a single-element `loss`.
    ///
    /// Every node that requires a gradient and is an ancestor of `loss`
    /// receives one; contributions from multiple consumers are summed.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(invalid!("backward: loss belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(invalid!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, contribution: Tensor<T>) {
    match slot {
        Some(g) => g.add_assign(&contribution),
        None => *slot = Some(contribution),
    }
}

fn propagate<T: Element>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let needs = |id: usize| nodes[id].requires_grad;
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            if needs(a) {
                accumulate(&mut grads[a], g.clone());
            }
            if needs(b) {
                accumulate(&mut grads[b], g.clone());
            }
        }
        &Op::Sub(a, b) => {
            if needs(a) {
                accumulate(&mut grads[a], g.clone());
            }
            if needs(b) {
                accumulate(&mut grads[b], g.map(|v| -v));
            }
        }
        &Op::Mul(a, b) => {
            if needs(a) {
                accumulate(&mut grads[a], g.zip_map(val(b), |gv, bv| gv * bv)?);
            }
            if needs(b) {
                accumulate(&mut grads[b], g.zip_map(val(a), |gv, av| gv * av)?);
            }
        }
        &Op::Scale(a, s) => accumulate(&mut grads[a], g.map(|v| v * s)),
        &Op::Square(a) => {
            let two = T::cast(2.0);
            accumulate(&mut grads[a], g.zip_map(val(a), |gv, av| two * av * gv)?);
        }
        &Op::Sqrt(a) => {
            let floor = T::cast(SQRT_GRAD_FLOOR);
            let two = T::cast(2.0);
            accumulate(
                &mut grads[a],
                g.zip_map(val(a), |gv, av| gv / (two * av.max(floor).sqrt()))?,
            );
        }
        &Op::Abs(a) => {
            let sign = |v: T| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            };
            accumulate(&mut grads[a], g.zip_map(val(a), |gv, av| gv * sign(av))?);
        }
        &Op::Relu(a) => {
            accumulate(
                &mut grads[a],
                g.zip_map(val(a), |gv, av| if av > T::zero() { gv } else { T::zero() })?,
            );
        }
        &Op::Sum(a) => {
            let g0 = g.data()[0];
            accumulate(&mut grads[a], Tensor::full(val(a).shape(), g0));
        }
        &Op::Mean(a) => {
            let g0 = g.data()[0] / T::cast(val(a).len() as f64);
            accumulate(&mut grads[a], Tensor::full(val(a).shape(), g0));
        }
        Op::Concat(inputs) => {
            let n = g.shape()[0];
            let inner: usize = g.shape()[2..].iter().product();
            let total_c = g.shape()[1];
            let mut offset = 0;
            for &id in inputs {
                let c = val(id).shape()[1];
                if needs(id) {
                    let mut part = Vec::with_capacity(n * c * inner);
                    for ni in 0..n {
                        let start = (ni * total_c + offset) * inner;
                        part.extend_from_slice(&g.data()[start..start + c * inner]);
                    }
                    accumulate(&mut grads[id], Tensor::new(val(id).shape(), part)?);
                }
                offset += c;
            }
        }
        &Op::SumChannels(a) => {
            let shape = val(a).shape();
            let (n, c) = (shape[0], shape[1]);
            let inner = val(a).len() / (n * c);
            let mut out = Vec::with_capacity(val(a).len());
            for ni in 0..n {
                let gs = &g.data()[ni * inner..(ni + 1) * inner];
                for _ in 0..c {
                    out.extend_from_slice(gs);
                }
            }
            accumulate(&mut grads[a], Tensor::new(shape, out)?);
        }
        &Op::Conv3d {
            input,
            kernel,
            bias,
            padding,
        } => {
            let (dx, dk, db) = conv3d_backward(val(input), val(kernel), padding, g, needs(input))?;
            if let Some(dx) = dx {
                accumulate(&mut grads[input], dx);
            }
            if needs(kernel) {
                accumulate(&mut grads[kernel], dk);
            }
            if needs(bias) {
                accumulate(&mut grads[bias], db);
            }
        }
        Op::Stencil(a, stencil) => accumulate(&mut grads[*a], stencil.apply_adjoint(g)?),
        // The centered orthonormal DFT is unitary: its adjoint is its inverse.
        &Op::Fft2 { input, inverse } => {
            accumulate(&mut grads[input], fourier::transform_channels(g, !inverse)?);
        }
    }
    Ok(())
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

// fallible shape-checked ops, so not the std::ops traits
#[allow(clippy::should_implement_trait)]
impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'t, T> {
        Var {
            tape: self.tape,
            id: self.tape.push(value, op, requires_grad),
        }
    }

    fn check_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(invalid!("operands recorded on different tapes"))
        }
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let value = self.value().map(f);
        self.record(value, op, self.requires_grad())
    }

    fn binary(self, other: Var<'t, T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        self.check_tape(&other)?;
        let value = self.value().zip_map(&other.value(), f)?;
        Ok(self.record(value, op, self.requires_grad() || other.requires_grad()))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        self.unary(Op::Scale(self.id, s), |a| a * s)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(Op::Square(self.id), |a| a * a)
    }

    /// Elementwise square root; negative inputs are treated as zero.
    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(Op::Sqrt(self.id), |a| a.max(T::zero()).sqrt())
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(Op::Abs(self.id), |a| a.abs())
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |a| a.max(T::zero()))
    }

    pub fn sum(self) -> Var<'t, T> {
        let value = Tensor::scalar(self.value().sum());
        self.record(value, Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t, T> {
        let value = {
            let v = self.value();
            Tensor::scalar(v.sum() / T::cast(v.len() as f64))
        };
        self.record(value, Op::Mean(self.id), self.requires_grad())
    }

    /// Sums over axis 1 of an `[N, C, ...]` tensor, keeping the axis (`[N, 1, ...]`).
    pub fn sum_channels(self) -> Result<Var<'t, T>> {
        let value = {
            let v = self.value();
            let shape = v.shape();
            if shape.len() < 2 {
                return Err(invalid!("sum_channels needs [N, C, ...], got {shape:?}"));
            }
            let (n, c) = (shape[0], shape[1]);
            let inner = v.len() / (n * c);
            let mut out = vec![T::zero(); n * inner];
            for ni in 0..n {
                let o = &mut out[ni * inner..(ni + 1) * inner];
                for ci in 0..c {
                    let s = &v.data()[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                    for (d, &x) in o.iter_mut().zip(s) {
                        *d = *d + x;
                    }
                }
            }
            let mut new_shape = shape.to_vec();
            new_shape[1] = 1;
            Tensor::new(&new_shape, out)?
        };
        Ok(self.record(value, Op::SumChannels(self.id), self.requires_grad()))
    }

    pub fn stencil(self, stencil: &Stencil) -> Result<Var<'t, T>> {
        let value = stencil.apply(&self.value())?;
        Ok(self.record(
            value,
            Op::Stencil(self.id, Box::new(stencil.clone())),
            self.requires_grad(),
        ))
    }

    /// Centered orthonormal 2D DFT of every `(n, t)` frame of a two-channel
    /// `[N, 2, T, H, W]` tensor (channel 0 real, channel 1 imaginary).
    pub fn fft2(self) -> Result<Var<'t, T>> {
        self.fourier(false)
    }

    /// Inverse of [`fft2`](Self::fft2).
    pub fn ifft2(self) -> Result<Var<'t, T>> {
        self.fourier(true)
    }

    fn fourier(self, inverse: bool) -> Result<Var<'t, T>> {
        let value = fourier::transform_channels(&self.value(), inverse)?;
        Ok(self.record(
            value,
            Op::Fft2 {
                input: self.id,
                inverse,
            },
            self.requires_grad(),
        ))
    }
}

/// 3D cross-correlation, stride 1, zero padding. See [`conv3d_forward`].
pub fn conv3d<'t, T: Element>(
    input: Var<'t, T>,
    kernel: Var<'t, T>,
    bias: Var<'t, T>,
    padding: [usize; 3],
) -> Result<Var<'t, T>> {
    input.check_tape(&kernel)?;
    input.check_tape(&bias)?;
    let value = conv3d_forward(&input.value(), &kernel.value(), &bias.value(), padding)?;
    let rg = input.requires_grad() || kernel.requires_grad() || bias.requires_grad();
    Ok(input.record(
        value,
        Op::Conv3d {
            input: input.id,
            kernel: kernel.id,
            bias: bias.id,
            padding,
        },
        rg,
    ))
}

/// Channel-mixing convolution with a `[F, C, 1, 1, 1]` kernel.
pub fn conv1x1<'t, T: Element>(
    input: Var<'t, T>,
    kernel: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let ks = kernel.shape();
    if ks.len() != 5 || ks[2..] != [1, 1, 1] {
        return Err(invalid!(
            "conv1x1 expects a [F, C, 1, 1, 1] kernel, got {ks:?}"
        ));
    }
    conv3d(input, kernel, bias, [0, 0, 0])
}

/// Concatenates `[N, Ci, ...]` tensors along the channel axis, in argument order.
pub fn concat_channels<'t, T: Element>(inputs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = *inputs
        .first()
        .ok_or_else(|| invalid!("concat_channels needs at least one input"))?;
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|v| v.shape()).collect();
    let base = &shapes[0];
    if base.len() < 2 {
        return Err(invalid!(
            "concat_channels needs [N, C, ...] inputs, got {base:?}"
        ));
    }
    for (v, s) in inputs.iter().zip(&shapes) {
        first.check_tape(v)?;
        if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
            return Err(invalid!(
                "concat_channels extents differ: {base:?} vs {s:?}"
            ));
        }
    }
    let n = base[0];
    let inner: usize = base[2..].iter().product();
    let total_c: usize = shapes.iter().map(|s| s[1]).sum();
    let mut data = Vec::with_capacity(n * total_c * inner);
    for ni in 0..n {
        for v in inputs {
            let val = v.value();
            let c = val.shape()[1];
            data.extend_from_slice(&val.data()[ni * c * inner..(ni + 1) * c * inner]);
        }
    }
    let mut shape = base.clone();
    shape[1] = total_c;
    let value = Tensor::new(&shape, data)?;
    let rg = inputs.iter().any(|v| v.requires_grad());
    Ok(first.record(value, Op::Concat(inputs.iter().map(|v| v.id).collect()), rg))
}
