use std::cell::RefCell;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use super::kernels::{self, PatchGeometry};
use super::{broadcast_binary, numel, reduce_to_shape, Tensor};
use crate::{Error, Result};

/// Recorded operation. Inputs are node ids on the same tape.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Erf(usize),
    Gelu(usize),
    Sqrt(usize),
    Powf(usize, f64),
    SumAxis {
        input: usize,
        axis: usize,
    },
    SumAll(usize),
    MaxAxis {
        input: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    Permute {
        input: usize,
        perm: Vec<usize>,
    },
    Reshape(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    PickLast {
        input: usize,
        index: Vec<usize>,
    },
    Patches {
        input: usize,
        patch: usize,
    },
    Rope {
        input: usize,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient, kept for leaves only.
    grad: Option<Tensor>,
}

/// Computation tape. Nodes are appended in creation order, which is a
/// topological order, so reverse accumulation is a single backward sweep.
///
/// A tape is confined to one thread; values it produces are plain
/// [`Tensor`]s that may move freely.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A trainable leaf sharing storage with the caller.
    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_shared(value, Op::Leaf, true)
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_shared(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?
            .value();
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} for rank {rank}")));
        }
        let values: Vec<Arc<Tensor>> = vars.iter().map(|v| v.value()).collect();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", first.shape(), s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in &values {
                let run: usize = v.shape()[axis..].iter().product();
                data.extend_from_slice(&v.data()[o * run..(o + 1) * run]);
            }
        }
        let rg = vars.iter().any(|v| v.requires_grad());
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Concat {
                inputs: vars.iter().map(|v| v.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Reverse accumulation from a scalar `loss`. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let loss_val = loss.value();
        if loss_val.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_val.shape()),
            ));
        }
        let mut leaf_grads = Vec::new();
        {
            let nodes = self.nodes.borrow();
            let mut grads: Vec<Option<Tensor>> = Vec::new();
            grads.resize_with(loss.id + 1, || None);
            grads[loss.id] = Some(Tensor::ones(loss_val.shape().to_vec()));
            for id in (0..=loss.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, g));
                    continue;
                }
                backprop(&nodes, id, &g, &mut grads)?;
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Pushes `g` (the gradient of node `id`) into the gradients of its inputs.
fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let mut send = |i: usize, t: Tensor| {
        if nodes[i].requires_grad {
            accumulate(&mut grads[i], t);
        }
    };
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            send(a, reduce_to_shape(g, val(a).shape()));
            send(b, reduce_to_shape(g, val(b).shape()));
        }
        &Op::Sub(a, b) => {
            send(a, reduce_to_shape(g, val(a).shape()));
            send(b, reduce_to_shape(&g.map(|x| -x), val(b).shape()));
        }
        &Op::Mul(a, b) => {
            if nodes[a].requires_grad {
                let t = broadcast_binary("mul", g, val(b), |x, y| x * y)?;
                send(a, reduce_to_shape(&t, val(a).shape()));
            }
            if nodes[b].requires_grad {
                let t = broadcast_binary("mul", g, val(a), |x, y| x * y)?;
                send(b, reduce_to_shape(&t, val(b).shape()));
            }
        }
        &Op::Div(a, b) => {
            if nodes[a].requires_grad {
                let t = broadcast_binary("div", g, val(b), |x, y| x / y)?;
                send(a, reduce_to_shape(&t, val(a).shape()));
            }
            if nodes[b].requires_grad {
                let ga = broadcast_binary("div", g, val(a), |x, y| x * y)?;
                let t = broadcast_binary("div", &ga, val(b), |x, y| -x / (y * y))?;
                send(b, reduce_to_shape(&t, val(b).shape()));
            }
        }
        &Op::MatMul(a, b) => {
            let (ga, gb) = matmul_backward(val(a), val(b), g);
            if nodes[a].requires_grad {
                send(a, ga);
            }
            if nodes[b].requires_grad {
                send(b, gb);
            }
        }
        &Op::Scale(a, s) => send(a, g.map(|x| x * s)),
        &Op::AddScalar(a) => send(a, g.clone()),
        &Op::Exp(a) => send(a, zip(g, out, |gv, y| gv * y)),
        &Op::Log(a) => send(a, zip(g, val(a), |gv, x| gv / x)),
        &Op::Erf(a) => {
            let c = 2.0 / PI.sqrt();
            send(a, zip(g, val(a), |gv, x| gv * c * (-x * x).exp()));
        }
        &Op::Gelu(a) => send(a, zip(g, val(a), |gv, x| gv * gelu_derivative(x))),
        &Op::Sqrt(a) => send(a, zip(g, out, |gv, y| gv * 0.5 / y)),
        &Op::Powf(a, p) => send(a, zip(g, val(a), |gv, x| gv * p * x.powf(p - 1.0))),
        &Op::SumAxis { input, axis } => {
            let shape = val(input).shape();
            let (outer, len, inner) = split_axis(shape, axis);
            let mut d = vec![0.0; numel(shape)];
            for o in 0..outer {
                for j in 0..len {
                    let dst = &mut d[(o * len + j) * inner..(o * len + j + 1) * inner];
                    dst.copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            send(input, Tensor::from_parts(shape.to_vec(), d));
        }
        &Op::SumAll(a) => {
            let gv = g.data()[0];
            send(a, Tensor::full(val(a).shape().to_vec(), gv));
        }
        Op::MaxAxis { input, axis, argmax } => {
            let shape = val(*input).shape();
            let (_, len, inner) = split_axis(shape, *axis);
            let mut d = vec![0.0; numel(shape)];
            for (k, (&gv, &am)) in g.data().iter().zip(argmax).enumerate() {
                let (o, i) = (k / inner, k % inner);
                d[(o * len + am) * inner + i] += gv;
            }
            send(*input, Tensor::from_parts(shape.to_vec(), d));
        }
        Op::Concat { inputs, axis } => {
            let out_shape = out.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let total_run: usize = out_shape[*axis..].iter().product();
            let mut offset = 0;
            for &i in inputs {
                let s = val(i).shape();
                let run: usize = s[*axis..].iter().product();
                if nodes[i].requires_grad {
                    let mut d = Vec::with_capacity(numel(s));
                    for o in 0..outer {
                        let base = o * total_run + offset;
                        d.extend_from_slice(&g.data()[base..base + run]);
                    }
                    send(i, Tensor::from_parts(s.to_vec(), d));
                }
                offset += run;
            }
        }
        &Op::Narrow { input, axis, start } => {
            let shape = val(input).shape();
            let (outer, len, inner) = split_axis(shape, axis);
            let glen = out.shape()[axis];
            let mut d = vec![0.0; numel(shape)];
            for o in 0..outer {
                let src = &g.data()[o * glen * inner..(o + 1) * glen * inner];
                let dst_base = (o * len + start) * inner;
                d[dst_base..dst_base + glen * inner].copy_from_slice(src);
            }
            send(input, Tensor::from_parts(shape.to_vec(), d));
        }
        Op::Permute { input, perm } => {
            let inv = kernels::inverse_permutation(perm);
            let (shape, d) = kernels::permute(g.data(), g.shape(), &inv);
            send(*input, Tensor::from_parts(shape, d));
        }
        &Op::Reshape(a) => send(a, Tensor::from_parts(val(a).shape().to_vec(), g.data().to_vec())),
        &Op::Softmax(a) => {
            let n = *out.shape().last().unwrap_or(&1);
            let mut d = vec![0.0; g.numel()];
            for ((gr, yr), dr) in g
                .data()
                .chunks_exact(n)
                .zip(out.data().chunks_exact(n))
                .zip(d.chunks_exact_mut(n))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *dv = yv * (gv - dot);
                }
            }
            send(a, Tensor::from_parts(out.shape().to_vec(), d));
        }
        &Op::LogSoftmax(a) => {
            let n = *out.shape().last().unwrap_or(&1);
            let mut d = vec![0.0; g.numel()];
            for ((gr, yr), dr) in g
                .data()
                .chunks_exact(n)
                .zip(out.data().chunks_exact(n))
                .zip(d.chunks_exact_mut(n))
            {
                let gsum: f64 = gr.iter().sum();
                for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *dv = gv - yv.exp() * gsum;
                }
            }
            send(a, Tensor::from_parts(out.shape().to_vec(), d));
        }
        Op::Gather { table, ids } => {
            let shape = val(*table).shape();
            let width = shape[1];
            let mut d = vec![0.0; numel(shape)];
            for (r, &id) in ids.iter().enumerate() {
                let src = &g.data()[r * width..(r + 1) * width];
                for (dv, &gv) in d[id * width..(id + 1) * width].iter_mut().zip(src) {
                    *dv += gv;
                }
            }
            send(*table, Tensor::from_parts(shape.to_vec(), d));
        }
        Op::PickLast { input, index } => {
            let shape = val(*input).shape();
            let n = *shape.last().unwrap();
            let mut d = vec![0.0; numel(shape)];
            for (r, (&i, &gv)) in index.iter().zip(g.data()).enumerate() {
                d[r * n + i] = gv;
            }
            send(*input, Tensor::from_parts(shape.to_vec(), d));
        }
        &Op::Patches { input, patch } => {
            let shape = val(input).shape();
            let geo = patch_geometry(shape, patch);
            let per_image = geo.channels * geo.h * geo.w;
            let per_patches = geo.num_patches() * geo.patch_dim();
            let batch = numel(shape) / per_image;
            let mut d = vec![0.0; numel(shape)];
            for b in 0..batch {
                let src = &g.data()[b * per_patches..(b + 1) * per_patches];
                let dst = &mut d[b * per_image..(b + 1) * per_image];
                geo.for_each_pixel(|img, p| dst[img] = src[p]);
            }
            send(input, Tensor::from_parts(shape.to_vec(), d));
        }
        Op::Rope { input, cos, sin } => {
            let shape = out.shape();
            let r = shape.len();
            let d = kernels::rope_rotate(g.data(), shape[r - 3], shape[r - 2], shape[r - 1], cos, sin, -1.0);
            send(*input, Tensor::from_parts(shape.to_vec(), d));
        }
    }
    Ok(())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// `(outer, len, inner)` extents around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn patch_geometry(shape: &[usize], patch: usize) -> PatchGeometry {
    let r = shape.len();
    PatchGeometry {
        channels: shape[r - 3],
        h: shape[r - 2],
        w: shape[r - 1],
        patch,
    }
}

pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Exact GELU, `x·Φ(x)`.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * FRAC_1_SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// Matrix-product shapes: `(batch, m, k, n, rhs_shared)`. A rank-2 right
/// operand is shared across every leading axis of the left one.
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(Error::shape("matmul", a, b));
    }
    let lead_a = &a[..a.len() - 2];
    if b.len() == 2 {
        return Ok((lead_a.iter().product(), m, k, n, true));
    }
    if lead_a != &b[..b.len() - 2] {
        return Err(Error::shape("matmul", a, b));
    }
    Ok((lead_a.iter().product(), m, k, n, false))
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape())?;
    let data = if shared {
        kernels::gemm(a.data(), b.data(), batch * m, k, n)
    } else {
        kernels::batched_gemm(a.data(), b.data(), batch, m, k, n)
    };
    let mut shape = a.shape()[..a.rank() - 1].to_vec();
    shape.push(n);
    Ok(Tensor::from_parts(shape, data))
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    if shared {
        let rows = batch * m;
        let bt = kernels::transpose2(b.data(), k, n);
        let ga = kernels::gemm(g.data(), &bt, rows, n, k);
        let at = kernels::transpose2(a.data(), rows, k);
        let gb = kernels::gemm(&at, g.data(), k, rows, n);
        (
            Tensor::from_parts(a.shape().to_vec(), ga),
            Tensor::from_parts(b.shape().to_vec(), gb),
        )
    } else {
        let bt = kernels::batched_transpose(b.data(), batch, k, n);
        let ga = kernels::batched_gemm(g.data(), &bt, batch, m, n, k);
        let at = kernels::batched_transpose(a.data(), batch, m, k);
        let gb = kernels::batched_gemm(&at, g.data(), batch, k, m, n);
        (
            Tensor::from_parts(a.shape().to_vec(), ga),
            Tensor::from_parts(b.shape().to_vec(), gb),
        )
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    fn check_same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands belong to different tapes"
        );
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.check_same_tape(other);
        let v = broadcast_binary(name, &self.value(), &other.value(), f)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(v, op, rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |x, y| x / y, Op::Div(self.id, other.id))
    }

    /// `[..., m, k] · [k, n]` or batched `[..., m, k] · [..., k, n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(other);
        let v = matmul_forward(&self.value(), &other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id), rg))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x * s), Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x + c), Op::AddScalar(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    /// Natural log; rejects non-positive inputs.
    pub fn log(&self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(x) = v.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {x}"),
            });
        }
        Ok(self.unary(v.map(f64::ln), Op::Log(self.id)))
    }

    pub fn erf(&self) -> Var<'t> {
        self.unary(self.value().map(erf), Op::Erf(self.id))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(self.value().map(gelu), Op::Gelu(self.id))
    }

    /// Square root; rejects negative inputs.
    pub fn sqrt(&self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(x) = v.data().iter().find(|&&x| !(x >= 0.0)) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: format!("negative input {x}"),
            });
        }
        Ok(self.unary(v.map(f64::sqrt), Op::Sqrt(self.id)))
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(self.value().map(|x| x.powf(p)), Op::Powf(self.id, p))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(
                op,
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        Ok(shape)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis("sum_axis", axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value();
        let mut d = vec![0.0; outer * inner];
        for o in 0..outer {
            let acc = &mut d[o * inner..(o + 1) * inner];
            for j in 0..len {
                let src = &v.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (a, &x) in acc.iter_mut().zip(src) {
                    *a += x;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.unary(
            Tensor::from_parts(out_shape, d),
            Op::SumAxis { input: self.id, axis },
        ))
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let len = self.check_axis("mean_axis", axis)?[axis];
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Maximum over `axis`, keeping it with extent 1. Ties go to the first
    /// index.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis("max_axis", axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value();
        let mut d = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    let x = v.data()[(o * len + j) * inner + i];
                    let k = o * inner + i;
                    if x > d[k] || j == 0 {
                        d[k] = x;
                        argmax[k] = j;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.unary(
            Tensor::from_parts(out_shape, d),
            Op::MaxAxis {
                input: self.id,
                axis,
                argmax,
            },
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.check_axis("narrow", axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} outside axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let v = self.value();
        let mut d = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            d.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.unary(
            Tensor::from_parts(out_shape, d),
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::invalid(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let (out_shape, d) = kernels::permute(self.value().data(), &shape, perm);
        Ok(self.unary(
            Tensor::from_parts(out_shape, d),
            Op::Permute {
                input: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::invalid("transpose", "rank below 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if numel(shape) != v.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", v.shape(), shape));
        }
        Ok(self.unary(
            Tensor::from_parts(shape.to_vec(), v.data().to_vec()),
            Op::Reshape(self.id),
        ))
    }

    fn last_dim(&self, op: &'static str) -> Result<usize> {
        self.shape()
            .last()
            .copied()
            .ok_or_else(|| Error::invalid(op, "scalar input"))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let n = self.last_dim("softmax")?;
        let v = self.value();
        let d = kernels::softmax_rows(v.data(), n);
        Ok(self.unary(Tensor::from_parts(v.shape().to_vec(), d), Op::Softmax(self.id)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let n = self.last_dim("log_softmax")?;
        let v = self.value();
        let d = kernels::log_softmax_rows(v.data(), n);
        Ok(self.unary(Tensor::from_parts(v.shape().to_vec(), d), Op::LogSoftmax(self.id)))
    }

    /// Embedding lookup: rows `ids` of a `[vocab, width]` table, shaped
    /// `[ids.len(), width]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::invalid("gather_rows", "table must be rank 2"));
        }
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows", "no ids"));
        }
        let (vocab, width) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(
                "gather_rows",
                format!("id {bad} out of range for vocabulary of {vocab}"),
            ));
        }
        let v = self.value();
        let mut d = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            d.extend_from_slice(&v.data()[i * width..(i + 1) * width]);
        }
        Ok(self.unary(
            Tensor::from_parts(vec![ids.len(), width], d),
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Picks one entry per row along the last axis: `[..., n] -> [...]`.
    pub fn pick_last(&self, index: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let n = self.last_dim("pick_last")?;
        let rows = numel(&shape) / n;
        if index.len() != rows {
            return Err(Error::invalid(
                "pick_last",
                format!("{} indices for {rows} rows", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(
                "pick_last",
                format!("index {bad} out of range {n}"),
            ));
        }
        let v = self.value();
        let d: Vec<f64> = index
            .iter()
            .enumerate()
            .map(|(r, &i)| v.data()[r * n + i])
            .collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.unary(
            Tensor::from_parts(out_shape, d),
            Op::PickLast {
                input: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// Non-overlapping `patch×patch` extraction with stride `patch`:
    /// `[..., C, H, W] -> [..., (H/p)(W/p), C·p²]`, patches in raster order,
    /// each flattened channel-major then row-major.
    pub fn patches(&self, patch: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() < 3 || patch == 0 {
            return Err(Error::invalid(
                "patchify",
                format!("need [.., C, H, W] and patch > 0, got {shape:?} / {patch}"),
            ));
        }
        let geo = patch_geometry(&shape, patch);
        if !geo.h.is_multiple_of(patch) || !geo.w.is_multiple_of(patch) {
            return Err(Error::invalid(
                "patchify",
                format!("image {}x{} not divisible by patch {patch}", geo.h, geo.w),
            ));
        }
        let v = self.value();
        let per_image = geo.channels * geo.h * geo.w;
        let batch = v.numel() / per_image;
        let mut d = vec![0.0; v.numel()];
        for b in 0..batch {
            let src = &v.data()[b * per_image..(b + 1) * per_image];
            let dst = &mut d[b * per_image..(b + 1) * per_image];
            geo.for_each_pixel(|img, p| dst[p] = src[img]);
        }
        let mut out_shape = shape[..shape.len() - 3].to_vec();
        out_shape.extend([geo.num_patches(), geo.patch_dim()]);
        Ok(self.unary(
            Tensor::from_parts(out_shape, d),
            Op::Patches {
                input: self.id,
                patch,
            },
        ))
    }

    /// Rotary embedding on `[..., seq, heads, head_dim]`: pair
    /// `(x_{2i}, x_{2i+1})` at slot `s` turns by `positions[s]·base^(-2i/head_dim)`.
    pub fn rope(&self, positions: &[usize], base: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        let r = shape.len();
        if r < 3 {
            return Err(Error::invalid(
                "rope",
                format!("need [.., seq, heads, dim], got {shape:?}"),
            ));
        }
        let (seq, heads, dim) = (shape[r - 3], shape[r - 2], shape[r - 1]);
        if dim % 2 != 0 {
            return Err(Error::invalid("rope", format!("odd head dim {dim}")));
        }
        if positions.len() != seq {
            return Err(Error::invalid(
                "rope",
                format!("{} positions for sequence of {seq}", positions.len()),
            ));
        }
        let (cos, sin) = kernels::rope_table(positions, dim, base);
        let d = kernels::rope_rotate(self.value().data(), seq, heads, dim, &cos, &sin, 1.0);
        Ok(self.unary(
            Tensor::from_parts(shape, d),
            Op::Rope {
                input: self.id,
                cos,
                sin,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = tape.constant(Tensor::eye(2));
        assert_eq!(a.matmul(&i).unwrap().value().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0., 0.]));
        assert_eq!(x.softmax().unwrap().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn erf_matches_series_oracle() {
        // Maclaurin series of erf, summed until terms vanish.
        fn erf_series(x: f64) -> f64 {
            let mut sum = 0.0;
            let mut term = x;
            let mut n = 0.0;
            while term.abs() > 1e-18 {
                sum += term / (2.0 * n + 1.0);
                n += 1.0;
                term *= -x * x / n;
            }
            2.0 / PI.sqrt() * sum
        }
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let e = x.erf().value().item().unwrap();
        assert!((e - erf_series(1.0)).abs() < 1e-14);
        assert!((e - 0.8427008).abs() < 1e-7);
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., -2., 5.]));
        tape.backward(x.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn gradient_of_square_sum() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[2., -3.]));
        let loss = x.mul(&x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4., -6.]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[2., -3.]));
        let loss = x.mul(&x).unwrap().sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[8., -12.]);
        tape.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_leaves_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let y = tape.leaf(t(&[2], &[3., 4.]));
        let _unused = y.exp();
        tape.backward(x.sum()).unwrap();
        assert!(y.grad().is_none());
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![4, 2]));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1., -1.]));
        assert!(matches!(a.log(), Err(Error::Domain { .. })));
        assert!(matches!(a.sqrt(), Err(Error::Domain { .. })));
    }

    #[test]
    fn patches_of_two_by_two_image() {
        let tape = Tape::new();
        let img = tape.leaf(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let p = img.patches(1).unwrap();
        assert_eq!(p.shape(), vec![4, 1]);
        assert_eq!(p.value().data(), &[1., 2., 3., 4.]);
        assert!(img.patches(3).is_err());
    }

    #[test]
    fn patch_counts() {
        let tape = Tape::new();
        let img = tape.constant(Tensor::zeros(vec![3, 288, 288]));
        assert_eq!(img.patches(18).unwrap().shape(), vec![256, 972]);
        let img = tape.constant(Tensor::zeros(vec![2, 3, 32, 32]));
        assert_eq!(img.patches(8).unwrap().shape(), vec![2, 16, 192]);
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(vec![2, 3], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(vec![2, 1], |i| 10.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[0., 1., 2., 10., 3., 4., 5., 11.]);
        let back = c.narrow(1, 0, 3).unwrap();
        assert_eq!(*back.value(), *a.value());
    }
}
