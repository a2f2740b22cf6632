//! Wengert-list reverse-mode autodiff.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Values are
//! computed eagerly during the forward pass; [`Tape::backward`] replays the
//! list in reverse and returns gradients for every leaf that requires them.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use crate::attention::{self, AttentionGeometry};
use crate::params::ParamStore;
use crate::tensor::{numel, Result, TensorError};
use crate::{Scalar, Tensor};

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { x: usize, bias: usize, cols: usize },
    Scale { x: usize, factor: T },
    MulRows { x: usize, gate: Vec<T>, cols: usize },
    Gelu { x: usize },
    Sigmoid { x: usize },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, cols: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Dropout { x: usize, mask: Vec<T> },
    Gather { src: usize, ids: Vec<usize>, cols: usize },
    Attention { q: usize, k: usize, v: usize, geom: AttentionGeometry, probs: Vec<T>, drop: Option<Vec<T>> },
    Sum { x: usize },
    Mean { x: usize },
    Reshape { x: usize },
    MaskedCrossEntropy { logits: usize, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    BceWithLogits { logits: usize, labels: Vec<T> },
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) name: Option<String>,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            name: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a tensor; it participates in differentiation iff `requires_grad` is set.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    pub fn constant(&self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var<'_, T>> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::shape("constant", format!("{shape:?} vs {} elements", data.len())));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Records a named trainable leaf. Its gradient is reported under `name`.
    pub fn param(&self, name: &str, tensor: &Tensor<T>) -> Var<'_, T> {
        let var = self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, true);
        self.nodes.borrow_mut()[var.id].name = Some(name.to_string());
        var
    }

    /// Computes d(loss)/d(leaf) for every leaf reachable from `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        let mut out = Gradients {
            by_id: BTreeMap::new(),
            names: BTreeMap::new(),
        };
        if !root.requires_grad {
            return Ok(out);
        }
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    if let Some(name) = &node.name {
                        out.names.insert(name.clone(), id);
                    }
                    out.by_id.insert(id, g);
                }
                continue;
            }
            backward_node(node, &g, &nodes, &mut grads);
        }
        Ok(out)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_id: BTreeMap<usize, Vec<T>>,
    names: BTreeMap<String, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.by_id.get(&var.id).map(Vec::as_slice)
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.names.get(name).and_then(|id| self.by_id.get(id)).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }

    /// Stores each named gradient in the matching parameter's slot.
    /// Parameters the loss did not reach are left untouched.
    pub fn write_into(self, params: &mut ParamStore<T>) -> Result<()> {
        let Gradients { mut by_id, names } = self;
        for (name, id) in names {
            let grad = by_id.remove(&id).expect("named gradient present");
            match params.get_mut(&name) {
                Some(t) => t.set_grad(grad)?,
                None => return Err(TensorError::Contract(format!("no parameter named {name}"))),
            }
        }
        Ok(())
    }
}

fn grad_buf<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize) -> Option<&'g mut Vec<T>> {
    let node = &nodes[id];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backward_node<T: Scalar>(node: &Node<T>, g: &[T], nodes: &[Node<T>], grads: &mut [Option<Vec<T>>]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(ga) = grad_buf(grads, nodes, a) {
                // dA[m×k] += G[m×n] · Bᵀ
                T::gemm(m, n, k, T::one(), g, (n as isize, 1), bv, (1, n as isize), T::one(), ga, (k as isize, 1));
            }
            if let Some(gb) = grad_buf(grads, nodes, b) {
                // dB[k×n] += Aᵀ · G
                T::gemm(k, m, n, T::one(), av, (1, k as isize), g, (n as isize, 1), T::one(), gb, (n as isize, 1));
            }
        }
        &Op::Transpose { x, rows, cols } => {
            if let Some(gx) = grad_buf(grads, nodes, x) {
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        &Op::Add { a, b } => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = grad_buf(grads, nodes, b) {
                gb.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
        }
        &Op::Sub { a, b } => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = grad_buf(grads, nodes, b) {
                gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
            }
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv.iter()) {
                    *d += s * y;
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, b) {
                for ((d, &s), &y) in gb.iter_mut().zip(g).zip(av.iter()) {
                    *d += s * y;
                }
            }
        }
        &Op::AddBias { x, bias, cols } => {
            if let Some(gx) = grad_buf(grads, nodes, x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = grad_buf(grads, nodes, bias) {
                for row in g.chunks_exact(cols) {
                    gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                }
            }
        }
        &Op::Scale { x, factor } => {
            if let Some(gx) = grad_buf(grads, nodes, x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * factor);
            }
        }
        Op::MulRows { x, gate, cols } => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for ((drow, grow), &w) in gx.chunks_exact_mut(*cols).zip(g.chunks_exact(*cols)).zip(gate) {
                    if w != T::zero() {
                        drow.iter_mut().zip(grow).for_each(|(d, &s)| *d += s * w);
                    }
                }
            }
        }
        &Op::Gelu { x } => {
            let xv = &nodes[x].value;
            if let Some(gx) = grad_buf(grads, nodes, x) {
                for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv.iter()) {
                    *d += s * gelu_derivative(v);
                }
            }
        }
        &Op::Sigmoid { x } => {
            let y = &node.value;
            if let Some(gx) = grad_buf(grads, nodes, x) {
                for ((d, &s), &p) in gx.iter_mut().zip(g).zip(y.iter()) {
                    *d += s * p * (T::one() - p);
                }
            }
        }
        &Op::Softmax { x, outer, len, inner } => {
            let y = &node.value;
            if let Some(gx) = grad_buf(grads, nodes, x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, cols, xhat, inv_std } => {
            let cols = *cols;
            let gain_v = &nodes[*gain].value;
            if let Some(gg) = grad_buf(grads, nodes, *gain) {
                for (grow, hrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                    for c in 0..cols {
                        gg[c] += grow[c] * hrow[c];
                    }
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, *bias) {
                for grow in g.chunks_exact(cols) {
                    gb.iter_mut().zip(grow).for_each(|(d, &s)| *d += s);
                }
            }
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                let n = T::from_f64(cols as f64);
                for (r, ((drow, grow), hrow)) in gx
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(xhat.chunks_exact(cols))
                    .enumerate()
                {
                    let mut sum_d = T::zero();
                    let mut sum_dh = T::zero();
                    for c in 0..cols {
                        let dh = grow[c] * gain_v[c];
                        sum_d += dh;
                        sum_dh += dh * hrow[c];
                    }
                    let scale = inv_std[r] / n;
                    for c in 0..cols {
                        let dh = grow[c] * gain_v[c];
                        drow[c] += scale * (n * dh - sum_d - hrow[c] * sum_dh);
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for ((d, &s), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += s * m;
                }
            }
        }
        Op::Gather { src, ids, cols } => {
            if let Some(gs) = grad_buf(grads, nodes, *src) {
                for (row, &id) in g.chunks_exact(*cols).zip(ids) {
                    gs[id * cols..(id + 1) * cols]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::Attention { q, k, v, geom, probs, drop } => {
            let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
            let mut dq = vec![T::zero(); qv.len()];
            let mut dk = vec![T::zero(); kv.len()];
            let mut dv = vec![T::zero(); vv.len()];
            attention::backward(geom, qv, kv, vv, probs, drop.as_deref(), g, &mut dq, &mut dk, &mut dv);
            for (id, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(buf) = grad_buf(grads, nodes, id) {
                    buf.iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
                }
            }
        }
        &Op::Sum { x } => {
            if let Some(gx) = grad_buf(grads, nodes, x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean { x } => {
            if let Some(gx) = grad_buf(grads, nodes, x) {
                let s = g[0] / T::from_f64(gx.len() as f64);
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
        &Op::Reshape { x } => {
            if let Some(gx) = grad_buf(grads, nodes, x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
        }
        Op::MaskedCrossEntropy { logits, targets, mask, probs, count } => {
            if let Some(gl) = grad_buf(grads, nodes, *logits) {
                let vocab = probs.len() / targets.len();
                let scale = g[0] / T::from_f64(*count as f64);
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let row = &mut gl[r * vocab..(r + 1) * vocab];
                    let prow = &probs[r * vocab..(r + 1) * vocab];
                    for c in 0..vocab {
                        row[c] += scale * prow[c];
                    }
                    row[t] -= scale;
                }
            }
        }
        Op::BceWithLogits { logits, labels } => {
            let xv = &nodes[*logits].value;
            if let Some(gl) = grad_buf(grads, nodes, *logits) {
                let scale = g[0] / T::from_f64(labels.len() as f64);
                for ((d, &x), &y) in gl.iter_mut().zip(xv.iter()).zip(labels) {
                    *d += scale * (sigmoid(x) - y);
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}
