use rand::Rng;

use crate::attention::{self, AttentionGeometry};
use crate::tape::{gelu, sigmoid, Op, Tape, Var};
use crate::tensor::{numel, Result, TensorError};
use crate::{Scalar, Tensor};

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].shape.clone()
    }

    pub fn value(&self) -> Vec<T> {
        self.tape.nodes()[self.id].value.clone()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let nodes = self.tape.nodes();
        let node = &nodes[self.id];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    /// Single element of a one-element value.
    pub fn item(&self) -> T {
        let nodes = self.tape.nodes();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "item() on a non-scalar");
        v[0]
    }

    fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape().as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(TensorError::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn last_dim(&self, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape();
        match shape.last() {
            Some(&c) if c > 0 => Ok((numel(&shape) / c, c)),
            _ => Err(TensorError::shape(op, format!("needs a non-empty last axis, got {shape:?}"))),
        }
    }

    fn unary(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(shape, value, op, self.requires_grad())
    }

    pub fn matmul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(rhs);
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::shape("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let value = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            let mut c = vec![T::zero(); m * n];
            T::gemm(m, k, n, T::one(), a, (k as isize, 1), b, (n as isize, 1), T::zero(), &mut c, (n as isize, 1));
            c
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(vec![m, n], value, Op::MatMul { a: self.id, b: rhs.id, m, k, n }, rg))
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let (rows, cols) = self.dims2("transpose")?;
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let mut out = vec![T::zero(); rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
            out
        };
        Ok(self.unary(vec![cols, rows], value, Op::Transpose { x: self.id, rows, cols }))
    }

    fn zip_with(&self, rhs: &Var<'t, T>, op: &'static str, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var<'t, T>> {
        self.same_tape(rhs);
        let shape = self.shape();
        if shape != rhs.shape() {
            return Err(TensorError::shape(op, format!("{shape:?} vs {:?}", rhs.shape())));
        }
        let value = {
            let nodes = self.tape.nodes();
            nodes[self.id].value.iter().zip(&nodes[rhs.id].value).map(|(&a, &b)| f(a, b)).collect()
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(shape, value, node, rg))
    }

    pub fn add(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(rhs, "add", |a, b| a + b, Op::Add { a: self.id, b: rhs.id })
    }

    pub fn sub(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(rhs, "sub", |a, b| a - b, Op::Sub { a: self.id, b: rhs.id })
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(rhs, "mul", |a, b| a * b, Op::Mul { a: self.id, b: rhs.id })
    }

    /// Adds `bias` (shape `[cols]`) to every row of `self` (last axis `cols`).
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(bias);
        let (_, cols) = self.last_dim("add_bias")?;
        if bias.shape() != [cols] {
            return Err(TensorError::shape("add_bias", format!("bias {:?} for rows of {cols}", bias.shape())));
        }
        let value = {
            let nodes = self.tape.nodes();
            let b = &nodes[bias.id].value;
            let mut out = nodes[self.id].value.clone();
            for row in out.chunks_exact_mut(cols) {
                row.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
            }
            out
        };
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(self.shape(), value, Op::AddBias { x: self.id, bias: bias.id, cols }, rg))
    }

    /// `self · weight + bias` for a `[rows, in]` input and `[in, out]` weight.
    pub fn linear(&self, weight: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul(weight)?.add_bias(bias)
    }

    pub fn scale(&self, factor: T) -> Var<'t, T> {
        let value = self.tape.nodes()[self.id].value.iter().map(|&x| x * factor).collect();
        self.unary(self.shape(), value, Op::Scale { x: self.id, factor })
    }

    /// Multiplies row `r` by the constant `gate[r]`.
    pub fn mul_rows(&self, gate: &[T]) -> Result<Var<'t, T>> {
        let (rows, cols) = self.last_dim("mul_rows")?;
        if gate.len() != rows {
            return Err(TensorError::shape("mul_rows", format!("{} gates for {rows} rows", gate.len())));
        }
        let value = {
            let nodes = self.tape.nodes();
            let mut out = nodes[self.id].value.clone();
            for (row, &w) in out.chunks_exact_mut(cols).zip(gate) {
                row.iter_mut().for_each(|x| *x = if w == T::zero() { T::zero() } else { *x * w });
            }
            out
        };
        Ok(self.unary(self.shape(), value, Op::MulRows { x: self.id, gate: gate.to_vec(), cols }))
    }

    /// Exact GeLU, `x · Φ(x)`.
    pub fn gelu(&self) -> Var<'t, T> {
        let value = self.tape.nodes()[self.id].value.iter().map(|&x| gelu(x)).collect();
        self.unary(self.shape(), value, Op::Gelu { x: self.id })
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let value = self.tape.nodes()[self.id].value.iter().map(|&x| sigmoid(x)).collect();
        self.unary(self.shape(), value, Op::Sigmoid { x: self.id })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let mut y = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for j in 0..len {
                        let e = (x[at(j)] - max).exp();
                        y[at(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        y[at(j)] /= total;
                    }
                }
            }
            y
        };
        Ok(self.unary(shape, value, Op::Softmax { x: self.id, outer, len, inner }))
    }

    /// Normalizes along the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'t, T>, bias: &Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.same_tape(gain);
        self.same_tape(bias);
        let (rows, cols) = self.last_dim("layer_norm")?;
        if gain.shape() != [cols] || bias.shape() != [cols] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} for width {cols}", gain.shape(), bias.shape()),
            ));
        }
        let n = T::from_f64(cols as f64);
        let (value, xhat, inv_std) = {
            let nodes = self.tape.nodes();
            let (x, gv, bv) = (&nodes[self.id].value, &nodes[gain.id].value, &nodes[bias.id].value);
            let mut y = vec![T::zero(); x.len()];
            let mut xhat = vec![T::zero(); x.len()];
            let mut inv_std = vec![T::zero(); rows];
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let is = T::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for c in 0..cols {
                    let h = (row[c] - mean) * is;
                    xhat[r * cols + c] = h;
                    y[r * cols + c] = h * gv[c] + bv[c];
                }
            }
            (y, xhat, inv_std)
        };
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            self.shape(),
            value,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, cols, xhat, inv_std },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`. `p == 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Var<'t, T> {
        if p <= 0.0 {
            return *self;
        }
        assert!(p < 1.0, "dropout probability must be < 1");
        let keep = T::from_f64(1.0 / (1.0 - p));
        let len = self.tape.nodes()[self.id].value.len();
        let mask: Vec<T> = (0..len)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let value = self.tape.nodes()[self.id].value.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        self.unary(self.shape(), value, Op::Dropout { x: self.id, mask })
    }

    /// Row lookup: `out[i] = self[ids[i]]` for a `[rows, cols]` source.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t, T>> {
        let (rows, cols) = self.dims2("gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::shape("gather_rows", format!("row {bad} of {rows}")));
        }
        let value = {
            let nodes = self.tape.nodes();
            let src = &nodes[self.id].value;
            let mut out = Vec::with_capacity(ids.len() * cols);
            for &i in ids {
                out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
            }
            out
        };
        Ok(self.unary(vec![ids.len(), cols], value, Op::Gather { src: self.id, ids: ids.to_vec(), cols }))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        let old = self.shape();
        if numel(&shape) != numel(&old) {
            return Err(TensorError::shape("reshape", format!("{old:?} -> {shape:?}")));
        }
        let value = self.value();
        Ok(self.unary(shape, value, Op::Reshape { x: self.id }))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.tape.nodes()[self.id].value.iter().copied().sum();
        self.unary(Vec::new(), vec![s], Op::Sum { x: self.id })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let s = {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            v.iter().copied().sum::<T>() / T::from_f64(v.len().max(1) as f64)
        };
        self.unary(Vec::new(), vec![s], Op::Mean { x: self.id })
    }

    /// Mean negative log-likelihood over rows whose `loss_mask` entry is set.
    /// Rows with a cleared mask receive exactly zero gradient.
    pub fn masked_cross_entropy(&self, targets: &[usize], loss_mask: &[bool]) -> Result<Var<'t, T>> {
        let (rows, vocab) = self.dims2("masked_cross_entropy")?;
        if targets.len() != rows || loss_mask.len() != rows {
            return Err(TensorError::shape(
                "masked_cross_entropy",
                format!("{rows} rows, {} targets, {} mask entries", targets.len(), loss_mask.len()),
            ));
        }
        let count = loss_mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::DegenerateBatch("loss mask selects no positions".into()));
        }
        let mut masked_targets = targets.iter().zip(loss_mask).filter(|(_, &m)| m).map(|(&t, _)| t);
        if let Some(bad) = masked_targets.find(|&t| t >= vocab) {
            return Err(TensorError::shape("masked_cross_entropy", format!("target {bad} >= vocab {vocab}")));
        }
        let (loss, probs) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let mut probs = vec![T::zero(); x.len()];
            let mut loss = T::zero();
            for r in 0..rows {
                if !loss_mask[r] {
                    continue;
                }
                let row = &x[r * vocab..(r + 1) * vocab];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                let prow = &mut probs[r * vocab..(r + 1) * vocab];
                for (p, &v) in prow.iter_mut().zip(row) {
                    *p = (v - max).exp();
                    total += *p;
                }
                prow.iter_mut().for_each(|p| *p /= total);
                loss += total.ln() + max - row[targets[r]];
            }
            (loss / T::from_f64(count as f64), probs)
        };
        Ok(self.unary(
            Vec::new(),
            vec![loss],
            Op::MaskedCrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                mask: loss_mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against `labels` in {0, 1}.
    pub fn bce_with_logits(&self, labels: &[T]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.len() != labels.len() || x.is_empty() {
            return Err(TensorError::shape("bce_with_logits", format!("{} logits, {} labels", x.len(), labels.len())));
        }
        let total: T = x
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let loss = total / T::from_f64(x.len() as f64);
        Ok(self.unary(Vec::new(), vec![loss], Op::BceWithLogits { logits: self.id, labels: labels.to_vec() }))
    }

    /// Multi-head attention with `self` as queries. See [`AttentionGeometry`].
    pub fn attention<R: Rng + ?Sized>(
        &self,
        keys: &Var<'t, T>,
        values: &Var<'t, T>,
        geom: AttentionGeometry,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(keys);
        self.same_tape(values);
        let (qr, qc) = self.dims2("attention")?;
        let (kr, kc) = keys.dims2("attention")?;
        let (vr, vc) = values.dims2("attention")?;
        let ok = qr == geom.batch * geom.q_len
            && kr == geom.batch * geom.k_len
            && vr == kr
            && qc == geom.width
            && kc == geom.width
            && vc == geom.width
            && geom.heads > 0
            && geom.width % geom.heads == 0
            && geom.key_mask.len() == kr
            && (!geom.causal || geom.q_len == geom.k_len);
        if !ok {
            return Err(TensorError::shape(
                "attention",
                format!("q [{qr}x{qc}], k [{kr}x{kc}], v [{vr}x{vc}] with {geom:?}"),
            ));
        }
        let drop = match dropout {
            Some((p, rng)) if p > 0.0 => {
                let keep = T::from_f64(1.0 / (1.0 - p));
                let n = geom.batch * geom.heads * geom.q_len * geom.k_len;
                Some((0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect::<Vec<T>>())
            }
            _ => None,
        };
        let (out, probs) = {
            let nodes = self.tape.nodes();
            attention::forward(&geom, &nodes[self.id].value, &nodes[keys.id].value, &nodes[values.id].value, drop.as_deref())
        };
        let rg = self.requires_grad() || keys.requires_grad() || values.requires_grad();
        Ok(self.tape.push(
            vec![qr, qc],
            out,
            Op::Attention { q: self.id, k: keys.id, v: values.id, geom, probs, drop },
            rg,
        ))
    }
}
