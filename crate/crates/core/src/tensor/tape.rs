use std::sync::Arc;

use super::{axis_extents, gemm, Parameter, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::graph::AdjacencyMatrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    RowScale {
        x: Var,
        s: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<T>,
    },
    Reduce {
        x: Var,
        axis: usize,
        kind: ReduceKind,
        argmax: Vec<usize>,
    },
    NeighborMean {
        y: Var,
        blocks: Vec<(usize, Arc<AdjacencyMatrix>)>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order so that [`Tape::backward`] can
/// replay them in reverse.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Per-variable gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if `v` does not reach the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        self.push(p.value.clone(), Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", &sa, &sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out = if sb.len() == 2 {
            let rows = av.len() / k;
            let mut out = vec![T::zero(); rows * n];
            gemm(rows, k, n, av, false, bv, false, &mut out, false);
            out
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(err());
            }
            let batches = av.len() / (m * k);
            let mut out = vec![T::zero(); batches * m * n];
            for bi in 0..batches {
                gemm(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    false,
                    &bv[bi * k * n..(bi + 1) * k * n],
                    false,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
            out
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), rg))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// Adds `bias` (length = last dimension of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = *tx.shape().last().expect("rank >= 1");
        if tb.numel() != c {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let b = tb.data();
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            add_into(row, b);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias { x, bias }, rg))
    }

    /// Shared affine map `x·w + b` applied to every row of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Multiplies row `i` of the 2-D tensor `x` by `s[i]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if tx.rank() != 2 || ts.numel() != tx.shape()[0] {
            return Err(Error::shape("row_scale", tx.shape(), ts.shape()));
        }
        let c = tx.shape()[1];
        let sv = ts.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / c])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::RowScale { x, s }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = axis_extents(&base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, size, inner) = axis_extents(&shape, axis)?;
        if len == 0 || start + len > size {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("transpose", t.shape(), &[2]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::lit(slope);
        let t = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(&[x]);
        self.push(t, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_extents(t.shape(), axis)?;
        let src = t.data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] = data[at(j)] / total;
                }
            }
        }
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("batch_norm", t.shape(), &[2]));
        }
        let c = t.shape()[1];
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(Error::shape("batch_norm", t.shape(), self.shape(p)));
            }
        }
        Ok((t.shape()[0], c))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        train: bool,
    ) -> Result<Var> {
        let t = self.value(x);
        let c = t.shape()[1];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = t.data().to_vec();
        let mut out = vec![T::zero(); xhat.len()];
        for (xr, or) in xhat.chunks_exact_mut(c).zip(out.chunks_exact_mut(c)) {
            for ch in 0..c {
                let h = (xr[ch] - mean[ch]) * inv_std[ch];
                xr[ch] = h;
                or[ch] = h * g[ch] + b[ch];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// Training-mode batch norm over the rows of a 2-D tensor. Returns the
    /// output together with the batch mean and (biased) variance per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (rows, c) = self.bn_check(x, gamma, beta)?;
        let src = self.value(x).data();
        let n = T::lit(rows as f64);
        let mut mean = vec![T::zero(); c];
        for row in src.chunks_exact(c) {
            add_into(&mut mean, row);
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); c];
        for row in src.chunks_exact(c) {
            for ch in 0..c {
                let d = row[ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / n);
        let eps = T::lit(eps);
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, mean, var))
    }

    /// Inference-mode batch norm using stored running statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c) = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", self.shape(x), &[mean.len()]));
        }
        let eps = T::lit(eps);
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    /// Scales every fiber along `axis` to unit Euclidean norm; all-zero
    /// fibers stay zero.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_extents(t.shape(), axis)?;
        let src = t.data();
        let mut data = vec![T::zero(); src.len()];
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let nrm = (0..len).map(|j| src[at(j)] * src[at(j)]).sum::<T>().sqrt();
                norms[o * inner + i] = nrm;
                if nrm > T::zero() {
                    for j in 0..len {
                        data[at(j)] = src[at(j)] / nrm;
                    }
                }
            }
        }
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::L2Normalize { x, axis, norms }, rg))
    }

    /// Reduces `axis` away. Max ties resolve to the lowest index.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: ReduceKind) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_extents(t.shape(), axis)?;
        if len == 0 {
            return Err(Error::EmptyAxis);
        }
        let src = t.data();
        let mut data = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        // walk contiguous `inner`-length rows so axis-0 reductions stay cache friendly
        for o in 0..outer {
            let out = &mut data[o * inner..(o + 1) * inner];
            let first = &src[o * len * inner..(o * len + 1) * inner];
            out.copy_from_slice(first);
            for j in 1..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                match kind {
                    ReduceKind::Max => {
                        let am = &mut argmax[o * inner..(o + 1) * inner];
                        for i in 0..inner {
                            // strict comparison keeps the lowest index on ties
                            if row[i] > out[i] {
                                out[i] = row[i];
                                am[i] = j;
                            }
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => add_into(out, row),
                }
            }
            if kind == ReduceKind::Mean {
                let l = T::lit(len as f64);
                out.iter_mut().for_each(|v| *v = *v / l);
            }
        }
        let mut shape: Vec<usize> = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Reduce {
                x,
                axis,
                kind,
                argmax,
            },
            rg,
        ))
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.reduce(flat, 0, ReduceKind::Sum)
    }

    /// `Q = (1/k)·G×Y` for each block of rows, where block `(offset, G)`
    /// covers rows `offset..offset + G.n()` of the 2-D tensor `y`.
    pub fn neighbor_mean(&mut self, y: Var, blocks: &[(usize, Arc<AdjacencyMatrix>)]) -> Result<Var> {
        let t = self.value(y);
        if t.rank() != 2 {
            return Err(Error::shape("neighbor_mean", t.shape(), &[2]));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let covered: usize = blocks.iter().map(|(_, a)| a.n()).sum();
        let contiguous = blocks
            .iter()
            .scan(0, |next, (off, a)| {
                let ok = *off == *next;
                *next = off + a.n();
                Some(ok)
            })
            .all(|ok| ok);
        if covered != rows || !contiguous {
            return Err(Error::shape("neighbor_mean", t.shape(), &[covered, d]));
        }
        let src = t.data();
        let mut out = vec![T::zero(); rows * d];
        for (off, adj) in blocks {
            let inv_k = T::lit(1.0 / adj.k() as f64);
            for i in 0..adj.n() {
                let dst = &mut out[(off + i) * d..(off + i + 1) * d];
                for (j, &e) in adj.row(i).iter().enumerate() {
                    if e != 0 {
                        let s = &src[(off + j) * d..(off + j + 1) * d];
                        dst.iter_mut().zip(s).for_each(|(o, &v)| *o += v);
                    }
                }
                dst.iter_mut().for_each(|o| *o = *o * inv_k);
            }
        }
        let rg = self.rg(&[y]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::NeighborMean {
                y,
                blocks: blocks.to_vec(),
            },
            rg,
        ))
    }

    /// Row `i` of the output is row `idx[i]` of the 2-D tensor `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows", t.shape(), &[2]));
        }
        let (r, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("gather index {bad} >= {r} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], data)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                if sb.len() == 2 {
                    let rows = ta.numel() / k;
                    acc(*a, &mut |ga| gemm(rows, n, k, g, false, tb.data(), true, ga, true));
                    acc(*b, &mut |gb| gemm(k, rows, n, ta.data(), true, g, false, gb, true));
                } else {
                    let batches = ta.numel() / (m * k);
                    acc(*a, &mut |ga| {
                        for bi in 0..batches {
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                false,
                                &tb.data()[bi * k * n..(bi + 1) * k * n],
                                true,
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                true,
                            );
                        }
                    });
                    acc(*b, &mut |gb| {
                        for bi in 0..batches {
                            gemm(
                                k,
                                m,
                                n,
                                &ta.data()[bi * m * k..(bi + 1) * m * k],
                                true,
                                &g[bi * m * n..(bi + 1) * m * n],
                                false,
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                true,
                            );
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(o, &v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *f)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::AddBias { x, bias } => {
                acc(*x, &mut |s| add_into(s, g));
                acc(*bias, &mut |s| {
                    let c = s.len();
                    for row in g.chunks_exact(c) {
                        add_into(s, row);
                    }
                });
            }
            Op::RowScale { x, s: sv } => {
                let c = self.shape(*x)[1];
                let scales = self.value(*sv).data();
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for (i, o) in s.iter_mut().enumerate() {
                        *o += g[i] * scales[i / c];
                    }
                });
                acc(*sv, &mut |s| {
                    for (i, (&gi, &xi)) in g.iter().zip(xv).enumerate() {
                        s[i / c] += gi * xi;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis).expect("valid");
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    acc(v, &mut |s| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            add_into(&mut s[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, size, inner) = axis_extents(self.shape(*x), *axis).expect("valid");
                let len = node.value.shape()[*axis];
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        let dst = (o * size + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut s[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if xv[i] > T::zero() {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += if xv[i] > T::zero() { g[i] } else { g[i] * *slope };
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis).expect("valid");
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
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
                train,
            } => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_g[ch] += gr[ch];
                        sum_gx[ch] += gr[ch] * xr[ch];
                    }
                }
                acc(*gamma, &mut |s| add_into(s, &sum_gx));
                acc(*beta, &mut |s| add_into(s, &sum_g));
                acc(*x, &mut |s| {
                    let rows_iter = s.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c));
                    if *train {
                        let n = T::lit(rows as f64);
                        // d xhat = g * gamma; sums scale by gamma per channel
                        let a: Vec<T> = (0..c).map(|ch| gam[ch] * inv_std[ch]).collect();
                        let b: Vec<T> = (0..c).map(|ch| sum_g[ch] / n).collect();
                        let d: Vec<T> = (0..c).map(|ch| sum_gx[ch] / n).collect();
                        for ((sr, gr), xr) in rows_iter {
                            for ch in 0..c {
                                sr[ch] += a[ch] * (gr[ch] - b[ch] - xr[ch] * d[ch]);
                            }
                        }
                    } else {
                        for ((sr, gr), _) in rows_iter {
                            for ch in 0..c {
                                sr[ch] += gr[ch] * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { x, axis, norms } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis).expect("valid");
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let nrm = norms[o * inner + i];
                            if nrm <= T::zero() {
                                continue;
                            }
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                s[at(j)] += (g[at(j)] - y[at(j)] * dot) / nrm;
                            }
                        }
                    }
                });
            }
            Op::Reduce {
                x,
                axis,
                kind,
                argmax,
            } => {
                let (outer, len, inner) = axis_extents(self.shape(*x), *axis).expect("valid");
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        let go = &g[o * inner..(o + 1) * inner];
                        match kind {
                            ReduceKind::Max => {
                                for (i, &j) in argmax[o * inner..(o + 1) * inner].iter().enumerate() {
                                    s[(o * len + j) * inner + i] += go[i];
                                }
                            }
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let f = if *kind == ReduceKind::Mean {
                                    T::one() / T::lit(len as f64)
                                } else {
                                    T::one()
                                };
                                for j in 0..len {
                                    let row = &mut s[(o * len + j) * inner..(o * len + j + 1) * inner];
                                    row.iter_mut().zip(go).for_each(|(r, &v)| *r += v * f);
                                }
                            }
                        }
                    }
                });
            }
            Op::NeighborMean { y, blocks } => {
                let d = self.shape(*y)[1];
                acc(*y, &mut |s| {
                    for (off, adj) in blocks {
                        let inv_k = T::lit(1.0 / adj.k() as f64);
                        for i in 0..adj.n() {
                            let gi = &g[(off + i) * d..(off + i + 1) * d];
                            for (j, &e) in adj.row(i).iter().enumerate() {
                                if e != 0 {
                                    let dst = &mut s[(off + j) * d..(off + j + 1) * d];
                                    dst.iter_mut().zip(gi).for_each(|(o, &v)| *o += v * inv_k);
                                }
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = self.shape(*x)[1];
                acc(*x, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
}
