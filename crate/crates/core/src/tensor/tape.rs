//! The computation tape.
//!
//! Every differentiable operation appends a node holding its forward value
//! and enough context to run its adjoint. Nodes are stored in execution
//! order, so a reverse sweep over the node list is a valid topological
//! order for backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{kernels, matmul_dims, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Masking pattern for [`Tape::softmax`].
#[derive(Clone, Debug)]
pub enum Mask {
    /// Over the last two (square) dimensions, entry `[i, j]` is kept iff `j <= i`.
    Causal,
    /// Explicit keep-flags, one per element.
    Explicit(Vec<bool>),
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, p: usize, q: usize },
    MatMulNT { a: Var, b: Var, m: usize, p: usize, q: usize },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Gelu { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    Softmax { a: Var },
    Dropout { a: Var, keep: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    Reshape { a: Var },
    Sum { a: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records differentiable operations for one forward pass.
///
/// A tape is single-threaded; independent tapes share no state and may run
/// on separate threads.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// `seed` drives dropout masks only.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// `[..., m, p] × [p, q] → [..., m, q]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p, q, shape) = matmul_dims(self.value(a).shape(), self.value(b).shape())?;
        let mut out = vec![T::zero(); m * q];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, p, q);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, p, q }, needs))
    }

    /// `[m, p] × [q, p]ᵀ → [m, q]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, p, q) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * q];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, p, q);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, q], out)?, Op::MatMulNT { a, b, m, p, q }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(data, Op::Add { a, b }, needs))
    }

    /// Adds a `[d]` vector to every last-dimension slice of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(bias).shape());
        if sb.len() != 1 || sb[0] != *sa.last().unwrap() {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let needs = self.needs(&[a, bias]);
        Ok(self.push(out, Op::AddBias { a, bias }, needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(data, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let needs = self.needs(&[a]);
        self.push(out, Op::Scale { a, c }, needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        let needs = self.needs(&[a]);
        self.push(out, Op::Gelu { a }, needs)
    }

    /// Per-slice normalization over the last dimension (ε = 1e-5), then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.shape());
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut stats = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            stats.push(kernels::layer_norm_row(xv.row(r), g, b, out.row_mut(r)));
        }
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, stats }, needs))
    }

    /// Softmax over the last dimension with optional mask.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let av = self.value(a);
        let w = av.last_dim();
        let shape = av.shape().to_vec();
        if let Some(Mask::Causal) = mask {
            if shape.len() < 2 || shape[shape.len() - 2] != w {
                return Err(Error::Contract(format!("causal mask needs square trailing dims, got {shape:?}")));
            }
        }
        if let Some(Mask::Explicit(m)) = mask {
            if m.len() != av.len() {
                return Err(Error::Shape {
                    op: "softmax mask",
                    lhs: shape,
                    rhs: vec![m.len()],
                });
            }
        }
        let mut out = Tensor::zeros(&shape);
        for r in 0..av.rows() {
            let ok = match mask {
                None => kernels::softmax_row(av.row(r), |_| true, out.row_mut(r)),
                Some(Mask::Causal) => {
                    let i = r % w;
                    kernels::softmax_row(av.row(r), |j| j <= i, out.row_mut(r))
                }
                Some(Mask::Explicit(m)) => {
                    let keep = &m[r * w..(r + 1) * w];
                    kernels::softmax_row(av.row(r), |j| keep[j], out.row_mut(r))
                }
            };
            if !ok {
                return Err(Error::DegenerateRow { row: r });
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(out, Op::Softmax { a }, needs))
    }

    /// Inverted dropout. A zero rate returns `a` unchanged without recording a node.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let scale = T::of(1.0 / (1.0 - rate));
        let n = self.value(a).len();
        let keep: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let av = self.value(a);
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(&keep).map(|(&x, &k)| x * k).collect(),
        )
        .expect("same shape");
        let needs = self.needs(&[a]);
        self.push(out, Op::Dropout { a, keep }, needs)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let v = lv.last_dim();
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index { index: bad, bound: v });
        }
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let lsm = kernels::log_softmax_row(lv.row(r));
            total -= lsm[t];
            for (p, l) in probs[r * v..(r + 1) * v].iter_mut().zip(&lsm) {
                *p = T::of(l.exp());
            }
        }
        let loss = T::of(total / targets.len() as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Rows `ids` of a `[rows, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::Contract("gather needs a rank-2 table".into()));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index { index: id, bound: rows });
            }
            out.extend_from_slice(tv.row(id));
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || start + len > av.shape()[1] || len == 0 {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                av.shape()
            )));
        }
        let rows = av.shape()[0];
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols { a, start }, needs))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let rows = self.value(*first).shape()[0];
        let mut width = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            width += s[1];
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![rows, width], out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let needs = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape { a }, needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_f64();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(T::of(s)), Op::Sum { a }, needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::of(1.0 / n as f64))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let zeros = |v: Var| vec![T::zero(); self.nodes[v.0].value.len()];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| zeros(v));
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, p, q } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| kernels::matmul_nt_acc(g, bv, ga, *m, *q, *p));
                acc(*b, &mut |gb| kernels::matmul_tn_acc(av, g, gb, *m, *p, *q));
            }
            Op::MatMulNT { a, b, m, p, q } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                acc(*a, &mut |ga| kernels::matmul_acc(g, bv, ga, *m, *q, *p));
                acc(*b, &mut |gb| kernels::matmul_tn_acc(g, av, gb, *m, *q, *p));
            }
            Op::Add { a, b } => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::AddBias { a, bias } => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*bias, &mut |gb| {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale { a, c } => acc(*a, &mut |ga| {
                for (o, &gv) in ga.iter_mut().zip(g) {
                    *o += gv * *c;
                }
            }),
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(av) {
                        *o += gv * kernels::gelu_grad(x);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let gn = self.value(*gain).data();
                let xhat = |r: usize, j: usize| (xv.row(r)[j].as_f64() - stats[r].0) * stats[r].1;
                acc(*x, &mut |gx| {
                    for (r, &(_, rstd)) in stats.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxhat = (gr[j] * gn[j]).as_f64();
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat(r, j);
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let dxhat = (gr[j] * gn[j]).as_f64();
                            let v = rstd * (dxhat - mean_dxhat - xhat(r, j) * mean_dxhat_xhat);
                            gx[r * d + j] += T::of(v);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for r in 0..stats.len() {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * T::of(xhat(r, j));
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let w = node.value.last_dim();
                acc(*a, &mut |ga| {
                    for ((gr, yr), out) in g.chunks(w).zip(y.chunks(w)).zip(ga.chunks_mut(w)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| (*a * *b).as_f64()).sum();
                        let dot = T::of(dot);
                        for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Dropout { a, keep } => acc(*a, &mut |ga| {
                for ((o, &gv), &k) in ga.iter_mut().zip(g).zip(keep) {
                    *o += gv * k;
                }
            }),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = probs.len() / targets.len();
                let scale = g[0] * T::of(1.0 / targets.len() as f64);
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * v + j] += (probs[r * v + j] - onehot) * scale;
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = node.value.last_dim();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let len = node.value.last_dim();
                let w = self.value(*a).last_dim();
                acc(*a, &mut |ga| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut ga[r * w + start..r * w + start + len], gr);
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let w = node.value.last_dim();
                let mut off = 0;
                for &p in parts {
                    let pw = self.value(p).last_dim();
                    acc(p, &mut |gp| {
                        for (r, out) in gp.chunks_mut(pw).enumerate() {
                            add_into(out, &g[r * w + off..r * w + off + pw]);
                        }
                    });
                    off += pw;
                }
            }
            Op::Reshape { a } => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Sum { a } => acc(*a, &mut |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("shapes checked by caller")
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient buffer of `v`, or `None` if `v` does not influence the loss
    /// or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but returns zeros for unreachable leaves.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); tape.value(v).len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., -2., 3., 0.5, 9., 4.]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[2., 3.]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[3]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax(x, None).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let big = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(big, None).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_renormalizes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[1., 2., 3.]));
        let mask = Mask::Explicit(vec![true, true, false]);
        let y = tape.softmax(x, Some(&mask)).unwrap();
        let (e1, e2) = (1f64.exp(), 2f64.exp());
        let v = tape.value(y).data();
        assert!((v[0] - e1 / (e1 + e2)).abs() < 1e-12);
        assert!((v[1] - e2 / (e1 + e2)).abs() < 1e-12);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let mask = Mask::Explicit(vec![true, false, false, false]);
        assert!(matches!(
            tape.softmax(x, Some(&mask)),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn causal_softmax_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 5, 5], |_| rng.random_range(-4.0..4.0)));
        let y = tape.softmax(x, Some(&Mask::Causal)).unwrap();
        let yv = tape.value(y);
        for r in 0..yv.rows() {
            let i = r % 5;
            let row = yv.row(r);
            let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!(row[i + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(t(&[3], &[1., 1., 1.]));
        let b = tape.constant(t(&[3], &[0., 0., 0.]));
        let x = tape.constant(t(&[3], &[5., 5., 5.]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let g2 = tape.constant(t(&[2], &[1., 1.]));
        let b2 = tape.constant(t(&[2], &[0., 0.]));
        let x2 = tape.constant(t(&[2], &[1., 3.]));
        let y2 = tape.layer_norm(x2, g2, b2).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let v = tape.value(y2).data();
        assert!((v[0] + expect).abs() < 1e-12 && (v[1] - expect).abs() < 1e-12);
        assert!((v[1] - 1.0).abs() < 1e-4);

        let g0 = tape.constant(t(&[2], &[0., 0.]));
        let bias = tape.constant(t(&[2], &[0.25, -1.5]));
        let y3 = tape.layer_norm(x2, g0, bias).unwrap();
        assert_eq!(tape.value(y3).data(), &[0.25, -1.5]);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.constant(Tensor::zeros(&[2, 4]));
        let l = tape.cross_entropy(uniform, &[0, 3]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

        let mut peaked = Tensor::zeros(&[1, 4]);
        peaked.set(&[0, 2], 100.0);
        let p = tape.constant(peaked);
        let l = tape.cross_entropy(p, &[2]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-12);

        assert!(matches!(
            tape.cross_entropy(p, &[4]),
            Err(Error::Index { index: 4, bound: 4 })
        ));
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits: Vec<f32> = (0..15).map(|_| rng.random_range(-3.0..3.0)).collect();
        let targets = [4usize, 0, 2];
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![3, 5], logits.clone()).unwrap());
        let l = tape.cross_entropy(x, &targets).unwrap();
        let mut oracle = 0.0f64;
        for (r, &tg) in targets.iter().enumerate() {
            let row: Vec<f64> = logits[r * 5..r * 5 + 5].iter().map(|&v| f64::from(v)).collect();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            oracle += lse - row[tg];
        }
        oracle /= 3.0;
        assert!((f64::from(tape.value(l).data()[0]) - oracle).abs() < 1e-5);
    }

    #[test]
    fn backward_is_replayable_bit_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_fn(&[4, 6], |_| rng.random_range(-1.0..1.0)), true);
        let b = tape.leaf(Tensor::from_fn(&[6, 3], |_| rng.random_range(-1.0..1.0)), true);
        let c = tape.matmul(a, b).unwrap();
        let c = tape.gelu(c);
        let s = tape.softmax(c, None).unwrap();
        let l = tape.cross_entropy(s, &[0, 1, 2, 0]).unwrap();
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
        assert_eq!(g1.get(b), g2.get(b));
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_positive_rate_scales() {
        let mut tape = Tape::<f64>::with_seed(9);
        let x = tape.leaf(Tensor::full(&[1000], 1.0), true);
        assert_eq!(tape.dropout(x, 0.0), x);
        let y = tape.dropout(x, 0.5);
        let v = tape.value(y).data();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        let kept = v.iter().filter(|&&e| e > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
