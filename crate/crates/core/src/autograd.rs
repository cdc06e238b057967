//! Tape-based reverse-mode differentiation over [`Tensor`].
//!
//! A [`Graph`] records every op eagerly. Nodes that depend on no trainable
//! parameter and no tracked input carry no gradient, so frozen sub-networks cost
//! only their forward pass.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param { store: u64, index: usize },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RepeatRows(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    QuickGelu(Var),
    Tanh(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<(u64, usize), Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Untracked input: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Tracked input whose gradient can be read back after `backward`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Binds parameter `index` of `store`. Parameters bound with
    /// `trainable = false` behave as constants.
    pub fn param(&mut self, store: &ParamStore<T>, index: usize, trainable: bool) -> Var {
        let key = (store.uid(), index);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let value = store.value_arc(index);
        let op = if trainable { Op::Param { store: key.0, index } } else { Op::Input };
        self.nodes.push(Node { value, op, tracked: trainable });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(key, v);
        v
    }

    /// Convenience: binds a parameter by name.
    pub fn param_named(&mut self, store: &ParamStore<T>, name: &str, trainable: bool) -> Result<Var> {
        let idx = store.index_of(name).ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        Ok(self.param(store, idx, trainable))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let tr = self.tracked_any(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), tr))
    }

    /// `a · bᵀ`, the layout used by linear layers with `[out, in]` weights.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        let tr = self.tracked_any(&[a, b]);
        Ok(self.push(v, Op::MatMulT(a, b), tr))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let tr = self.tracked_any(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let tr = self.tracked_any(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), tr))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let tr = self.tracked_any(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), tr))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        let tr = self.tracked_any(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), tr))
    }

    /// Adds a `[n]`/`[1,n]` row to every row of an `[m,n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let xv = self.value(x);
        let rv = self.value(row);
        let n = xv.cols();
        if rv.len() != n {
            return Err(Error::Shape(format!("add_row: row of {} elements for {:?}", rv.len(), xv.shape())));
        }
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &r) in chunk.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let tr = self.tracked_any(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), tr))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).scale(c);
        let tr = self.tracked_any(&[x]);
        self.push(v, Op::Scale(x, c), tr)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|a| a + c);
        let tr = self.tracked_any(&[x]);
        self.push(v, Op::AddScalar(x), tr)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals)?;
        let tr = self.tracked_any(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), tr))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&vals)?;
        let tr = self.tracked_any(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), tr))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_rows(start, len)?;
        let tr = self.tracked_any(&[x]);
        Ok(self.push(v, Op::SliceRows(x, start), tr))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, len)?;
        let tr = self.tracked_any(&[x]);
        Ok(self.push(v, Op::SliceCols(x, start), tr))
    }

    /// Repeats a single-row matrix `[1,n]` into `[count,n]`.
    pub fn repeat_rows(&mut self, x: Var, count: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 {
            return Err(Error::Shape(format!("repeat_rows expects one row, got {:?}", xv.shape())));
        }
        let n = xv.len();
        let data: Vec<T> = (0..count).flat_map(|_| xv.data().iter().copied()).collect();
        let v = Tensor::from_vec(&[count, n], data)?;
        let tr = self.tracked_any(&[x]);
        Ok(self.push(v, Op::RepeatRows(x), tr))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let tr = self.tracked_any(&[x]);
        Ok(self.push(v, Op::Reshape(x), tr))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                s += *r;
            }
            for r in row.iter_mut() {
                *r /= s;
            }
        }
        let tr = self.tracked_any(&[x]);
        self.push(out, Op::SoftmaxRows(x), tr)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != n || bv.len() != n {
            return Err(Error::Shape(format!("layer_norm: affine size vs {} columns", n)));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            let (mu, rstd) = row_stats(row, eps);
            for (j, r) in row.iter_mut().enumerate() {
                *r = (*r - mu) * rstd * gv.data()[j] + bv.data()[j];
            }
        }
        let tr = self.tracked_any(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, tr))
    }

    /// `x · sigmoid(1.702 x)`, the activation used by CLIP towers.
    pub fn quick_gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(T::lit(1.702) * a));
        let tr = self.tracked_any(&[x]);
        self.push(v, Op::QuickGelu(x), tr)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        let tr = self.tracked_any(&[x]);
        self.push(v, Op::Tanh(x), tr)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.sqrt());
        let tr = self.tracked_any(&[x]);
        self.push(v, Op::Sqrt(x), tr)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        let tr = self.tracked_any(&[x]);
        self.push(v, Op::Square(x), tr)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let tr = self.tracked_any(&[x]);
        self.push(v, Op::Sum(x), tr)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let tr = self.tracked_any(&[x]);
        self.push(v, Op::Mean(x), tr)
    }

    /// Linear layer `x · Wᵀ + b` with `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.square(d);
        Ok(self.mean(s))
    }

    /// `1 − cos(a, b)` for two tensors of equal shape, as a `[1]` node.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let ab = self.mul(a, b)?;
        let dot = self.sum(ab);
        let a2 = self.square(a);
        let na2 = self.sum(a2);
        let b2 = self.square(b);
        let nb2 = self.sum(b2);
        let prod = self.mul(na2, nb2)?;
        let denom = self.sqrt(prod);
        let cos = self.div(dot, denom)?;
        let neg = self.scale(cos, -T::one());
        Ok(self.add_scalar(neg, T::one()))
    }

    /// Reverse pass seeded with ones at a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let seed = Tensor::full(self.value(root).shape(), T::one());
        self.backward_seeded(&[(root, seed)])
    }

    /// Reverse pass with explicit upstream gradients. Seeds for the same node
    /// accumulate.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            self.value(*v).ensure_same_shape(g, "backward seed")?;
            accumulate(&mut grads, *v, g.clone())?;
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params: self.param_nodes() })
    }

    fn param_nodes(&self) -> HashMap<(u64, usize), usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { store, index } => Some(((store, index), i)),
                _ => None,
            })
            .collect()
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], to: Var, g: Tensor<T>) -> Result<()> {
        if self.nodes[to.0].tracked {
            accumulate(grads, to, g)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                if self.is_tracked(*a) {
                    let ga = g.matmul_t(self.value(*b))?;
                    self.send(grads, *a, ga)?;
                }
                if self.is_tracked(*b) {
                    let gb = self.value(*a).t_matmul(g)?;
                    self.send(grads, *b, gb)?;
                }
            }
            Op::MatMulT(a, b) => {
                if self.is_tracked(*a) {
                    let ga = g.matmul(self.value(*b))?;
                    self.send(grads, *a, ga)?;
                }
                if self.is_tracked(*b) {
                    let gb = g.t_matmul(self.value(*a))?;
                    self.send(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone())?;
                self.send(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone())?;
                self.send(grads, *b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                if self.is_tracked(*a) {
                    self.send(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.is_tracked(*b) {
                    self.send(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.is_tracked(*a) {
                    self.send(grads, *a, g.zip_map(bv, |x, y| x / y)?)?;
                }
                if self.is_tracked(*b) {
                    let out = &node.value;
                    let gb = g.zip_map(out, |x, q| x * q)?.zip_map(bv, |x, y| -x / y)?;
                    self.send(grads, *b, gb)?;
                }
            }
            Op::AddRow(x, row) => {
                self.send(grads, *x, g.clone())?;
                if self.is_tracked(*row) {
                    let n = g.cols();
                    let mut acc = vec![T::zero(); n];
                    for chunk in g.data().chunks(n) {
                        for (a, &v) in acc.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.send(grads, *row, Tensor::from_vec(&shape, acc)?)?;
                }
            }
            Op::Scale(x, c) => self.send(grads, *x, g.scale(*c))?,
            Op::AddScalar(x) => self.send(grads, *x, g.clone())?,
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.is_tracked(*p) {
                        self.send(grads, *p, g.slice_rows(start, rows)?)?;
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.is_tracked(*p) {
                        self.send(grads, *p, g.slice_cols(start, cols)?)?;
                    }
                    start += cols;
                }
            }
            Op::SliceRows(x, start) => {
                let src = self.value(*x);
                let n = src.cols();
                let mut full = Tensor::zeros(src.shape());
                full.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.send(grads, *x, full)?;
            }
            Op::SliceCols(x, start) => {
                let src = self.value(*x);
                let (m, n, w) = (src.rows(), src.cols(), g.cols());
                let mut full = Tensor::zeros(src.shape());
                for r in 0..m {
                    full.data_mut()[r * n + start..r * n + start + w].copy_from_slice(g.row(r));
                }
                self.send(grads, *x, full)?;
            }
            Op::RepeatRows(x) => {
                let n = g.cols();
                let mut acc = vec![T::zero(); n];
                for chunk in g.data().chunks(n) {
                    for (a, &v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                let shape = self.value(*x).shape().to_vec();
                self.send(grads, *x, Tensor::from_vec(&shape, acc)?)?;
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.send(grads, *x, g.reshape(&shape)?)?;
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.send(grads, *x, gx)?;
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma);
                let n = xv.cols();
                let nf = T::lit(n as f64);
                let mut gx = Tensor::zeros(xv.shape());
                let mut ggamma = vec![T::zero(); n];
                let mut gbeta = vec![T::zero(); n];
                for ((xrow, grow), gxrow) in
                    xv.data().chunks(n).zip(g.data().chunks(n)).zip(gx.data_mut().chunks_mut(n))
                {
                    let (mu, rstd) = row_stats(xrow, *eps);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..n {
                        let xhat = (xrow[j] - mu) * rstd;
                        let gh = grow[j] * gam.data()[j];
                        s1 += gh;
                        s2 += gh * xhat;
                        ggamma[j] += grow[j] * xhat;
                        gbeta[j] += grow[j];
                    }
                    for j in 0..n {
                        let xhat = (xrow[j] - mu) * rstd;
                        let gh = grow[j] * gam.data()[j];
                        gxrow[j] = rstd / nf * (nf * gh - s1 - xhat * s2);
                    }
                }
                self.send(grads, *x, gx)?;
                if self.is_tracked(*gamma) {
                    let shape = gam.shape().to_vec();
                    self.send(grads, *gamma, Tensor::from_vec(&shape, ggamma)?)?;
                }
                if self.is_tracked(*beta) {
                    let shape = self.value(*beta).shape().to_vec();
                    self.send(grads, *beta, Tensor::from_vec(&shape, gbeta)?)?;
                }
            }
            Op::QuickGelu(x) => {
                let k = T::lit(1.702);
                let gx = g.zip_map(self.value(*x), |gv, a| {
                    let s = sigmoid(k * a);
                    gv * (s + k * a * s * (T::one() - s))
                })?;
                self.send(grads, *x, gx)?;
            }
            Op::Tanh(x) => {
                let gx = g.zip_map(&node.value, |gv, y| gv * (T::one() - y * y))?;
                self.send(grads, *x, gx)?;
            }
            Op::Sqrt(x) => {
                let gx = g.zip_map(&node.value, |gv, y| gv / (T::lit(2.0) * y))?;
                self.send(grads, *x, gx)?;
            }
            Op::Square(x) => {
                let gx = g.zip_map(self.value(*x), |gv, a| T::lit(2.0) * a * gv)?;
                self.send(grads, *x, gx)?;
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                self.send(grads, *x, gx)?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gx = Tensor::full(xv.shape(), g.data()[0] / T::lit(xv.len() as f64));
                self.send(grads, *x, gx)?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mu = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
    (mu, T::one() / (var + eps).sqrt())
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Result of a reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<(u64, usize), usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for each parameter of `store`, `None` where the parameter was
    /// not bound as trainable or received no gradient.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        (0..store.len())
            .map(|i| self.params.get(&(store.uid(), i)).and_then(|&node| self.grads[node].clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central differences of `f` at every coordinate of `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let h = 1e-6;
        Tensor::from_fn(x.shape(), |i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn check(build: impl Fn(&mut Graph<f64>, Var) -> Var, x: Tensor<f64>) {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out).unwrap();
        let analytic = grads.of(v).unwrap().clone();
        let numeric = numeric_grad(&x, |t| {
            let mut g = Graph::new();
            let v = g.input(t.clone());
            let o = build(&mut g, v);
            g.value(o).data()[0]
        });
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} numeric {n}");
        }
    }

    #[test]
    fn gradients_of_each_op_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let w2 = w.clone();
        check(
            move |g, x| {
                let c = g.constant(w2.clone());
                let y = g.matmul(x, c).unwrap();
                let t = g.tanh(y);
                let s = g.square(t);
                g.sum(s)
            },
            rand_tensor(&mut rng, &[2, 4]),
        );

        let w3 = w.clone();
        check(
            move |g, x| {
                let c = g.constant(w3.clone());
                let y = g.matmul_t(x, c).unwrap();
                let sm = g.softmax_rows(y);
                let q = g.quick_gelu(sm);
                let m = g.mean(q);
                g.scale(m, 3.0)
            },
            rand_tensor(&mut rng, &[5, 3]),
        );

        let gamma = rand_tensor(&mut rng, &[6]);
        let beta = rand_tensor(&mut rng, &[6]);
        check(
            move |g, x| {
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
                let y2 = g.mul(y, x).unwrap();
                g.sum(y2)
            },
            rand_tensor(&mut rng, &[3, 6]),
        );

        let other = rand_tensor(&mut rng, &[2, 5]);
        check(
            move |g, x| {
                let o = g.constant(other.clone());
                g.cosine_distance(x, o).unwrap()
            },
            rand_tensor(&mut rng, &[2, 5]),
        );

        check(
            |g, x| {
                let top = g.slice_rows(x, 0, 1).unwrap();
                let rep = g.repeat_rows(top, 3).unwrap();
                let right = g.slice_cols(x, 1, 2).unwrap();
                let left = g.slice_cols(x, 0, 1).unwrap();
                let sw = g.concat_cols(&[right, left]).unwrap();
                let all = g.concat_rows(&[rep, sw]).unwrap();
                let r = g.reshape(all, &[21]).unwrap();
                let pos = g_abs_plus(g, r);
                let sq = g.sqrt(pos);
                g.sum(sq)
            },
            rand_tensor(&mut rng, &[4, 3]),
        );

        let row = rand_tensor(&mut rng, &[3]);
        check(
            move |g, x| {
                let r = g.input(row.clone());
                let y = g.add_row(x, r).unwrap();
                let d = g.div(y, x).unwrap();
                let z = g.sub(d, x).unwrap();
                let a = g.add(z, y).unwrap();
                let s = g.square(a);
                g.mean(s)
            },
            rand_tensor(&mut rng, &[2, 3]).map(|v| v + 2.0),
        );
    }

    // x² + 1, keeps sqrt away from zero.
    fn g_abs_plus(g: &mut Graph<f64>, x: Var) -> Var {
        let s = g.square(x);
        g.add_scalar(s, 1.0)
    }

    #[test]
    fn untracked_branches_receive_no_gradient() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[2, 2], 1.0));
        let b = g.input(Tensor::full(&[2, 2], 2.0));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert!(grads.of(a).is_none());
        assert_eq!(grads.of(b).unwrap().data(), &[1.0; 4]);
    }
}
