//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operator appends a node holding its value and the ids of its
//! inputs. Since a node can only reference nodes recorded before it, the
//! graph is acyclic by construction and a single reverse sweep over the tape
//! visits nodes in a valid topological order.

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, ConvGeometry, PoolGeometry};
use crate::numerics::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
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
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    Pool {
        x: Var,
        geom: PoolGeometry,
        argmax: Vec<usize>,
    },
    GlobalMeanPool(Var),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    DivConst(Var, T),
    AddConst(Var),
    Sum(Var),
    SumMany(Vec<Var>),
    Reshape(Var),
    Score {
        h: Var,
        z: Var,
    },
    SoftmaxCe {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
}

/// A recorded value together with the operator and inputs that produced it.
#[derive(Debug)]
pub struct DiffNode<T> {
    value: Tensor<T>,
    op: Op<T>,
}

impl<T: Real> DiffNode<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn parents(&self) -> Vec<Var> {
        match &self.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Conv { x, w, b, .. } | Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Relu(x)
            | Op::Pool { x, .. }
            | Op::GlobalMeanPool(x)
            | Op::Scale(x, _)
            | Op::DivConst(x, _)
            | Op::AddConst(x)
            | Op::Sum(x)
            | Op::Reshape(x) => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::SumMany(xs) => xs.clone(),
            Op::Score { h, z } => vec![*h, *z],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root w.r.t. `v`, or `None` if `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<DiffNode<T>>,
    zero_norm_cells: usize,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            zero_norm_cells: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &DiffNode<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Number of score cells that hit a zero-norm vector so far.
    pub fn zero_norm_cells(&self) -> usize {
        self.zero_norm_cells
    }

    /// Hash of every piecewise branch taken on this tape: relu input signs
    /// and max-pool winners. Two evaluations with equal signatures lie on
    /// the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        feed((v > T::zero()) as u64);
                    }
                }
                Op::Pool { argmax, .. } => argmax.iter().for_each(|&i| feed(i as u64)),
                _ => {}
            }
        }
        h
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(DiffNode { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A value that never needs a gradient (input data).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    fn is_constant(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Constant)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let value = kernels::conv_forward(self.value(x), self.value(w), self.value(b), &geom)?;
        Ok(self.push(value, Op::Conv { x, w, b, geom }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = kernels::relu(self.value(x));
        self.push(value, Op::Relu(x))
    }

    pub fn pool(&mut self, x: Var, geom: PoolGeometry) -> Result<Var> {
        let (value, argmax) = kernels::pool_forward(self.value(x), &geom)?;
        Ok(self.push(value, Op::Pool { x, geom, argmax }))
    }

    pub fn global_mean_pool(&mut self, x: Var) -> Result<Var> {
        let value = kernels::global_mean_pool(self.value(x))?;
        Ok(self.push(value, Op::GlobalMeanPool(x)))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = kernels::affine(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                what,
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn div_const(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v / c);
        self.push(value, Op::DivConst(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddConst(x))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    /// Elementwise sum of equally shaped nodes, added in the given order.
    pub fn sum_many(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("sum of zero terms".into()))?;
        let mut acc = self.value(first).clone();
        for &x in &xs[1..] {
            self.same_shape(first, x, "sum_many")?;
            acc.add_assign(self.value(x));
        }
        Ok(self.push(acc, Op::SumMany(xs.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Mean cosine similarity of aligned cells of two `(C, H, W)` grids.
    pub fn score(&mut self, h: Var, z: Var) -> Result<Var> {
        let (cos, zero) = kernels::cell_cosines(self.value(h), self.value(z))?;
        self.zero_norm_cells += zero;
        let value = Tensor::scalar(kernels::mean_of(&cos));
        Ok(self.push(value, Op::Score { h, z }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), label)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                label,
                probs: probs.into_data(),
            },
        ))
    }

    /// Propagates d(root)/d(node) to every node that influences `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "root",
                format!(
                    "backward needs a scalar root, got shape {:?}",
                    self.value(root).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Conv { x, w, b, geom } => {
                    let (gx, gw, gb) = kernels::conv_backward(
                        self.value(*x),
                        self.value(*w),
                        self.value(*b),
                        geom,
                        &g,
                        !self.is_constant(*x),
                    )?;
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, gx);
                    }
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Pool { x, geom, argmax } => {
                    let gx = kernels::pool_backward(self.value(*x), geom, argmax, &g)?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::GlobalMeanPool(x) => {
                    let xv = self.value(*x);
                    let ch = xv.shape()[0];
                    let cells = xv.numel() / ch;
                    let denom = T::from_usize(cells).unwrap();
                    let mut data = Vec::with_capacity(xv.numel());
                    for &gv in g.data() {
                        data.extend(std::iter::repeat_n(gv / denom, cells));
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let n_in = xv.numel();
                    let gd = g.data();
                    let mut gw = Vec::with_capacity(wv.numel());
                    for &go in gd {
                        gw.extend(xv.data().iter().map(|&xi| go * xi));
                    }
                    let mut gx = vec![T::zero(); n_in];
                    for (row, &go) in wv.data().chunks(n_in).zip(gd) {
                        for (acc, &wi) in gx.iter_mut().zip(row) {
                            *acc += go * wi;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                    accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), gw)?);
                    accumulate(&mut grads, *b, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = {
                        let bv = self.value(*b);
                        let data = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                        Tensor::new(g.shape().to_vec(), data)?
                    };
                    let gb = {
                        let av = self.value(*a);
                        let data = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                        Tensor::new(g.shape().to_vec(), data)?
                    };
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, g.map(|v| v * c));
                }
                Op::DivConst(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, g.map(|v| v / c));
                }
                Op::AddConst(x) => accumulate(&mut grads, *x, g),
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::full(&shape, g.item()));
                }
                Op::SumMany(xs) => {
                    for &x in xs {
                        accumulate(&mut grads, x, g.clone());
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, g.reshape(&shape)?);
                }
                Op::Score { h, z } => {
                    let (gh, gz) = score_backward(self.value(*h), self.value(*z), g.item());
                    accumulate(&mut grads, *h, gh);
                    accumulate(&mut grads, *z, gz);
                }
                Op::SoftmaxCe {
                    logits,
                    label,
                    probs,
                } => {
                    let go = g.item();
                    let data = probs
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| {
                            let target = if i == *label { T::one() } else { T::zero() };
                            go * (p - target)
                        })
                        .collect();
                    accumulate(&mut grads, *logits, Tensor::from_vec(data));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradient of `mean_cells cos(h_cell, z_cell)` w.r.t. both grids, scaled by `upstream`.
fn score_backward<T: Real>(h: &Tensor<T>, z: &Tensor<T>, upstream: T) -> (Tensor<T>, Tensor<T>) {
    let c = h.shape()[0];
    let cells = h.shape()[1] * h.shape()[2];
    let inv_cells = upstream / T::from_usize(cells).unwrap();
    let (hd, zd) = (h.data(), z.data());
    let mut gh = vec![T::zero(); hd.len()];
    let mut gz = vec![T::zero(); zd.len()];
    for cell in 0..cells {
        let mut dot = T::zero();
        let mut hh = T::zero();
        let mut zz = T::zero();
        for ch in 0..c {
            let a = hd[ch * cells + cell];
            let b = zd[ch * cells + cell];
            dot += a * b;
            hh += a * a;
            zz += b * b;
        }
        if !(hh > T::zero() && zz > T::zero()) {
            continue;
        }
        let (nh, nz) = (hh.sqrt(), zz.sqrt());
        let cos = dot / (nh * nz);
        let inv = T::one() / (nh * nz);
        for ch in 0..c {
            let i = ch * cells + cell;
            gh[i] = inv_cells * (zd[i] * inv - cos * hd[i] / hh);
            gz[i] = inv_cells * (hd[i] * inv - cos * zd[i] / zz);
        }
    }
    (
        Tensor::new(h.shape().to_vec(), gh).unwrap(),
        Tensor::new(z.shape().to_vec(), gz).unwrap(),
    )
}
