use std::collections::BTreeMap;

use super::broadcast::{offsets, Broadcast};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param,
    MatMul(Var, Var, MatMulPlan),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    MaxOverPoints { input: Var, argmax: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Tile { input: Var, axis: usize, reps: usize },
    Reshape(Var),
    Expand { input: Var, offsets: Vec<usize> },
    Gather { input: Var, index: Vec<usize>, count: usize },
    RowNorm(Var),
    NnDist(Box<NnDistCtx>),
    RqMmd2(Box<MmdCtx>),
}

#[derive(Debug)]
struct NnDistCtx {
    a: Var,
    b: Var,
    squared: bool,
    a_to_b: Vec<u32>,
    b_to_a: Vec<u32>,
}

#[derive(Debug)]
struct MmdCtx {
    a: Var,
    b: Var,
    alphas: Vec<f64>,
    unbiased: bool,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes only ever reference earlier nodes, so the recording order is a
/// topological order and [`Tape::backward`] visits each node once.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a parameter or leaf; `None` for intermediates, which are
    /// released during the backward sweep.
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        let data = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor {
            shape: self.shapes[var.0].clone(),
            data: data.clone(),
        })
    }

    /// Gradient of a named parameter, zero when the loss does not depend on it.
    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        let var = *self.params.get(name)?;
        Some(
            self.get(var)
                .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0])),
        )
    }

    /// Every registered parameter's gradient keyed by name.
    pub fn named(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &var)| {
                let g = self
                    .get(var)
                    .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]));
                (name.clone(), g)
            })
            .collect()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::contract(
                "param",
                format!("parameter {name} registered twice"),
            ));
        }
        let var = self.push(value, Op::Param, true);
        self.params.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies the value of `var` into a new constant, cutting the graph.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.nodes[var.0].value.clone();
        self.constant(value)
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

    /// Matrix product over the last two axes. Leading axes are batch axes;
    /// a rank-2 operand is shared across the other operand's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let (batch_shape, a_batched, b_batched) = if ba == bb {
            (ba.to_vec(), !ba.is_empty(), !bb.is_empty())
        } else if bb.is_empty() {
            (ba.to_vec(), true, false)
        } else if ba.is_empty() {
            (bb.to_vec(), false, true)
        } else {
            return Err(mismatch());
        };
        let plan = MatMulPlan {
            batch: batch_shape.iter().product(),
            m,
            k,
            n,
            a_batched,
            b_batched,
        };
        let mut out_shape = batch_shape;
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            matmul_forward(&plan, av, bv, &mut out);
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::MatMul(a, b, plan),
            needs,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("transpose", format!("rank of {s:?} is below 2")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let data = transpose_blocks(self.value(a).data(), r, c);
        let mut shape = s;
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::Transpose(a), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let plan = Broadcast::plan(name, self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); plan.numel()];
        match kind {
            BinaryKind::Add => plan.for_each(|o, i, j| out[o] = av[i] + bv[j]),
            BinaryKind::Sub => plan.for_each(|o, i, j| out[o] = av[i] - bv[j]),
            BinaryKind::Mul => plan.for_each(|o, i, j| out[o] = av[i] * bv[j]),
        }
        let value = Tensor {
            shape: plan.out_shape.clone(),
            data: out,
        };
        let op = match kind {
            BinaryKind::Add => Op::Add(a, b, plan),
            BinaryKind::Sub => Op::Sub(a, b, plan),
            BinaryKind::Mul => Op::Mul(a, b, plan),
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, op, needs))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = map(self.value(a), |v| v * factor);
        let needs = self.needs(&[a]);
        self.push(value, Op::Scale(a, factor), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = map(self.value(a), |v| v + c);
        let needs = self.needs(&[a]);
        self.push(value, Op::AddScalar(a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = map(self.value(a), |v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(&[a]);
        self.push(value, Op::Relu(a), needs)
    }

    /// Constant 0/1 tensor marking where `a` is positive, the local
    /// derivative of a relu applied to `a`.
    pub fn relu_mask(&mut self, a: Var) -> Var {
        let value = map(self.value(a), |v| if v > T::zero() { T::one() } else { T::zero() });
        self.constant(value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum::<T>();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let total = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(total), Op::Mean(a), needs)
    }

    /// Per-feature maximum over the point axis of a `[b, n, d]` tensor.
    /// The first maximal point wins ties; backward routes each output
    /// gradient to that single input slot.
    pub fn max_over_points(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(
                "max_over_points",
                format!("expected [b, n, d], got {s:?}"),
            ));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        if n == 0 {
            return Err(Error::EmptyInput("max_over_points"));
        }
        let av = self.value(a).data();
        let mut out = vec![T::zero(); b * d];
        let mut argmax = vec![0usize; b * d];
        for bi in 0..b {
            let base = bi * n * d;
            let row = &av[base..base + d];
            out[bi * d..(bi + 1) * d].copy_from_slice(row);
            for (j, slot) in argmax[bi * d..(bi + 1) * d].iter_mut().enumerate() {
                *slot = base + j;
            }
            for p in 1..n {
                let row = &av[base + p * d..base + (p + 1) * d];
                for j in 0..d {
                    if row[j] > out[bi * d + j] {
                        out[bi * d + j] = row[j];
                        argmax[bi * d + j] = base + p * d + j;
                    }
                }
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![b, d],
                data: out,
            },
            Op::MaxOverPoints { input: a, argmax },
            needs,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or(Error::EmptyInput("concat"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let needs = self.needs(inputs);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Repeats `a` `reps` times along `axis`: output index `i` on that axis
    /// reads input index `i % extent`.
    pub fn tile(&mut self, a: Var, axis: usize, reps: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || reps == 0 {
            return Err(Error::dim(
                "tile",
                format!("cannot tile {s:?} {reps} times on axis {axis}"),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let block = s[axis] * s[axis + 1..].iter().product::<usize>();
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(av.len() * reps);
        for o in 0..outer {
            let src = &av[o * block..(o + 1) * block];
            for _ in 0..reps {
                out.extend_from_slice(src);
            }
        }
        let mut shape = s;
        shape[axis] *= reps;
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Tile {
                input: a,
                axis,
                reps,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Broadcasts `a` to `shape` by repetition along size-1 or missing axes.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let ok = super::broadcast::broadcast_shape(&s, shape).is_some_and(|b| b == shape);
        if !ok {
            return Err(Error::dim(
                "expand",
                format!("cannot expand {s:?} to {shape:?}"),
            ));
        }
        let offs = offsets(shape, &s);
        let av = self.value(a).data();
        let data = offs.iter().map(|&i| av[i]).collect();
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Expand {
                input: a,
                offsets: offs,
            },
            needs,
        ))
    }

    /// Selects points per batch entry: `a` is `[b, n, d]`, `index` holds
    /// `count` point indices for each of the `b` entries.
    pub fn gather_points(&mut self, a: Var, index: &[usize], count: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || index.len() != s[0] * count {
            return Err(Error::dim(
                "gather_points",
                format!("{} indices for {count} per batch of {s:?}", index.len()),
            ));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Bounds {
                op: "gather_points",
                detail: format!("index {bad} with {n} points"),
            });
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(b * count * d);
        for bi in 0..b {
            for &p in &index[bi * count..(bi + 1) * count] {
                let at = (bi * n + p) * d;
                out.extend_from_slice(&av[at..at + d]);
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![b, count, d],
                data: out,
            },
            Op::Gather {
                input: a,
                index: index.to_vec(),
                count,
            },
            needs,
        ))
    }

    /// Euclidean norm over the last axis.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s
            .last()
            .ok_or_else(|| Error::dim("row_norm", "rank-0 input"))?;
        let av = self.value(a).data();
        let data = if d == 0 {
            vec![T::zero(); av.len()]
        } else {
            av.chunks(d)
                .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
                .collect()
        };
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor {
                shape: s[..s.len() - 1].to_vec(),
                data,
            },
            Op::RowNorm(a),
            needs,
        ))
    }

    /// Directional nearest-neighbour means between two batched clouds
    /// `a: [b, n, 3]` and `c: [b, m, 3]`. Output is `[b, 2]`: column 0 is the
    /// mean over `a` of the distance to its nearest point in `c`, column 1
    /// the reverse. `squared` selects squared Euclidean distances. The
    /// nearest-neighbour pairing is held fixed in backward.
    pub fn nn_dist(&mut self, a: Var, c: Var, squared: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sc = self.shape(c).to_vec();
        if sa.len() != 3 || sc.len() != 3 || sa[2] != 3 || sc[2] != 3 || sa[0] != sc[0] {
            return Err(Error::dim(
                "chamfer",
                format!("expected [b, n, 3] and [b, m, 3], got {sa:?} and {sc:?}"),
            ));
        }
        let (b, n, m) = (sa[0], sa[1], sc[1]);
        if n == 0 || m == 0 {
            return Err(Error::EmptyInput("chamfer"));
        }
        let av = self.value(a).data();
        let cv = self.value(c).data();
        let mut out = vec![T::zero(); b * 2];
        let mut a_to_b = vec![0u32; b * n];
        let mut b_to_a = vec![0u32; b * m];
        let mut best_a = vec![T::zero(); n];
        let mut best_c = vec![T::zero(); m];
        for bi in 0..b {
            let pa = &av[bi * n * 3..(bi + 1) * n * 3];
            let pc = &cv[bi * m * 3..(bi + 1) * m * 3];
            nearest_both(
                pa,
                pc,
                &mut best_a,
                &mut a_to_b[bi * n..(bi + 1) * n],
                &mut best_c,
                &mut b_to_a[bi * m..(bi + 1) * m],
            );
            let dist = |d2: T| if squared { d2 } else { d2.sqrt() };
            let fwd = best_a.iter().map(|&d| dist(d)).sum::<T>() / T::of(n as f64);
            let bwd = best_c.iter().map(|&d| dist(d)).sum::<T>() / T::of(m as f64);
            out[bi * 2] = fwd;
            out[bi * 2 + 1] = bwd;
        }
        let needs = self.needs(&[a, c]);
        Ok(self.push(
            Tensor {
                shape: vec![b, 2],
                data: out,
            },
            Op::NnDist(Box::new(NnDistCtx {
                a,
                b: c,
                squared,
                a_to_b,
                b_to_a,
            })),
            needs,
        ))
    }

    /// Squared maximum mean discrepancy between the rows of `a: [m, e]` and
    /// `b: [n, e]` under a mixture of rational-quadratic kernels.
    pub fn rq_mmd2(&mut self, a: Var, b: Var, alphas: &[f64], unbiased: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim(
                "mmd2",
                format!("expected [m, e] and [n, e], got {sa:?} and {sb:?}"),
            ));
        }
        let (m, n, e) = (sa[0], sb[0], sa[1]);
        let min = if unbiased { 2 } else { 1 };
        if m < min || n < min {
            return Err(Error::contract(
                "mmd2",
                format!("{} estimator needs at least {min} samples per set, got {m} and {n}",
                    if unbiased { "unbiased" } else { "biased" }),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let value = mmd2_value(av, bv, m, n, e, alphas, unbiased);
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::RqMmd2(Box::new(MmdCtx {
                a,
                b,
                alphas: alphas.to_vec(),
                unbiased,
            })),
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, shape is {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let keep = matches!(node.op, Op::Param | Op::Constant);
            let g = match if keep {
                grads[idx].clone()
            } else {
                grads[idx].take()
            } {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            params: self.params.clone(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b, plan) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_grad_a(plan, g, bv, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_grad_b(plan, av, g, gb);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_blocks(g, c, r);
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, &back);
                }
            }
            Op::Add(a, b, plan) | Op::Sub(a, b, plan) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if let Some(ga) = self.slot(grads, *a) {
                    plan.for_each(|o, i, _| ga[i] = ga[i] + g[o]);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    plan.for_each(|o, _, j| gb[j] = gb[j] + sign * g[o]);
                }
            }
            Op::Mul(a, b, plan) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                plan.for_each(|o, i, j| {
                    da[i] = da[i] + g[o] * bv[j];
                    db[j] = db[j] + g[o] * av[i];
                });
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, &da);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, &db);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x = *x + *c * y;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(av) {
                        if v > T::zero() {
                            *x = *x + y;
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let len = self.value(*a).numel();
                let each = if matches!(node.op, Op::Mean(_)) {
                    g[0] / T::of(len as f64)
                } else {
                    g[0]
                };
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x = *x + each);
                }
            }
            Op::MaxOverPoints { input, argmax } => {
                if let Some(ga) = self.slot(grads, *input) {
                    for (&src, &y) in argmax.iter().zip(g) {
                        ga[src] = ga[src] + y;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut start = 0;
                for &v in inputs {
                    let block = self.shape(v)[*axis] * inner;
                    if let Some(gv) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * total + start..o * total + start + block];
                            add_into(&mut gv[o * block..(o + 1) * block], src);
                        }
                    }
                    start += block;
                }
            }
            Op::Tile { input, axis, reps } => {
                let s = self.shape(*input);
                let outer: usize = s[..*axis].iter().product();
                let block = s[*axis] * s[axis + 1..].iter().product::<usize>();
                if let Some(ga) = self.slot(grads, *input) {
                    for o in 0..outer {
                        for r in 0..*reps {
                            let at = (o * reps + r) * block;
                            add_into(&mut ga[o * block..(o + 1) * block], &g[at..at + block]);
                        }
                    }
                }
            }
            Op::Expand { input, offsets } => {
                if let Some(ga) = self.slot(grads, *input) {
                    for (&i, &y) in offsets.iter().zip(g) {
                        ga[i] = ga[i] + y;
                    }
                }
            }
            Op::Gather {
                input,
                index,
                count,
            } => {
                let s = self.shape(*input);
                let (n, d) = (s[1], s[2]);
                if let Some(ga) = self.slot(grads, *input) {
                    for (row, &p) in index.iter().enumerate() {
                        let bi = row / count;
                        let at = (bi * n + p) * d;
                        add_into(&mut ga[at..at + d], &g[row * d..(row + 1) * d]);
                    }
                }
            }
            Op::RowNorm(a) => {
                let av = self.value(*a).data();
                let norms = node.value.data();
                let d = *self.shape(*a).last().unwrap_or(&0);
                if d == 0 {
                    return;
                }
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, (&nrm, &y)) in norms.iter().zip(g).enumerate() {
                        if nrm > T::zero() {
                            for j in r * d..(r + 1) * d {
                                ga[j] = ga[j] + y * av[j] / nrm;
                            }
                        }
                    }
                }
            }
            Op::NnDist(ctx) => self.nn_dist_backward(ctx, g, grads),
            Op::RqMmd2(ctx) => self.mmd_backward(ctx, g[0], grads),
        }
    }

    fn nn_dist_backward(&self, ctx: &NnDistCtx, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let av = self.value(ctx.a).data();
        let cv = self.value(ctx.b).data();
        let b = self.shape(ctx.a)[0];
        let n = self.shape(ctx.a)[1];
        let m = self.shape(ctx.b)[1];
        let mut da = vec![T::zero(); av.len()];
        let mut dc = vec![T::zero(); cv.len()];
        let two = T::of(2.0);
        // d/dp of dist(p, q) for the fixed pairing, written into `dp` (and
        // its negation into `dq`), scaled by `w`.
        let pair = |p: &[T], q: &[T], w: T, dp: &mut [T], dq: &mut [T]| {
            let diff = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            let factor = if ctx.squared {
                two * w
            } else {
                let len = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
                if len > T::zero() {
                    w / len
                } else {
                    T::zero()
                }
            };
            for k in 0..3 {
                dp[k] = dp[k] + factor * diff[k];
                dq[k] = dq[k] - factor * diff[k];
            }
        };
        for bi in 0..b {
            let wf = g[bi * 2] / T::of(n as f64);
            let wb = g[bi * 2 + 1] / T::of(m as f64);
            for i in 0..n {
                let j = ctx.a_to_b[bi * n + i] as usize;
                let (pi, qj) = ((bi * n + i) * 3, (bi * m + j) * 3);
                let (dp, dq) = (&mut da[pi..pi + 3], &mut dc[qj..qj + 3]);
                pair(&av[pi..pi + 3], &cv[qj..qj + 3], wf, dp, dq);
            }
            for j in 0..m {
                let i = ctx.b_to_a[bi * m + j] as usize;
                let (pi, qj) = ((bi * n + i) * 3, (bi * m + j) * 3);
                let (dq, dp) = (&mut dc[qj..qj + 3], &mut da[pi..pi + 3]);
                pair(&cv[qj..qj + 3], &av[pi..pi + 3], wb, dq, dp);
            }
        }
        if let Some(ga) = self.slot(grads, ctx.a) {
            add_into(ga, &da);
        }
        if let Some(gc) = self.slot(grads, ctx.b) {
            add_into(gc, &dc);
        }
    }

    fn mmd_backward(&self, ctx: &MmdCtx, g: T, grads: &mut [Option<Vec<T>>]) {
        let av = self.value(ctx.a).data();
        let bv = self.value(ctx.b).data();
        let (m, e) = (self.shape(ctx.a)[0], self.shape(ctx.a)[1]);
        let n = self.shape(ctx.b)[0];
        let (caa, cbb, cab) = mmd_coefficients::<T>(m, n, ctx.unbiased);
        let mut da = vec![T::zero(); av.len()];
        let mut db = vec![T::zero(); bv.len()];
        let alphas: Vec<T> = ctx.alphas.iter().map(|&a| T::of(a)).collect();
        // ∂k(x, y)/∂x = -(x - y) · Σ_α (1 + r / 2α)^(-α-1), r = |x - y|²
        let slope = |x: &[T], y: &[T]| -> T {
            let r = sq_dist(x, y);
            alphas
                .iter()
                .map(|&al| (T::one() + r / (T::of(2.0) * al)).powf(-al - T::one()))
                .sum::<T>()
        };
        let accumulate = |x: &[T], y: &[T], w: T, dx: &mut [T]| {
            let s = slope(x, y) * w;
            for k in 0..e {
                dx[k] = dx[k] - s * (x[k] - y[k]);
            }
        };
        for i in 0..m {
            let ai = &av[i * e..(i + 1) * e];
            for j in 0..m {
                if i != j {
                    // pairs (i, j) and (j, i) both depend on a_i
                    accumulate(ai, &av[j * e..(j + 1) * e], T::of(2.0) * caa * g, &mut da[i * e..(i + 1) * e]);
                }
            }
            for j in 0..n {
                let bj = &bv[j * e..(j + 1) * e];
                accumulate(ai, bj, -cab * g, &mut da[i * e..(i + 1) * e]);
                accumulate(bj, ai, -cab * g, &mut db[j * e..(j + 1) * e]);
            }
        }
        for i in 0..n {
            let bi = &bv[i * e..(i + 1) * e];
            for j in 0..n {
                if i != j {
                    accumulate(bi, &bv[j * e..(j + 1) * e], T::of(2.0) * cbb * g, &mut db[i * e..(i + 1) * e]);
                }
            }
        }
        if let Some(ga) = self.slot(grads, ctx.a) {
            add_into(ga, &da);
        }
        if let Some(gb) = self.slot(grads, ctx.b) {
            add_into(gb, &db);
        }
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

fn map<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn transpose_blocks<T: Real>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let block = rows * cols;
    let mut out = vec![T::zero(); data.len()];
    if block == 0 {
        return out;
    }
    for (src, dst) in data.chunks(block).zip(out.chunks_mut(block)) {
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

fn matmul_forward<T: Real>(p: &MatMulPlan, a: &[T], b: &[T], out: &mut [T]) {
    let (m, k, n) = (p.m, p.k, p.n);
    let (k_i, n_i) = (k as isize, n as isize);
    if !p.b_batched {
        // one product over the flattened batch
        let rows = p.batch * m;
        T::gemm(rows, k, n, T::one(), a, k_i, 1, b, n_i, 1, T::zero(), out, n_i, 1);
        return;
    }
    for t in 0..p.batch {
        let at = if p.a_batched { &a[t * m * k..(t + 1) * m * k] } else { a };
        let bt = &b[t * k * n..(t + 1) * k * n];
        let ct = &mut out[t * m * n..(t + 1) * m * n];
        T::gemm(m, k, n, T::one(), at, k_i, 1, bt, n_i, 1, T::zero(), ct, n_i, 1);
    }
}

/// ga += g · bᵀ
fn matmul_grad_a<T: Real>(p: &MatMulPlan, g: &[T], b: &[T], ga: &mut [T]) {
    let (m, k, n) = (p.m, p.k, p.n);
    let (k_i, n_i) = (k as isize, n as isize);
    if !p.b_batched {
        let rows = p.batch * m;
        T::gemm(rows, n, k, T::one(), g, n_i, 1, b, 1, n_i, T::one(), ga, k_i, 1);
        return;
    }
    for t in 0..p.batch {
        let gt = &g[t * m * n..(t + 1) * m * n];
        let bt = &b[t * k * n..(t + 1) * k * n];
        let dst = if p.a_batched {
            &mut ga[t * m * k..(t + 1) * m * k]
        } else {
            &mut ga[..]
        };
        T::gemm(m, n, k, T::one(), gt, n_i, 1, bt, 1, n_i, T::one(), dst, k_i, 1);
    }
}

/// gb += aᵀ · g
fn matmul_grad_b<T: Real>(p: &MatMulPlan, a: &[T], g: &[T], gb: &mut [T]) {
    let (m, k, n) = (p.m, p.k, p.n);
    let (k_i, n_i) = (k as isize, n as isize);
    if !p.b_batched {
        let rows = p.batch * m;
        T::gemm(k, rows, n, T::one(), a, 1, k_i, g, n_i, 1, T::one(), gb, n_i, 1);
        return;
    }
    for t in 0..p.batch {
        let at = if p.a_batched { &a[t * m * k..(t + 1) * m * k] } else { a };
        let gt = &g[t * m * n..(t + 1) * m * n];
        let dst = &mut gb[t * k * n..(t + 1) * k * n];
        T::gemm(k, m, n, T::one(), at, 1, k_i, gt, n_i, 1, T::one(), dst, n_i, 1);
    }
}

pub(crate) fn sq_dist<T: Real>(x: &[T], y: &[T]) -> T {
    x.iter()
        .zip(y)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum()
}

/// Exact nearest neighbours in both directions between two flat xyz
/// arrays. Squared distances land in `best_*`, indices in `arg_*`; the
/// lowest index wins ties.
pub(crate) fn nearest_both<T: Real>(
    a: &[T],
    c: &[T],
    best_a: &mut [T],
    arg_a: &mut [u32],
    best_c: &mut [T],
    arg_c: &mut [u32],
) {
    const LANES: usize = 8;
    let n = a.len() / 3;
    let m = c.len() / 3;
    best_a[..n].fill(T::infinity());
    best_c[..m].fill(T::infinity());
    if m == 0 {
        return;
    }
    // split coordinates so the distance row vectorizes
    let cx: Vec<T> = (0..m).map(|j| c[j * 3]).collect();
    let cy: Vec<T> = (0..m).map(|j| c[j * 3 + 1]).collect();
    let cz: Vec<T> = (0..m).map(|j| c[j * 3 + 2]).collect();
    let mut row = vec![T::zero(); m];
    let best_c = &mut best_c[..m];
    let arg_c = &mut arg_c[..m];
    for i in 0..n {
        let (x, y, z) = (a[i * 3], a[i * 3 + 1], a[i * 3 + 2]);
        let iu = i as u32;
        let cols = cx.iter().zip(&cy).zip(&cz);
        let slots = best_c.iter_mut().zip(arg_c.iter_mut());
        for ((r, ((&px, &py), &pz)), (b, g)) in row.iter_mut().zip(cols).zip(slots) {
            let dx = x - px;
            let dy = y - py;
            let dz = z - pz;
            let d = dx * dx + dy * dy + dz * dz;
            *r = d;
            let closer = d < *b;
            *b = if closer { d } else { *b };
            *g = if closer { iu } else { *g };
        }
        let mut lanes = [T::infinity(); LANES];
        let mut chunks = row.chunks_exact(LANES);
        for chunk in &mut chunks {
            for k in 0..LANES {
                lanes[k] = if chunk[k] < lanes[k] { chunk[k] } else { lanes[k] };
            }
        }
        let mut best = lanes.iter().fold(T::infinity(), |b, &v| if v < b { v } else { b });
        for &v in chunks.remainder() {
            if v < best {
                best = v;
            }
        }
        // first index holding the minimum, so the lowest index wins ties
        let arg = row.iter().position(|&v| v == best).unwrap_or(0);
        best_a[i] = best;
        arg_a[i] = arg as u32;
    }
}

/// Weights of the within-set and cross sums in the MMD² estimate.
fn mmd_coefficients<T: Real>(m: usize, n: usize, unbiased: bool) -> (T, T, T) {
    let (m, n) = (m as f64, n as f64);
    if unbiased {
        (
            T::of(1.0 / (m * (m - 1.0))),
            T::of(1.0 / (n * (n - 1.0))),
            T::of(2.0 / (m * n)),
        )
    } else {
        (T::of(1.0 / (m * m)), T::of(1.0 / (n * n)), T::of(2.0 / (m * n)))
    }
}

pub(crate) fn rq_kernel_value<T: Real>(x: &[T], y: &[T], alphas: &[f64]) -> T {
    let r = sq_dist(x, y);
    alphas
        .iter()
        .map(|&a| {
            let a = T::of(a);
            (T::one() + r / (T::of(2.0) * a)).powf(-a)
        })
        .sum()
}

pub(crate) fn mmd2_value<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    n: usize,
    e: usize,
    alphas: &[f64],
    unbiased: bool,
) -> T {
    let (caa, cbb, cab) = mmd_coefficients::<T>(m, n, unbiased);
    let within = |x: &[T], count: usize| {
        let mut s = T::zero();
        for i in 0..count {
            for j in 0..count {
                if unbiased && i == j {
                    continue;
                }
                s = s + rq_kernel_value(&x[i * e..(i + 1) * e], &x[j * e..(j + 1) * e], alphas);
            }
        }
        s
    };
    let mut cross = T::zero();
    for i in 0..m {
        for j in 0..n {
            cross = cross + rq_kernel_value(&a[i * e..(i + 1) * e], &b[j * e..(j + 1) * e], alphas);
        }
    }
    caa * within(a, m) + cbb * within(b, n) - cab * cross
}
