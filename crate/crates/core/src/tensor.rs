//! Dense row-major tensors and a tape-style reverse-mode autodiff graph.
//!
//! Tensors are immutable once built; the payload sits behind an `Arc` so
//! cloning a tensor into a backward closure costs a reference count bump.
//! Every constructor rejects NaN and infinities.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{contract_err, dim_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(dim_err!("zero extent in shape {:?}", shape));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                n,
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor of shape {:?} at flat index {}",
                shape, i
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: data.into(),
            requires_grad: false,
        })
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(&[], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![v; n])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(contract_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(dim_err!(
                "index {:?} has rank {} but tensor has shape {:?}",
                index,
                index.len(),
                self.shape
            ));
        }
        let mut off = 0;
        for ((&i, &d), s) in index.iter().zip(&self.shape).zip(self.strides()) {
            if i >= d {
                return Err(dim_err!("index {:?} out of bounds for {:?}", index, self.shape));
            }
            off += i * s;
        }
        Ok(off)
    }

    pub fn at(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.contains(&0) {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(dim_err!("compare {:?} with {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

// ---------------------------------------------------------------------------
// Dense kernels on raw row-major slices.

/// c[m×n] = a[m×k] · b[k×n]
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let a_it = a[i * k + t];
            if a_it == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_it * bv;
            }
        }
    }
    c
}

/// c[m×n] = a[m×k] · b[n×k]ᵀ
pub fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot(a_row, b_row);
        }
    }
    c
}

/// c[m×n] = a[k×m]ᵀ · b[k×n]
pub fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for t in 0..k {
        let b_row = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let a_ti = a[t * m + i];
            if a_ti == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ti * bv;
            }
        }
    }
    c
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

// ---------------------------------------------------------------------------
// Autodiff graph.

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule: receives the gradient of the node's output and a mask of
/// which parents need a gradient; returns one entry per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Nodes are appended in evaluation order, which is a topological order, so
/// backward simply walks the tape in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of every `requires_grad` leaf, keyed by the leaf's handle.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.map.iter()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node; tracks gradients iff the tensor's `requires_grad` flag is set.
    pub fn input(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node {
            op: "leaf",
            value: t,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.input(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Registers an operation whose forward value has already been computed.
    pub fn custom(&mut self, op: &'static str, parents: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        if let Some(p) = parents.iter().find(|p| p.0 >= self.nodes.len()) {
            return Err(contract_err!("{}: parent {:?} is not in this graph", op, p));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents: parents.to_vec(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn push(
        &mut self,
        op: &'static str,
        parents: &[Var],
        shape: &[usize],
        data: Vec<f64>,
        backward: BackwardFn,
    ) -> Result<Var> {
        let value = Tensor::new(shape, data).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("output of {}: {}", op, msg)),
            other => other,
        })?;
        self.custom(op, parents, value, backward)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let v = self.value(root);
        if !v.is_scalar() {
            return Err(contract_err!(
                "backward root must be a scalar, got shape {:?}",
                v.shape()
            ));
        }
        let seed = Tensor::full(v.shape(), 1.0)?;
        self.backward_with_seed(root, &seed)
    }

    /// Reverse pass seeded with an explicit output gradient (vector-Jacobian
    /// product), for roots that are not scalars.
    pub fn backward_with_seed(&self, root: Var, seed: &Tensor) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(contract_err!("root {:?} is not in this graph", root));
        }
        if seed.shape() != self.value(root).shape() {
            return Err(dim_err!(
                "seed shape {:?} does not match root shape {:?}",
                seed.shape(),
                self.value(root).shape()
            ));
        }
        let mut out = Gradients::default();
        if !self.nodes[root.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed.to_vec());

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let g = Tensor::new(node.value.shape(), g).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("gradient flowing into {}: {}", node.op, msg)),
                other => other,
            })?;
            let mask: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parent_grads = backward(&g, &mask)?;
            if parent_grads.len() != node.parents.len() {
                return Err(contract_err!(
                    "{}: backward returned {} gradients for {} parents",
                    node.op,
                    parent_grads.len(),
                    node.parents.len()
                ));
            }
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                let pv = &self.nodes[p.0].value;
                if pg.shape() != pv.shape() {
                    return Err(contract_err!(
                        "{}: gradient shape {:?} for parent of shape {:?}",
                        node.op,
                        pg.shape(),
                        pv.shape()
                    ));
                }
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(pg.to_vec()),
                }
            }
            // Interior gradients are no longer needed once propagated; leaves keep theirs.
            if !node.parents.is_empty() {
                grads[idx] = None;
            }
        }

        for (idx, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if node.parents.is_empty() && node.requires_grad {
                let g = match grads[idx].take() {
                    Some(g) => Tensor::new(node.value.shape(), g)?,
                    None => Tensor::zeros(node.value.shape())?,
                };
                out.map.insert(Var(idx), g);
            }
        }
        Ok(out)
    }

    // -- elementary ops -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        if ta.shape() != tb.shape() {
            return Err(dim_err!("add: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        self.push(
            "add",
            &[a, b],
            ta.shape(),
            data,
            Box::new(|g, _| Ok(vec![Some(g.clone()), Some(g.clone())])),
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        if ta.shape() != tb.shape() {
            return Err(dim_err!("mul: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push(
            "mul",
            &[a, b],
            &shape.clone(),
            data,
            Box::new(move |g, need| {
                let ga = need[0]
                    .then(|| Tensor::new(&shape, g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect()))
                    .transpose()?;
                let gb = need[1]
                    .then(|| Tensor::new(&shape, g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect()))
                    .transpose()?;
                Ok(vec![ga, gb])
            }),
        )
    }

    /// Multiplication by a fixed scalar (the only broadcast this crate supports).
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a).clone();
        let data = ta.data().iter().map(|x| x * s).collect();
        self.push(
            "scale",
            &[a],
            ta.shape(),
            data,
            Box::new(move |g, _| Ok(vec![Some(g.map(|v| v * s)?)])),
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a).clone();
        let s: f64 = ta.data().iter().sum();
        let shape = ta.shape().to_vec();
        self.push(
            "sum",
            &[a],
            &[],
            vec![s],
            Box::new(move |g, _| Ok(vec![Some(Tensor::full(&shape, g.item()?)?)])),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err!("matmul: cannot multiply {:?} by {:?}", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push(
            "matmul",
            &[a, b],
            &[m, n],
            data,
            Box::new(move |g, need| {
                let ga = need[0]
                    .then(|| Tensor::new(&[m, k], matmul_nt_raw(g.data(), tb.data(), m, n, k)))
                    .transpose()?;
                let gb = need[1]
                    .then(|| Tensor::new(&[k, n], matmul_tn_raw(ta.data(), g.data(), k, m, n)))
                    .transpose()?;
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a).clone();
        let out = ta.reshape(shape)?;
        let in_shape = ta.shape().to_vec();
        self.push(
            "reshape",
            &[a],
            shape,
            out.to_vec(),
            Box::new(move |g, _| Ok(vec![Some(g.reshape(&in_shape)?)])),
        )
    }

    /// Flattens each input and concatenates them into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract_err!("concat of zero tensors"));
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let total = data.len();
        self.push(
            "concat",
            parts,
            &[total],
            data,
            Box::new(move |g, need| {
                let mut off = 0;
                let mut out = Vec::with_capacity(shapes.len());
                for (s, &n) in shapes.iter().zip(need) {
                    let len: usize = s.iter().product();
                    out.push(if n {
                        Some(Tensor::new(s, g.data()[off..off + len].to_vec())?)
                    } else {
                        None
                    });
                    off += len;
                }
                Ok(out)
            }),
        )
    }
}
