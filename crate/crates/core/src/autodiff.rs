//! Minimal dense-array engine with tape-based reverse-mode differentiation.
//!
//! Every value lives on a [`Tape`] as a node; operations on [`Var`] handles
//! append nodes in creation order, so node ids are already a topological
//! order and [`Tape::backward`] is a single reverse sweep. Learnable values
//! live in a [`ParamStore`] and enter a tape as leaves via [`Tape::param`].
//!
//! All arithmetic is `f64`, row-major, single-threaded and deterministic.

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("cross_entropy: label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
}

pub type Result<T> = std::result::Result<T, AdError>;

/// Dense row-major `f64` array.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array{:?}{:?}", self.shape, self.data)
    }
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(AdError::Invalid(format!(
                "array of shape {shape:?} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Self::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    /// Uniform values in `[-bound, bound)` from a seeded stream.
    pub fn uniform(shape: &[usize], bound: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`, four rows of `b` per pass over `c`. The
/// AVX2 build of the same loop produces identical bits.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { mm_avx2(a, b, m, k, n) };
    }
    mm_kernel(a, b, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn mm_avx2(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    mm_kernel(a, b, m, k, n)
}

#[inline(always)]
fn mm_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let k4 = k - k % 4;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for p in (0..k4).step_by(4) {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0 {
                continue;
            }
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        for p in k4..k {
            let av = arow[p];
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transposed(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(a.len());
    for j in 0..cols {
        t.extend((0..rows).map(|i| a[i * cols + j]));
    }
    t
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    mm(a, &transposed(b, n, k), m, k, n)
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    mm(&transposed(a, m, k), b, k, m, n)
}

/// Largest `f64` below 1; retained gates saturate here instead of at 1.
pub const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Reduce {
        src: usize,
        axis: usize,
        mode: ReduceMode,
        argmax: Vec<usize>,
    },
    Sum(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
    GatherRows {
        src: usize,
        index: Vec<usize>,
    },
    GatherMax {
        src: usize,
        /// Source row chosen per output element.
        argrow: Vec<usize>,
    },
    SliceCols {
        src: usize,
        start: usize,
    },
    MaxPool2 {
        src: usize,
        argmax: Vec<usize>,
    },
    ThresholdGate {
        src: usize,
        mask: Vec<bool>,
    },
    SoftmaxRows(usize),
    MaskedAggregate {
        alpha: usize,
        values: usize,
        denom: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Arc<Array>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<HashMap<usize, Vec<f64>>>,
    param_leaves: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
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

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Inserts an input value. Gradients are retained for it when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Array, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Array) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Inserts (once per tape) the current value of a parameter.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_leaves.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::clone(&store.params[id.0].value),
            op: Op::Leaf,
            requires_grad: true,
        });
        let node = nodes.len() - 1;
        self.param_leaves.borrow_mut().insert(id, node);
        Var {
            tape: self,
            id: node,
        }
    }

    fn value(&self, id: usize) -> Arc<Array> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf after one or more [`Tape::backward`]
    /// calls. `None` for leaves that do not require grad; zeros for
    /// participating-but-unreached leaves.
    pub fn grad(&self, var: Var<'_>) -> Option<Array> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let shape = node.value.shape().to_vec();
        let data = self
            .leaf_grads
            .borrow()
            .get(&var.id)
            .cloned()
            .unwrap_or_else(|| vec![0.0; node.value.len()]);
        Some(Array { shape, data })
    }

    /// Hash of every discrete branch taken so far (ReLU signs, max argmaxes,
    /// gate supports). Two evaluations with equal signatures lie on the same
    /// smooth piece of the function.
    pub fn decision_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in self.nodes.borrow().iter() {
            match &node.op {
                Op::Relu(_) => {
                    for &v in node.value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::Reduce { argmax, .. } | Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                Op::GatherMax { argrow, .. } => argrow.hash(&mut h),
                Op::ThresholdGate { mask, .. } => mask.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 || root.value.rank() > 1 {
            return Err(AdError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut send = |target: usize, delta: Vec<f64>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    match self.leaf_grads.borrow_mut().entry(id) {
                        Entry::Occupied(mut acc) => acc.get_mut().iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                        Entry::Vacant(slot) => {
                            slot.insert(g);
                        }
                    }
                }
                &Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                    if nodes[a].requires_grad {
                        send(a, mm_nt(&g, &bv.data, m, n, k));
                    }
                    if nodes[b].requires_grad {
                        send(b, mm_tn(&av.data, &g, m, k, n));
                    }
                }
                &Op::Transpose(a) => {
                    let s = node.value.shape();
                    let (r, c) = (s[0], s[1]);
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] = g[i * c + j];
                        }
                    }
                    send(a, d);
                }
                &Op::Add(a, b) => {
                    send(a, g.clone());
                    send(b, g);
                }
                &Op::Sub(a, b) => {
                    send(b, g.iter().map(|v| -v).collect());
                    send(a, g);
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a].value.data, &nodes[b].value.data);
                    send(a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    send(b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
                &Op::AddRow(a, bias) => {
                    let n = nodes[bias].value.len();
                    if nodes[bias].requires_grad {
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        send(bias, db);
                    }
                    send(a, g);
                }
                &Op::Scale(a, c) => send(a, g.iter().map(|v| v * c).collect()),
                &Op::Relu(a) => {
                    let out = &node.value.data;
                    send(
                        a,
                        g.iter()
                            .zip(out)
                            .map(|(d, &y)| if y > 0.0 { *d } else { 0.0 })
                            .collect(),
                    );
                }
                &Op::Sigmoid(a) => {
                    let out = &node.value.data;
                    send(a, g.iter().zip(out).map(|(d, s)| d * s * (1.0 - s)).collect());
                }
                Op::Reduce {
                    src,
                    axis,
                    mode,
                    argmax,
                } => {
                    let shape = nodes[*src].value.shape();
                    let (outer, ext, inner) = split_axis(shape, *axis);
                    let mut d = vec![0.0; outer * ext * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            let gi = g[o * inner + i];
                            match mode {
                                ReduceMode::Max => {
                                    let j = argmax[o * inner + i];
                                    d[(o * ext + j) * inner + i] += gi;
                                }
                                ReduceMode::Mean => {
                                    let share = gi / ext as f64;
                                    for j in 0..ext {
                                        d[(o * ext + j) * inner + i] += share;
                                    }
                                }
                            }
                        }
                    }
                    send(*src, d);
                }
                &Op::Sum(a) => {
                    let n = nodes[a].value.len();
                    send(a, vec![g[0]; n]);
                }
                Op::Concat { parts, axis } => {
                    let out_shape = node.value.shape();
                    let (outer, _, inner) = split_axis(out_shape, *axis);
                    let out_row = out_shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let chunk = nodes[p].value.shape()[*axis] * inner;
                        if nodes[p].requires_grad {
                            let mut d = Vec::with_capacity(outer * chunk);
                            for o in 0..outer {
                                let start = o * out_row + offset;
                                d.extend_from_slice(&g[start..start + chunk]);
                            }
                            send(p, d);
                        }
                        offset += chunk;
                    }
                }
                &Op::Reshape(a) => send(a, g),
                Op::GatherRows { src, index } => {
                    let sv = &nodes[*src].value;
                    let cols = sv.cols();
                    let mut d = vec![0.0; sv.len()];
                    for (r, &i) in index.iter().enumerate() {
                        let dst = &mut d[i * cols..(i + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(a, b)| *a += b);
                    }
                    send(*src, d);
                }
                Op::GatherMax { src, argrow } => {
                    let sv = &nodes[*src].value;
                    let cols = sv.cols();
                    let mut d = vec![0.0; sv.len()];
                    for (e, (&r, &gv)) in argrow.iter().zip(&g).enumerate() {
                        d[r * cols + e % cols] += gv;
                    }
                    send(*src, d);
                }
                &Op::SliceCols { src, start } => {
                    let sv = &nodes[src].value;
                    let (rows, cols) = (sv.rows(), sv.cols());
                    let w = node.value.cols();
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        d[r * cols + start..r * cols + start + w]
                            .copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    send(src, d);
                }
                Op::MaxPool2 { src, argmax } => {
                    let mut d = vec![0.0; nodes[*src].value.len()];
                    for (o, &j) in argmax.iter().enumerate() {
                        d[j] += g[o];
                    }
                    send(*src, d);
                }
                Op::ThresholdGate { src, mask } => {
                    let out = &node.value.data;
                    send(
                        *src,
                        g.iter()
                            .zip(out)
                            .zip(mask)
                            .map(|((d, s), &keep)| if keep { d * s * (1.0 - s) } else { 0.0 })
                            .collect(),
                    );
                }
                &Op::SoftmaxRows(a) => {
                    let out = &node.value;
                    let cols = out.cols();
                    let mut d = vec![0.0; out.len()];
                    for r in 0..out.rows() {
                        let p = &out.data[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = p.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for c in 0..cols {
                            d[r * cols + c] = p[c] * (gr[c] - dot);
                        }
                    }
                    send(a, d);
                }
                Op::MaskedAggregate {
                    alpha,
                    values,
                    denom,
                } => {
                    let av = &nodes[*alpha].value;
                    let vv = &nodes[*values].value;
                    let out = &node.value;
                    let (nx, ny, dh) = (av.shape[0], av.shape[1], vv.shape[1]);
                    // dS_t = dG_t / d_t ; dd_t = -(dG_t . G_t) / d_t
                    let mut ds = vec![0.0; nx * dh];
                    let mut dden = vec![0.0; nx];
                    for t in 0..nx {
                        let gt = &g[t * dh..(t + 1) * dh];
                        let ot = &out.data[t * dh..(t + 1) * dh];
                        for c in 0..dh {
                            ds[t * dh + c] = gt[c] / denom[t];
                        }
                        dden[t] = -gt.iter().zip(ot).map(|(x, y)| x * y).sum::<f64>() / denom[t];
                    }
                    if nodes[*alpha].requires_grad {
                        let mut da = mm_nt(&ds, &vv.data, nx, dh, ny);
                        for t in 0..nx {
                            for z in 0..ny {
                                da[t * ny + z] += dden[t];
                            }
                        }
                        send(*alpha, da);
                    }
                    if nodes[*values].requires_grad {
                        send(*values, mm_tn(&av.data, &ds, nx, ny, dh));
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = nodes[*logits].value.cols();
                    let b = labels.len() as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / b).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * c + l] -= g[0] / b;
                    }
                    send(*logits, d);
                }
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Array> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn unary(&self, value: Array, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t>, value: Array, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let c = Array {
            shape: vec![m, n],
            data: mm(&a.data, &b.data, m, k, n),
        };
        Ok(self.binary(other, c, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(AdError::Invalid(format!(
                "transpose expects a matrix, got {:?}",
                a.shape
            )));
        }
        let (r, c) = (a.shape[0], a.shape[1]);
        let mut d = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = a.data[i * c + j];
            }
        }
        let out = Array {
            shape: vec![c, r],
            data: d,
        };
        Ok(self.unary(out, Op::Transpose(self.id)))
    }

    fn zip_with(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array> {
        let (a, b) = (self.value(), other.value());
        if a.shape != b.shape {
            return Err(AdError::ShapeMismatch {
                op: name,
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        Ok(Array {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Adds a vector to every row (broadcast over the last axis).
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), bias.value());
        if b.rank() != 1 || a.cols() != b.len() {
            return Err(AdError::ShapeMismatch {
                op: "add_row",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let mut data = a.data.clone();
        for row in data.chunks_mut(b.len()) {
            row.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        let out = Array {
            shape: a.shape.clone(),
            data,
        };
        Ok(self.binary(bias, out, Op::AddRow(self.id, bias.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let a = self.value();
        let out = Array {
            shape: a.shape.clone(),
            data: a.data.iter().map(|v| v * c).collect(),
        };
        self.unary(out, Op::Scale(self.id, c))
    }

    pub fn relu(&self) -> Var<'t> {
        let a = self.value();
        let out = Array {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        };
        self.unary(out, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let a = self.value();
        let out = Array {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&v| sigmoid_scalar(v)).collect(),
        };
        self.unary(out, Op::Sigmoid(self.id))
    }

    /// Removes `axis` by max or mean. Max routes gradient to the first
    /// maximal position only.
    pub fn reduce(&self, axis: usize, mode: ReduceMode) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(AdError::AxisOutOfRange {
                op: "reduce",
                axis,
                rank: a.rank(),
            });
        }
        let (outer, ext, inner) = split_axis(&a.shape, axis);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match mode {
            ReduceMode::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    let best = &mut out[o * inner..(o + 1) * inner];
                    let arg = &mut argmax[o * inner..(o + 1) * inner];
                    best.copy_from_slice(&a.data[o * ext * inner..(o * ext + 1) * inner]);
                    for j in 1..ext {
                        let src = &a.data[(o * ext + j) * inner..(o * ext + j + 1) * inner];
                        for i in 0..inner {
                            if src[i] > best[i] {
                                best[i] = src[i];
                                arg[i] = j;
                            }
                        }
                    }
                }
            }
            ReduceMode::Mean => {
                for o in 0..outer {
                    for j in 0..ext {
                        let src = &a.data[(o * ext + j) * inner..(o * ext + j + 1) * inner];
                        out[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
                out.iter_mut().for_each(|v| *v /= ext as f64);
            }
        }
        let mut shape = a.shape.clone();
        shape.remove(axis);
        let value = Array { shape, data: out };
        Ok(self.unary(
            value,
            Op::Reduce {
                src: self.id,
                axis,
                mode,
                argmax,
            },
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let a = self.value();
        let value = Array::scalar(a.data.iter().sum());
        self.unary(value, Op::Sum(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = (*self.value()).clone().reshaped(shape)?;
        Ok(self.unary(a, Op::Reshape(self.id)))
    }

    /// Selects rows (first-axis slices of a matrix) by index, repeats allowed.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(AdError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            data.extend_from_slice(&a.data[i * cols..(i + 1) * cols]);
        }
        let value = Array {
            shape: vec![index.len(), cols],
            data,
        };
        Ok(self.unary(
            value,
            Op::GatherRows {
                src: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// Groups of `k` consecutive entries of `index` select source rows;
    /// each output row is their elementwise max (first index on ties).
    /// Equivalent to `gather_rows` + reshape + max-reduce without
    /// materializing the gathered rows.
    pub fn gather_max(&self, index: &[usize], k: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        if a.rank() != 2 || k == 0 || !index.len().is_multiple_of(k) || index.is_empty() {
            return Err(AdError::Invalid(format!(
                "gather_max needs a matrix and a non-empty index in groups of {k}, got {} entries",
                index.len()
            )));
        }
        if let Some(&i) = index.iter().find(|&&i| i >= rows) {
            return Err(AdError::IndexOutOfRange {
                op: "gather_max",
                index: i,
                extent: rows,
            });
        }
        let m = index.len() / k;
        let mut data = Vec::with_capacity(m * cols);
        let mut argrow = Vec::with_capacity(m * cols);
        for group in index.chunks(k) {
            let first = group[0];
            let start = data.len();
            data.extend_from_slice(&a.data[first * cols..(first + 1) * cols]);
            argrow.extend(std::iter::repeat_n(first, cols));
            let (best, arg) = (&mut data[start..], &mut argrow[start..]);
            for &r in &group[1..] {
                let src = &a.data[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    if src[c] > best[c] {
                        best[c] = src[c];
                        arg[c] = r;
                    }
                }
            }
        }
        let value = Array {
            shape: vec![m, cols],
            data,
        };
        Ok(self.unary(value, Op::GatherMax { src: self.id, argrow }))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        if a.rank() != 2 || start >= end || end > cols {
            return Err(AdError::Invalid(format!(
                "slice_cols [{start}, {end}) invalid for shape {:?}",
                a.shape
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&a.data[r * cols + start..r * cols + end]);
        }
        let value = Array {
            shape: vec![rows, w],
            data,
        };
        Ok(self.unary(
            value,
            Op::SliceCols {
                src: self.id,
                start,
            },
        ))
    }

    /// 2×2 stride-2 spatial max-pool over `[B, h, w, C]`; windows at odd
    /// borders are truncated (ceil mode). Ties go to the first window cell
    /// in row-major order.
    pub fn max_pool2(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 4 {
            return Err(AdError::Invalid(format!(
                "max_pool2 expects [B, h, w, C], got {:?}",
                a.shape
            )));
        }
        let (b, h, w, c) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; b * oh * ow * c];
        let mut argmax = vec![0; b * oh * ow * c];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let obase = ((bi * oh + oy) * ow + ox) * c;
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0;
                        for y in 2 * oy..(2 * oy + 2).min(h) {
                            for x in 2 * ox..(2 * ox + 2).min(w) {
                                let idx = ((bi * h + y) * w + x) * c + ch;
                                if a.data[idx] > best {
                                    best = a.data[idx];
                                    arg = idx;
                                }
                            }
                        }
                        out[obase + ch] = best;
                        argmax[obase + ch] = arg;
                    }
                }
            }
        }
        let value = Array {
            shape: vec![b, oh, ow, c],
            data: out,
        };
        Ok(self.unary(
            value,
            Op::MaxPool2 {
                src: self.id,
                argmax,
            },
        ))
    }

    /// Thresholded sigmoid: `σ(x)` where `σ(x) > beta`, else exactly 0.
    /// Gradient is the sigmoid derivative on the retained support and zero
    /// elsewhere.
    pub fn threshold_gate(&self, beta: f64) -> Var<'t> {
        let a = self.value();
        let mut mask = Vec::with_capacity(a.len());
        let data = a
            .data
            .iter()
            .map(|&x| {
                let s = sigmoid_scalar(x);
                let keep = s > beta;
                mask.push(keep);
                if keep {
                    s.min(BELOW_ONE)
                } else {
                    0.0
                }
            })
            .collect();
        let value = Array {
            shape: a.shape.clone(),
            data,
        };
        self.unary(value, Op::ThresholdGate { src: self.id, mask })
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let mut data = a.data.clone();
        for row in data.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let value = Array {
            shape: a.shape.clone(),
            data,
        };
        self.unary(value, Op::SoftmaxRows(self.id))
    }

    /// `G_t = Σ_z α_tz V_z / (Σ_z α_tz + eps)`, with `self` as α
    /// (`N_X × N_Y`). Zero weights are skipped so values outside the support
    /// never touch the result.
    pub fn masked_aggregate(&self, values: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (a, v) = (self.value(), values.value());
        if a.rank() != 2 || v.rank() != 2 || a.shape[1] != v.shape[0] {
            return Err(AdError::ShapeMismatch {
                op: "masked_aggregate",
                left: a.shape.clone(),
                right: v.shape.clone(),
            });
        }
        let (nx, ny, dh) = (a.shape[0], a.shape[1], v.shape[1]);
        let mut out = vec![0.0; nx * dh];
        let mut denom = vec![0.0; nx];
        for t in 0..nx {
            let row = &a.data[t * ny..(t + 1) * ny];
            let acc = &mut out[t * dh..(t + 1) * dh];
            let mut total = 0.0;
            for (z, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                total += w;
                acc.iter_mut()
                    .zip(&v.data[z * dh..(z + 1) * dh])
                    .for_each(|(o, x)| *o += w * x);
            }
            let d = total + eps;
            acc.iter_mut().for_each(|o| *o /= d);
            denom[t] = d;
        }
        let value = Array {
            shape: vec![nx, dh],
            data: out,
        };
        Ok(self.binary(
            values,
            value,
            Op::MaskedAggregate {
                alpha: self.id,
                values: values.id,
                denom,
            },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 || a.shape[0] != labels.len() {
            return Err(AdError::ShapeMismatch {
                op: "cross_entropy",
                left: a.shape.clone(),
                right: vec![labels.len()],
            });
        }
        let c = a.shape[1];
        let mut probs = vec![0.0; a.len()];
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(AdError::LabelOutOfRange {
                    label: l,
                    classes: c,
                });
            }
            let row = &a.data[r * c..(r + 1) * c];
            let mut top = 0;
            for j in 1..c {
                if row[j] > row[top] {
                    top = j;
                }
            }
            let m = row[top];
            // log-sum-exp as m + ln(1 + rest) keeps tiny losses exact
            let rest: f64 = (0..c)
                .filter(|&j| j != top)
                .map(|j| (row[j] - m).exp())
                .sum();
            let lse = m + rest.ln_1p();
            loss += (m - row[l]) + rest.ln_1p();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let value = Array::scalar(loss / labels.len() as f64);
        Ok(self.unary(
            value,
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| AdError::Invalid("concat of zero parts".into()))?;
    let tape = first.tape;
    let values: Vec<Arc<Array>> = parts.iter().map(Var::value).collect();
    let rank = values[0].rank();
    if axis >= rank {
        return Err(AdError::AxisOutOfRange {
            op: "concat",
            axis,
            rank,
        });
    }
    let mut shape = values[0].shape.clone();
    shape[axis] = 0;
    for v in &values {
        let compatible = v.rank() == rank
            && (0..rank).all(|d| d == axis || v.shape[d] == values[0].shape[d]);
        if !compatible {
            return Err(AdError::ShapeMismatch {
                op: "concat",
                left: values[0].shape.clone(),
                right: v.shape.clone(),
            });
        }
        shape[axis] += v.shape[axis];
    }
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for v in &values {
            let chunk = v.shape[axis] * inner;
            data.extend_from_slice(&v.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let rg = parts.iter().any(Var::requires_grad);
    Ok(tape.push(
        Array { shape, data },
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        rg,
    ))
}

/// Stacks equal-shape values along a new leading axis.
pub fn stack<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let reshaped = parts
        .iter()
        .map(|p| {
            let mut s = vec![1];
            s.extend(p.shape());
            p.reshape(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&reshaped, 0)
}

/// `x · w + b` for `x: [N, Din]`, `w: [Din, Dout]`, `b: [Dout]`.
pub fn linear<'t>(x: &Var<'t>, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    x.matmul(w)?.add_row(b)
}

/// Weight init bound multiplier: `±sqrt(6 / fan_in)` keeps activation
/// variance roughly constant through ReLU layers.
pub const WEIGHT_GAIN: f64 = 2.449489742783178;

/// Weight and bias ids of one fully connected layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers `{name}.weight` `[fan_in, fan_out]` and `{name}.bias`.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, seed: u64) -> Result<Self> {
        let weight = store.add_uniform(&format!("{name}.weight"), &[fan_in, fan_out], fan_in, WEIGHT_GAIN, seed)?;
        let bias = store.add_uniform(&format!("{name}.bias"), &[fan_out], fan_in, 1.0, seed)?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        linear(x, &w, &b)
    }

    /// `relu(x · w + b)`
    pub fn forward_relu<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward(tape, store, x)?.relu())
    }
}

/// A named learnable value with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Arc<Array>,
    pub grad: Array,
}

/// Name-keyed collection of parameters, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

/// Stable 64-bit FNV-1a of a string.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a named random stream, independent of creation order.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    mix64(seed ^ mix64(name_hash(name)))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(AdError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let grad = Array::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value: Arc::new(value),
            grad,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Adds a parameter initialised uniformly in `±sqrt(1/fan_in)` from a
    /// stream keyed by `(seed, name)`.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        seed: u64,
    ) -> Result<ParamId> {
        let bound = gain * (1.0 / fan_in as f64).sqrt();
        self.add(name, Array::uniform(shape, bound, derive_seed(seed, name)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Array) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(AdError::ShapeMismatch {
                op: "set_value",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds every parameter-leaf gradient accumulated on `tape`.
    pub fn absorb_grads(&mut self, tape: &Tape) {
        let leaves = tape.param_leaves.borrow();
        let grads = tape.leaf_grads.borrow();
        for (&pid, node) in leaves.iter() {
            if let Some(g) = grads.get(node) {
                self.params[pid.0]
                    .grad
                    .data
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max of `|numeric - analytic| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a ±10·step move crosses a non-smooth
    /// boundary (gate threshold, ReLU kink, max switch).
    pub excluded: usize,
}

/// Central-difference check of `build` (which must return a scalar) at
/// `point`, over every coordinate.
pub fn grad_check<F>(build: F, point: &Array, step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if step <= 0.0 {
        return Err(AdError::Invalid("grad_check step must be positive".into()));
    }
    let eval = |p: &Array| -> Result<(f64, u64)> {
        let tape = Tape::new();
        let x = tape.constant(p.clone());
        let loss = build(&tape, x)?;
        Ok((loss.value().item(), tape.decision_signature()))
    };
    let tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let loss = build(&tape, x)?;
    tape.backward(loss)?;
    let analytic = tape.grad(x).expect("leaf requires grad");
    let signature = tape.decision_signature();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for i in 0..point.len() {
        let shifted = |delta: f64| {
            let mut p = point.clone();
            p.data[i] += delta;
            eval(&p)
        };
        let (_, far_hi) = shifted(10.0 * step)?;
        let (_, far_lo) = shifted(-10.0 * step)?;
        let (hi, s_hi) = shifted(step)?;
        let (lo, s_lo) = shifted(-step)?;
        if [far_hi, far_lo, s_hi, s_lo].iter().any(|&s| s != signature) {
            report.excluded += 1;
            continue;
        }
        let numeric = (hi - lo) / (2.0 * step);
        let a = analytic.data[i];
        let err = (numeric - a).abs() / a.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

/// Central-difference check of a loss over selected parameter coordinates.
pub fn grad_check_params<F>(
    store: &ParamStore,
    build: F,
    coords: &[(ParamId, usize)],
    step: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let mut work = store.clone();
    work.zero_grads();
    let tape = Tape::new();
    let loss = build(&tape, &work)?;
    tape.backward(loss)?;
    let signature = tape.decision_signature();
    work.absorb_grads(&tape);
    drop(tape);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(pid, i)| work.get(pid).grad.data[i])
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for (&(pid, i), &a) in coords.iter().zip(&analytic) {
        let original = work.get(pid).value.data[i];
        let mut shifted = |delta: f64| -> Result<(f64, u64)> {
            work.value_mut(pid).data[i] = original + delta;
            let tape = Tape::new();
            let loss = build(&tape, &work)?;
            Ok((loss.value().item(), tape.decision_signature()))
        };
        let (_, far_hi) = shifted(10.0 * step)?;
        let (_, far_lo) = shifted(-10.0 * step)?;
        let (hi, s_hi) = shifted(step)?;
        let (lo, s_lo) = shifted(-step)?;
        work.value_mut(pid).data[i] = original;
        if [far_hi, far_lo, s_hi, s_lo].iter().any(|&s| s != signature) {
            report.excluded += 1;
            continue;
        }
        let numeric = (hi - lo) / (2.0 * step);
        let err = (numeric - a).abs() / a.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    params: Vec<CheckpointEntry>,
}

const CHECKPOINT_FORMAT: &str = "pvfusion-checkpoint-v1";

impl ParamStore {
    /// Serializes all values as JSON: `{"format": .., "params": [{name, shape, data}]}`.
    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            params: self
                .params
                .iter()
                .map(|p| CheckpointEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&ck).expect("checkpoint serialization")
    }

    /// Overwrites values from a checkpoint. Fails on any missing, extra or
    /// mis-shaped name.
    pub fn load_json(&mut self, text: &str) -> Result<()> {
        let ck: Checkpoint = serde_json::from_str(text)
            .map_err(|e| AdError::Invalid(format!("checkpoint parse error: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(AdError::Invalid(format!(
                "unknown checkpoint format `{}`",
                ck.format
            )));
        }
        let mut seen = vec![false; self.params.len()];
        let mut extra = Vec::new();
        let mut staged = Vec::new();
        for entry in ck.params {
            match self.index.get(&entry.name) {
                Some(&id) => {
                    let value = Array::new(entry.shape, entry.data)?;
                    if value.shape() != self.params[id.0].value.shape() {
                        return Err(AdError::ShapeMismatch {
                            op: "load_json",
                            left: self.params[id.0].value.shape().to_vec(),
                            right: value.shape().to_vec(),
                        });
                    }
                    seen[id.0] = true;
                    staged.push((id, value));
                }
                None => extra.push(entry.name),
            }
        }
        let missing: Vec<&str> = self
            .params
            .iter()
            .zip(&seen)
            .filter(|(_, &s)| !s)
            .map(|(p, _)| p.name.as_str())
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(AdError::Invalid(format!(
                "checkpoint mismatch: missing {missing:?}, extra {extra:?}"
            )));
        }
        for (id, value) in staged {
            self.params[id.0].value = Arc::new(value);
        }
        Ok(())
    }
}
