//! Dense tensors with tape-based reverse-mode autodiff.
//!
//! A [`Tape`] owns every tensor created during a forward pass and records one
//! op node per tensor, in creation order. Creation order is topological by
//! construction, so [`Tape::backward`] is a single reverse sweep that visits
//! each node exactly once. Ops execute eagerly and reject non-finite outputs:
//! a NaN/Inf is an error, never a value that propagates.
//!
//! Training runs in f32; gradient-check tests instantiate the same code with
//! f64 (see [`crate::tensor::gradcheck`]).

pub mod adamw;
pub mod gradcheck;

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::scalar::{fl, Scalar};

pub type TensorId = usize;

/// Dense row-major tensor. `node_id` is set while the tensor lives on a tape.
#[derive(Debug, Clone)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub grad: Option<Vec<F>>,
    pub requires_grad: bool,
    pub node_id: Option<TensorId>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
            node_id: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); numel],
            grad: None,
            requires_grad: false,
            node_id: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
            node_id: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
            node_id: None,
        }
    }

    /// Normal init with the given std, for parameter tensors.
    pub fn randn(rng: &mut Prng, shape: Vec<usize>, std: f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = crate::rng::normal_vec(rng, numel, std);
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
            node_id: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> F {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element type (used by f64-mode tests to lift f32 fixtures).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
            grad: None,
            requires_grad: false,
            node_id: None,
        }
    }
}

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Add { a: TensorId, b: TensorId },
    AddBias { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: F },
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    SliceRows { a: TensorId, start: usize },
    SliceCols { a: TensorId, start: usize },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    Softmax { a: TensorId, axis: usize },
    LogSoftmax { a: TensorId, axis: usize },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<F>, invstd: Vec<F> },
    Gelu { a: TensorId },
    Sum { a: TensorId },
    Mean { a: TensorId },
    MeanRows { a: TensorId },
    Normalize { a: TensorId, norms: Vec<F> },
    GatherRows { table: TensorId, indices: Vec<usize> },
    TileRows { a: TensorId },
    Reshape { a: TensorId },
    Patchify { a: TensorId, patch: usize },
    Unpatchify { a: TensorId, height: usize, width: usize, channels: usize, patch: usize },
}

/// The computation record: tensors and their producing ops, in creation order.
pub struct Tape<F: Scalar> {
    tensors: Vec<Tensor<F>>,
    ops: Vec<Op<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

// ── raw matmul kernels ──────────────────────────────────────────────────────

/// out[m,n] += a[m,k] · b[k,n]
fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// out[m,k] += a[m,n] · b[k,n]ᵀ  (row-by-row dot products)
fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let dot: F = arow.iter().zip(brow.iter()).map(|(&x, &y)| x * y).sum();
            out[i * k + j] = out[i * k + j] + dot;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
fn matmul_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// Lane iteration for axis ops: calls `f(lane_base, stride)` for every lane
/// along `axis` of `shape`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * lane * inner + i, inner);
        }
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { tensors: Vec::new(), ops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    // ── tensor access ──

    pub fn value(&self, id: TensorId) -> &Tensor<F> {
        &self.tensors[id]
    }

    pub fn data(&self, id: TensorId) -> &[F] {
        &self.tensors[id].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id].shape
    }

    pub fn scalar_value(&self, id: TensorId) -> F {
        self.tensors[id].scalar_value()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.tensors[id].grad.as_deref()
    }

    /// Host copy of a tape tensor (detached).
    pub fn detach(&self, id: TensorId) -> Tensor<F> {
        let t = &self.tensors[id];
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            grad: None,
            requires_grad: false,
            node_id: None,
        }
    }

    // ── leaves ──

    pub fn leaf(&mut self, mut t: Tensor<F>, requires_grad: bool) -> Result<TensorId> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let id = self.tensors.len();
        t.requires_grad = requires_grad;
        t.node_id = Some(id);
        t.grad = None;
        self.tensors.push(t);
        self.ops.push(Op::Leaf);
        Ok(id)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Result<TensorId> {
        self.leaf(t, false)
    }

    pub fn param(&mut self, t: &Tensor<F>, trainable: bool) -> Result<TensorId> {
        self.leaf(t.clone(), trainable)
    }

    pub fn constant_scalar(&mut self, v: F) -> Result<TensorId> {
        self.leaf(Tensor::scalar(v), false)
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, data: Vec<F>, node: Op<F>, requires_grad: bool) -> Result<TensorId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let id = self.tensors.len();
        self.tensors.push(Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
            node_id: Some(id),
        });
        self.ops.push(node);
        Ok(id)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.tensors[i].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.tensors[a].shape != self.tensors[b].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.tensors[a].shape.clone(),
                rhs: self.tensors[b].shape.clone(),
            });
        }
        Ok(())
    }

    // ── elementwise / broadcast ──

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data = self.tensors[a]
            .data
            .iter()
            .zip(&self.tensors[b].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.tensors[a].shape.clone();
        let rg = self.needs(&[a, b]);
        self.push("add", shape, data, Op::Add { a, b }, rg)
    }

    /// `a [.., C] + b [C]`, broadcast over leading axes.
    pub fn add_bias(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let c = *self.tensors[a].shape.last().expect("rank >= 1");
        if self.tensors[b].shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.tensors[a].shape.clone(),
                rhs: self.tensors[b].shape.clone(),
            });
        }
        let bias = &self.tensors[b].data;
        let data = self.tensors[a]
            .data
            .chunks(c)
            .flat_map(|row| row.iter().zip(bias.iter()).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.tensors[a].shape.clone();
        let rg = self.needs(&[a, b]);
        self.push("add_bias", shape, data, Op::AddBias { a, b }, rg)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data = self.tensors[a]
            .data
            .iter()
            .zip(&self.tensors[b].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.tensors[a].shape.clone();
        let rg = self.needs(&[a, b]);
        self.push("sub", shape, data, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data = self.tensors[a]
            .data
            .iter()
            .zip(&self.tensors[b].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.tensors[a].shape.clone();
        let rg = self.needs(&[a, b]);
        self.push("mul", shape, data, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> Result<TensorId> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let data = self.tensors[a].data.iter().map(|&x| x * c).collect();
        let shape = self.tensors[a].shape.clone();
        let rg = self.needs(&[a]);
        self.push("scale", shape, data, Op::Scale { a, c }, rg)
    }

    // ── linear algebra ──

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.tensors[a].shape, &self.tensors[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![F::zero(); m * n];
        matmul_nn(&self.tensors[a].data, &self.tensors[b].data, m, k, n, &mut data);
        let rg = self.needs(&[a, b]);
        self.push("matmul", vec![m, n], data, Op::Matmul { a, b }, rg)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = &self.tensors[a].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "transpose", lhs: s.clone(), rhs: vec![] });
        }
        let (m, n) = (s[0], s[1]);
        let src = &self.tensors[a].data;
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.needs(&[a]);
        self.push("transpose", vec![n, m], data, Op::Transpose { a }, rg)
    }

    // ── slicing / concatenation (2-D) ──

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = &self.tensors[a].shape;
        if s.len() != 2 || start + len > s[0] || len == 0 {
            return Err(Error::contract(format!(
                "slice_rows [{start}, {start}+{len}) out of range for shape {s:?}"
            )));
        }
        let cols = s[1];
        let data = self.tensors[a].data[start * cols..(start + len) * cols].to_vec();
        let rg = self.needs(&[a]);
        self.push("slice_rows", vec![len, cols], data, Op::SliceRows { a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = &self.tensors[a].shape;
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::contract(format!(
                "slice_cols [{start}, {start}+{len}) out of range for shape {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = &self.tensors[a].data;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.needs(&[a]);
        self.push("slice_cols", vec![rows, len], data, Op::SliceCols { a, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of zero parts"));
        }
        let cols = self.tensors[parts[0]].shape[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = &self.tensors[p].shape;
            if s.len() != 2 || s[1] != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.tensors[parts[0]].shape.clone(),
                    rhs: s.clone(),
                });
            }
            rows += s[0];
            data.extend_from_slice(&self.tensors[p].data);
        }
        let rg = self.needs(parts);
        self.push("concat_rows", vec![rows, cols], data, Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero parts"));
        }
        let rows = self.tensors[parts[0]].shape[0];
        let mut cols = 0;
        for &p in parts {
            let s = &self.tensors[p].shape;
            if s.len() != 2 || s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.tensors[parts[0]].shape.clone(),
                    rhs: s.clone(),
                });
            }
            cols += s[1];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pc = self.tensors[p].shape[1];
                data.extend_from_slice(&self.tensors[p].data[r * pc..(r + 1) * pc]);
            }
        }
        let rg = self.needs(parts);
        self.push("concat_cols", vec![rows, cols], data, Op::ConcatCols { parts: parts.to_vec() }, rg)
    }

    // ── activations / normalization ──

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.tensors[a].shape.clone();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        let src = &self.tensors[a].data;
        let mut data = src.clone();
        for_each_lane(&shape, axis, |base, stride| {
            let lane = shape[axis];
            let mut mx = F::neg_infinity();
            for k in 0..lane {
                mx = mx.max(src[base + k * stride]);
            }
            let mut denom = F::zero();
            for k in 0..lane {
                let e = (src[base + k * stride] - mx).exp();
                data[base + k * stride] = e;
                denom = denom + e;
            }
            for k in 0..lane {
                data[base + k * stride] = data[base + k * stride] / denom;
            }
        });
        let rg = self.needs(&[a]);
        self.push("softmax", shape, data, Op::Softmax { a, axis }, rg)
    }

    pub fn log_softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.tensors[a].shape.clone();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "log_softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        let src = &self.tensors[a].data;
        let mut data = src.clone();
        for_each_lane(&shape, axis, |base, stride| {
            let lane = shape[axis];
            let mut mx = F::neg_infinity();
            for k in 0..lane {
                mx = mx.max(src[base + k * stride]);
            }
            let mut denom = F::zero();
            for k in 0..lane {
                denom = denom + (src[base + k * stride] - mx).exp();
            }
            let lse = mx + denom.ln();
            for k in 0..lane {
                data[base + k * stride] = src[base + k * stride] - lse;
            }
        });
        let rg = self.needs(&[a]);
        self.push("log_softmax", shape, data, Op::LogSoftmax { a, axis }, rg)
    }

    /// Normalize the last axis to zero mean / unit variance, then affine.
    /// `eps` guards zero-variance rows.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: F) -> Result<TensorId> {
        let shape = self.tensors[x].shape.clone();
        let c = *shape.last().expect("rank >= 1");
        if self.tensors[gamma].shape != [c] || self.tensors[beta].shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.tensors[gamma].shape.clone(),
            });
        }
        let rows = self.tensors[x].numel() / c;
        let mut data = vec![F::zero(); rows * c];
        let mut means = vec![F::zero(); rows];
        let mut invstds = vec![F::zero(); rows];
        let inv_c = F::one() / fl::<F>(c as f64);
        {
            let src = &self.tensors[x].data;
            let g = &self.tensors[gamma].data;
            let b = &self.tensors[beta].data;
            for r in 0..rows {
                let row = &src[r * c..(r + 1) * c];
                let mean: F = row.iter().copied().sum::<F>() * inv_c;
                let var: F = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_c;
                let invstd = F::one() / (var + eps).sqrt();
                means[r] = mean;
                invstds[r] = invstd;
                for j in 0..c {
                    data[r * c + j] = (row[j] - mean) * invstd * g[j] + b[j];
                }
            }
        }
        let shape = self.tensors[x].shape.clone();
        let rg = self.needs(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            shape,
            data,
            Op::LayerNorm { x, gamma, beta, mean: means, invstd: invstds },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.tensors[a].data.iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.tensors[a].shape.clone();
        let rg = self.needs(&[a]);
        self.push("gelu", shape, data, Op::Gelu { a }, rg)
    }

    /// L2-normalize each row (last axis).
    pub fn normalize_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.tensors[a].shape.clone();
        let c = *shape.last().expect("rank >= 1");
        let rows = self.tensors[a].numel() / c;
        let src = &self.tensors[a].data;
        let floor = fl::<F>(1e-12);
        let mut data = vec![F::zero(); rows * c];
        let mut norms = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(floor);
            norms[r] = norm;
            for j in 0..c {
                data[r * c + j] = row[j] / norm;
            }
        }
        let rg = self.needs(&[a]);
        self.push("normalize", shape, data, Op::Normalize { a, norms }, rg)
    }

    // ── reductions ──

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let total: F = self.tensors[a].data.iter().copied().sum();
        let rg = self.needs(&[a]);
        self.push("sum", vec![1], vec![total], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.tensors[a].numel();
        let total: F = self.tensors[a].data.iter().copied().sum();
        let rg = self.needs(&[a]);
        self.push("mean", vec![1], vec![total / fl::<F>(n as f64)], Op::Mean { a }, rg)
    }

    /// Column means of a 2-D tensor: [R, C] -> [C].
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let s = &self.tensors[a].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "mean_rows", lhs: s.clone(), rhs: vec![] });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = &self.tensors[a].data;
        let inv = F::one() / fl::<F>(rows as f64);
        let mut data = vec![F::zero(); cols];
        for r in 0..rows {
            for j in 0..cols {
                data[j] = data[j] + src[r * cols + j];
            }
        }
        for v in data.iter_mut() {
            *v = *v * inv;
        }
        let rg = self.needs(&[a]);
        self.push("mean_rows", vec![cols], data, Op::MeanRows { a }, rg)
    }

    // ── indexing / layout ──

    /// Embedding lookup: rows of `table` selected by `indices`.
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let s = &self.tensors[table].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "gather_rows", lhs: s.clone(), rhs: vec![] });
        }
        let (v, d) = (s[0], s[1]);
        if indices.is_empty() {
            return Err(Error::contract("gather_rows with empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("gather_rows index {bad} >= table rows {v}")));
        }
        let src = &self.tensors[table].data;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.needs(&[table]);
        self.push(
            "gather_rows",
            vec![indices.len(), d],
            data,
            Op::GatherRows { table, indices: indices.to_vec() },
            rg,
        )
    }

    /// Broadcast a vector (shape [C] or [1, C]) to `rows` identical rows.
    pub fn tile_rows(&mut self, a: TensorId, rows: usize) -> Result<TensorId> {
        let s = &self.tensors[a].shape;
        let c = match s.len() {
            1 => s[0],
            2 if s[0] == 1 => s[1],
            _ => {
                return Err(Error::ShapeMismatch { op: "tile_rows", lhs: s.clone(), rhs: vec![rows] });
            }
        };
        let src = &self.tensors[a].data;
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        let rg = self.needs(&[a]);
        self.push("tile_rows", vec![rows, c], data, Op::TileRows { a }, rg)
    }

    pub fn reshape(&mut self, a: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.tensors[a].numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.tensors[a].shape.clone(),
                rhs: new_shape,
            });
        }
        let data = self.tensors[a].data.clone();
        let rg = self.needs(&[a]);
        self.push("reshape", new_shape, data, Op::Reshape { a }, rg)
    }

    /// [H, W, C] -> [P, p·p·C] with P = (H/p)·(W/p); patches in row-major
    /// block order, pixels row-major within a patch.
    pub fn patchify(&mut self, a: TensorId, patch: usize) -> Result<TensorId> {
        let s = self.tensors[a].shape.clone();
        if s.len() != 3 || s[0] % patch != 0 || s[1] % patch != 0 {
            return Err(Error::ShapeMismatch { op: "patchify", lhs: s, rhs: vec![patch, patch] });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (gh, gw) = (h / patch, w / patch);
        let src = &self.tensors[a].data;
        let mut data = vec![F::zero(); h * w * c];
        let cols = patch * patch * c;
        for by in 0..gh {
            for bx in 0..gw {
                let pi = by * gw + bx;
                for dy in 0..patch {
                    for dx in 0..patch {
                        let src_off = ((by * patch + dy) * w + bx * patch + dx) * c;
                        let dst_off = pi * cols + (dy * patch + dx) * c;
                        data[dst_off..dst_off + c].copy_from_slice(&src[src_off..src_off + c]);
                    }
                }
            }
        }
        let rg = self.needs(&[a]);
        self.push("patchify", vec![gh * gw, cols], data, Op::Patchify { a, patch }, rg)
    }

    /// Inverse of [`Tape::patchify`].
    pub fn unpatchify(&mut self, a: TensorId, height: usize, width: usize, channels: usize, patch: usize) -> Result<TensorId> {
        let s = self.tensors[a].shape.clone();
        let (gh, gw) = (height / patch, width / patch);
        let cols = patch * patch * channels;
        if s.len() != 2 || s[0] != gh * gw || s[1] != cols || height % patch != 0 || width % patch != 0 {
            return Err(Error::ShapeMismatch { op: "unpatchify", lhs: s, rhs: vec![gh * gw, cols] });
        }
        let src = &self.tensors[a].data;
        let mut data = vec![F::zero(); height * width * channels];
        for by in 0..gh {
            for bx in 0..gw {
                let pi = by * gw + bx;
                for dy in 0..patch {
                    for dx in 0..patch {
                        let dst_off = ((by * patch + dy) * width + bx * patch + dx) * channels;
                        let src_off = pi * cols + (dy * patch + dx) * channels;
                        data[dst_off..dst_off + channels].copy_from_slice(&src[src_off..src_off + channels]);
                    }
                }
            }
        }
        let rg = self.needs(&[a]);
        self.push(
            "unpatchify",
            vec![height, width, channels],
            data,
            Op::Unpatchify { a, height, width, channels, patch },
            rg,
        )
    }

    // ── composed helpers ──

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mse", a, b)?;
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    // ── backward ──

    /// Reverse sweep from a scalar loss. Populates `grad` on every tensor that
    /// requires grad; requires-grad leaves not reachable from the loss get an
    /// explicit zero gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.tensors[loss].is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.tensors[loss].shape
            )));
        }
        let n = self.tensors.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[loss] = Some(vec![F::one()]);

        for id in (0..=loss).rev() {
            if !self.tensors[id].requires_grad {
                continue;
            }
            let out_grad = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &out_grad, &mut grads)?;
            grads[id] = Some(out_grad);
        }

        for id in 0..n {
            if self.tensors[id].requires_grad {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![F::zero(); self.tensors[id].numel()]);
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                self.tensors[id].grad = Some(g);
            }
        }
        Ok(())
    }

    fn add_grad(grads: &mut [Option<Vec<F>>], tensors: &[Tensor<F>], id: TensorId, update: impl Fn(&mut [F])) {
        if !tensors[id].requires_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![F::zero(); tensors[id].numel()]);
        update(slot);
    }

    fn accumulate(&self, id: TensorId, g: &[F], grads: &mut Vec<Option<Vec<F>>>) -> Result<()> {
        let tensors = &self.tensors;
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Add { a, b } => {
                Self::add_grad(grads, tensors, *a, |s| {
                    for (sv, &gv) in s.iter_mut().zip(g) {
                        *sv = *sv + gv;
                    }
                });
                Self::add_grad(grads, tensors, *b, |s| {
                    for (sv, &gv) in s.iter_mut().zip(g) {
                        *sv = *sv + gv;
                    }
                });
            }
            Op::AddBias { a, b } => {
                Self::add_grad(grads, tensors, *a, |s| {
                    for (sv, &gv) in s.iter_mut().zip(g) {
                        *sv = *sv + gv;
                    }
                });
                let c = tensors[*b].numel();
                Self::add_grad(grads, tensors, *b, |s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % c] = s[i % c] + gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                Self::add_grad(grads, tensors, *a, |s| {
                    for (sv, &gv) in s.iter_mut().zip(g) {
                        *sv = *sv + gv;
                    }
                });
                Self::add_grad(grads, tensors, *b, |s| {
                    for (sv, &gv) in s.iter_mut().zip(g) {
                        *sv = *sv - gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (da, db) = (&tensors[*a].data, &tensors[*b].data);
                Self::add_grad(grads, tensors, *a, |s| {
                    for ((sv, &gv), &bv) in s.iter_mut().zip(g).zip(db) {
                        *sv = *sv + gv * bv;
                    }
                });
                Self::add_grad(grads, tensors, *b, |s| {
                    for ((sv, &gv), &av) in s.iter_mut().zip(g).zip(da) {
                        *sv = *sv + gv * av;
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                Self::add_grad(grads, tensors, *a, |s| {
                    for (sv, &gv) in s.iter_mut().zip(g) {
                        *sv = *sv + gv * c;
                    }
                });
            }
            Op::Matmul { a, b } => {
                let sa = &tensors[*a].shape;
                let sb = &tensors[*b].shape;
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (&tensors[*a].data, &tensors[*b].data);
                Self::add_grad(grads, tensors, *a, |s| matmul_nt(g, db, m, n, k, s));
                Self::add_grad(grads, tensors, *b, |s| matmul_tn(da, g, m, k, n, s));
            }
            Op::Transpose { a } => {
                let s = &tensors[*a].shape;
                let (m, n) = (s[0], s[1]);
                Self::add_grad(grads, tensors, *a, |slot| {
                    for i in 0..m {
                        for j in 0..n {
                            slot[i * n + j] = slot[i * n + j] + g[j * m + i];
                        }
                    }
                });
            }
            Op::SliceRows { a, start } => {
                let cols = tensors[*a].shape[1];
                let rows = tensors[id].shape[0];
                Self::add_grad(grads, tensors, *a, |slot| {
                    for (i, &gv) in g.iter().enumerate() {
                        let idx = (start * cols) + i;
                        let _ = rows;
                        slot[idx] = slot[idx] + gv;
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let cols = tensors[*a].shape[1];
                let out_cols = tensors[id].shape[1];
                let rows = tensors[id].shape[0];
                Self::add_grad(grads, tensors, *a, |slot| {
                    for r in 0..rows {
                        for j in 0..out_cols {
                            let idx = r * cols + start + j;
                            slot[idx] = slot[idx] + g[r * out_cols + j];
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = tensors[p].numel();
                    let seg = &g[offset..offset + len];
                    Self::add_grad(grads, tensors, p, |slot| {
                        for (sv, &gv) in slot.iter_mut().zip(seg) {
                            *sv = *sv + gv;
                        }
                    });
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = tensors[id].shape[0];
                let total_cols = tensors[id].shape[1];
                let mut col_off = 0;
                for &p in parts {
                    let pc = tensors[p].shape[1];
                    let off = col_off;
                    Self::add_grad(grads, tensors, p, |slot| {
                        for r in 0..rows {
                            for j in 0..pc {
                                slot[r * pc + j] = slot[r * pc + j] + g[r * total_cols + off + j];
                            }
                        }
                    });
                    col_off += pc;
                }
            }
            Op::Softmax { a, axis } => {
                let y = &tensors[id].data;
                let shape = tensors[id].shape.clone();
                let axis = *axis;
                Self::add_grad(grads, tensors, *a, |slot| {
                    for_each_lane(&shape, axis, |base, stride| {
                        let lane = shape[axis];
                        let mut dot = F::zero();
                        for k in 0..lane {
                            let i = base + k * stride;
                            dot = dot + g[i] * y[i];
                        }
                        for k in 0..lane {
                            let i = base + k * stride;
                            slot[i] = slot[i] + y[i] * (g[i] - dot);
                        }
                    });
                });
            }
            Op::LogSoftmax { a, axis } => {
                let y = &tensors[id].data;
                let shape = tensors[id].shape.clone();
                let axis = *axis;
                Self::add_grad(grads, tensors, *a, |slot| {
                    for_each_lane(&shape, axis, |base, stride| {
                        let lane = shape[axis];
                        let mut gsum = F::zero();
                        for k in 0..lane {
                            gsum = gsum + g[base + k * stride];
                        }
                        for k in 0..lane {
                            let i = base + k * stride;
                            slot[i] = slot[i] + g[i] - y[i].exp() * gsum;
                        }
                    });
                });
            }
            Op::LayerNorm { x, gamma, beta, mean, invstd } => {
                let c = tensors[*gamma].numel();
                let rows = tensors[*x].numel() / c;
                let xd = &tensors[*x].data;
                let gd = &tensors[*gamma].data;
                let inv_c = F::one() / fl::<F>(c as f64);
                Self::add_grad(grads, tensors, *beta, |slot| {
                    for r in 0..rows {
                        for j in 0..c {
                            slot[j] = slot[j] + g[r * c + j];
                        }
                    }
                });
                Self::add_grad(grads, tensors, *gamma, |slot| {
                    for r in 0..rows {
                        for j in 0..c {
                            let xhat = (xd[r * c + j] - mean[r]) * invstd[r];
                            slot[j] = slot[j] + g[r * c + j] * xhat;
                        }
                    }
                });
                Self::add_grad(grads, tensors, *x, |slot| {
                    for r in 0..rows {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..c {
                            let gg = g[r * c + j] * gd[j];
                            let xhat = (xd[r * c + j] - mean[r]) * invstd[r];
                            m1 = m1 + gg;
                            m2 = m2 + gg * xhat;
                        }
                        m1 = m1 * inv_c;
                        m2 = m2 * inv_c;
                        for j in 0..c {
                            let gg = g[r * c + j] * gd[j];
                            let xhat = (xd[r * c + j] - mean[r]) * invstd[r];
                            slot[r * c + j] = slot[r * c + j] + invstd[r] * (gg - m1 - xhat * m2);
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let xd = &tensors[*a].data;
                Self::add_grad(grads, tensors, *a, |slot| {
                    for (i, &gv) in g.iter().enumerate() {
                        slot[i] = slot[i] + gv * gelu_grad(xd[i]);
                    }
                });
            }
            Op::Sum { a } => {
                let gv = g[0];
                Self::add_grad(grads, tensors, *a, |slot| {
                    for sv in slot.iter_mut() {
                        *sv = *sv + gv;
                    }
                });
            }
            Op::Mean { a } => {
                let n = tensors[*a].numel();
                let gv = g[0] / fl::<F>(n as f64);
                Self::add_grad(grads, tensors, *a, |slot| {
                    for sv in slot.iter_mut() {
                        *sv = *sv + gv;
                    }
                });
            }
            Op::MeanRows { a } => {
                let s = &tensors[*a].shape;
                let (rows, cols) = (s[0], s[1]);
                let inv = F::one() / fl::<F>(rows as f64);
                Self::add_grad(grads, tensors, *a, |slot| {
                    for r in 0..rows {
                        for j in 0..cols {
                            slot[r * cols + j] = slot[r * cols + j] + g[j] * inv;
                        }
                    }
                });
            }
            Op::Normalize { a, norms } => {
                let y = &tensors[id].data;
                let c = *tensors[id].shape.last().unwrap();
                let rows = tensors[id].numel() / c;
                Self::add_grad(grads, tensors, *a, |slot| {
                    for r in 0..rows {
                        let mut dot = F::zero();
                        for j in 0..c {
                            dot = dot + g[r * c + j] * y[r * c + j];
                        }
                        for j in 0..c {
                            let i = r * c + j;
                            slot[i] = slot[i] + (g[i] - y[i] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::GatherRows { table, indices } => {
                let d = tensors[*table].shape[1];
                Self::add_grad(grads, tensors, *table, |slot| {
                    for (row, &src_row) in indices.iter().enumerate() {
                        for j in 0..d {
                            slot[src_row * d + j] = slot[src_row * d + j] + g[row * d + j];
                        }
                    }
                });
            }
            Op::TileRows { a } => {
                let c = tensors[*a].numel();
                let rows = tensors[id].shape[0];
                Self::add_grad(grads, tensors, *a, |slot| {
                    for r in 0..rows {
                        for j in 0..c {
                            slot[j] = slot[j] + g[r * c + j];
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                Self::add_grad(grads, tensors, *a, |slot| {
                    for (sv, &gv) in slot.iter_mut().zip(g) {
                        *sv = *sv + gv;
                    }
                });
            }
            Op::Patchify { a, patch } => {
                let s = &tensors[*a].shape;
                let (h, w, c) = (s[0], s[1], s[2]);
                let (p, gw) = (*patch, s[1] / *patch);
                let cols = p * p * c;
                Self::add_grad(grads, tensors, *a, |slot| {
                    for by in 0..h / p {
                        for bx in 0..gw {
                            let pi = by * gw + bx;
                            for dy in 0..p {
                                for dx in 0..p {
                                    let img_off = ((by * p + dy) * w + bx * p + dx) * c;
                                    let patch_off = pi * cols + (dy * p + dx) * c;
                                    for ch in 0..c {
                                        slot[img_off + ch] = slot[img_off + ch] + g[patch_off + ch];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Unpatchify { a, height, width, channels, patch } => {
                let (h, w, c, p) = (*height, *width, *channels, *patch);
                let gw = w / p;
                let cols = p * p * c;
                Self::add_grad(grads, tensors, *a, |slot| {
                    for by in 0..h / p {
                        for bx in 0..gw {
                            let pi = by * gw + bx;
                            for dy in 0..p {
                                for dx in 0..p {
                                    let img_off = ((by * p + dy) * w + bx * p + dx) * c;
                                    let patch_off = pi * cols + (dy * p + dx) * c;
                                    for ch in 0..c {
                                        slot[patch_off + ch] = slot[patch_off + ch] + g[img_off + ch];
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let c = fl::<F>(GELU_C);
    let a = fl::<F>(GELU_A);
    let half = fl::<F>(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = fl::<F>(GELU_C);
    let a = fl::<F>(GELU_A);
    let half = fl::<F>(0.5);
    let three = fl::<F>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

#[cfg(test)]
mod tests;
