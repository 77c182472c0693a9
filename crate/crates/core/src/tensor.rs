//! Dense N-dimensional tensors of `f64` and the probability-tensor arithmetic
//! built on top of them.
//!
//! Storage is row-major: the last axis varies fastest. Axes are numbered from
//! zero. A tensor with an empty shape is a scalar holding a single value.
//!
//! Everything here is a pure function of its inputs.

use std::ops::{Deref, Range};

use crate::error::{config, Error, Result};

/// Absolute tolerance on total mass when validating probability tensors.
pub const MASS_TOL: f64 = 1e-9;

/// Values at or below this threshold count as zero in support tests.
pub const ZERO_THRESHOLD: f64 = 1e-300;

/// An N-D array of finite reals in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    /// Builds a tensor, checking extents, data length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if let Some(axis) = shape.iter().position(|&a| a == 0) {
            return config(format!("extent of axis {axis} is zero"));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return config(format!(
                "data length {} does not match shape {:?} (expected {expected})",
                data.len(),
                shape
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {pos} is {}", data[pos])));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for results of operations on valid tensors.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite entry");
        Self { shape, data }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape, vec![value; len])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    /// A 1-D tensor.
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    /// A 2-D tensor from equal-length rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return config("matrix rows have unequal lengths");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in row-major order.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..len {
            data.push(f(&idx));
            increment(&mut idx, &shape);
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &a)| {
                assert!(i < a, "index {i} out of bounds for extent {a}");
                acc * a + i
            })
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> Result<f64> {
        same_shape(self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &DenseTensor) -> Result<f64> {
        same_shape(self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<DenseTensor> {
        DenseTensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<DenseTensor> {
        DenseTensor::new(shape, self.data)
    }

    /// Returns the row-major transpose of a matrix.
    pub fn transpose(&self) -> Result<DenseTensor> {
        let [rows, cols] = self.shape[..] else {
            return config(format!("transpose needs a matrix, got shape {:?}", self.shape));
        };
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = self.data[i * cols + j];
            }
        }
        Ok(DenseTensor::from_parts(vec![cols, rows], out))
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for n in (0..shape.len().saturating_sub(1)).rev() {
        s[n] = s[n + 1] * shape[n + 1];
    }
    s
}

/// Advances a row-major multi-index (odometer style). Wraps to zero after the last index.
pub(crate) fn increment(idx: &mut [usize], shape: &[usize]) {
    for n in (0..idx.len()).rev() {
        idx[n] += 1;
        if idx[n] < shape[n] {
            return;
        }
        idx[n] = 0;
    }
}

fn same_shape(a: &DenseTensor, b: &DenseTensor) -> Result<()> {
    if a.shape != b.shape {
        return config(format!("shape mismatch: {:?} vs {:?}", a.shape, b.shape));
    }
    Ok(())
}

/// A nonnegative tensor with unit mass.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityTensor(DenseTensor);

impl ProbabilityTensor {
    pub fn new(tensor: DenseTensor) -> Result<Self> {
        if let Some(pos) = tensor.data.iter().position(|&v| v < 0.0) {
            return Err(Error::Domain(format!(
                "probability tensor has negative entry {} at {pos}",
                tensor.data[pos]
            )));
        }
        let mass = tensor.sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Domain(format!("probability tensor has mass {mass}")));
        }
        Ok(Self(tensor))
    }

    pub fn into_inner(self) -> DenseTensor {
        self.0
    }
}

impl Deref for ProbabilityTensor {
    type Target = DenseTensor;

    fn deref(&self) -> &DenseTensor {
        &self.0
    }
}

impl AsRef<DenseTensor> for ProbabilityTensor {
    fn as_ref(&self) -> &DenseTensor {
        &self.0
    }
}

/// Ordered contiguous blocks of axes whose concatenation is `0..ndim`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TuplePartition {
    blocks: Vec<Range<usize>>,
}

impl TuplePartition {
    /// Validates explicit axis lists such as `[[0, 1], [2, 3]]`.
    pub fn from_axes(blocks: &[Vec<usize>], ndim: usize) -> Result<Self> {
        if blocks.is_empty() {
            return config("partition has no blocks");
        }
        let mut next = 0usize;
        let mut ranges = Vec::with_capacity(blocks.len());
        for (m, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return config(format!("partition block {m} is empty"));
            }
            let start = next;
            for &axis in block {
                if axis != next {
                    return config(format!(
                        "partition block {m} is not contiguous and ordered: expected axis {next}, found {axis}"
                    ));
                }
                next += 1;
            }
            ranges.push(start..next);
        }
        if next != ndim {
            return config(format!("partition covers {next} axes but the tensor has {ndim}"));
        }
        Ok(Self { blocks: ranges })
    }

    /// Blocks with the given numbers of axes, e.g. `[2, 2]` for `((0,1),(2,3))`.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut next = 0;
        let blocks: Vec<Vec<usize>> = sizes
            .iter()
            .map(|&s| {
                let b = (next..next + s).collect();
                next += s;
                b
            })
            .collect();
        Self::from_axes(&blocks, next)
    }

    /// The finest partition: every axis in its own block.
    pub fn singletons(ndim: usize) -> Result<Self> {
        Self::from_sizes(&vec![1; ndim])
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.end)
    }

    /// True iff some block holds a single axis.
    pub fn is_degenerate(&self) -> bool {
        self.blocks.iter().any(|b| b.len() == 1)
    }

    pub fn to_axes(&self) -> Vec<Vec<usize>> {
        self.blocks.iter().map(|b| b.clone().collect()).collect()
    }

    pub(crate) fn check_shape(&self, shape: &[usize]) -> Result<()> {
        if self.ndim() != shape.len() {
            return config(format!(
                "partition covers {} axes but the tensor has shape {:?}",
                self.ndim(),
                shape
            ));
        }
        Ok(())
    }
}

/// The prescribed axis marginals `mu_1, ..., mu_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalFamily {
    mu: Vec<Vec<f64>>,
}

impl MarginalFamily {
    pub fn new(mu: Vec<Vec<f64>>) -> Result<Self> {
        if mu.is_empty() {
            return config("marginal family is empty");
        }
        for (n, m) in mu.iter().enumerate() {
            if m.is_empty() {
                return config(format!("marginal {n} is empty"));
            }
            if let Some(v) = m.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::Domain(format!("marginal {n} has invalid entry {v}")));
            }
            let mass: f64 = m.iter().sum();
            if (mass - 1.0).abs() > MASS_TOL {
                return Err(Error::Domain(format!("marginal {n} has mass {mass}")));
            }
        }
        Ok(Self { mu })
    }

    pub fn uniform(extents: &[usize]) -> Result<Self> {
        Self::new(extents.iter().map(|&a| vec![1.0 / a as f64; a]).collect())
    }

    pub fn get(&self, n: usize) -> &[f64] {
        &self.mu[n]
    }

    pub fn as_slice(&self) -> &[Vec<f64>] {
        &self.mu
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn extents(&self) -> Vec<usize> {
        self.mu.iter().map(Vec::len).collect()
    }

    /// The product measure `mu_1 ⊗ ... ⊗ mu_N`.
    pub fn product(&self) -> ProbabilityTensor {
        let factors: Vec<DenseTensor> = self
            .mu
            .iter()
            .map(|m| DenseTensor::from_parts(vec![m.len()], m.clone()))
            .collect();
        ProbabilityTensor(tensor_product(&factors).expect("nonempty family"))
    }

    pub(crate) fn check_shape(&self, shape: &[usize]) -> Result<()> {
        if self.extents() != shape {
            return config(format!(
                "marginal extents {:?} do not match tensor shape {:?}",
                self.extents(),
                shape
            ));
        }
        Ok(())
    }
}

/// Sums `p` over every axis outside the contiguous `block`.
pub fn marginalize(p: &DenseTensor, block: Range<usize>) -> Result<DenseTensor> {
    if block.is_empty() || block.end > p.ndim() {
        return config(format!(
            "axis range {block:?} is invalid for a tensor of rank {}",
            p.ndim()
        ));
    }
    let outer: usize = p.shape[..block.start].iter().product();
    let mid: usize = p.shape[block.clone()].iter().product();
    let inner: usize = p.shape[block.end..].iter().product();
    let mut out = vec![0.0; mid];
    for o in 0..outer {
        let base = o * mid * inner;
        for (m, acc) in out.iter_mut().enumerate() {
            let row = &p.data[base + m * inner..base + (m + 1) * inner];
            for &v in row {
                *acc += v;
            }
        }
    }
    Ok(DenseTensor::from_parts(p.shape[block].to_vec(), out))
}

/// Sums `p` over every axis not listed in `axes` (strictly increasing, possibly
/// non-contiguous). The result keeps the listed axes in order.
pub fn marginalize_axes(p: &DenseTensor, axes: &[usize]) -> Result<DenseTensor> {
    if axes.is_empty() || axes.windows(2).any(|w| w[0] >= w[1]) || axes[axes.len() - 1] >= p.ndim()
    {
        return config(format!(
            "axes {axes:?} must be strictly increasing and below rank {}",
            p.ndim()
        ));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| p.shape[a]).collect();
    let out_strides = strides(&out_shape);
    let mut out = vec![0.0; out_shape.iter().product()];
    let mut idx = vec![0usize; p.ndim()];
    for &v in &p.data {
        let pos: usize = axes.iter().zip(&out_strides).map(|(&a, &s)| idx[a] * s).sum();
        out[pos] += v;
        increment(&mut idx, &p.shape);
    }
    Ok(DenseTensor::from_parts(out_shape, out))
}

/// Outer product of the factors; the result shape is the concatenation of theirs.
pub fn tensor_product(factors: &[DenseTensor]) -> Result<DenseTensor> {
    let (first, rest) = factors
        .split_first()
        .ok_or_else(|| Error::Config("tensor product of zero factors".into()))?;
    let mut shape = first.shape.clone();
    let mut data = first.data.clone();
    for f in rest {
        let mut next = Vec::with_capacity(data.len() * f.data.len());
        for &a in &data {
            next.extend(f.data.iter().map(|&b| a * b));
        }
        shape.extend_from_slice(&f.shape);
        data = next;
    }
    Ok(DenseTensor::from_parts(shape, data))
}

/// Generalised outer sum: `(A ⊕ B)[i, j] = A[i] + B[j]` over any number of blocks.
pub fn tensor_sum(blocks: &[DenseTensor], target_shape: &[usize]) -> Result<DenseTensor> {
    let concat: Vec<usize> = blocks.iter().flat_map(|b| b.shape.iter().copied()).collect();
    if concat != target_shape {
        return config(format!(
            "block shapes concatenate to {concat:?}, expected {target_shape:?}"
        ));
    }
    let mut data = vec![0.0];
    for b in blocks {
        let mut next = Vec::with_capacity(data.len() * b.data.len());
        for &a in &data {
            next.extend(b.data.iter().map(|&v| a + v));
        }
        data = next;
    }
    Ok(DenseTensor::from_parts(target_shape.to_vec(), data))
}

/// The block marginals `P_{#1}, ..., P_{#M}`.
pub fn block_marginals(p: &DenseTensor, partition: &TuplePartition) -> Result<Vec<DenseTensor>> {
    partition.check_shape(&p.shape)?;
    partition
        .blocks()
        .iter()
        .map(|b| marginalize(p, b.clone()))
        .collect()
}

/// `P_{#T} = P_{#1} ⊗ ... ⊗ P_{#M}`.
pub fn factored_projection(p: &ProbabilityTensor, partition: &TuplePartition) -> Result<DenseTensor> {
    tensor_product(&block_marginals(p, partition)?)
}

/// Negative entropy `sum p log p`, with `0 log 0 = 0`.
pub fn neg_entropy(p: &DenseTensor) -> Result<f64> {
    neg_entropy_slice(&p.data)
}

pub(crate) fn neg_entropy_slice(data: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for &v in data {
        if v < 0.0 {
            return Err(Error::Domain(format!("negative entry {v} in entropy")));
        }
        if v > 0.0 {
            acc += v * v.ln();
        }
    }
    Ok(acc)
}

/// `KL(P | Q) = sum p log(p / q)`; `+inf` when `P` is not absolutely continuous
/// with respect to `Q`.
pub fn kl_divergence(p: &DenseTensor, q: &DenseTensor) -> Result<f64> {
    same_shape(p, q)?;
    let mut acc = 0.0;
    for (&a, &b) in p.data.iter().zip(&q.data) {
        if a < 0.0 || b < 0.0 {
            return Err(Error::Domain(format!("negative entry in KL: p={a}, q={b}")));
        }
        if a <= ZERO_THRESHOLD {
            continue;
        }
        if b <= ZERO_THRESHOLD {
            return Ok(f64::INFINITY);
        }
        acc += a * (a / b).ln();
    }
    Ok(acc)
}

/// Concatenates the rows of a matrix into a vector.
pub fn vectorize(a: &DenseTensor) -> Result<DenseTensor> {
    if a.ndim() != 2 {
        return config(format!("vectorize needs a matrix, got shape {:?}", a.shape));
    }
    Ok(DenseTensor::from_parts(vec![a.len()], a.data.clone()))
}

/// Inverse of [`vectorize`].
pub fn devectorize(b: &DenseTensor, rows: usize, cols: usize) -> Result<DenseTensor> {
    if b.ndim() != 1 || b.len() != rows * cols {
        return config(format!(
            "cannot reshape vector of shape {:?} into {rows}x{cols}",
            b.shape
        ));
    }
    DenseTensor::new(vec![rows, cols], b.data.clone())
}

/// Maps a 4-D tensor `P[i, j, k, l]` to the matrix `A[i*n2 + j, k*n4 + l]`.
pub fn matricize(p: &DenseTensor) -> Result<DenseTensor> {
    let [n1, n2, n3, n4] = p.shape[..] else {
        return config(format!("matricize needs a 4-D tensor, got shape {:?}", p.shape));
    };
    Ok(DenseTensor::from_parts(vec![n1 * n2, n3 * n4], p.data.clone()))
}

/// Inverse of [`matricize`].
pub fn dematricize(a: &DenseTensor, shape: [usize; 4]) -> Result<DenseTensor> {
    let [n1, n2, n3, n4] = shape;
    if a.shape != [n1 * n2, n3 * n4] {
        return config(format!(
            "matrix of shape {:?} is not the matricization of {shape:?}",
            a.shape
        ));
    }
    DenseTensor::new(shape.to_vec(), a.data.clone())
}

/// Stacks two equal-column matrices vertically.
pub fn concat_v(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    match (&a.shape[..], &b.shape[..]) {
        ([m, d], [n, d2]) if d == d2 => {
            let mut data = a.data.clone();
            data.extend_from_slice(&b.data);
            Ok(DenseTensor::from_parts(vec![m + n, *d], data))
        }
        _ => config(format!(
            "concat_v needs matrices with equal column counts, got {:?} and {:?}",
            a.shape, b.shape
        )),
    }
}

/// Stacks two equal-row matrices horizontally.
pub fn concat_h(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    match (&a.shape[..], &b.shape[..]) {
        ([n, p], [n2, q]) if n == n2 => {
            let mut data = Vec::with_capacity(n * (p + q));
            for i in 0..*n {
                data.extend_from_slice(&a.data[i * p..(i + 1) * p]);
                data.extend_from_slice(&b.data[i * q..(i + 1) * q]);
            }
            Ok(DenseTensor::from_parts(vec![*n, p + q], data))
        }
        _ => config(format!(
            "concat_h needs matrices with equal row counts, got {:?} and {:?}",
            a.shape, b.shape
        )),
    }
}
