//! Dense and sparse multidimensional arrays and the multilinear operations
//! built on them.
//!
//! Storage is row-major with the last mode varying fastest, so the flat
//! position of a multi-index `(i_1, .., i_K)` is
//! `i_K + sum_{k<K} (i_k - 1) * prod_{k' > k} m_{k'}` (1-based). With this
//! ordering the vectorized Tucker product satisfies
//! `vec([[W; U1..UK]]) = (U1 ⊗ .. ⊗ UK) vec(W)`.
//!
//! Everything in the Rust API is 0-based except [`linear_index`], which
//! keeps the 1-based convention of the mathematical notation.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Sizes of each mode of a K-mode array.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Shape> {
        if dims.is_empty() {
            return Err(Error::Shape("a shape needs at least one mode".into()));
        }
        if let Some(k) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Shape(format!("mode {} has size 0", k + 1)));
        }
        let mut total: usize = 1;
        for &d in &dims {
            total = total
                .checked_mul(d)
                .ok_or_else(|| Error::Shape(format!("total size of {dims:?} overflows")))?;
        }
        Ok(Shape { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of modes K.
    pub fn ndims(&self) -> usize {
        self.dims.len()
    }

    /// Total number of entries m.
    pub fn size(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major strides (last mode contiguous).
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for k in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.dims[k + 1];
        }
        strides
    }

    /// Flat offset of a 0-based multi-index. The caller guarantees range.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    /// Flat offset of a 0-based multi-index, with range checks.
    pub fn checked_offset(&self, index: &[usize]) -> Result<usize> {
        self.check_index(index)?;
        Ok(self.offset(index))
    }

    /// Inverse of [`Shape::offset`].
    pub fn unravel(&self, mut offset: usize) -> Vec<usize> {
        let mut index = vec![0; self.dims.len()];
        for k in (0..self.dims.len()).rev() {
            index[k] = offset % self.dims[k];
            offset /= self.dims[k];
        }
        index
    }

    pub fn check_index(&self, index: &[usize]) -> Result<()> {
        if index.len() != self.dims.len() {
            return Err(Error::Range(format!(
                "index has {} modes, shape has {}",
                index.len(),
                self.dims.len()
            )));
        }
        for (k, (&i, &d)) in index.iter().zip(&self.dims).enumerate() {
            if i >= d {
                return Err(Error::Range(format!(
                    "mode {} index {} exceeds size {}",
                    k + 1,
                    i + 1,
                    d
                )));
            }
        }
        Ok(())
    }

    /// (product of sizes before mode k, size of mode k, product after mode k).
    fn split(&self, k: usize) -> (usize, usize, usize) {
        let pre = self.dims[..k].iter().product();
        let post = self.dims[k + 1..].iter().product();
        (pre, self.dims[k], post)
    }

    fn with_mode(&self, k: usize, size: usize) -> Shape {
        let mut dims = self.dims.clone();
        dims[k] = size;
        Shape { dims }
    }
}

/// Position of a 1-based multi-index in the 1-based vectorization.
///
/// ```
/// use tensorgp::tensor::{linear_index, Shape};
/// let shape = Shape::new(vec![2, 3, 4]).unwrap();
/// assert_eq!(linear_index(&[2, 3, 1], &shape).unwrap(), 21);
/// ```
pub fn linear_index(index: &[usize], shape: &Shape) -> Result<usize> {
    if index.len() != shape.ndims() {
        return Err(Error::Range(format!(
            "index has {} modes, shape has {}",
            index.len(),
            shape.ndims()
        )));
    }
    let mut zero_based = Vec::with_capacity(index.len());
    for (k, (&i, &d)) in index.iter().zip(shape.dims()).enumerate() {
        if i == 0 || i > d {
            return Err(Error::Range(format!(
                "mode {} index {} outside 1..={}",
                k + 1,
                i,
                d
            )));
        }
        zero_based.push(i - 1);
    }
    Ok(shape.offset(&zero_based) + 1)
}

/// A dense real tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<DenseTensor> {
        if data.len() != shape.size() {
            return Err(Error::Shape(format!(
                "{} values for shape {:?} of size {}",
                data.len(),
                shape.dims(),
                shape.size()
            )));
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> DenseTensor {
        let data = vec![0.0; shape.size()];
        DenseTensor { shape, data }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(&[usize]) -> f64) -> DenseTensor {
        let data = (0..shape.size()).map(|o| f(&shape.unravel(o))).collect();
        DenseTensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
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

    /// Entry at a 0-based multi-index.
    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.shape.offset(index)]
    }

    /// Squared Frobenius norm.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn dot(&self, other: &DenseTensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseTensor {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Mode-k product `W ×_k U` for a 0-based mode `k`: the size of mode k
/// changes from `U.ncols()` to `U.nrows()`.
pub fn mode_k_multiply(w: &DenseTensor, u: &DMatrix<f64>, k: usize) -> Result<DenseTensor> {
    if k >= w.shape.ndims() {
        return Err(Error::Shape(format!(
            "mode {} out of range for a {}-mode tensor",
            k + 1,
            w.shape.ndims()
        )));
    }
    let (pre, mk, post) = w.shape.split(k);
    if u.ncols() != mk {
        return Err(Error::Shape(format!(
            "mode {} has size {} but matrix has {} columns",
            k + 1,
            mk,
            u.ncols()
        )));
    }
    let s = u.nrows();
    let mut out = vec![0.0; pre * s * post];
    for p in 0..pre {
        for j in 0..s {
            let dst = &mut out[(p * s + j) * post..(p * s + j + 1) * post];
            for i in 0..mk {
                let c = u[(j, i)];
                if c == 0.0 {
                    continue;
                }
                let src = &w.data[(p * mk + i) * post..(p * mk + i + 1) * post];
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d += c * x;
                }
            }
        }
    }
    Ok(DenseTensor {
        shape: w.shape.with_mode(k, s),
        data: out,
    })
}

/// Tucker operator `[[W; U_1, .., U_K]]`: successive mode products over every mode.
pub fn tucker_apply(w: &DenseTensor, factors: &[DMatrix<f64>]) -> Result<DenseTensor> {
    if factors.len() != w.shape.ndims() {
        return Err(Error::Shape(format!(
            "{} factor matrices for a {}-mode core",
            factors.len(),
            w.shape.ndims()
        )));
    }
    let mut out = w.clone();
    for (k, u) in factors.iter().enumerate() {
        out = mode_k_multiply(&out, u, k)?;
    }
    Ok(out)
}

/// `unfold(a, k) * unfold(b, k)ᵀ` without forming either unfolding.
pub fn mode_k_inner(a: &DenseTensor, b: &DenseTensor, k: usize) -> Result<DMatrix<f64>> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            a.shape.dims(),
            b.shape.dims()
        )));
    }
    if k >= a.shape.ndims() {
        return Err(Error::Shape(format!("mode {} out of range", k + 1)));
    }
    let (pre, mk, post) = a.shape.split(k);
    let mut out = DMatrix::zeros(mk, mk);
    for p in 0..pre {
        for i in 0..mk {
            let ra = &a.data[(p * mk + i) * post..(p * mk + i + 1) * post];
            for j in 0..mk {
                let rb = &b.data[(p * mk + j) * post..(p * mk + j + 1) * post];
                out[(i, j)] += ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
    Ok(out)
}

/// Contracts every mode except `k` against the given weight vectors,
/// returning a vector of length `m_k`:
/// `out[i] = sum_{j: j_k = i} t[j] * prod_{l != k} weights[l][j_l]`.
pub fn contract_except(t: &DenseTensor, weights: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
    let dims = t.shape.dims();
    if weights.len() != dims.len() || k >= dims.len() {
        return Err(Error::Shape("weight vectors do not match tensor modes".into()));
    }
    let mut cur = t.clone();
    for (l, w) in weights.iter().enumerate() {
        if l == k {
            continue;
        }
        if w.len() != dims[l] {
            return Err(Error::Shape(format!(
                "mode {} weights have length {}, expected {}",
                l + 1,
                w.len(),
                dims[l]
            )));
        }
        cur = mode_k_multiply(&cur, &DMatrix::from_row_slice(1, w.len(), w), l)?;
    }
    Ok(cur.data)
}

/// Mode-k unfolding: an `m_k × (m / m_k)` matrix whose columns follow the
/// row-major order of the remaining modes.
pub fn mode_k_unfold(t: &DenseTensor, k: usize) -> Result<DMatrix<f64>> {
    if k >= t.shape.ndims() {
        return Err(Error::Shape(format!("mode {} out of range", k + 1)));
    }
    let (pre, mk, post) = t.shape.split(k);
    Ok(DMatrix::from_fn(mk, pre * post, |i, c| {
        let (p, q) = (c / post, c % post);
        t.data[(p * mk + i) * post + q]
    }))
}

/// Inverse of [`mode_k_unfold`].
pub fn mode_k_refold(m: &DMatrix<f64>, k: usize, shape: &Shape) -> Result<DenseTensor> {
    if k >= shape.ndims() {
        return Err(Error::Shape(format!("mode {} out of range", k + 1)));
    }
    let (pre, mk, post) = shape.split(k);
    if m.nrows() != mk || m.ncols() != pre * post {
        return Err(Error::Shape(format!(
            "{}x{} matrix cannot refold into {:?} at mode {}",
            m.nrows(),
            m.ncols(),
            shape.dims(),
            k + 1
        )));
    }
    let mut data = vec![0.0; shape.size()];
    for p in 0..pre {
        for i in 0..mk {
            for q in 0..post {
                data[(p * mk + i) * post + q] = m[(i, p * post + q)];
            }
        }
    }
    Ok(DenseTensor {
        shape: shape.clone(),
        data,
    })
}

/// Observed binary array in coordinate form. Unlisted coordinates are zero.
#[derive(Debug, Clone)]
pub struct SparseTensorCOO {
    shape: Shape,
    indices: Vec<Vec<usize>>,
    values: Vec<f64>,
    lookup: HashMap<usize, usize>,
}

impl SparseTensorCOO {
    /// Builds a binary sparse tensor from 0-based coordinates.
    pub fn new(shape: Shape, entries: Vec<(Vec<usize>, f64)>) -> Result<SparseTensorCOO> {
        let mut indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut lookup = HashMap::with_capacity(entries.len());
        for (idx, v) in entries {
            let offset = shape.checked_offset(&idx)?;
            if v != 0.0 && v != 1.0 {
                return Err(Error::Range(format!("non-binary value {v} at {idx:?}")));
            }
            if lookup.insert(offset, indices.len()).is_some() {
                return Err(Error::Range(format!(
                    "duplicate coordinate {:?}",
                    idx.iter().map(|i| i + 1).collect::<Vec<_>>()
                )));
            }
            indices.push(idx);
            values.push(v);
        }
        Ok(SparseTensorCOO {
            shape,
            indices,
            values,
            lookup,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    /// Number of listed entries.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Number of listed entries with value one.
    pub fn nnz(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], f64)> {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(i, &v)| (i.as_slice(), v))
    }

    /// Value at a 0-based coordinate (0 when unlisted).
    pub fn get(&self, index: &[usize]) -> f64 {
        self.lookup
            .get(&self.shape.offset(index))
            .map_or(0.0, |&e| self.values[e])
    }

    pub fn contains(&self, index: &[usize]) -> bool {
        self.lookup.contains_key(&self.shape.offset(index))
    }

    /// Per-index count of nonzero entries in each slice of mode `k`.
    pub fn slice_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; self.shape.dims()[k]];
        for (idx, v) in self.iter() {
            if v != 0.0 {
                counts[idx[k]] += 1;
            }
        }
        counts
    }

    /// Dense copy. Only sensible for small shapes.
    pub fn to_dense(&self) -> DenseTensor {
        let mut out = DenseTensor::zeros(self.shape.clone());
        for (idx, v) in self.iter() {
            let o = self.shape.offset(idx);
            out.data[o] = v;
        }
        out
    }
}

/// Per-mode index selections (0-based) defining a subarray.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSets {
    sets: Vec<Vec<usize>>,
}

impl IndexSets {
    /// Validates distinctness and range against `shape`.
    pub fn new(sets: Vec<Vec<usize>>, shape: &Shape) -> Result<IndexSets> {
        if sets.len() != shape.ndims() {
            return Err(Error::Range(format!(
                "{} index sets for a {}-mode array",
                sets.len(),
                shape.ndims()
            )));
        }
        for (k, (set, &d)) in sets.iter().zip(shape.dims()).enumerate() {
            if set.is_empty() {
                return Err(Error::Range(format!("mode {} selection is empty", k + 1)));
            }
            let mut seen = vec![false; d];
            for &i in set {
                if i >= d {
                    return Err(Error::Range(format!(
                        "mode {} index {} exceeds size {}",
                        k + 1,
                        i + 1,
                        d
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Range(format!(
                        "mode {} index {} selected twice",
                        k + 1,
                        i + 1
                    )));
                }
            }
        }
        Ok(IndexSets { sets })
    }

    /// Every index of every mode, in natural order.
    pub fn full(shape: &Shape) -> IndexSets {
        IndexSets {
            sets: shape.dims().iter().map(|&d| (0..d).collect()).collect(),
        }
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    pub fn mode(&self, k: usize) -> &[usize] {
        &self.sets[k]
    }

    pub fn sub_shape(&self) -> Shape {
        Shape {
            dims: self.sets.iter().map(Vec::len).collect(),
        }
    }

    /// Global 0-based coordinate of a local 0-based position.
    pub fn global(&self, local: &[usize]) -> Vec<usize> {
        local
            .iter()
            .zip(&self.sets)
            .map(|(&l, set)| set[l])
            .collect()
    }
}

/// Dense block of `y` at the selected indices; local order follows `sel`.
pub fn extract_subarray(y: &SparseTensorCOO, sel: &IndexSets) -> Result<DenseTensor> {
    // re-validate against this array's shape
    let sel = IndexSets::new(sel.sets.clone(), y.shape())?;
    let sub = sel.sub_shape();
    let mut data = vec![0.0; sub.size()];
    if y.is_empty() {
        return DenseTensor::new(sub, data);
    }
    let strides = y.shape.strides();
    let mut local = vec![0usize; sub.ndims()];
    for slot in data.iter_mut() {
        let offset: usize = local
            .iter()
            .zip(&sel.sets)
            .zip(&strides)
            .map(|((&l, set), &s)| set[l] * s)
            .sum();
        if let Some(&e) = y.lookup.get(&offset) {
            *slot = y.values[e];
        }
        for k in (0..local.len()).rev() {
            local[k] += 1;
            if local[k] < sub.dims[k] {
                break;
            }
            local[k] = 0;
        }
    }
    DenseTensor::new(sub, data)
}
