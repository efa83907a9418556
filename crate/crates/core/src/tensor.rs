//! Dense row-major tensors and the forward kernels used by the tape.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

enum Pattern {
    /// The small shape equals a trailing part of the big one.
    Suffix,
    /// The small shape is the big one with the last extent set to 1.
    PerRow,
}

/// Recognises the two broadcasts that dominate model code (bias-like and
/// per-row), ignoring leading unit axes of `small`.
fn broadcast_pattern(big: &[usize], small: &[usize]) -> Option<Pattern> {
    let lead = small.iter().take_while(|&&d| d == 1).count().min(small.len().saturating_sub(1));
    let core = &small[lead..];
    if core.len() <= big.len() && big[big.len() - core.len()..] == *core {
        return Some(Pattern::Suffix);
    }
    let r = big.len();
    if small.len() == r && r > 1 && small[r - 1] == 1 && small[..r - 1] == big[..r - 1] {
        return Some(Pattern::PerRow);
    }
    None
}

/// Strides of `shape` viewed inside `out_shape`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let base = strides(shape);
    let off = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                base[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_flat, in_flat)` for every element of `out_shape`.
fn for_each_mapped(out_shape: &[usize], in_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for flat in 0..total {
        f(flat, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += in_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= in_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("extents must be positive, got {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element at a 2-D position.
    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = *self.shape.last().unwrap();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = *self.shape.last().unwrap();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::of(x.f64())).collect() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn zip_broadcast(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        let f = &f;
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self { shape: self.shape.clone(), data });
        }
        match broadcast_pattern(&self.shape, &other.shape) {
            Some(Pattern::Suffix) => {
                let m = other.data.len();
                let data = self.data.chunks(m).flat_map(|c| c.iter().zip(&other.data).map(|(&a, &b)| f(a, b))).collect();
                return Ok(Self { shape: self.shape.clone(), data });
            }
            Some(Pattern::PerRow) => {
                let w = self.shape[self.rank() - 1];
                let data =
                    self.data.chunks(w).zip(&other.data).flat_map(|(c, &b)| c.iter().map(move |&a| f(a, b))).collect();
                return Ok(Self { shape: self.shape.clone(), data });
            }
            None => {}
        }
        match broadcast_pattern(&other.shape, &self.shape) {
            Some(Pattern::Suffix) => {
                let m = self.data.len();
                let data = other.data.chunks(m).flat_map(|c| self.data.iter().zip(c).map(|(&a, &b)| f(a, b))).collect();
                return Ok(Self { shape: other.shape.clone(), data });
            }
            Some(Pattern::PerRow) => {
                let w = other.shape[other.rank() - 1];
                let data =
                    other.data.chunks(w).zip(&self.data).flat_map(|(c, &a)| c.iter().map(move |&b| f(a, b))).collect();
                return Ok(Self { shape: other.shape.clone(), data });
            }
            None => {}
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let a_idx = gather_indices(&out_shape, &sa);
        let b_idx = gather_indices(&out_shape, &sb);
        let data = a_idx.iter().zip(&b_idx).map(|(&i, &j)| f(self.data[i], other.data[j])).collect();
        Ok(Self { shape: out_shape, data })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let out = broadcast_shape(&self.shape, shape)?;
        if out != shape {
            return Err(Error::Shape(format!("cannot broadcast {:?} to {shape:?}", self.shape)));
        }
        let s = broadcast_strides(&self.shape, shape);
        let mut data = Vec::with_capacity(numel(shape));
        for_each_mapped(shape, &s, |_, src| data.push(self.data[src]));
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Sums a broadcast result back down to `shape`.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let chk = broadcast_shape(shape, &self.shape)?;
        if chk != self.shape {
            return Err(Error::Shape(format!("cannot reduce {:?} to {shape:?}", self.shape)));
        }
        let mut data = vec![T::zero(); numel(shape)];
        match broadcast_pattern(&self.shape, shape) {
            Some(Pattern::Suffix) => {
                for c in self.data.chunks(data.len()) {
                    for (d, &v) in data.iter_mut().zip(c) {
                        *d = *d + v;
                    }
                }
            }
            Some(Pattern::PerRow) => {
                let w = self.shape[self.rank() - 1];
                for (d, c) in data.iter_mut().zip(self.data.chunks(w)) {
                    *d = c.iter().fold(*d, |acc, &v| acc + v);
                }
            }
            None => {
                let s = broadcast_strides(shape, &self.shape);
                for_each_mapped(&self.shape, &s, |flat, dst| data[dst] = data[dst] + self.data[flat]);
            }
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn add(&self, o: &Self) -> Result<Self> {
        self.zip_broadcast(o, |a, b| a + b)
    }

    pub fn sub(&self, o: &Self) -> Result<Self> {
        self.zip_broadcast(o, |a, b| a - b)
    }

    pub fn mul(&self, o: &Self) -> Result<Self> {
        self.zip_broadcast(o, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, o: &Self) {
        debug_assert_eq!(self.shape, o.shape);
        for (a, &b) in self.data.iter_mut().zip(&o.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::Shape(format!("axis {axis} out of range for {:?}", self.shape)));
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        self.sum_to_shape(&shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!("invalid permutation {axes:?} for rank {r}")));
        }
        let src = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        if r > 1 && axes[r - 1] == r - 1 {
            // innermost axis stays put: copy contiguous runs
            let w = self.shape[r - 1];
            for_each_mapped(&out_shape[..r - 1], &in_strides[..r - 1], |_, s| {
                data.extend_from_slice(&self.data[s..s + w])
            });
        } else {
            for_each_mapped(&out_shape, &in_strides, |_, s| data.push(self.data[s]));
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Matrix product over the last two axes. `o` is either rank 2 (shared
    /// across the leading batch axes of `self`) or has identical batch axes.
    pub fn matmul(&self, o: &Self) -> Result<Self> {
        let (ra, rb) = (self.rank(), o.rank());
        if ra < 2 || rb < 2 {
            return Err(Error::Shape("matmul needs rank >= 2".into()));
        }
        let (m, k) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (k2, n) = (o.shape[rb - 2], o.shape[rb - 1]);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", self.shape, o.shape)));
        }
        let mut out_shape = self.shape[..ra - 2].to_vec();
        out_shape.extend([m, n]);
        if rb == 2 {
            let rows = self.data.len() / k;
            let mut out = vec![T::zero(); rows * n];
            matmul_into(&self.data, &o.data, rows, k, n, &mut out);
            return Ok(Self { shape: out_shape, data: out });
        }
        if self.shape[..ra - 2] != o.shape[..rb - 2] {
            return Err(Error::Shape(format!("matmul batch {:?} x {:?}", self.shape, o.shape)));
        }
        let batch = numel(&self.shape[..ra - 2]);
        let mut out = vec![T::zero(); batch * m * n];
        for b in 0..batch {
            matmul_into(
                &self.data[b * m * k..(b + 1) * m * k],
                &o.data[b * k * n..(b + 1) * k * n],
                m,
                k,
                n,
                &mut out[b * m * n..(b + 1) * m * n],
            );
        }
        Ok(Self { shape: out_shape, data: out })
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        if axis >= self.rank() || start >= end || end > self.shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{end} on axis {axis} of {:?}",
                self.shape
            )));
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let ext = self.shape[axis];
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Ok(Self { shape, data })
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let r = first.rank();
        if axis >= r {
            return Err(Error::Shape(format!("concat axis {axis} for rank {r}")));
        }
        for p in parts {
            let ok = p.rank() == r
                && (0..r).all(|i| i == axis || p.shape[i] == first.shape[i]);
            if !ok {
                return Err(Error::Shape(format!("concat {:?} with {:?}", first.shape, p.shape)));
            }
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let w = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    fn last_axis(&self) -> (usize, usize) {
        let w = *self.shape.last().unwrap();
        (self.data.len() / w, w)
    }

    pub fn softmax_last(&self) -> Self {
        let (rows, w) = self.last_axis();
        let mut data = self.data.clone();
        for r in 0..rows {
            let row = &mut data[r * w..(r + 1) * w];
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z = z + *x;
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
        }
        Self { shape: self.shape.clone(), data }
    }

    pub fn log_softmax_last(&self) -> Self {
        let (rows, w) = self.last_axis();
        let mut data = self.data.clone();
        for r in 0..rows {
            let row = &mut data[r * w..(r + 1) * w];
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        Self { shape: self.shape.clone(), data }
    }

    /// Normalizes over the last axis (no affine); also returns 1/σ per row.
    pub fn layer_norm_last(&self, eps: T) -> (Self, Vec<T>) {
        let (rows, w) = self.last_axis();
        let wf = T::of_usize(w);
        let mut data = self.data.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut data[r * w..(r + 1) * w];
            let mean = row.iter().copied().sum::<T>() / wf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / wf;
            let is = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        (Self { shape: self.shape.clone(), data }, inv_std)
    }

    pub fn argmax_last(&self) -> Vec<usize> {
        let (rows, w) = self.last_axis();
        (0..rows)
            .map(|r| argmax(&self.data[r * w..(r + 1) * w]))
            .collect()
    }
}

/// Index of the maximum, ties broken toward the lowest index.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn gather_indices(out_shape: &[usize], in_strides: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(numel(out_shape));
    for_each_mapped(out_shape, in_strides, |_, s| v.push(s));
    v
}

/// `out += a (m×k) · b (k×n)`, row-major.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    gemm(a, k, 1, b, m, k, n, out);
}

/// `out += aᵀ · b` for `a` stored as `k×m` and `b` as `k×n`.
pub(crate) fn matmul_tn_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    gemm(a, 1, m, b, m, k, n, out);
}

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 16;

/// `out[i][j] += Σ_p lhs(i, p)·b[p][j]` with `lhs(i, p) = a[i·rs + p·cs]`.
/// Every output element accumulates over `p` in ascending order, so the
/// result does not depend on the tiling.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(a: &[T], rs: usize, cs: usize, b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let full_rows = m / TILE_ROWS * TILE_ROWS;
    let full_cols = n / TILE_COLS * TILE_COLS;
    for i0 in (0..full_rows).step_by(TILE_ROWS) {
        for j0 in (0..full_cols).step_by(TILE_COLS) {
            let mut acc = [[T::zero(); TILE_COLS]; TILE_ROWS];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + TILE_COLS]);
            }
            for p in 0..k {
                let bt: &[T; TILE_COLS] = b[p * n + j0..p * n + j0 + TILE_COLS].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let x = a[(i0 + r) * rs + p * cs];
                    for t in 0..TILE_COLS {
                        row[t] = row[t] + x * bt[t];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + TILE_COLS].copy_from_slice(row);
            }
        }
        if full_cols < n {
            for r in i0..i0 + TILE_ROWS {
                gemm_row(a, rs, cs, b, r, k, n, full_cols, out);
            }
        }
    }
    for r in full_rows..m {
        gemm_row(a, rs, cs, b, r, k, n, 0, out);
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_row<T: Scalar>(a: &[T], rs: usize, cs: usize, b: &[T], i: usize, k: usize, n: usize, j0: usize, out: &mut [T]) {
    let orow = &mut out[i * n + j0..(i + 1) * n];
    for p in 0..k {
        let x = a[i * rs + p * cs];
        for (o, &bv) in orow.iter_mut().zip(&b[p * n + j0..(p + 1) * n]) {
            *o = *o + x * bv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, d).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn broadcast_bias_and_column() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3], &[10., 20., 30.]);
        assert_eq!(x.add(&b).unwrap().data(), &[11., 22., 33., 14., 25., 36.]);
        let c = t(&[2, 1], &[2., 3.]);
        assert_eq!(x.mul(&c).unwrap().data(), &[2., 4., 6., 12., 15., 18.]);
        let back = x.mul(&c).unwrap().sum_to_shape(&[2, 1]).unwrap();
        assert_eq!(back.data(), &[12., 45.]);
    }

    #[test]
    fn matmul_and_transpose() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 2], &[7., 8., 9., 10., 11., 12.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[58., 64., 139., 154.]);
        assert_eq!(a.transpose().unwrap().data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn slice_concat_inverse() {
        let a = t(&[2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let l = a.slice(1, 0, 1).unwrap();
        let r = a.slice(1, 1, 4).unwrap();
        assert_eq!(l.data(), &[1., 5.]);
        assert_eq!(Tensor::concat(&[&l, &r], 1).unwrap(), a);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = t(&[2, 3], &[1., 2., 3., -1., 0., 100.]);
        let s = a.softmax_last();
        for r in 0..2 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let ls = a.log_softmax_last();
        assert!((ls.at2(0, 2) - s.at2(0, 2).ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.0f32, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0f32, 2.0, 2.0]), 1);
    }
}
