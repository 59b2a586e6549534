//! Dense tensor algebra.
//!
//! Tensors are stored row-major with the last mode varying fastest. Mode
//! indices at this API boundary are 1-based, so `t.unfold(1)` is the mode-1
//! unfolding in the usual `×_1` notation.
//!
//! The mode-k unfolding of a tensor with extents `d_1 × … × d_K` is the
//! `d_k × ∏_{j≠k} d_j` matrix whose columns are the mode-k fibers, ordered by
//! the row-major order of the remaining modes.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of a K-mode tensor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TensorShape(Vec<usize>);

impl TensorShape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::InvalidShape("a tensor needs at least one mode".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "extent of mode {} is zero in {dims:?}",
                pos + 1
            )));
        }
        Ok(TensorShape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    /// Number of modes K.
    pub fn order(&self) -> usize {
        self.0.len()
    }

    /// Extent of a 1-based mode.
    pub fn dim(&self, mode: usize) -> Result<usize> {
        self.check_mode(mode)?;
        Ok(self.0[mode - 1])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub(crate) fn check_mode(&self, mode: usize) -> Result<()> {
        if mode == 0 || mode > self.order() {
            return Err(Error::InvalidMode {
                mode,
                order: self.order(),
            });
        }
        Ok(())
    }

    /// Same shape with one extent replaced (0-based mode).
    pub(crate) fn with_dim(&self, axis: usize, extent: usize) -> TensorShape {
        let mut dims = self.0.clone();
        dims[axis] = extent;
        TensorShape(dims)
    }

    /// `(outer, extent, inner)` split of the layout around a 0-based mode.
    pub(crate) fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.0[..axis].iter().product();
        let inner = self.0[axis + 1..].iter().product();
        (outer, self.0[axis], inner)
    }

    /// Formats as `32x32x3`.
    pub fn to_x_string(&self) -> String {
        self.0
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

impl TryFrom<Vec<usize>> for TensorShape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        TensorShape::new(dims)
    }
}

impl From<TensorShape> for Vec<usize> {
    fn from(s: TensorShape) -> Self {
        s.0
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_x_string())
    }
}

/// Real matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FactorMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape(format!("matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix given {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data".into()));
        }
        Ok(FactorMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        FactorMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FactorMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        FactorMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> FactorMatrix {
        let mut out = FactorMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &FactorMatrix) -> Result<FactorMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = FactorMatrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(rhs.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · selfᵀ`.
    pub fn gram(&self) -> FactorMatrix {
        let n = self.rows;
        let mut out = FactorMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
                out.data[i * n + j] = v;
                out.data[j * n + i] = v;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> FactorMatrix {
        let mut out = FactorMatrix::zeros(m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.data[r * m.ncols() + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &FactorMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// K-mode dense tensor, row-major with the last mode fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: TensorShape,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: TensorShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape} holds {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data".into()));
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn zeros(shape: TensorShape) -> Self {
        let n = shape.numel();
        DenseTensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: TensorShape, value: f64) -> Self {
        let n = shape.numel();
        DenseTensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn gaussian(shape: TensorShape, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        DenseTensor { shape, data }
    }

    pub(crate) fn from_parts(shape: TensorShape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        DenseTensor { shape, data }
    }

    pub fn shape(&self) -> &TensorShape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mode-k unfolding (1-based `mode`).
    pub fn unfold(&self, mode: usize) -> Result<FactorMatrix> {
        self.shape.check_mode(mode)?;
        Ok(self.unfold_axis(mode - 1))
    }

    pub(crate) fn unfold_axis(&self, axis: usize) -> FactorMatrix {
        let (outer, n, inner) = self.shape.split_at_axis(axis);
        let cols = outer * inner;
        let mut out = FactorMatrix::zeros(n, cols);
        for o in 0..outer {
            for j in 0..n {
                let src = &self.data[(o * n + j) * inner..(o * n + j + 1) * inner];
                out.data[j * cols + o * inner..j * cols + (o + 1) * inner].copy_from_slice(src);
            }
        }
        out
    }

    /// Inverse of [`DenseTensor::unfold`].
    pub fn fold(m: &FactorMatrix, shape: &TensorShape, mode: usize) -> Result<DenseTensor> {
        shape.check_mode(mode)?;
        let axis = mode - 1;
        let (outer, n, inner) = shape.split_at_axis(axis);
        if m.rows != n || m.cols != outer * inner {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} matrix is not a mode-{mode} unfolding of {shape}",
                m.rows, m.cols
            )));
        }
        let cols = m.cols;
        let mut data = vec![0.0; shape.numel()];
        for o in 0..outer {
            for j in 0..n {
                data[(o * n + j) * inner..(o * n + j + 1) * inner]
                    .copy_from_slice(&m.data[j * cols + o * inner..j * cols + (o + 1) * inner]);
            }
        }
        Ok(DenseTensor::from_parts(shape.clone(), data))
    }

    /// `self ×_mode a`: contracts mode `mode` (1-based) with the columns of `a`.
    pub fn mode_product(&self, a: &FactorMatrix, mode: usize) -> Result<DenseTensor> {
        self.shape.check_mode(mode)?;
        let axis = mode - 1;
        if a.cols != self.shape.0[axis] {
            return Err(Error::DimensionMismatch(format!(
                "mode-{mode} product needs {} columns, matrix is {}x{}",
                self.shape.0[axis], a.rows, a.cols
            )));
        }
        Ok(self.mode_product_axis(a, axis))
    }

    pub(crate) fn mode_product_axis(&self, a: &FactorMatrix, axis: usize) -> DenseTensor {
        let (outer, n, inner) = self.shape.split_at_axis(axis);
        let m = a.rows;
        let mut data = vec![0.0; outer * m * inner];
        for o in 0..outer {
            let src = &self.data[o * n * inner..(o + 1) * n * inner];
            let dst_block = &mut data[o * m * inner..(o + 1) * m * inner];
            for r in 0..m {
                let dst = &mut dst_block[r * inner..(r + 1) * inner];
                for (j, &coef) in a.row(r).iter().enumerate() {
                    if coef == 0.0 {
                        continue;
                    }
                    let fiber = &src[j * inner..(j + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(fiber) {
                        *d += coef * s;
                    }
                }
            }
        }
        DenseTensor::from_parts(self.shape.with_dim(axis, m), data)
    }

    /// `self ×_1 A_1 ×_2 … ×_K A_K`.
    pub fn multilinear_map(&self, factors: &[FactorMatrix]) -> Result<DenseTensor> {
        multilinear_map(self, factors)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub(crate) fn sq_dist(&self, other: &DenseTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Per-element mean squared difference; shapes must match.
    pub fn mse(&self, other: &DenseTensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch(format!(
                "mse between {} and {}",
                self.shape, other.shape
            )));
        }
        Ok(self.sq_dist(other) / self.data.len() as f64)
    }
}

/// Sequential mode products over all modes in order 1..K.
pub fn multilinear_map(t: &DenseTensor, factors: &[FactorMatrix]) -> Result<DenseTensor> {
    let order = t.shape.order();
    if factors.len() != order {
        return Err(Error::DimensionMismatch(format!(
            "{} factors for an order-{order} tensor",
            factors.len()
        )));
    }
    for (axis, f) in factors.iter().enumerate() {
        if f.cols != t.shape.0[axis] {
            return Err(Error::DimensionMismatch(format!(
                "factor {} is {}x{}, mode extent is {}",
                axis + 1,
                f.rows,
                f.cols,
                t.shape.0[axis]
            )));
        }
    }
    let mut out = t.mode_product_axis(&factors[0], 0);
    for (axis, f) in factors.iter().enumerate().skip(1) {
        out = out.mode_product_axis(f, axis);
    }
    Ok(out)
}

pub fn frobenius_norm(t: &DenseTensor) -> f64 {
    t.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Result of a truncated higher-order SVD.
#[derive(Clone, Debug)]
pub struct Hosvd {
    pub core: DenseTensor,
    /// Factor k is `target_k × I_k` with orthonormal rows.
    pub factors: Vec<FactorMatrix>,
}

impl Hosvd {
    /// `core ×_k factor_kᵀ` over all modes.
    pub fn reconstruct(&self) -> DenseTensor {
        let transposed: Vec<FactorMatrix> = self.factors.iter().map(|f| f.transpose()).collect();
        multilinear_map(&self.core, &transposed).expect("hosvd factors are shape-consistent")
    }
}

/// Truncated HOSVD of one tensor.
pub fn hosvd(t: &DenseTensor, target: &TensorShape) -> Result<Hosvd> {
    check_truncation(t.shape(), target)?;
    let factors = (0..t.shape.order())
        .map(|axis| {
            let scatter = t.unfold_axis(axis).gram();
            leading_eigenrows(&scatter, target.0[axis])
        })
        .collect::<Vec<_>>();
    let core = multilinear_map(t, &factors)?;
    Ok(Hosvd { core, factors })
}

pub(crate) fn check_truncation(source: &TensorShape, target: &TensorShape) -> Result<()> {
    if source.order() != target.order() {
        return Err(Error::DimensionMismatch(format!(
            "target {target} has a different order than {source}"
        )));
    }
    for (axis, (&s, &t)) in source.0.iter().zip(&target.0).enumerate() {
        if t > s {
            return Err(Error::TargetExceedsSource {
                mode: axis + 1,
                target: t,
                available: s,
            });
        }
    }
    Ok(())
}

/// Top-`count` eigenvectors of a symmetric PSD matrix, as rows.
///
/// Eigenvalues are ranked descending with ties kept in their original
/// order; each vector's largest-magnitude entry is made nonnegative.
pub fn leading_eigenrows(scatter: &FactorMatrix, count: usize) -> FactorMatrix {
    let n = scatter.rows;
    debug_assert_eq!(n, scatter.cols);
    debug_assert!(count <= n);
    let eig = SymmetricEigen::new(scatter.to_nalgebra());
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort: equal eigenvalues keep the earlier index
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = FactorMatrix::zeros(count, n);
    for (r, &idx) in order.iter().take(count).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out.data[r * n + i] = sign * col[i];
        }
    }
    out
}

/// 1-D area-averaging resampling matrix (`target × source`).
pub fn box_resample_matrix(source: usize, target: usize) -> FactorMatrix {
    // source pixel j covers [j*target, (j+1)*target), output bin i covers
    // [i*source, (i+1)*source) on the common integer grid
    let mut m = FactorMatrix::zeros(target, source);
    for i in 0..target {
        let (lo, hi) = (i * source, (i + 1) * source);
        for j in (lo / target)..source.min(hi.div_ceil(target)) {
            let overlap = hi.min((j + 1) * target).saturating_sub(lo.max(j * target));
            if overlap > 0 {
                m.data[i * source + j] = overlap as f64 / source as f64;
            }
        }
    }
    m
}

/// Area-average down-sampling; modes whose extent is unchanged pass through.
pub fn downsample(t: &DenseTensor, target: &TensorShape) -> Result<DenseTensor> {
    check_truncation(t.shape(), target)?;
    let mut out = t.clone();
    for axis in 0..target.order() {
        let (s, d) = (t.shape.0[axis], target.0[axis]);
        if s != d {
            out = out.mode_product_axis(&box_resample_matrix(s, d), axis);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(d: &[usize]) -> TensorShape {
        TensorShape::new(d.to_vec()).unwrap()
    }

    fn seq(d: &[usize]) -> DenseTensor {
        let s = shape(d);
        let data = (1..=s.numel()).map(|v| v as f64).collect();
        DenseTensor::new(s, data).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Scalar oracle for the mode product: nested loops over multi-indices.
    fn mode_product_oracle(t: &DenseTensor, a: &FactorMatrix, axis: usize) -> DenseTensor {
        let dims = t.dims().to_vec();
        let mut out_dims = dims.clone();
        out_dims[axis] = a.rows();
        let out_shape = shape(&out_dims);
        let mut out = vec![0.0; out_shape.numel()];
        let strides = |d: &[usize]| {
            let mut s = vec![1; d.len()];
            for i in (0..d.len() - 1).rev() {
                s[i] = s[i + 1] * d[i + 1];
            }
            s
        };
        let (si, so) = (strides(&dims), strides(&out_dims));
        for (flat, v) in out.iter_mut().enumerate() {
            let idx: Vec<usize> = (0..out_dims.len())
                .map(|m| flat / so[m] % out_dims[m])
                .collect();
            for j in 0..dims[axis] {
                let mut src = idx.clone();
                src[axis] = j;
                let off: usize = src.iter().zip(&si).map(|(a, b)| a * b).sum();
                *v += a.get(idx[axis], j) * t.data()[off];
            }
        }
        DenseTensor::new(out_shape, out).unwrap()
    }

    #[test]
    fn shape_rejects_empty_and_zero() {
        assert!(TensorShape::new(vec![]).is_err());
        assert!(TensorShape::new(vec![2, 0]).is_err());
        assert_eq!(shape(&[2, 3, 4]).numel(), 24);
    }

    #[test]
    fn unfold_matrix_is_itself() {
        let t = seq(&[2, 2]);
        let u = t.unfold(1).unwrap();
        assert_eq!(u, FactorMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    }

    #[test]
    fn unfold_mode3_rows_are_fibers() {
        // entry (i,j,l) = 1 + 4i + 2j + l
        let t = seq(&[2, 2, 2]);
        let u = t.unfold(3).unwrap();
        let expected =
            FactorMatrix::from_rows(&[&[1.0, 3.0, 5.0, 7.0], &[2.0, 4.0, 6.0, 8.0]]).unwrap();
        assert_eq!(u, expected);
    }

    #[test]
    fn unfold_rejects_bad_mode() {
        let t = seq(&[2, 2]);
        assert!(matches!(t.unfold(0), Err(Error::InvalidMode { .. })));
        assert!(matches!(t.unfold(3), Err(Error::InvalidMode { .. })));
    }

    #[test]
    fn fold_unfold_roundtrip() {
        let t = DenseTensor::gaussian(shape(&[3, 4, 2]), 1.0, &mut rng(1));
        for k in 1..=3 {
            let back = DenseTensor::fold(&t.unfold(k).unwrap(), t.shape(), k).unwrap();
            assert_eq!(back, t);
        }
    }

    #[test]
    fn mode_product_hand_examples() {
        let t = seq(&[2, 2]);
        let ones = FactorMatrix::from_rows(&[&[1.0, 1.0]]).unwrap();
        let a = t.mode_product(&ones, 1).unwrap();
        assert_eq!(a.dims(), &[1, 2]);
        assert_eq!(a.data(), &[4.0, 6.0]);
        let b = t.mode_product(&ones, 2).unwrap();
        assert_eq!(b.dims(), &[2, 1]);
        assert_eq!(b.data(), &[3.0, 7.0]);
    }

    #[test]
    fn mode_product_identity_is_bitwise_noop() {
        let t = DenseTensor::gaussian(shape(&[3, 4, 2]), 1.0, &mut rng(2));
        for k in 1..=3 {
            let eye = FactorMatrix::identity(t.dims()[k - 1]);
            assert_eq!(t.mode_product(&eye, k).unwrap(), t);
        }
    }

    #[test]
    fn mode_product_matches_unfolding_and_oracle() {
        let mut r = rng(3);
        let t = DenseTensor::gaussian(shape(&[3, 4, 2]), 1.0, &mut r);
        for k in 1..=3 {
            let a = FactorMatrix::gaussian(5, t.dims()[k - 1], 1.0, &mut r);
            let p = t.mode_product(&a, k).unwrap();
            let via_unfold = a.matmul(&t.unfold(k).unwrap()).unwrap();
            assert!(p.unfold(k).unwrap().max_abs_diff(&via_unfold) < 1e-12);
            let oracle = mode_product_oracle(&t, &a, k - 1);
            assert!(p.sq_dist(&oracle).sqrt() < 1e-12);
        }
    }

    #[test]
    fn mode_product_dimension_mismatch() {
        let t = seq(&[2, 3]);
        let a = FactorMatrix::identity(2);
        assert!(matches!(
            t.mode_product(&a, 2),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn multilinear_vector_case() {
        let y = DenseTensor::new(shape(&[3]), vec![1.0, 2.0, 3.0]).unwrap();
        let phi = FactorMatrix::from_rows(&[&[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]).unwrap();
        let z = multilinear_map(&y, &[phi]).unwrap();
        assert_eq!(z.data(), &[4.0, 2.0]);
    }

    #[test]
    fn multilinear_identity_and_errors() {
        let t = DenseTensor::gaussian(shape(&[3, 2, 2]), 1.0, &mut rng(4));
        let eyes: Vec<_> = t.dims().iter().map(|&d| FactorMatrix::identity(d)).collect();
        assert_eq!(multilinear_map(&t, &eyes).unwrap(), t);
        assert!(multilinear_map(&t, &eyes[..2]).is_err());
        let mut bad = eyes.clone();
        bad[1] = FactorMatrix::identity(3);
        assert!(multilinear_map(&t, &bad).is_err());
    }

    #[test]
    fn multilinear_order_independent() {
        let mut r = rng(5);
        let t = DenseTensor::gaussian(shape(&[3, 3, 2]), 1.0, &mut r);
        let fs: Vec<_> = [(2, 3), (4, 3), (3, 2)]
            .iter()
            .map(|&(m, n)| FactorMatrix::gaussian(m, n, 1.0, &mut r))
            .collect();
        let forward = multilinear_map(&t, &fs).unwrap();
        let shuffled = t
            .mode_product(&fs[2], 3)
            .unwrap()
            .mode_product(&fs[0], 1)
            .unwrap()
            .mode_product(&fs[1], 2)
            .unwrap();
        assert!(forward.sq_dist(&shuffled).sqrt() < 1e-12 * forward.frobenius_norm());
    }

    #[test]
    fn frobenius_examples() {
        let t = DenseTensor::new(shape(&[1, 2]), vec![3.0, 4.0]).unwrap();
        assert_eq!(frobenius_norm(&t), 5.0);
        assert_eq!(frobenius_norm(&DenseTensor::zeros(shape(&[2, 2]))), 0.0);
        let r = DenseTensor::gaussian(shape(&[4, 4, 2]), 1.0, &mut rng(6));
        let mut acc = 0.0;
        for i in 0..r.data().len() {
            acc += r.data()[i] * r.data()[i];
        }
        assert!((frobenius_norm(&r) - acc.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hosvd_full_target_is_exact() {
        let t = DenseTensor::gaussian(shape(&[5, 4, 3]), 1.0, &mut rng(7));
        let h = hosvd(&t, t.shape()).unwrap();
        let err = h.reconstruct().sq_dist(&t).sqrt() / t.frobenius_norm();
        assert!(err <= 1e-10, "relative error {err}");
    }

    #[test]
    fn hosvd_matrix_matches_truncated_svd() {
        let t = DenseTensor::gaussian(shape(&[5, 4]), 1.0, &mut rng(8));
        let h = hosvd(&t, &shape(&[2, 2])).unwrap();
        let hosvd_err = h.reconstruct().sq_dist(&t).sqrt();
        // independent oracle: direct SVD, sum of discarded squared singular values
        let svd = t.unfold(1).unwrap().to_nalgebra().svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let svd_err = sv[2..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!((hosvd_err - svd_err).abs() < 1e-10, "{hosvd_err} vs {svd_err}");
    }

    #[test]
    fn hosvd_rank_one_core() {
        let unit = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let u = unit(vec![1.0, 2.0, 2.0]);
        let v = unit(vec![3.0, -4.0]);
        let w = unit(vec![1.0, 1.0, 1.0, 1.0]);
        let mut data = Vec::new();
        for a in &u {
            for b in &v {
                for c in &w {
                    data.push(a * b * c);
                }
            }
        }
        let t = DenseTensor::new(shape(&[3, 2, 4]), data).unwrap();
        let h = hosvd(&t, &shape(&[1, 1, 1])).unwrap();
        assert!((h.core.data()[0].abs() - 1.0).abs() < 1e-12);
        assert!(h.reconstruct().sq_dist(&t).sqrt() < 1e-12);
    }

    #[test]
    fn hosvd_factor_rows_orthonormal_and_sign_fixed() {
        let t = DenseTensor::gaussian(shape(&[6, 5, 3]), 1.0, &mut rng(9));
        let h = hosvd(&t, &shape(&[3, 2, 2])).unwrap();
        for f in &h.factors {
            let g = f.gram();
            assert!(g.max_abs_diff(&FactorMatrix::identity(f.rows())) < 1e-10);
            for r in 0..f.rows() {
                let row = f.row(r);
                let pivot = row
                    .iter()
                    .copied()
                    .fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
                assert!(pivot >= 0.0);
            }
        }
    }

    #[test]
    fn hosvd_rejects_oversized_target() {
        let t = seq(&[2, 3]);
        assert!(matches!(
            hosvd(&t, &shape(&[3, 3])),
            Err(Error::TargetExceedsSource { mode: 1, .. })
        ));
    }

    #[test]
    fn downsample_examples() {
        let c = DenseTensor::filled(shape(&[6, 9, 3]), 0.37);
        let d = downsample(&c, &shape(&[4, 5, 3])).unwrap();
        assert_eq!(d.dims(), &[4, 5, 3]);
        assert!(d.data().iter().all(|v| (v - 0.37).abs() < 1e-12));

        let t = DenseTensor::gaussian(shape(&[4, 4, 2]), 1.0, &mut rng(10));
        assert_eq!(downsample(&t, t.shape()).unwrap(), t);

        let board: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let b = DenseTensor::new(shape(&[4, 4]), board).unwrap();
        let d = downsample(&b, &shape(&[2, 2])).unwrap();
        assert_eq!(d.data(), &[0.5; 4]);

        assert!(downsample(&b, &shape(&[5, 2])).is_err());
    }

    #[test]
    fn box_weights_partition_unity() {
        for (s, t) in [(32, 24), (32, 16), (7, 3), (5, 5), (256, 224)] {
            let m = box_resample_matrix(s, t);
            for r in 0..t {
                let sum: f64 = m.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "{s}->{t} row {r}: {sum}");
                assert!(m.row(r).iter().all(|&w| w >= 0.0));
            }
            // every source pixel is fully distributed
            let col_total: f64 = m.data().iter().sum();
            assert!((col_total - t as f64).abs() < 1e-9);
        }
    }
}
