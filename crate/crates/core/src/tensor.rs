//! Dense row-major tensors that own their buffers and report to the ledger.

use std::fmt::{self, Debug, Display};
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{self, Category};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "float32" => Ok(DType::F32),
            "f64" | "float64" => Ok(DType::F64),
            other => Err(Error::Config(format!("unknown dtype `{other}`"))),
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Scalar types a tensor can hold.
pub trait Element: Float + Default + Debug + Display + Send + Sync + 'static {
    const DTYPE: DType;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a @ b + beta * c` over strided views.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds `m×k`, `k×n` and `m×n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A read-only strided matrix view over a slice.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Element> MatRef<'a, T> {
    /// Row-major `rows × cols` view.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `c = alpha * a @ b + beta * c`, with `c` row-major and contiguous.
pub fn gemm<T: Element>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    // SAFETY: the views were bounds-checked at construction and `c` is a
    // distinct mutable slice of at least m*n elements.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense tensor owning its buffer. Creation and drop are ledger events.
pub struct Tensor<T: Element> {
    shape: Vec<usize>,
    data: Vec<T>,
    id: u64,
    category: Category,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>, category: Category) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::dim("from_vec", shape, &[data.len()]));
        }
        let id = next_id();
        ledger::on_alloc(id, (data.len() * T::DTYPE.size_bytes()) as u64, category);
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            id,
            category,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>, category: Category) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let id = next_id();
        ledger::on_alloc(id, (data.len() * T::DTYPE.size_bytes()) as u64, category);
        Tensor {
            shape,
            data,
            id,
            category,
        }
    }

    pub fn zeros(shape: &[usize], category: Category) -> Self {
        Self::full(shape, T::zero(), category)
    }

    pub fn full(shape: &[usize], value: T, category: Category) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)], category)
    }

    pub fn scalar(value: T, category: Category) -> Self {
        Self::from_parts(Vec::new(), vec![value], category)
    }

    pub fn from_f64(shape: &[usize], values: &[f64], category: Category) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| T::of(v)).collect(), category)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dims(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn category(&self) -> Category {
        self.category
    }

    pub fn bytes(&self) -> u64 {
        (self.data.len() * T::DTYPE.size_bytes()) as u64
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Same buffer contents under a new id and category.
    pub fn copy_as(&self, category: Category) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone(), category)
    }

    /// `self` if already in `category`, otherwise a copy under it.
    pub fn into_category(self, category: Category) -> Self {
        if self.category == category {
            self
        } else {
            self.copy_as(category)
        }
    }

    /// Reinterpret the shape; the element count must be unchanged.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, category: Category, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            category,
        )
    }

    pub fn zip_map(&self, other: &Self, category: Category, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("elementwise", &self.shape, &other.shape));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            category,
        ))
    }

    /// `self += alpha * other`.
    pub fn axpy_inplace(&mut self, alpha: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("axpy", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    pub fn scale_inplace(&mut self, c: T) {
        for v in self.data.iter_mut() {
            *v = *v * c;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batched contraction `[.., m, k] @ [k, n]` or `[.., m, k] @ [.., k, n]`.
    pub fn matmul(&self, other: &Self, category: Category) -> Result<Self> {
        let err = || Error::dim("matmul", &self.shape, &other.shape);
        if self.dims() < 2 || other.dims() < 2 {
            return Err(err());
        }
        let (m, k) = (self.shape[self.dims() - 2], self.shape[self.dims() - 1]);
        let (k2, n) = (other.shape[other.dims() - 2], other.shape[other.dims() - 1]);
        if k != k2 {
            return Err(err());
        }
        let lead = &self.shape[..self.dims() - 2];
        let batches = numel(lead);
        let shared = other.dims() == 2;
        if !shared && other.shape[..other.dims() - 2] != *lead {
            return Err(err());
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); batches * m * n];
        if shared {
            // one big gemm over the flattened leading axes
            gemm(
                T::one(),
                MatRef::new(&self.data, batches * m, k),
                MatRef::new(&other.data, k, n),
                T::zero(),
                &mut out,
            );
        } else {
            for bi in 0..batches {
                gemm(
                    T::one(),
                    MatRef::new(&self.data[bi * m * k..], m, k),
                    MatRef::new(&other.data[bi * k * n..], k, n),
                    T::zero(),
                    &mut out[bi * m * n..],
                );
            }
        }
        Ok(Self::from_parts(shape, out, category))
    }
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        self.copy_as(self.category)
    }
}

impl<T: Element> Drop for Tensor<T> {
    fn drop(&mut self) {
        ledger::on_free(self.id);
    }
}

impl<T: Element> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .field("category", &self.category)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Element> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Largest relative deviation `|a-b| / max(|b|, floor)` over two buffers.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Relative error of two buffers in the Euclidean norm.
pub fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let base: f64 = b.iter().map(|y| y * y).sum();
    if base == 0.0 {
        diff.sqrt()
    } else {
        (diff / base).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v, Category::Scratch).unwrap()
    }

    fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[i * k + l] * b[l * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn identity_matmul() {
        let i2 = t64(&[2, 2], &[1., 0., 0., 1.]);
        let b = t64(&[2, 2], &[3., 4., 5., 6.]);
        let c = i2.matmul(&b, Category::Scratch).unwrap();
        assert_eq!(c.to_f64_vec(), vec![3., 4., 5., 6.]);
    }

    #[test]
    fn row_times_column() {
        let a = t64(&[1, 2], &[1., 2.]);
        let b = t64(&[2, 1], &[3., 4.]);
        assert_eq!(a.matmul(&b, Category::Scratch).unwrap().to_f64_vec(), vec![11.]);
    }

    #[test]
    fn random_matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(7);
        let a: Vec<f64> = (0..20).map(|_| rng.gaussian()).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.gaussian()).collect();
        let c = t64(&[4, 5], &a)
            .matmul(&t64(&[5, 3], &b), Category::Scratch)
            .unwrap();
        let want = triple_loop(&a, &b, 4, 5, 3);
        let diff = c
            .to_f64_vec()
            .iter()
            .zip(&want)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "max abs diff {diff}");
    }

    #[test]
    fn batched_matmul_both_forms() {
        let mut rng = SeededRng::new(3);
        let a: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gaussian()).collect();
        let b: Vec<f64> = (0..2 * 4 * 2).map(|_| rng.gaussian()).collect();
        let c = t64(&[2, 3, 4], &a)
            .matmul(&t64(&[2, 4, 2], &b), Category::Scratch)
            .unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        for bi in 0..2 {
            let want = triple_loop(&a[bi * 12..], &b[bi * 8..], 3, 4, 2);
            for (x, y) in c.data()[bi * 6..bi * 6 + 6].iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let shared = t64(&[2, 3, 4], &a)
            .matmul(&t64(&[4, 2], &b[..8]), Category::Scratch)
            .unwrap();
        let want = triple_loop(&a, &b[..8], 6, 4, 2);
        assert!(max_rel_err(&shared.to_f64_vec(), &want, 1e-12) < 1e-12);
    }

    #[test]
    fn mismatched_matmul_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3], Category::Scratch);
        let b = Tensor::<f64>::zeros(&[4, 2], Category::Scratch);
        let err = a.matmul(&b, Category::Scratch).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3], Category::Scratch).is_err());
        let s = Tensor::<f32>::scalar(1.5, Category::Scratch);
        assert_eq!(s.len(), 1);
        assert!(s.shape().is_empty());
    }

    #[test]
    fn transposed_views() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let mut c = [0.0; 4];
        gemm(1.0, MatRef::new(&a, 2, 3), MatRef::new(&a, 2, 3).t(), 0.0, &mut c);
        assert_eq!(c, [14.0, 32.0, 32.0, 77.0]);
    }
}
