//! Dense n-dimensional tensors and the scalar types the network runs on.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use super::NeuralError;

/// Floating-point element type. `f32` for training, `f64` for gradient checks.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    /// `C ← α·A·B + β·C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// All pointers must be valid for the extents implied by the
    /// dimensions and strides.
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

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Storage order of a matrix operand inside a flat slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Row-major `rows × cols`.
    RowMajor,
    /// The slice holds the row-major transpose (`cols × rows`).
    Transposed,
}

impl Layout {
    fn strides(self, rows: usize, cols: usize) -> (isize, isize) {
        match self {
            Layout::RowMajor => (cols as isize, 1),
            Layout::Transposed => (1, rows as isize),
        }
    }
}

/// `C[m×n] ← A[m×k]·B[k×n] + β·C` on flat slices; `C` is row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_layout: Layout,
    b: &[T],
    b_layout: Layout,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: A too short");
    assert!(b.len() >= k * n, "gemm: B too short");
    assert!(c.len() >= m * n, "gemm: C too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a_layout.strides(m, k);
    let (rsb, csb) = b_layout.strides(k, n);
    // SAFETY: the length asserts above cover every index the strides reach.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A dense tensor. Activations use `(N, C, H, W)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, NeuralError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NeuralError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
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

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), NeuralError> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(NeuralError::ShapeMismatch(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Converts element type, e.g. to run a network in `f64` check mode.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }

    /// Concatenates two rank-4 tensors along the channel axis.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
        let (na, ca, ha, wa) = a.dims4()?;
        let (nb, cb, hb, wb) = b.dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(NeuralError::ShapeMismatch(format!(
                "cannot concatenate {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(a.len() + b.len());
        for n in 0..na {
            data.extend_from_slice(&a.data[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&b.data[n * cb * plane..(n + 1) * cb * plane]);
        }
        Ok(Tensor {
            shape: vec![na, ca + cb, ha, wa],
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: splits off the first `c_first` channels.
    pub fn split_channels(&self, c_first: usize) -> Result<(Tensor<T>, Tensor<T>), NeuralError> {
        let (n, c, h, w) = self.dims4()?;
        if c_first > c {
            return Err(NeuralError::ShapeMismatch(format!(
                "cannot split {c_first} channels from {:?}",
                self.shape
            )));
        }
        let plane = h * w;
        let c_second = c - c_first;
        let mut first = Vec::with_capacity(n * c_first * plane);
        let mut second = Vec::with_capacity(n * c_second * plane);
        for i in 0..n {
            let base = i * c * plane;
            first.extend_from_slice(&self.data[base..base + c_first * plane]);
            second.extend_from_slice(&self.data[base + c_first * plane..base + c * plane]);
        }
        Ok((
            Tensor {
                shape: vec![n, c_first, h, w],
                data: first,
            },
            Tensor {
                shape: vec![n, c_second, h, w],
                data: second,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                naive[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, Layout::RowMajor, &b, Layout::RowMajor, 0.0, &mut c);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![1.0; m * n];
        gemm(m, k, n, &at, Layout::Transposed, &bt, Layout::Transposed, 1.0, &mut c2);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::<f32>::from_vec(&[2, 1, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let b = Tensor::<f32>::from_vec(&[2, 2, 2, 2], (0..16).map(|v| -(v as f32)).collect()).unwrap();
        let cat = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), &[2, 3, 2, 2]);
        assert_eq!(&cat.data()[..4], &a.data()[..4]);
        assert_eq!(&cat.data()[4..12], &b.data()[..8]);
        let (a2, b2) = cat.split_channels(1).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }
}
