use std::fmt;

use super::TensorError;

/// Dense row-major array of `f64` values.
///
/// Vectors have shape `[n]`, matrices `[rows, cols]`, scalars `[1]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows, cols]` matrix; panics on ragged input.
    pub fn matrix(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "empty matrix");
        let cols = rows[0].len();
        assert!(cols > 0 && rows.iter().all(|r| r.len() == cols), "ragged matrix");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count when viewed as a matrix (vectors are a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count when viewed as a matrix.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?} ...", &self.data[..16])
        }
    }
}

/// `a[m×k] · b[k×n]`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(a_row, b_row);
        }
    }
    out
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3×2
        let ab = gemm(&a, &b, 2, 3, 2);
        assert_eq!(ab, vec![58.0, 64.0, 139.0, 154.0]);
        // bᵀ stored as 2×3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(gemm_nt(&a, &bt, 2, 3, 2), ab);
        // aᵀ stored as 3×2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(gemm_tn(&at, &b, 3, 2, 2), ab);
    }
}
