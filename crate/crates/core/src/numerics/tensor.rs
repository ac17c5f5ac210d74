use serde::{Deserialize, Serialize};

use super::parallel;
use super::NumericsError;

/// Dense row-major tensor of 64-bit reals.
///
/// Most of the stack works with rank-2 tensors; feature streams use rank 3
/// (frames × tokens × dim). Vectors are represented as `1 × n` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::Shape(format!(
                "shape {shape:?} needs {expected} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; all rows must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::Shape("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NumericsError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self, NumericsError> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(NumericsError::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rounds every entry through `f32`, used by the reduced-precision
    /// inference mode.
    pub fn round_to_f32(&self) -> Self {
        self.map(|v| v as f32 as f64)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Stacks equal-width rank-2 tensors vertically.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self, NumericsError> {
        let cols = parts
            .first()
            .map(|p| p.cols())
            .ok_or_else(|| NumericsError::Shape("concat of zero tensors".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.shape.len() != 2 || p.cols() != cols {
                return Err(NumericsError::Shape(format!(
                    "concat_rows width mismatch: {:?} vs {cols}",
                    p.shape
                )));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::matrix(rows, cols, data)
    }
}

fn check_rank2(t: &Tensor, what: &str) -> Result<(), NumericsError> {
    if t.shape.len() != 2 {
        return Err(NumericsError::Shape(format!(
            "{what} expects a matrix, got shape {:?}",
            t.shape
        )));
    }
    Ok(())
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    check_rank2(a, "matmul")?;
    check_rank2(b, "matmul")?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(NumericsError::Shape(format!(
            "matmul inner dimensions differ: {m}×{k} · {k2}×{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    let work = m * k * n;
    parallel::for_each_row(&mut out, n, work, |i, row| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    Tensor::matrix(m, n, out)?.ensure_finite("matmul")
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    check_rank2(a, "matmul_nt")?;
    check_rank2(b, "matmul_nt")?;
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(NumericsError::Shape(format!(
            "matmul_nt inner dimensions differ: {m}×{k} · ({n}×{k2})ᵀ"
        )));
    }
    let mut out = vec![0.0; m * n];
    parallel::for_each_row(&mut out, n, m * k * n, |i, row| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b.data[j * k..(j + 1) * k];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    });
    Tensor::matrix(m, n, out)?.ensure_finite("matmul_nt")
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    check_rank2(a, "matmul_tn")?;
    check_rank2(b, "matmul_tn")?;
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(NumericsError::Shape(format!(
            "matmul_tn inner dimensions differ: ({k}×{m})ᵀ · {k2}×{n}"
        )));
    }
    matmul(&a.transpose(), b)
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, NumericsError> {
    check_rank2(x, "softmax_rows")?;
    if !x.is_finite() {
        return Err(NumericsError::NonFinite { op: "softmax_rows" });
    }
    let cols = x.cols();
    let mut out = x.data.clone();
    for row in out.chunks_mut(cols.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

const GELU_C: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn prelu_scalar(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn prelu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| prelu_scalar(v, slope))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_is_noop() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.5]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(3), &x).unwrap(), x);
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(NumericsError::Shape(_))));
    }

    #[test]
    fn transposed_products_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 1.5, -1.0]).unwrap();
        let b = Tensor::matrix(4, 3, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let direct = matmul(&a, &b.transpose()).unwrap();
        assert_eq!(matmul_nt(&a, &b).unwrap(), direct);
        let c = Tensor::matrix(2, 4, (0..8).map(|v| v as f64).collect()).unwrap();
        assert_eq!(matmul_tn(&a, &c).unwrap(), matmul(&a.transpose(), &c).unwrap());
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::row_vector(vec![0.7; 5]);
        for v in softmax_rows(&x).unwrap().data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let y = softmax_rows(&Tensor::row_vector(vec![0.0, 3f64.ln()])).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::row_vector(vec![0.0, f64::NAN]);
        assert!(matches!(softmax_rows(&x), Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn activation_spot_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert_eq!(prelu_scalar(-2.0, 0.25), -0.5);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(prelu_scalar(1.5, 0.25), 1.5);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }
}
