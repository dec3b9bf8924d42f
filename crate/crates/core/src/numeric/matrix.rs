use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit floats.
///
/// No views or strides: a matrix owns its buffer and `data.len() == rows * cols`
/// always holds. Batches are stored one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::from_vec",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a new matrix of the same shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Clamp every entry to `max(entry, 0)`.
    pub fn clamp_nonnegative(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::add_assign",
                detail: format!(
                    "{}x{} += {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// Dense vector of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Self { data: vec![0.0; len] }
    }

    pub fn filled(len: usize, v: f64) -> Self {
        Self { data: vec![v; len] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn clamp_nonnegative(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

fn check_inner(op: &'static str, a: &Matrix, inner_a: usize, inner_b: usize, b: &Matrix) -> Result<()> {
    if inner_a != inner_b {
        return Err(Error::DimensionMismatch {
            op,
            detail: format!(
                "lhs {}x{}, rhs {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            ),
        });
    }
    Ok(())
}

/// One output row of `a * b`: `row += a[i,:] * b` accumulated rank-1 style,
/// so the inner loop runs over contiguous rows of `b`.
#[inline]
fn matmul_row(a_row: &[f64], b: &Matrix, out_row: &mut [f64]) {
    for (l, &alk) in a_row.iter().enumerate() {
        if alk != 0.0 {
            let b_row = b.row(l);
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += alk * bv;
            }
        }
    }
}

/// Standard matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul", a, a.cols, b.rows, b)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    let width = b.cols;
    super::for_each_row(&mut out.data, width, a.cols * b.cols, |i, row| {
        matmul_row(a.row(i), b, row);
    });
    Ok(out)
}

/// Sequential matrix product, identical kernel to [`matmul`] without the
/// thread pool. Kept public so benchmarks can compare the two directly.
pub fn matmul_seq(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul", a, a.cols, b.rows, b)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        matmul_row(a.row(i), b, out.row_mut(i));
    }
    Ok(out)
}

/// `a * b^T`: dot products of contiguous rows.
pub fn matmul_tr(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul_tr", a, a.cols, b.cols, b)?;
    let mut out = Matrix::zeros(a.rows, b.rows);
    let width = b.rows;
    super::for_each_row(&mut out.data, width, a.cols * b.rows, |i, row| {
        let a_row = a.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = b.row(j);
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    });
    Ok(out)
}

/// `a^T * b`, materialized via an explicit transpose of `a`.
pub fn matmul_tl(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul_tl", a, a.rows, b.rows, b)?;
    matmul(&a.transpose(), b)
}

/// Solve the dense square system `a * x = rhs` by Gaussian elimination with
/// partial pivoting. Used as the direct fallback for small adjoint systems.
pub fn solve_dense(a: &Matrix, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || rhs.len() != n {
        return Err(Error::DimensionMismatch {
            op: "solve_dense",
            detail: format!("matrix {}x{}, rhs {}", a.rows(), a.cols(), rhs.len()),
        });
    }
    let mut m = a.data.clone();
    let mut x = rhs.to_vec();
    for col in 0..n {
        let mut piv = col;
        let mut best = m[col * n + col].abs();
        for r in col + 1..n {
            let v = m[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return Err(Error::NonConvergence("singular system in direct solve".into()));
        }
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
            }
            x.swap(col, piv);
        }
        let d = m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] / d;
            if f != 0.0 {
                for j in col..n {
                    m[r * n + j] -= f * m[col * n + j];
                }
                x[r] -= f * x[col];
            }
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for j in col + 1..n {
            s -= m[col * n + j] * x[j];
        }
        x[col] = s / m[col * n + col];
    }
    Ok(x)
}
