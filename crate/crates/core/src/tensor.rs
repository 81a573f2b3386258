//! Dense row-major matrices over a [`Real`] scalar.
//!
//! Sized for desk scale (sequence lengths ≤ 256, feature widths ≤ 768),
//! so everything is a flat `Vec` with explicit loops. The three matmul
//! variants exist because backward passes need `AᵀB` and `ABᵀ` without
//! materializing transposes.

use crate::num::{real, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<R: Real> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
}

impl<R: Real> Matrix<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    /// Builds from a flat row-major vector; panics if the length disagrees.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<R>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> R {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: R) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self @ other`
    pub fn matmul(&self, other: &Matrix<R>) -> Matrix<R> {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == R::zero() {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ @ other` — the `dW += xᵀ·dy` shape in backward passes.
    pub fn matmul_at_b(&self, other: &Matrix<R>) -> Matrix<R> {
        assert_eq!(self.rows, other.rows, "matmul_at_b outer dims");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == R::zero() {
                    continue;
                }
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self @ otherᵀ` — the `dx = dy·Wᵀ` shape in backward passes.
    pub fn matmul_a_bt(&self, other: &Matrix<R>) -> Matrix<R> {
        assert_eq!(self.cols, other.cols, "matmul_a_bt inner dims");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let brow = other.row(j);
                let mut acc = R::zero();
                for (&a, &b) in arow.iter().zip(brow) {
                    acc += a * b;
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix<R>) -> Matrix<R> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add dims");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<R>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add dims");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: R) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Matrix<R> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, v: R) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn max_abs_diff(&self, other: &Matrix<R>) -> R {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(R::zero(), R::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product of two equal-length slices.
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm<R: Real>(a: &[R]) -> R {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero-norm vectors compare as 0.
pub fn cosine<R: Real>(a: &[R], b: &[R]) -> R {
    let na = norm(a);
    let nb = norm(b);
    if na == R::zero() || nb == R::zero() {
        return R::zero();
    }
    dot(a, b) / (na * nb)
}

/// In-place numerically stable softmax.
pub fn softmax_inplace<R: Real>(x: &mut [R]) {
    let max = x.iter().cloned().fold(R::neg_infinity(), R::max);
    let mut sum = R::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Normalizes a row to unit RMS: `y = x / sqrt(mean(x²) + eps)`.
/// Returns the reciprocal factor needed by [`rmsnorm_backward`].
pub fn rmsnorm<R: Real>(x: &[R], out: &mut [R]) -> R {
    let n = real::<R>(x.len() as f64);
    let ms = dot(x, x) / n;
    let ri = (ms + real::<R>(RMSNORM_EPS)).sqrt().recip();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v * ri;
    }
    ri
}

pub const RMSNORM_EPS: f64 = 1e-6;

/// Backward of [`rmsnorm`] given upstream `dy`, the original input `x`,
/// and the cached reciprocal factor.
pub fn rmsnorm_backward<R: Real>(dy: &[R], x: &[R], ri: R, dx: &mut [R]) {
    let n = real::<R>(x.len() as f64);
    let proj = dot(dy, x);
    let k = ri * ri * ri / n;
    for ((d, &g), &v) in dx.iter_mut().zip(dy).zip(x) {
        *d += ri * g - k * proj * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_variants_agree_with_direct() {
        let a = Matrix::from_vec(2, 3, vec![1.0, -2.0, 0.5, 4.0, 5.0, -6.0]);
        let b = Matrix::from_vec(2, 4, vec![1.0, 0.0, 2.0, 1.0, -1.0, 3.0, 0.5, 2.0]);
        // aᵀ b computed by explicit transpose
        let mut at = Matrix::zeros(3, 2);
        for i in 0..2 {
            for j in 0..3 {
                at.set(j, i, a.get(i, j));
            }
        }
        let expect = at.matmul(&b);
        assert_eq!(a.matmul_at_b(&b), expect);

        let c = Matrix::from_vec(5, 3, vec![0.25; 15]);
        let mut ct = Matrix::zeros(3, 5);
        for i in 0..5 {
            for j in 0..3 {
                ct.set(j, i, c.get(i, j));
            }
        }
        assert_eq!(a.matmul_a_bt(&c), a.matmul(&ct));
    }

    #[test]
    fn softmax_sums_to_one_and_positive() {
        let mut x = vec![1.0f64, -2.0, 0.3, 9.0];
        softmax_inplace(&mut x);
        let s: f64 = x.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(x.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn cosine_zero_norm_is_zero() {
        let z = [0.0f64; 3];
        let v = [1.0, 2.0, 3.0];
        assert_eq!(cosine(&z, &v), 0.0);
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rmsnorm_backward_matches_finite_difference() {
        let x = [0.7f64, -1.3, 2.1, 0.05];
        let dy = [0.3f64, -0.2, 1.0, 0.6];
        let mut out = vec![0.0; 4];
        let ri = rmsnorm(&x, &mut out);
        let mut dx = vec![0.0; 4];
        rmsnorm_backward(&dy, &x, ri, &mut dx);

        let f = |x: &[f64]| {
            let mut o = vec![0.0; 4];
            rmsnorm(x, &mut o);
            dot(&dy, &o)
        };
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!(
                (num - dx[i]).abs() < 1e-7,
                "component {i}: analytic {} vs numeric {}",
                dx[i],
                num
            );
        }
    }
}
