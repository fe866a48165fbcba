//! Dense real64 kernels used throughout the crate.
//!
//! Everything here is a pure function of its inputs. Vectors are plain
//! slices; [`Matrix`] is a row-major owned buffer.

use crate::error::{Error, Result};

/// RMSNorm epsilon. Fixed so that stored test values stay bit-stable.
pub const RMS_EPS: f64 = 1e-6;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from a generator called in row-major order.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `out = self · x`
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// `out += selfᵀ · y`
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), out);
            }
        }
    }

    /// `self += a ⊗ b`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar != 0.0 {
                axpy(ar, b, self.row_mut(r));
            }
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "t_matmul: {} rows vs {} rows",
                self.rows, other.rows
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            out.add_outer(self.row(r), other.row(r));
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                axpy(a, other.row(k), dst);
            }
        }
        Ok(out)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Subtract each column's mean in place.
    pub fn center_columns(&mut self) {
        if self.rows == 0 {
            return;
        }
        let mut mean = vec![0.0; self.cols];
        for r in 0..self.rows {
            axpy(1.0, self.row(r), &mut mean);
        }
        let inv = 1.0 / self.rows as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        for r in 0..self.rows {
            axpy(-1.0, &mean, self.row_mut(r));
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a·x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

#[inline]
fn rms(x: &[f64]) -> f64 {
    (dot(x, x) / x.len() as f64 + RMS_EPS).sqrt()
}

/// `y_i = scale_i · x_i / sqrt(mean(x²) + ε)`
pub fn rmsnorm(x: &[f64], scale: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    rmsnorm_into(x, scale, &mut out)?;
    Ok(out)
}

pub fn rmsnorm_into(x: &[f64], scale: &[f64], out: &mut [f64]) -> Result<()> {
    if x.is_empty() || x.len() != scale.len() || out.len() != x.len() {
        return Err(Error::Shape(format!(
            "rmsnorm: x has {} dims, scale {}, out {}",
            x.len(),
            scale.len(),
            out.len()
        )));
    }
    let inv = 1.0 / rms(x);
    for ((o, &xi), &si) in out.iter_mut().zip(x).zip(scale) {
        *o = si * xi * inv;
    }
    Ok(())
}

/// Backward pass of [`rmsnorm`]: accumulates into `dx` and `dscale`.
pub fn rmsnorm_backward(x: &[f64], scale: &[f64], dy: &[f64], dx: &mut [f64], dscale: &mut [f64]) {
    let n = x.len();
    let r = rms(x);
    let inv = 1.0 / r;
    let mut gx = 0.0;
    for i in 0..n {
        dscale[i] += dy[i] * x[i] * inv;
        gx += dy[i] * scale[i] * x[i];
    }
    let coef = gx / (n as f64 * r * r * r);
    for i in 0..n {
        dx[i] += dy[i] * scale[i] * inv - x[i] * coef;
    }
}

/// Logistic sigmoid, evaluated without overflow for any finite input.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Depthwise causal convolution over the time axis.
///
/// `u` is `time × dim`, `kernels` is `ksize × dim`, and
/// `y[t,d] = Σ_j kernels[j,d] · u[t-(k-1)+j, d]` with zero left padding.
pub fn depthwise_causal_conv(u: &Matrix, kernels: &Matrix) -> Result<Matrix> {
    if kernels.rows() < 1 {
        return Err(Error::Config("conv kernel size must be >= 1".into()));
    }
    if kernels.cols() != u.cols() {
        return Err(Error::Shape(format!(
            "conv: {} channels in input, {} in kernels",
            u.cols(),
            kernels.cols()
        )));
    }
    let mut y = Matrix::zeros(u.rows(), u.cols());
    conv_acc(u.as_slice(), u.rows(), kernels, y.as_mut_slice());
    Ok(y)
}

/// `y += conv(u)` on raw `time × dim` buffers. Shapes are the caller's
/// responsibility.
pub(crate) fn conv_acc(u: &[f64], time: usize, kernels: &Matrix, y: &mut [f64]) {
    let ks = kernels.rows();
    let dim = kernels.cols();
    for t in 0..time {
        let yt = &mut y[t * dim..(t + 1) * dim];
        for j in 0..ks {
            let shift = ks - 1 - j;
            if shift > t {
                continue;
            }
            let src = &u[(t - shift) * dim..(t - shift + 1) * dim];
            for ((yd, &kd), &ud) in yt.iter_mut().zip(kernels.row(j)).zip(src) {
                *yd += kd * ud;
            }
        }
    }
}

/// Backward of [`conv_acc`]: given `dy`, accumulates `du` and `dkernels`.
pub(crate) fn conv_backward_acc(
    u: &[f64],
    time: usize,
    kernels: &Matrix,
    dy: &[f64],
    du: &mut [f64],
    dkernels: &mut Matrix,
) {
    let ks = kernels.rows();
    let dim = kernels.cols();
    for t in 0..time {
        let dyt = &dy[t * dim..(t + 1) * dim];
        for j in 0..ks {
            let shift = ks - 1 - j;
            if shift > t {
                continue;
            }
            let s = t - shift;
            let src = &u[s * dim..(s + 1) * dim];
            let dsrc = &mut du[s * dim..(s + 1) * dim];
            let kj = kernels.row(j);
            for d in 0..dim {
                dsrc[d] += kj[d] * dyt[d];
            }
            let dk = dkernels.row_mut(j);
            for d in 0..dim {
                dk[d] += dyt[d] * src[d];
            }
        }
    }
}

/// Maximum relative error between central finite differences of `f` at
/// `theta` and the supplied analytic `grad`:
/// `max_i |fd_i − grad_i| / (|grad_i| + 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, theta: &[f64], grad: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("finite difference step {h} must be > 0")));
    }
    if theta.len() != grad.len() {
        return Err(Error::Shape(format!(
            "theta has {} entries, grad {}",
            theta.len(),
            grad.len()
        )));
    }
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let fp = f(&probe);
        probe[i] = theta[i] - h;
        let fm = f(&probe);
        probe[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / (grad[i].abs() + 1e-8));
    }
    Ok(worst)
}
