//! Dense solves shared by the regression methods.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Diagonal jitter ladder, relative to the mean diagonal.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Lower Cholesky factor of an SPD matrix plus the jitter that was needed.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    pub l: DMatrix<f64>,
    pub jitter: f64,
}

pub fn cholesky_jitter(k: &DMatrix<f64>) -> Result<SpdFactor> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel matrix".into()));
    }
    if let Some(c) = k.clone().cholesky() {
        return Ok(SpdFactor { l: c.l(), jitter: 0.0 });
    }
    let n = k.nrows();
    let scale = if n == 0 { 1.0 } else { (k.trace() / n as f64).abs().max(f64::MIN_POSITIVE) };
    let mut last = 0.0;
    for j in JITTER_LADDER {
        last = j * scale;
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += last;
        }
        if let Some(c) = kj.cholesky() {
            return Ok(SpdFactor { l: c.l(), jitter: last });
        }
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}

impl SpdFactor {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        solve_with_l(&self.l, b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let z = self.l.solve_lower_triangular(b).expect("non-singular factor");
        self.l.tr_solve_lower_triangular(&z).expect("non-singular factor")
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_mat(&DMatrix::identity(self.l.nrows(), self.l.nrows()))
    }
}

pub(crate) fn solve_with_l(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let z = l.solve_lower_triangular(b).expect("non-singular factor");
    l.tr_solve_lower_triangular(&z).expect("non-singular factor")
}

/// `argmin ‖x w − y‖² + λ‖w‖²` by SVD. With `λ = 0` a rank-deficient `x`
/// is an error.
pub fn ridge_solve(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let p = x.ncols();
    if x.nrows() == 0 || p == 0 {
        return Ok(DVector::zeros(p));
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let s = &svd.singular_values;
    let smax = s.max();
    let tol = smax * f64::EPSILON * x.nrows().max(p) as f64;
    let rank = s.iter().filter(|v| **v > tol).count();
    if lambda == 0.0 && rank < p {
        return Err(Error::RankDeficient);
    }
    let uty = u.transpose() * y;
    let mut coef = DVector::zeros(s.len());
    for i in 0..s.len() {
        let si = s[i];
        if si > tol || lambda > 0.0 {
            coef[i] = si / (si * si + lambda) * uty[i];
        }
    }
    Ok(vt.transpose() * coef)
}

pub(crate) fn column_means(x: &DMatrix<f64>) -> Vec<f64> {
    (0..x.ncols())
        .map(|j| crate::stats::mean(&x.column(j).iter().copied().collect::<Vec<_>>()))
        .collect()
}

pub(crate) fn center_columns(x: &DMatrix<f64>, means: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - means[j])
}
