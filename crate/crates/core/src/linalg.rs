//! Small dense linear-algebra helpers shared by the GLM and MSM fitters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative threshold on the diagonal of R below which a design is treated as
/// rank deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Thin QR factorization of `diag(sqrt(w)) X`.
pub struct WeightedQr {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    sqrt_w: DVector<f64>,
}

impl WeightedQr {
    pub fn new(x: &DMatrix<f64>, w: &DVector<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        if w.len() != n {
            return Err(Error::Dimension(format!(
                "{} weights for {} design rows",
                w.len(),
                n
            )));
        }
        if n < p {
            return Err(Error::RankDeficient(format!(
                "{n} observations for {p} regressors"
            )));
        }
        let sqrt_w = w.map(f64::sqrt);
        let mut xw = x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= sqrt_w[i];
        }
        let qr = xw.qr();
        let q = qr.q();
        let r = qr.r();
        let scale = r.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for k in 0..p {
            if !(r[(k, k)].abs() > RANK_TOL * scale) {
                return Err(Error::RankDeficient(format!("column {k} is collinear")));
            }
        }
        Ok(Self { q, r, sqrt_w })
    }

    /// Weighted least-squares coefficients for response `y`.
    pub fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        let yw = y.component_mul(&self.sqrt_w);
        let qty = self.q.tr_mul(&yw);
        self.r
            .solve_upper_triangular(&qty)
            .expect("R diagonal checked at construction")
    }

    /// `(X' W X)^{-1}`.
    pub fn xtwx_inverse(&self) -> DMatrix<f64> {
        let p = self.r.nrows();
        let r_inv = self
            .r
            .solve_upper_triangular(&DMatrix::identity(p, p))
            .expect("R diagonal checked at construction");
        &r_inv * r_inv.transpose()
    }
}

pub fn weighted_least_squares(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(WeightedQr::new(x, w)?.solve(y))
}

/// Symmetrize in place, averaging off-diagonal pairs.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn weighted_mean(x: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let sw: f64 = w.sum();
    x.dot(w) / sw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_deficient_design_is_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let w = DVector::from_element(3, 1.0);
        assert!(matches!(
            WeightedQr::new(&x, &w),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn inverse_matches_direct() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let w = DVector::from_vec(vec![1.0, 1.0, 1.0, 2.0]);
        let qr = WeightedQr::new(&x, &w).unwrap();
        let xtwx = x.transpose() * DMatrix::from_diagonal(&w) * &x;
        let prod = xtwx * qr.xtwx_inverse();
        assert!((prod - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
    }
}
