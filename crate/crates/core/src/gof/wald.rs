use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::gamma_ur;

use crate::error::GofError;

/// Upper-tail probability of the chi-squared distribution with `df`
/// degrees of freedom.
pub fn chi2_survival(x: f64, df: usize) -> f64 {
    assert!(df >= 1, "chi-squared needs at least one degree of freedom");
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(df as f64 / 2.0, x / 2.0).clamp(0.0, 1.0)
}

/// `W = γ̂ᵀ V⁻¹ γ̂` by a linear solve, with `df = len(γ̂)`.
pub fn wald_statistic(gamma_hat: &[f64], gamma_cov: &DMatrix<f64>) -> Result<(f64, usize), GofError> {
    let q = gamma_hat.len();
    if gamma_cov.nrows() != q || gamma_cov.ncols() != q {
        return Err(GofError::DimensionMismatch {
            gamma: q,
            rows: gamma_cov.nrows(),
            cols: gamma_cov.ncols(),
        });
    }
    if gamma_cov.iter().any(|v| !v.is_finite()) {
        return Err(GofError::SingularCovariance);
    }
    let g = DVector::from_column_slice(gamma_hat);
    let sol = gamma_cov.clone().lu().solve(&g).ok_or(GofError::SingularCovariance)?;
    let w = g.dot(&sol);
    if !w.is_finite() {
        return Err(GofError::SingularCovariance);
    }
    Ok((w, q))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survival_values() {
        assert_eq!(chi2_survival(0.0, 3), 1.0);
        let s4 = (-1.461f64).exp() * (1.0 + 1.461);
        assert!((chi2_survival(2.922, 4) - s4).abs() < 1e-10);
        assert!((chi2_survival(2.922, 4) - 0.5710).abs() < 5e-5);
        assert!((chi2_survival(3.84146, 1) - 0.05).abs() < 1e-5);
    }

    #[test]
    fn survival_even_df_closed_form() {
        for df in [2usize, 4, 6] {
            for &x in &[0.1, 1.0, 2.922, 7.5, 20.0, 60.0] {
                let h: f64 = x / 2.0;
                let mut term = 1.0;
                let mut sum = 1.0;
                for k in 1..df / 2 {
                    term *= h / k as f64;
                    sum += term;
                }
                let closed = (-h).exp() * sum;
                assert!((chi2_survival(x, df) - closed).abs() < 1e-10, "df={df} x={x}");
            }
        }
    }

    #[test]
    fn wald_values() {
        assert_eq!(wald_statistic(&[0.0, 0.0], &DMatrix::identity(2, 2)), Ok((0.0, 2)));
        assert_eq!(wald_statistic(&[1.0], &DMatrix::from_element(1, 1, 1.0)), Ok((1.0, 1)));
        let v = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        assert_eq!(wald_statistic(&[1.0, 2.0], &v), Ok((2.0, 2)));
    }

    #[test]
    fn wald_errors() {
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(
            wald_statistic(&[1.0, 0.0], &singular),
            Err(GofError::SingularCovariance)
        );
        assert!(matches!(
            wald_statistic(&[1.0], &DMatrix::identity(2, 2)),
            Err(GofError::DimensionMismatch { .. })
        ));
        let nan = DMatrix::from_element(1, 1, f64::NAN);
        assert_eq!(wald_statistic(&[1.0], &nan), Err(GofError::SingularCovariance));
    }
}
