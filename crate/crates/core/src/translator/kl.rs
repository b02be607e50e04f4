//! KL divergence of a batch of style codes to the standard normal prior.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// KL of the diagonal Gaussian fitted to the rows of `s` (`[N, D]`, batch
/// mean and biased std per dimension) to `N(0, I)`:
/// `sum_d (mu_d^2 + sigma_d^2 - 1 - ln sigma_d^2) / 2`.
pub fn kl_to_standard_normal(s: ArrayView2<'_, f64>) -> Result<f64> {
    Ok(kl_with_grad(s)?.0)
}

/// The KL value and its gradient with respect to every entry of `s`.
pub fn kl_with_grad(s: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    let (n, d) = s.dim();
    if n < 2 {
        return Err(Error::Validation(format!("style KL needs a batch of at least 2, got {n}")));
    }
    let nf = n as f64;
    let mut kl = 0.0;
    let mut grad = Array2::zeros((n, d));
    for j in 0..d {
        let col = s.column(j);
        let mu = col.sum() / nf;
        let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / nf;
        if var <= 0.0 {
            return Err(Error::Validation(format!("style dimension {j} has zero spread over the batch")));
        }
        kl += 0.5 * (mu * mu + var - 1.0 - var.ln());
        for i in 0..n {
            grad[[i, j]] = mu / nf + (1.0 - 1.0 / var) * (s[[i, j]] - mu) / nf;
        }
    }
    Ok((kl, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Rows `mu - sigma` and `mu + sigma` have batch mean `mu` and std `sigma`.
    fn two_point(mu: &[f64], sigma: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((2, mu.len()), |(i, j)| mu[j] + if i == 0 { -sigma[j] } else { sigma[j] })
    }

    /// KL(N(mu, sigma^2) || N(0, 1)) by composite Simpson integration of
    /// `p ln(p / q)` over mu +- 12 sigma.
    fn kl_1d_numeric(mu: f64, sigma: f64) -> f64 {
        let pdf = |x: f64, m: f64, s: f64| (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let (a, b) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
        let n = 20_000;
        let h = (b - a) / n as f64;
        let f = |x: f64| {
            let p = pdf(x, mu, sigma);
            if p == 0.0 {
                0.0
            } else {
                p * (p.ln() - pdf(x, 0.0, 1.0).ln())
            }
        };
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn closed_form_examples() {
        assert!(kl_to_standard_normal(two_point(&[0.0; 3], &[1.0; 3]).view()).unwrap().abs() < 1e-15);
        assert!((kl_to_standard_normal(two_point(&[1.0], &[1.0]).view()).unwrap() - 0.5).abs() < 1e-15);
        let expect = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((kl_to_standard_normal(two_point(&[0.0], &[2.0]).view()).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn matches_numerical_integration() {
        for &(mu, sigma) in &[(0.0, 1.0), (1.0, 1.0), (0.0, 2.0), (-0.7, 0.3), (2.5, 1.7), (0.2, 0.05)] {
            let closed = kl_to_standard_normal(two_point(&[mu], &[sigma]).view()).unwrap();
            let numeric = kl_1d_numeric(mu, sigma);
            assert!((closed - numeric).abs() < 1e-6, "mu {mu} sigma {sigma}: {closed} vs {numeric}");
        }
    }

    #[test]
    fn dimensions_add() {
        let s = two_point(&[0.3, -1.0], &[0.5, 2.0]);
        let a = kl_to_standard_normal(two_point(&[0.3], &[0.5]).view()).unwrap();
        let b = kl_to_standard_normal(two_point(&[-1.0], &[2.0]).view()).unwrap();
        assert!((kl_to_standard_normal(s.view()).unwrap() - a - b).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = array![[0.3, -1.2], [1.1, 0.4], [-0.5, 0.9], [0.05, 2.0]];
        let (_, g) = kl_with_grad(s.view()).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..2 {
                let mut p = s.clone();
                p[[i, j]] += h;
                let mut m = s.clone();
                m[[i, j]] -= h;
                let fd = (kl_to_standard_normal(p.view()).unwrap() - kl_to_standard_normal(m.view()).unwrap()) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-7, "({i},{j}) {fd} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn rejects_single_sample() {
        assert!(kl_to_standard_normal(Array2::zeros((1, 8)).view()).is_err());
        assert!(kl_to_standard_normal(Array2::zeros((0, 8)).view()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn non_negative(v in proptest::collection::vec(-3.0f64..3.0, 6..24)) {
            let n = v.len() / 3;
            let s = Array2::from_shape_vec((n, 3), v[..n * 3].to_vec()).unwrap();
            if let Ok(kl) = kl_to_standard_normal(s.view()) {
                proptest::prop_assert!(kl >= -1e-12);
            }
        }
    }
}
