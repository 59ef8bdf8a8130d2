//! Softplus spread parameterization and the KL term against a standard
//! normal prior.

/// `ln(1 + e^x)`, stable for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv needs y > 0, got {y}");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sum_i 0.5 (sigma_i^2 + mu_i^2 - 1 - 2 ln sigma_i)` with `sigma = softplus(rho)`.
pub fn kl_to_std_normal(mean: &[f64], rho: &[f64]) -> f64 {
    assert_eq!(mean.len(), rho.len());
    mean.iter()
        .zip(rho)
        .map(|(&m, &r)| {
            let s = softplus(r);
            0.5 * (s * s + m * m - 1.0) - s.ln()
        })
        .sum()
}

/// Gradient of [`kl_to_std_normal`] scaled by `scale`, accumulated into
/// `d_mean` and `d_rho`.
pub fn kl_grad(mean: &[f64], rho: &[f64], scale: f64, d_mean: &mut [f64], d_rho: &mut [f64]) {
    for i in 0..mean.len() {
        let s = softplus(rho[i]);
        d_mean[i] += scale * mean[i];
        d_rho[i] += scale * (s - 1.0 / s) * sigmoid(rho[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn softplus_round_trip() {
        for y in [1e-6, 1e-3, 0.5, 1.0, 7.0, 50.0] {
            assert_relative_eq!(softplus(softplus_inv(y)), y, max_relative = 1e-10);
        }
        assert!(softplus(-20.0) > 0.0);
    }

    #[test]
    fn kl_closed_forms() {
        let one = softplus_inv(1.0);
        assert_relative_eq!(kl_to_std_normal(&[0.0; 3], &[one; 3]), 0.0, epsilon = 1e-12);
        assert_relative_eq!(kl_to_std_normal(&[1.0; 4], &[one; 4]), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_gradient_matches_differences() {
        let mean = [0.3, -1.2];
        let rho = [-2.0, 0.7];
        let mut dm = [0.0; 2];
        let mut dr = [0.0; 2];
        kl_grad(&mean, &rho, 1.0, &mut dm, &mut dr);
        let h = 1e-6;
        for i in 0..2 {
            let mut mp = mean;
            let mut mm = mean;
            mp[i] += h;
            mm[i] -= h;
            let fd = (kl_to_std_normal(&mp, &rho) - kl_to_std_normal(&mm, &rho)) / (2.0 * h);
            assert_relative_eq!(dm[i], fd, max_relative = 1e-6);
            let mut rp = rho;
            let mut rm = rho;
            rp[i] += h;
            rm[i] -= h;
            let fd = (kl_to_std_normal(&mean, &rp) - kl_to_std_normal(&mean, &rm)) / (2.0 * h);
            assert_relative_eq!(dr[i], fd, max_relative = 1e-6);
        }
    }
}
