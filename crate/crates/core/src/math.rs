//! Scalar special functions shared by the pricing and policy code.

pub const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::erf::erf;

    #[test]
    fn cdf_matches_erf_oracle() {
        let mut worst: f64 = 0.0;
        for k in -4000..=4000 {
            let x = k as f64 * 0.002;
            let oracle = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
            worst = worst.max((norm_cdf(x) - oracle).abs());
        }
        assert!(worst < 1e-10, "worst abs error {worst}");
    }

    #[test]
    fn cdf_tabulated_values() {
        let table = [
            (1.0, 0.841_344_746_068_542_9),
            (0.5, 0.691_462_461_274_013_1),
            (-2.0, 0.022_750_131_948_179_207),
            (-5.0, 2.866_515_718_791_939e-7),
        ];
        for (x, v) in table {
            assert!((norm_cdf(x) - v).abs() <= 1e-14 * v, "{x}: {}", norm_cdf(x));
        }
    }

    #[test]
    fn cdf_symmetry_and_tails() {
        for &x in &[0.1, 1.3, 4.0, 9.5] {
            assert!((norm_cdf(x) + norm_cdf(-x) - 1.0).abs() < 1e-15);
        }
        assert_eq!(norm_cdf(0.0), 0.5);
        assert!(norm_cdf(-40.0) < 1e-300);
        assert_eq!(norm_cdf(40.0), 1.0);
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(1.5) - 0.817_574_476_193_643_7).abs() < 1e-15);
        assert_eq!(sigmoid(-800.0), 0.0);
    }
}
