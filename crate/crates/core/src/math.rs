//! Small numerical helpers shared across modules.

use num_complex::Complex64;
use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub type C64 = Complex64;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn gaussian_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let z = x - mean;
    (-0.5 * z * z / var).exp() / (2.0 * PI * var).sqrt()
}

/// `sin(x)/x` with the removable singularity filled in.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// `ln(1 + z)` accurate for small `|z|`.
pub fn ln_1p(z: C64) -> C64 {
    if z.norm() < 1e-4 {
        let z2 = z * z;
        z - z2 * 0.5 + z2 * z / 3.0 - z2 * z2 * 0.25
    } else {
        (C64::new(1.0, 0.0) + z).ln()
    }
}

/// `(e^z - 1)/z`, equal to 1 at the origin.
pub fn expm1_over(z: C64) -> C64 {
    if z.norm() < 1e-4 {
        C64::new(1.0, 0.0) + z * 0.5 + z * z / 6.0 + z * z * z / 24.0
    } else {
        (z.exp() - 1.0) / z
    }
}

/// Smallest `n` such that `P(N > n) < tol` for `N ~ Poisson(mean)`.
pub fn poisson_cutoff(mean: f64, tol: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let mut n = 0usize;
    let mut p = (-mean).exp();
    let mut cdf = p;
    // the pmf underflows for large means; fall back to a normal-quantile bound
    if p == 0.0 {
        return (mean + 12.0 * mean.sqrt() + 20.0).ceil() as usize;
    }
    while 1.0 - cdf >= tol {
        n += 1;
        p *= mean / n as f64;
        cdf += p;
        if n > 10_000 {
            break;
        }
    }
    n
}

/// Poisson tail mass `P(N > n)`, computed by summing the complement.
pub fn poisson_tail(mean: f64, n: usize) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    let mut p = (-mean).exp();
    let mut cdf = p;
    for k in 1..=n {
        p *= mean / k as f64;
        cdf += p;
    }
    (1.0 - cdf).max(0.0)
}

/// Ordinary least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Bisection for a sign change of `f` on `[lo, hi]`.
pub fn bisect<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> Option<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Some(lo);
    }
    if fhi == 0.0 {
        return Some(hi);
    }
    if flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 || (hi - lo) < tol {
            return Some(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_matches_known_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-15);
        let v = norm_cdf(1.96);
        assert!((v - 0.975_002_104_851_780).abs() < 1e-11, "{v}");
        assert!((norm_cdf(-8.0) - 6.220_960_574_271_8e-16).abs() < 1e-25);
    }

    #[test]
    fn poisson_cutoff_meets_tail_bound() {
        for &m in &[0.1, 1.0, 1.25, 5.0, 30.0] {
            let n = poisson_cutoff(m, 1e-12);
            assert!(poisson_tail(m, n) < 1e-12);
            if n > 0 {
                assert!(poisson_tail(m, n - 1) >= 1e-12 * 0.999);
            }
        }
        assert_eq!(poisson_cutoff(0.0, 1e-12), 0);
    }

    #[test]
    fn complex_series_helpers_are_continuous() {
        let z = C64::new(3e-5, -2e-5);
        let direct = (C64::new(1.0, 0.0) + z).ln();
        assert!((ln_1p(z) - direct).norm() < 1e-14);
        let w = C64::new(2e-4, 1e-4);
        assert!((expm1_over(w) - (w.exp() - 1.0) / w).norm() < 1e-12);
    }

    #[test]
    fn bisect_finds_root() {
        let r = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-12).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-11);
        assert!(bisect(|x| x * x + 1.0, 0.0, 2.0, 1e-12).is_none());
    }
}
