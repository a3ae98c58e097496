//! Small descriptive-statistics helpers shared across modules.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with `n - 1` in the denominator.
pub(crate) fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Pearson correlation; zero when either side has no variance.
pub(crate) fn correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    // rounding in the mean would leave a constant input with tiny spread
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if n < 2 || constant(a) || constant(b) {
        return 0.0;
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Linear-interpolated quantile of an unsorted sample.
pub(crate) fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Two-sided p-value of a standard-normal test statistic.
pub(crate) fn normal_two_sided_p(z: f64) -> f64 {
    if !z.is_finite() {
        return if z.is_nan() { f64::NAN } else { 0.0 };
    }
    2.0 * (1.0 - std_normal_cdf(z.abs()))
}

/// Welch two-sample t-test, returns `(t, two-sided p)`.
pub(crate) fn welch_t_test(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    if na < 2.0 || nb < 2.0 {
        return (0.0, 1.0);
    }
    let (va, vb) = (sample_variance(a) / na, sample_variance(b) / nb);
    let se = (va + vb).sqrt();
    let diff = mean(a) - mean(b);
    if se == 0.0 {
        return if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY, 0.0)
        };
    }
    let t = diff / se;
    let df = (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (t, 2.0 * (1.0 - dist.cdf(t.abs())))
}

/// Least-squares slope and intercept of `y` on `x`.
pub(crate) fn simple_regression(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return (0.0, my);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn correlation_edge_cases() {
        assert_eq!(correlation(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(
            correlation(&[0.1; 7], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0]),
            0.0
        );
        assert_abs_diff_eq!(
            correlation(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]),
            1.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]),
            -1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn regression_recovers_line() {
        let (s, i) = simple_regression(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
        assert_abs_diff_eq!(s, 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(i, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn normal_p_values() {
        assert_abs_diff_eq!(
            normal_two_sided_p(1.959_963_984_540_054),
            0.05,
            epsilon = 1e-9
        );
        assert_eq!(normal_two_sided_p(0.0), 1.0);
    }

    #[test]
    fn welch_identical_samples() {
        let (_, p) = welch_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(p, 1.0, epsilon = 1e-12);
    }
}
