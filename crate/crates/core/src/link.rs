//! The logistic link `G(v) = 1 / (1 + e^{-v})` and its density.

/// Logistic CDF, evaluated without overflow for large `|v|`.
#[inline]
pub fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Logistic density `G(v)(1 - G(v))`.
#[inline]
pub fn logistic_density(v: f64) -> f64 {
    let e = (-v.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Binary cross-entropy of one observation at logit index `v`.
#[inline]
pub fn cross_entropy(v: f64, y: f64) -> f64 {
    let g = logistic(v).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    -(y * g.ln() + (1.0 - y) * (1.0 - g).ln())
}
