//! Scalar helpers routed through libm so every build computes the same bits.

#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub(crate) fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

/// `x * ln(y)` with the convention `0 * ln(0) = 0` and `0 * (-inf) = 0`.
#[inline]
pub(crate) fn xlny(x: f64, ln_y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * ln_y
    }
}

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;
