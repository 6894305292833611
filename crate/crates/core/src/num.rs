//! Thin wrappers over `libm` so the rest of the crate stays `no_std`.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

/// Natural log with the probability floored at 1e-12, so losses stay finite
/// for any finite parameter values.
#[inline]
pub fn ln_clamped(p: f64) -> f64 {
    ln(if p < 1e-12 { 1e-12 } else { p })
}
