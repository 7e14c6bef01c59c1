//! CSV formatting helpers shared by the exporters.

/// 17 significant digits, enough to round-trip any `f64`.
pub(crate) fn num(v: f64) -> String {
    format!("{v:.16e}")
}
