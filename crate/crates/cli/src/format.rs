//! Metric formatting for CSV lines: dot decimal separator, four decimals
//! with trailing zeros trimmed, `inf` for infinite PSNR.

pub fn fmt_metric(value: f64) -> String {
    if value.is_infinite() {
        return if value > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if value.is_nan() {
        return "nan".into();
    }
    let mut s = format!("{value:.4}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.push('0');
    }
    s
}
