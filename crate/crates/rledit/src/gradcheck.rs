//! Central finite differences, used as the independent oracle for every
//! gradient the tests verify. Only forward evaluation goes through the
//! closure, so the oracle never shares a code path with `backward`.

/// d f / d x_i by central differences, one coordinate at a time.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let plus = f(&buf);
        buf[i] = orig - h;
        let minus = f(&buf);
        buf[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Largest relative error between an analytic gradient and its finite
/// difference estimate, with a floor so near-zero pairs compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
