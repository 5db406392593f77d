//! Plain-decimal number formatting for CSV outputs: fixed significant digits,
//! no scientific notation, so identical runs produce identical bytes.

/// Format with `digits` significant digits in plain decimal.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return format!("{:.*}", digits.saturating_sub(1), 0.0);
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_decimal_shapes() {
        assert_eq!(format_sig(0.0, 10), "0.000000000");
        assert_eq!(format_sig(1.0, 10), "1.000000000");
        assert_eq!(format_sig(-2.5, 4), "-2.500");
        assert_eq!(format_sig(12345.678, 10), "12345.67800");
        assert!(!format_sig(1e-8, 10).contains('e'));
        assert_eq!(format_sig(123456789012.0, 10), "123456789012");
    }
}
