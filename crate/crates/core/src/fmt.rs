//! Decimal text formatting shared by every exported file format.
//!
//! All floating-point values written to CSVs, frame logs and map metadata go
//! through [`g9`], which renders 9 significant digits in the shortest of
//! positional or exponential form (the classic `%.9g`). The format is stable
//! under a read/write round trip: parsing a `g9` string and formatting the
//! result reproduces the string byte for byte.

/// Format with 9 significant digits, `%g` style.
pub fn g9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".to_string()
        } else if x > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        };
    }
    // 8 fraction digits => 9 significant digits.
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponential form");
    let exp: i32 = exp.parse().expect("exponent");
    let neg = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();

    let body = if (-4..9).contains(&exp) {
        positional(&digits, exp)
    } else {
        exponential(&digits, exp)
    };
    if neg {
        format!("-{body}")
    } else {
        body
    }
}

fn trim_zeros(s: &str) -> &str {
    s.trim_end_matches('0')
}

/// `digits` are 9 significant digits, value = 0.d1 d2 ... * 10^(exp+1).
fn positional(digits: &str, exp: i32) -> String {
    if exp >= 0 {
        let point = exp as usize + 1;
        let int_part = &digits[..point];
        let frac_part = trim_zeros(&digits[point..]);
        if frac_part.is_empty() {
            int_part.to_string()
        } else {
            format!("{int_part}.{frac_part}")
        }
    } else {
        let zeros = "0".repeat((-exp - 1) as usize);
        let frac = format!("{zeros}{digits}");
        format!("0.{}", trim_zeros(&frac))
    }
}

fn exponential(digits: &str, exp: i32) -> String {
    let head = &digits[..1];
    let tail = trim_zeros(&digits[1..]);
    if tail.is_empty() {
        format!("{head}e{exp}")
    } else {
        format!("{head}.{tail}e{exp}")
    }
}
