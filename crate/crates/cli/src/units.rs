//! Unit-suffixed command-line values, converted to SI.

fn split_unit(s: &str) -> (&str, &str) {
    let s = s.trim();
    let at = s
        .char_indices()
        .find(|&(i, c)| c.is_ascii_alphabetic() && !is_exponent(s, i))
        .map_or(s.len(), |(i, _)| i);
    (s[..at].trim(), s[at..].trim())
}

// An `e`/`E` between a digit and a digit or sign belongs to the number.
fn is_exponent(s: &str, i: usize) -> bool {
    let b = s.as_bytes();
    matches!(b[i], b'e' | b'E')
        && i > 0
        && (b[i - 1].is_ascii_digit() || b[i - 1] == b'.')
        && b.get(i + 1).is_some_and(|c| c.is_ascii_digit() || *c == b'-' || *c == b'+')
}

fn number(s: &str, what: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|_| format!("invalid {what} {s:?}"))
}

fn length_factor(unit: &str) -> Result<f64, String> {
    match unit {
        "" | "m" => Ok(1.0),
        "cm" => Ok(1e-2),
        "mm" => Ok(1e-3),
        other => Err(format!("unknown length unit {other:?} (use m, cm or mm)")),
    }
}

/// `0.2`, `0.2m`, `20cm` or `200mm`, in meters.
pub fn length(s: &str) -> Result<f64, String> {
    let (num, unit) = split_unit(s);
    Ok(number(num, "length")? * length_factor(unit)?)
}

/// `0.024`, `0.024S/m` or `24mS/m`, in S/m.
pub fn conductivity(s: &str) -> Result<f64, String> {
    let (num, unit) = split_unit(s);
    let f = match unit {
        "" | "S/m" => 1.0,
        "mS/m" => 1e-3,
        other => return Err(format!("unknown conductivity unit {other:?} (use S/m or mS/m)")),
    };
    Ok(number(num, "conductivity")? * f)
}

/// Three lengths separated by `,` or `x`. A unit on the last entry only
/// applies to all three: `20x35x25cm`.
pub fn triple(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split([',', 'x']).map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three lengths in {s:?}"));
    }
    let (_, shared) = split_unit(parts[2]);
    let bare = |p: &str| split_unit(p).1.is_empty();
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = if bare(p) && !shared.is_empty() { length(&format!("{p}{shared}"))? } else { length(p)? };
    }
    Ok(out)
}

/// Comma-separated plain numbers.
pub fn values(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(|p| number(p, "value")).collect()
}
