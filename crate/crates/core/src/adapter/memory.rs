//! Memory sizes with binary suffixes: `K`, `M`, `G`, `T` are 2^10 … 2^40.
//! Fractions are allowed (`2.5G`); the result is rounded to the nearest byte.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MemoryError {
    BadNumber,
    BadUnit,
}

impl fmt::Display for MemoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemoryError::BadNumber => f.write_str("not a number"),
            MemoryError::BadUnit => f.write_str("unrecognized unit"),
        }
    }
}

const UNITS: [(char, u32); 4] = [('T', 40), ('G', 30), ('M', 20), ('K', 10)];

fn shift_for(suffix: &str) -> Option<u32> {
    match suffix {
        "" | "B" | "b" => Some(0),
        _ => {
            let mut chars = suffix.chars();
            let c = chars.next()?.to_ascii_uppercase();
            if chars.next().is_some() {
                return None;
            }
            UNITS.iter().find(|(u, _)| *u == c).map(|&(_, s)| s)
        }
    }
}

pub fn parse_bytes(token: &str) -> Result<u64, MemoryError> {
    let token = token.trim();
    let split = token
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(token.len());
    let (number, suffix) = token.split_at(split);
    let shift = shift_for(suffix).ok_or(MemoryError::BadUnit)?;

    let (int_part, frac_part) = number.split_once('.').unwrap_or((number, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(MemoryError::BadNumber);
    }
    if frac_part.len() > 18 || int_part.len() > 20 {
        return Err(MemoryError::BadNumber);
    }
    let digits = format!("{int_part}{frac_part}");
    let mantissa: u128 = digits.parse().map_err(|_| MemoryError::BadNumber)?;
    let scale = 10u128.pow(frac_part.len() as u32);
    let numerator = mantissa.checked_shl(shift).filter(|n| n >> shift == mantissa).ok_or(MemoryError::BadNumber)?;
    let bytes = (numerator + scale / 2) / scale;
    u64::try_from(bytes).map_err(|_| MemoryError::BadNumber)
}

/// Shortest text that [`parse_bytes`] maps back to exactly `bytes`.
pub fn format_bytes(bytes: u64) -> String {
    for (unit, shift) in UNITS {
        let base = 1u128 << shift;
        let b = bytes as u128;
        if b < base {
            continue;
        }
        let whole = b / base;
        let rest = b % base;
        if rest == 0 {
            return format!("{whole}{unit}");
        }
        // rest/base has a finite decimal expansion; use it if it fits in 3 digits
        if (rest * 1000).is_multiple_of(base) {
            let frac = format!("{:03}", rest * 1000 / base);
            return format!("{whole}.{}{unit}", frac.trim_end_matches('0'));
        }
    }
    bytes.to_string()
}
