use sha2::{Digest, Sha256};

/// 64-bit fingerprint (first 8 bytes of SHA-256) rendered as 16 lowercase hex digits.
pub fn fingerprint(bytes: &[u8]) -> String {
    let hash = Sha256::digest(bytes);
    hash[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Same fingerprint as an integer whose hex form equals [`fingerprint`].
pub fn fingerprint_u64(bytes: &[u8]) -> u64 {
    let hash = Sha256::digest(bytes);
    let mut raw = [0u8; 8];
    raw.copy_from_slice(&hash[..8]);
    u64::from_be_bytes(raw)
}

/// Formats a float with 17 significant digits, which round-trips every f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_forms_agree() {
        let hex = fingerprint(b"abc");
        assert_eq!(hex.len(), 16);
        assert_eq!(u64::from_str_radix(&hex, 16).unwrap(), fingerprint_u64(b"abc"));
        // SHA-256("abc") starts with ba7816bf8f01cfea
        assert_eq!(hex, "ba7816bf8f01cfea");
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -0.0, 1.0 / 3.0, 1e-300, 123456.789, f64::MAX] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
    }
}
