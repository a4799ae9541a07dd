//! Lowercase hex encoding for digests and byte patterns.

/// Encodes bytes as lowercase hex.
pub fn encode(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Decodes a hex string (case-insensitive). `None` on odd length or a
/// non-hex character.
pub fn decode(text: &str) -> Option<Vec<u8>> {
    if !text.len().is_multiple_of(2) {
        return None;
    }
    let digits = text.as_bytes();
    let mut out = Vec::with_capacity(digits.len() / 2);
    for pair in digits.chunks_exact(2) {
        let hi = (pair[0] as char).to_digit(16)?;
        let lo = (pair[1] as char).to_digit(16)?;
        out.push((hi * 16 + lo) as u8);
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let bytes = [0x00, 0x13, 0xab, 0xff];
        assert_eq!(encode(&bytes), "0013abff");
        assert_eq!(decode("0013abff").unwrap(), bytes);
        assert_eq!(decode("0013ABFF").unwrap(), bytes);
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode("abc").is_none());
        assert!(decode("zz").is_none());
    }
}
