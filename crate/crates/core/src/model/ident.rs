/// Field and term names: lowercase snake case, 1 to 64 characters, leading letter.
pub fn is_snake_identifier(s: &str) -> bool {
    let bytes = s.as_bytes();
    !bytes.is_empty()
        && bytes.len() <= 64
        && bytes[0].is_ascii_lowercase()
        && bytes
            .iter()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || *b == b'_')
}

/// General identifiers (study, participant, device, environment, dataset ids).
///
/// 1 to 128 characters from `[A-Za-z0-9_.-]`, not starting with `.` or `-`.
/// Path separators are excluded so identifiers can be used as key segments.
pub fn is_identifier(s: &str) -> bool {
    let bytes = s.as_bytes();
    !bytes.is_empty()
        && bytes.len() <= 128
        && bytes[0].is_ascii_alphanumeric()
        && bytes
            .iter()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}
