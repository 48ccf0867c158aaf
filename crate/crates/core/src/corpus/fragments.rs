/// Splits a writer's summary on `separator` and keeps the fragments whose
/// character count, excluding the separator and surrounding whitespace,
/// lies in `[min_chars, max_chars]`. Order is preserved.
pub fn split_fragments(
    raw_summary: &str,
    separator: char,
    min_chars: usize,
    max_chars: usize,
) -> Vec<String> {
    debug_assert!(min_chars <= max_chars);
    raw_summary
        .split(separator)
        .map(str::trim)
        .filter(|f| {
            let n = f.chars().count();
            n >= min_chars && n <= max_chars
        })
        .map(str::to_string)
        .collect()
}
