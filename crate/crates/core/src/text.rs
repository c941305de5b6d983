//! Character-offset text utilities shared by the corpus and tokenizers.

/// A piece of text with its character span in the source string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201c}' | '\u{201d}' | '\u{2013}' | '\u{2014}' | '\u{2026}'
        )
}

/// Splits on whitespace and isolates every punctuation character, keeping
/// character offsets.
pub fn pre_tokenize(text: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() || is_punctuation(c) {
            if !current.is_empty() {
                pieces.push(Piece {
                    text: std::mem::take(&mut current),
                    start,
                    end: i,
                });
            }
            if is_punctuation(c) {
                pieces.push(Piece {
                    text: c.to_string(),
                    start: i,
                    end: i + 1,
                });
            }
        } else {
            if current.is_empty() {
                start = i;
            }
            current.push(c);
        }
    }
    if !current.is_empty() {
        let end = start + current.chars().count();
        pieces.push(Piece {
            text: current,
            start,
            end,
        });
    }
    pieces
}

fn chars_eq_ci(a: char, b: char) -> bool {
    a == b || a.to_lowercase().eq(b.to_lowercase())
}

/// First case-insensitive occurrence of `needle` in `haystack` as a
/// `[start, end)` character span.
pub fn find_case_insensitive(haystack: &str, needle: &str) -> Option<(usize, usize)> {
    let hay: Vec<char> = haystack.chars().collect();
    let pat: Vec<char> = needle.chars().collect();
    if pat.is_empty() || pat.len() > hay.len() {
        return None;
    }
    (0..=hay.len() - pat.len())
        .find(|&i| pat.iter().zip(&hay[i..]).all(|(&p, &h)| chars_eq_ci(p, h)))
        .map(|i| (i, i + pat.len()))
}

/// Substring by character span.
pub fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end.saturating_sub(start)).collect()
}
