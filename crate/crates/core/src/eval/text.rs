use crate::error::{Error, Result};

/// Lowercases, drops punctuation, and collapses runs of whitespace to one space.
pub fn normalize_text(s: &str) -> String {
    let kept: String = s
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate of `hypothesis` against `reference`, after
/// [`normalize_text`] on both. Can exceed 1.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r = normalize_text(reference);
    let h = normalize_text(hypothesis);
    let len = r.chars().count();
    if len == 0 {
        return Err(Error::Data(format!("empty reference transcript {reference:?}")));
    }
    Ok(levenshtein(&r, &h) as f64 / len as f64)
}
