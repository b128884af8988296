use crate::config::{ChunkingPolicy, SplitPreference};

/// Splits a document into chunks of at most `max_chunk_chars` characters.
///
/// `Fixed` slides a window of `max_chunk_chars` forward by
/// `max_chunk_chars - overlap_chars` until the window reaches the end, so
/// consecutive chunks share exactly `overlap_chars`. `Paragraph` and `Line`
/// split at blank lines or newlines first and fall back to the fixed window
/// for pieces that are still too long.
pub fn chunk_document(text: &str, policy: &ChunkingPolicy) -> Vec<String> {
    match policy.split_preference {
        SplitPreference::Fixed => fixed_windows(text, policy),
        SplitPreference::Paragraph => split_then_window(paragraphs(text), policy),
        SplitPreference::Line => {
            split_then_window(text.lines().map(str::trim_end).filter(|l| !l.trim().is_empty()).map(str::to_string).collect(), policy)
        }
    }
}

fn split_then_window(pieces: Vec<String>, policy: &ChunkingPolicy) -> Vec<String> {
    pieces.into_iter().flat_map(|p| fixed_windows(&p, policy)).collect()
}

fn paragraphs(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        out.push(cur.join("\n"));
    }
    out
}

fn fixed_windows(text: &str, policy: &ChunkingPolicy) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let max = policy.max_chunk_chars.max(1);
    if chars.len() <= max {
        return if text.trim().is_empty() { Vec::new() } else { vec![text.to_string()] };
    }
    let step = max - policy.overlap_chars.min(max - 1);
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + max).min(chars.len());
        out.push(chars[start..end].iter().collect());
        if end == chars.len() {
            break;
        }
        start += step;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(max: usize, overlap: usize, pref: SplitPreference) -> ChunkingPolicy {
        ChunkingPolicy { max_chunk_chars: max, overlap_chars: overlap, split_preference: pref }
    }

    #[test]
    fn short_text_is_a_single_chunk() {
        let p = policy(100, 10, SplitPreference::Paragraph);
        assert_eq!(chunk_document("abcdefghij", &p), vec!["abcdefghij"]);
    }

    #[test]
    fn fixed_window_slides_with_overlap() {
        // windows start at 0, 3, 6; the third reaches the end
        let p = policy(4, 1, SplitPreference::Fixed);
        assert_eq!(chunk_document("abcdefghij", &p), vec!["abcd", "defg", "ghij"]);
        // final window may be shorter
        assert_eq!(chunk_document("abcdefghijk", &p), vec!["abcd", "defg", "ghij", "jk"]);
    }

    #[test]
    fn paragraph_mode_splits_at_blank_lines() {
        let p = policy(100, 10, SplitPreference::Paragraph);
        let text = "first paragraph\nstill first\n\n  \nsecond paragraph";
        assert_eq!(chunk_document(text, &p), vec!["first paragraph\nstill first", "second paragraph"]);
    }

    #[test]
    fn long_paragraph_falls_back_to_fixed() {
        let p = policy(4, 0, SplitPreference::Paragraph);
        assert_eq!(chunk_document("abcdef\n\nxy", &p), vec!["abcd", "ef", "xy"]);
    }

    #[test]
    fn line_mode_splits_lines() {
        let p = policy(50, 0, SplitPreference::Line);
        assert_eq!(chunk_document("a\n\nb\nc", &p), vec!["a", "b", "c"]);
    }

    #[test]
    fn multibyte_text_is_split_on_chars() {
        let p = policy(2, 0, SplitPreference::Fixed);
        assert_eq!(chunk_document("如何使用", &p), vec!["如何", "使用"]);
    }

    proptest::proptest! {
        #[test]
        fn fixed_chunks_cover_and_overlap(text in "[a-z]{1,200}", max in 2usize..30, overlap_frac in 0usize..100) {
            let overlap = overlap_frac * (max - 1) / 100;
            let p = policy(max, overlap, SplitPreference::Fixed);
            let chunks = chunk_document(&text, &p);
            proptest::prop_assert!(chunks.iter().all(|c| c.chars().count() <= max));
            // rebuild the document from the chunks by removing overlaps
            let mut rebuilt = chunks[0].clone();
            for w in chunks.windows(2) {
                let prev: Vec<char> = w[0].chars().collect();
                let next: Vec<char> = w[1].chars().collect();
                proptest::prop_assert_eq!(&prev[prev.len() - overlap..], &next[..overlap.min(next.len())]);
                rebuilt.extend(next[overlap..].iter());
            }
            proptest::prop_assert_eq!(rebuilt, text);
        }
    }
}
