//! Answer scoring by normalized containment.

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// True when the normalized `gold` occurs in the normalized `output`.
/// An empty gold never matches.
pub fn score_answer(output: &str, gold: &str) -> bool {
    let g = normalize(gold);
    !g.is_empty() && normalize(output).contains(&g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert!(score_answer("Sacramento is the capital of California.", "California"));
        assert!(!score_answer("Sacramento is the capital of Harding County.", "California"));
        assert!(score_answer("... CALIFORNIA!", "california"));
        assert!(!score_answer("anything", ""));
        assert_eq!(normalize("  A,  b.c  "), "a b c");
    }

    proptest! {
        #[test]
        fn invariant_under_case_and_punctuation(words in proptest::collection::vec("[a-z]{1,6}", 1..6), pick in 0usize..6, upper in any::<bool>()) {
            let out = words.join(" ");
            let gold = words[pick % words.len()].clone();
            let shout = if upper { format!("{}!", out.to_uppercase()) } else { format!("{out}.") };
            let gold2 = if upper { gold.to_uppercase() } else { format!("{gold},") };
            prop_assert_eq!(score_answer(&out, &gold), score_answer(&shout, &gold2));
            prop_assert!(score_answer(&shout, &gold2));
        }
    }
}
