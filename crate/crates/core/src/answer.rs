//! Answer normalization and matching shared by the trajectory factory and the
//! evaluation harness.
//!
//! The normalizer lowercases, trims, collapses internal whitespace runs to a
//! single space and strips trailing punctuation. Leading articles are kept:
//! "the congridae" does not match "Congridae".

use serde::{Deserialize, Serialize};

const TERMINAL_PUNCTUATION: &[char] = &['.', ',', ';', ':', '!', '?'];

/// How predicted strings are compared against gold strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchPolicy {
    #[default]
    Normalized,
    /// Byte-exact comparison, no normalization at all.
    Raw,
}

pub fn normalize_answer(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let lowered = collapsed.to_lowercase();
    lowered
        .trim_end_matches(|c: char| TERMINAL_PUNCTUATION.contains(&c) || c.is_whitespace())
        .to_string()
}

/// Splits a `|`-separated gold string into its non-empty trimmed members.
pub fn split_gold(answers: &str) -> Vec<String> {
    answers
        .split('|')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// True when `pred` matches any element of `gold` under `policy`.
pub fn matches_any(pred: &str, gold: &[String], policy: MatchPolicy) -> bool {
    match policy {
        MatchPolicy::Raw => gold.iter().any(|g| g == pred),
        MatchPolicy::Normalized => {
            let p = normalize_answer(pred);
            !p.is_empty() && gold.iter().any(|g| normalize_answer(g) == p)
        }
    }
}

/// Entity grounding check: normalized equality or case-insensitive
/// containment in either direction ("conger eel" vs "Conger eel (Congridae)").
pub fn entity_matches(predicted: &str, gold: &str) -> bool {
    let p = normalize_answer(predicted);
    let g = normalize_answer(gold);
    if p.is_empty() || g.is_empty() {
        return false;
    }
    p == g || g.contains(&p) || p.contains(&g)
}

/// Whole-word containment of `needle` in `haystack` after normalizing both.
pub fn contains_normalized(haystack: &str, needle: &str) -> bool {
    let n = normalize_answer(needle);
    if n.is_empty() {
        return false;
    }
    let h = format!(" {} ", words_only(&normalize_answer(haystack)));
    let n = format!(" {} ", words_only(&n));
    h.contains(&n)
}

// Replaces punctuation that would otherwise glue a token to its neighbours.
fn words_only(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gold(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn exact_phrase_matches() {
        assert!(matches_any(
            "Argentina national team",
            &gold(&["Argentina national team"]),
            MatchPolicy::Normalized
        ));
    }

    #[test]
    fn case_and_terminal_punctuation_are_ignored() {
        assert!(matches_any(
            "paris.",
            &gold(&["Paris", "City of Paris"]),
            MatchPolicy::Normalized
        ));
        assert!(!matches_any("paris.", &gold(&["Paris"]), MatchPolicy::Raw));
    }

    #[test]
    fn numeric_near_miss_is_wrong() {
        // "4807 m" -> "4807 m", "4,808 m" -> "4,808 m"
        assert_eq!(normalize_answer("4807 m"), "4807 m");
        assert_eq!(normalize_answer("4,808 m"), "4,808 m");
        assert!(!matches_any(
            "4807 m",
            &gold(&["4,808 m"]),
            MatchPolicy::Normalized
        ));
    }

    #[test]
    fn leading_article_is_not_stripped() {
        assert!(!matches_any(
            "the congridae",
            &gold(&["Congridae"]),
            MatchPolicy::Normalized
        ));
    }

    #[test]
    fn whitespace_is_collapsed() {
        assert_eq!(normalize_answer("  Mont \n\t Blanc  !"), "mont blanc");
    }

    #[test]
    fn gold_split_on_pipe() {
        assert_eq!(split_gold("a| b |c||"), vec!["a", "b", "c"]);
    }

    #[test]
    fn entity_containment_either_way() {
        assert!(entity_matches("conger eel", "Conger eel (Congridae)"));
        assert!(entity_matches("Conger eel (Congridae)", "conger eel"));
        assert!(!entity_matches("Lionel Messi", "Diego Maradona"));
        assert!(!entity_matches("", "x"));
    }

    #[test]
    fn whole_word_containment() {
        assert!(contains_normalized(
            "It rises to 4,808 m above sea level.",
            "4,808 m"
        ));
        assert!(!contains_normalized("Height 14 m", "4 m"));
        assert!(contains_normalized("Capital: Paris.", "paris"));
    }
}
