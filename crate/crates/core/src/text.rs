//! Caption and class-name normalization.

use unicode_normalization::{is_nfc, UnicodeNormalization};

/// Canonical form used for all substring matching: Unicode NFC, full case
/// folding, whitespace runs collapsed to one ASCII space, ends trimmed.
///
/// Case folding can produce sequences that are no longer in NFC, so the two
/// steps are repeated until neither changes the string. The result is a
/// fixed point, which makes the function idempotent.
pub fn normalize_text(text: &str) -> String {
    let mut current: String = text.nfc().collect();
    loop {
        let folded = caseless::default_case_fold_str(&current);
        let next: String = if is_nfc(&folded) { folded } else { folded.nfc().collect() };
        if next == current {
            break;
        }
        current = next;
    }
    collapse_whitespace(&current)
}

fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn collapses_and_folds() {
        assert_eq!(normalize_text("  Boeing\t737 "), "boeing 737");
        assert_eq!(normalize_text("ROSE"), "rose");
        assert_eq!(normalize_text("a\n\n  b\u{3000}c"), "a b c");
        assert_eq!(normalize_text(""), "");
    }

    #[test]
    fn composes_and_folds_beyond_ascii() {
        // "E" + combining acute composes to "é".
        assert_eq!(normalize_text("CAF\u{0045}\u{0301}"), "caf\u{00e9}");
        assert_eq!(normalize_text("Straße"), "strasse");
    }

    proptest! {
        #[test]
        fn idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }

        #[test]
        fn idempotent_on_mixed_scripts(s in "[ \\tA-Za-zÀ-ÿΑ-ωİıſßǅ\u{0300}-\u{036f}\u{1E9E}]{0,30}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }
    }
}
