//! Entity mention extraction and surface normalization.
//!
//! Without annotations, mentions are found by a capitalization rule: within
//! a sentence, every maximal run of capitalized tokens counts, except that a
//! run starting at the first token must span at least two tokens (sentence
//! case is not evidence of a name).

use std::collections::BTreeSet;

use crate::text::Document;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityMention {
    /// Exact text of the mention as it appears in the document.
    pub surface: String,
    /// Lowercased, punctuation-trimmed form used for identity tests.
    pub normalized: String,
    pub sentence: usize,
    pub token_start: usize,
    pub token_end: usize,
    pub ner_type: Option<String>,
}

/// Lowercases, trims punctuation and whitespace from both ends, and
/// collapses internal whitespace runs to single spaces.
pub fn normalize(surface: &str) -> String {
    let lowered = surface.to_lowercase();
    let trimmed = lowered
        .trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation());
    let mut out = String::with_capacity(trimmed.len());
    let mut pending_space = false;
    for c in trimmed.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
    }
    out
}

/// 1.0 for equal normalized forms, otherwise the Jaccard similarity of
/// their normalized token sets. Symmetric by construction.
pub fn literal_similarity(a: &str, b: &str) -> f64 {
    let na = normalize(a);
    let nb = normalize(b);
    if na == nb {
        return 1.0;
    }
    let sa: BTreeSet<&str> = na.split(' ').filter(|t| !t.is_empty()).collect();
    let sb: BTreeSet<&str> = nb.split(' ').filter(|t| !t.is_empty()).collect();
    if sa.is_empty() || sb.is_empty() {
        return 0.0;
    }
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    inter / union
}

fn is_capitalized(token: &str) -> bool {
    token.chars().next().is_some_and(|c| c.is_uppercase())
}

/// Extracts mentions from a document, sorted by (sentence, token_start).
/// Annotated spans take precedence over the capitalization rule even when
/// the annotation list is empty. Mentions whose normalized form is empty
/// are dropped.
pub fn extract_mentions(doc: &Document) -> Vec<EntityMention> {
    let mut mentions = match &doc.entity_annotations {
        Some(anns) => anns
            .iter()
            .map(|a| {
                let surface = doc.text[a.char_start..a.char_end].to_string();
                let normalized = normalize(&surface);
                EntityMention {
                    surface,
                    normalized,
                    sentence: a.sentence,
                    token_start: a.token_start,
                    token_end: a.token_end,
                    ner_type: a.ner_type.clone(),
                }
            })
            .collect(),
        None => rule_mentions(doc),
    };
    mentions.retain(|m| !m.normalized.is_empty());
    mentions.sort_by(|a, b| {
        (a.sentence, a.token_start, a.token_end).cmp(&(b.sentence, b.token_start, b.token_end))
    });
    mentions
}

fn rule_mentions(doc: &Document) -> Vec<EntityMention> {
    let mut out = Vec::new();
    for (si, span) in doc.sentences.iter().enumerate() {
        let mut i = span.token_start;
        while i < span.token_end {
            if !is_capitalized(&doc.tokens[i].text) {
                i += 1;
                continue;
            }
            let run_start = i;
            while i < span.token_end && is_capitalized(&doc.tokens[i].text) {
                i += 1;
            }
            let run_len = i - run_start;
            if run_start == span.token_start && run_len < 2 {
                continue;
            }
            let char_start = doc.tokens[run_start].char_start;
            let char_end = doc.tokens[i - 1].char_end;
            let surface = doc.text[char_start..char_end].to_string();
            let normalized = normalize(&surface);
            out.push(EntityMention {
                surface,
                normalized,
                sentence: si,
                token_start: run_start,
                token_end: i,
                ner_type: None,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Document;

    fn surfaces(doc: &Document) -> Vec<String> {
        extract_mentions(doc).iter().map(|m| m.surface.clone()).collect()
    }

    #[test]
    fn rule_finds_runs_and_initial_pairs() {
        let doc = Document::from_text("d", "Barack Obama met Putin .");
        assert_eq!(surfaces(&doc), ["Barack Obama", "Putin"]);
    }

    #[test]
    fn rule_skips_single_sentence_initial_token() {
        let doc = Document::from_text("d", "The cat sat on the mat .");
        assert!(surfaces(&doc).is_empty());
        let doc = Document::from_text("d", "He met Ada .");
        assert_eq!(surfaces(&doc), ["Ada"]);
    }

    #[test]
    fn rule_restarts_runs_per_sentence() {
        let doc = Document::from_text("d", "He saw Alpha Beta. Gamma spoke.");
        // "Gamma" opens its sentence and stands alone, so it is skipped.
        assert_eq!(surfaces(&doc), ["Alpha Beta"]);
    }

    #[test]
    fn annotations_override_rule() {
        let data = "{\"id\":\"d\",\"text\":\"the acme group won.\",\"entities\":[{\"sentence\":0,\"char_start\":4,\"char_end\":14,\"type\":\"ORG\"}]}";
        let docs = crate::text::read_corpus_from(data.as_bytes()).unwrap();
        let mentions = extract_mentions(&docs[0]);
        assert_eq!(mentions.len(), 1);
        assert_eq!(mentions[0].surface, "acme group");
        assert_eq!(mentions[0].ner_type.as_deref(), Some("ORG"));
    }

    #[test]
    fn empty_annotation_list_suppresses_rule() {
        let data = "{\"id\":\"d\",\"text\":\"He met Ada .\",\"entities\":[]}";
        let docs = crate::text::read_corpus_from(data.as_bytes()).unwrap();
        assert!(extract_mentions(&docs[0]).is_empty());
    }

    #[test]
    fn duplicate_same_sentence_mentions_stay_separate() {
        let doc = Document::from_text("d", "then Alpha met Alpha .");
        let mentions = extract_mentions(&doc);
        assert_eq!(mentions.len(), 2);
        assert_eq!(mentions[0].normalized, mentions[1].normalized);
        assert_ne!(mentions[0].token_start, mentions[1].token_start);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("Obama"), "obama");
        assert_eq!(normalize("  U.S.  Senate "), "u.s. senate");
        assert_eq!(normalize("---"), "");
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(literal_similarity("Obama", "obama"), 1.0);
        assert_eq!(literal_similarity("Barack Obama", "Obama"), 0.5);
        assert_eq!(literal_similarity("Paris", "London"), 0.0);
        assert_eq!(literal_similarity("---", "Paris"), 0.0);
    }

    #[test]
    fn similarity_is_symmetric() {
        let pairs = [
            ("Barack Obama", "Obama"),
            ("New York City", "New York"),
            ("A B C", "B C D"),
        ];
        for (a, b) in pairs {
            assert_eq!(literal_similarity(a, b), literal_similarity(b, a));
        }
    }
}
