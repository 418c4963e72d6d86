//! Paired synthetic corpus generator.
//!
//! Every title yields two documents built from the same sentence skeletons
//! and the same entity name pool, so their token multisets are identical.
//! The human-side document chains entities across adjacent sentences; the
//! machine-side document rearranges the same name occurrences so no two
//! sentences share an entity. The label is therefore carried entirely by
//! cross-sentence entity arrangement.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::{Document, Label};

/// Sentence skeletons: lowercase prefix, connective, and tail around two
/// name slots. Each skeleton carries distinctive content words so a pair
/// scorer can recognize which skeleton it is looking at. Slots are never
/// sentence-initial and never adjacent.
const SKELETONS: &[(&str, &str, &str)] = &[
    ("early reports said", "spoke briefly with", "near the harbor"),
    ("local officials confirmed", "had briefed", "on the budget"),
    ("witnesses recalled that", "argued loudly with", "outside the courthouse"),
    ("the evening bulletin noted", "traveled alongside", "toward the border"),
    ("analysts wrote that", "quietly advised", "before the vote"),
    ("neighbors mentioned", "shared a meal with", "after the storm"),
    ("the morning paper claimed", "negotiated terms with", "during the recess"),
    ("several aides insisted", "kept calling", "throughout the winter"),
    ("one broadcast alleged", "secretly met", "behind the station"),
    ("a late memo stated", "formally thanked", "for the donation"),
];

const SYLLABLES: &[&str] = &[
    "bal", "dor", "fen", "gar", "hul", "jin", "kor", "lam", "mir", "nev", "pol", "quin", "rask",
    "sol", "tur", "vex", "wold", "yar", "zem", "bri",
];

const MIN_SENTENCES: usize = 4;
const MAX_SENTENCES: usize = 8;

/// Names are drawn from one shared pool, unique within a title but reused
/// across titles and splits. Every name therefore occurs in both classes
/// and (at realistic corpus sizes) in every split, so a trained embedding
/// covers validation and test tokens while name identity still carries no
/// label information.
const NAME_POOL: usize = 120;

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub train_titles: usize,
    pub valid_titles: usize,
    pub test_titles: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Splits a total title count 3/4 : 1/8 : 1/8.
    pub fn with_total(titles: usize, seed: u64) -> SynthConfig {
        let train = titles * 3 / 4;
        let valid = (titles - train) / 2;
        let test = titles - train - valid;
        SynthConfig {
            train_titles: train,
            valid_titles: valid,
            test_titles: test,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_titles == 0 || self.valid_titles == 0 || self.test_titles == 0 {
            return Err(Error::Config(format!(
                "every split needs at least one title, got {}/{}/{}",
                self.train_titles, self.valid_titles, self.test_titles
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train: Vec<Document>,
    pub valid: Vec<Document>,
    pub test: Vec<Document>,
}

fn fresh_name(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let syllable_count = rng.gen_range(2..=3);
        let mut lower = String::new();
        for _ in 0..syllable_count {
            lower.push_str(SYLLABLES[rng.gen_range(0..SYLLABLES.len())]);
        }
        if used.insert(lower.clone()) {
            let mut chars = lower.chars();
            let first = chars.next().expect("syllables are non-empty");
            return first.to_uppercase().chain(chars).collect();
        }
    }
}

fn render(skeleton: usize, a: &str, b: &str) -> String {
    let (prefix, mid, tail) = SKELETONS[skeleton];
    format!("{prefix} {a} {mid} {b} {tail} .")
}

struct TitleDocs {
    human: Document,
    machine: Document,
}

fn generate_title(rng: &mut ChaCha8Rng, pool: &[String], title: &str) -> TitleDocs {
    let s = rng.gen_range(MIN_SENTENCES..=MAX_SENTENCES);
    let start = rng.gen_range(0..SKELETONS.len());
    let names: Vec<String> = pool.choose_multiple(rng, s + 1).cloned().collect();

    // Human side: sentence i mentions (E_i, E_{i+1}), so every interior
    // name recurs in the following sentence.
    let human_text: Vec<String> = (0..s)
        .map(|i| render((start + i) % SKELETONS.len(), &names[i], &names[i + 1]))
        .collect();

    // Machine side: the same name occurrence counts packed so no name
    // appears in two sentences. Sentence 0 takes the two singletons
    // (E_0, E_s); sentence j takes both occurrences of E_j.
    let machine_text: Vec<String> = (0..s)
        .map(|j| {
            if j == 0 {
                render(start % SKELETONS.len(), &names[0], &names[s])
            } else {
                render((start + j) % SKELETONS.len(), &names[j], &names[j])
            }
        })
        .collect();

    let human = Document::from_text(format!("{title}-human"), human_text.join(" "))
        .with_label(Label::Human)
        .with_meta("title", title);
    let machine = Document::from_text(format!("{title}-machine"), machine_text.join(" "))
        .with_label(Label::Machine)
        .with_meta("title", title);
    TitleDocs { human, machine }
}

/// Deterministic paired corpus: per split, each title contributes one
/// human-side and one machine-side document sharing a "title" meta key.
pub fn generate_synthetic_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut excluded: HashSet<String> = HashSet::new();
    for (prefix, mid, tail) in SKELETONS {
        for word in [prefix, mid, tail] {
            for tok in word.split_whitespace() {
                excluded.insert(tok.to_string());
            }
        }
    }
    let pool: Vec<String> = (0..NAME_POOL).map(|_| fresh_name(&mut rng, &mut excluded)).collect();

    let mut title_no = 0usize;
    let mut split = |count: usize, rng: &mut ChaCha8Rng| {
        let mut docs = Vec::with_capacity(2 * count);
        for _ in 0..count {
            let title = format!("t{title_no:04}");
            title_no += 1;
            let pair = generate_title(rng, &pool, &title);
            docs.push(pair.human);
            docs.push(pair.machine);
        }
        docs
    };

    let train = split(config.train_titles, &mut rng);
    let valid = split(config.valid_titles, &mut rng);
    let test = split(config.test_titles, &mut rng);
    Ok(SynthCorpus { train, valid, test })
}

/// Tiny labeled documents for gradient checking: three sentences each,
/// zero to two mentions per sentence drawn from a five-name pool, so the
/// entity-free, single-node, and multi-node paths all occur.
pub fn toy_documents(count: usize, seed: u64) -> Vec<Document> {
    const NAMES: &[&str] = &["Alpha", "Bravo", "Carol", "Delta", "Echo"];
    const FILLERS: &[&str] = &["met", "saw", "left", "spoke", "later", "again", "downtown"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut sentences = Vec::with_capacity(3);
            for _ in 0..3 {
                let mut words = vec![FILLERS[rng.gen_range(0..FILLERS.len())].to_string()];
                for _ in 0..rng.gen_range(0..=2usize) {
                    words.push(NAMES[rng.gen_range(0..NAMES.len())].to_string());
                    words.push(FILLERS[rng.gen_range(0..FILLERS.len())].to_string());
                }
                words.push(".".to_string());
                sentences.push(words.join(" "));
            }
            let label = if i % 2 == 0 { Label::Human } else { Label::Machine };
            Document::from_text(format!("toy{i}"), sentences.join(" ")).with_label(label)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::{entity_consistency_count, sentence_consistency_count};
    use crate::entity::extract_mentions;
    use std::collections::BTreeMap;

    fn small() -> SynthCorpus {
        generate_synthetic_corpus(&SynthConfig {
            train_titles: 6,
            valid_titles: 2,
            test_titles: 2,
            seed: 9,
        })
        .unwrap()
    }

    fn token_multiset(doc: &Document) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for t in &doc.tokens {
            *counts.entry(t.text.clone()).or_insert(0) += 1;
        }
        counts
    }

    #[test]
    fn split_sizes_and_pairing_hold() {
        let corpus = small();
        assert_eq!(corpus.train.len(), 12);
        assert_eq!(corpus.valid.len(), 4);
        assert_eq!(corpus.test.len(), 4);
        for docs in [&corpus.train, &corpus.valid, &corpus.test] {
            for pair in docs.chunks(2) {
                assert_eq!(pair[0].label, Some(Label::Human));
                assert_eq!(pair[1].label, Some(Label::Machine));
                assert_eq!(pair[0].meta.get("title"), pair[1].meta.get("title"));
            }
        }
    }

    #[test]
    fn titles_are_globally_unique() {
        let corpus = small();
        let mut titles = std::collections::HashSet::new();
        for doc in corpus.train.iter().chain(&corpus.valid).chain(&corpus.test) {
            titles.insert(doc.meta.get("title").unwrap().clone());
        }
        assert_eq!(titles.len(), 10);
    }

    #[test]
    fn pairs_share_an_exact_token_multiset() {
        let corpus = small();
        for pair in corpus.train.chunks(2) {
            assert_eq!(token_multiset(&pair[0]), token_multiset(&pair[1]));
        }
    }

    #[test]
    fn human_side_chains_and_machine_side_isolates() {
        let corpus = small();
        for docs in [&corpus.train, &corpus.valid, &corpus.test] {
            for pair in docs.chunks(2) {
                let human = &pair[0];
                let machine = &pair[1];
                let hm = extract_mentions(human);
                let mm = extract_mentions(machine);
                let s = human.sentences.len();
                assert_eq!(entity_consistency_count(human, &hm, 1), s - 1);
                assert_eq!(sentence_consistency_count(human, &hm, 1), s - 1);
                for w in 1..=3 {
                    assert_eq!(entity_consistency_count(machine, &mm, w), 0);
                    assert_eq!(sentence_consistency_count(machine, &mm, w), 0);
                }
            }
        }
    }

    #[test]
    fn every_sentence_carries_two_mentions() {
        let corpus = small();
        for doc in corpus.train.iter().chain(&corpus.valid).chain(&corpus.test) {
            let mentions = extract_mentions(doc);
            assert_eq!(mentions.len(), 2 * doc.sentences.len(), "doc {}", doc.id);
            for m in &mentions {
                assert_eq!(m.token_end - m.token_start, 1);
            }
        }
    }

    #[test]
    fn validation_names_mostly_occur_in_training() {
        let corpus = generate_synthetic_corpus(&SynthConfig {
            train_titles: 20,
            valid_titles: 5,
            test_titles: 5,
            seed: 9,
        })
        .unwrap();
        let names = |docs: &[Document]| -> std::collections::HashSet<String> {
            docs.iter()
                .flat_map(extract_mentions)
                .map(|m| m.normalized)
                .collect()
        };
        let train_names = names(&corpus.train);
        let valid_names = names(&corpus.valid);
        let shared = valid_names.intersection(&train_names).count();
        assert!(
            shared * 2 > valid_names.len(),
            "only {shared} of {} validation names appear in training",
            valid_names.len()
        );
    }

    #[test]
    fn same_seed_reproduces_and_seeds_differ() {
        let config = SynthConfig {
            train_titles: 3,
            valid_titles: 1,
            test_titles: 1,
            seed: 5,
        };
        let a = generate_synthetic_corpus(&config).unwrap();
        let b = generate_synthetic_corpus(&config).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.text, y.text);
            assert_eq!(x.id, y.id);
        }
        let c = generate_synthetic_corpus(&SynthConfig { seed: 6, ..config }).unwrap();
        assert!(a.train.iter().zip(&c.train).any(|(x, y)| x.text != y.text));
    }

    #[test]
    fn total_split_follows_the_standard_ratio() {
        let config = SynthConfig::with_total(200, 1);
        assert_eq!(config.train_titles, 150);
        assert_eq!(config.valid_titles, 25);
        assert_eq!(config.test_titles, 25);
        assert!(SynthConfig::with_total(3, 1).validate().is_err());
    }

    #[test]
    fn zero_sized_split_is_rejected() {
        let err = generate_synthetic_corpus(&SynthConfig {
            train_titles: 1,
            valid_titles: 0,
            test_titles: 1,
            seed: 1,
        })
        .unwrap_err();
        assert!(err.to_string().contains("at least one title"));
    }
}
