//! Next-sentence-prediction coherence scoring.
//!
//! A dataset builder turns ordered documents into balanced positive and
//! negative sentence pairs, a small trainable scorer learns which pairs
//! are truly adjacent, and `score_document` emits one score per adjacent
//! sentence pair for downstream aggregation.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::Vocab;
use crate::entity::normalize;
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, AdamW};
use crate::tape::{Gradients, Tape, Value};
use crate::tensor::Tensor;
use crate::text::Document;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairLabel {
    Positive,
    Negative,
}

/// One training example: a first sentence and a candidate successor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NspPair {
    pub first: Vec<String>,
    pub second: Vec<String>,
    pub label: PairLabel,
    pub source_doc: String,
    /// Sentence indices inside the source document.
    pub first_index: usize,
    pub second_index: usize,
}

fn normalized_token_set(doc: &Document, sentence: usize) -> BTreeSet<String> {
    doc.sentence_tokens(sentence)
        .iter()
        .map(|t| normalize(&t.text))
        .filter(|t| !t.is_empty())
        .collect()
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn sentence_tokens(doc: &Document, sentence: usize) -> Vec<String> {
    doc.sentence_tokens(sentence)
        .iter()
        .map(|t| t.text.clone())
        .collect()
}

/// For every adjacent pair (A, B) in a document of at least three
/// sentences, emits a positive (A, B) and a negative (A, C), where C is
/// the sentence most token-Jaccard-similar to B among the document's
/// other sentences (A and B excluded, ties to the earliest index).
pub fn build_nsp_dataset(corpus: &[Document]) -> Vec<NspPair> {
    let mut pairs = Vec::new();
    for doc in corpus {
        let s = doc.sentences.len();
        if s < 3 {
            continue;
        }
        let token_sets: Vec<BTreeSet<String>> =
            (0..s).map(|i| normalized_token_set(doc, i)).collect();
        for j in 1..s {
            let a = j - 1;
            let b = j;
            let mut best: Option<(usize, f64)> = None;
            for c in 0..s {
                if c == a || c == b {
                    continue;
                }
                let sim = jaccard(&token_sets[c], &token_sets[b]);
                let better = match best {
                    None => true,
                    Some((_, best_sim)) => sim > best_sim,
                };
                if better {
                    best = Some((c, sim));
                }
            }
            let (c, _) = best.expect("s >= 3 leaves at least one candidate");
            pairs.push(NspPair {
                first: sentence_tokens(doc, a),
                second: sentence_tokens(doc, b),
                label: PairLabel::Positive,
                source_doc: doc.id.clone(),
                first_index: a,
                second_index: b,
            });
            pairs.push(NspPair {
                first: sentence_tokens(doc, a),
                second: sentence_tokens(doc, c),
                label: PairLabel::Negative,
                source_doc: doc.id.clone(),
                first_index: a,
                second_index: c,
            });
        }
    }
    pairs
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    first: String,
    second: String,
    label: String,
    doc: String,
    first_index: usize,
    second_index: usize,
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[NspPair]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for pair in pairs {
        let record = PairRecord {
            first: pair.first.join(" "),
            second: pair.second.join(" "),
            label: match pair.label {
                PairLabel::Positive => "pos".to_string(),
                PairLabel::Negative => "neg".to_string(),
            },
            doc: pair.source_doc.clone(),
            first_index: pair.first_index,
            second_index: pair.second_index,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::invalid(format!("pair serialization: {e}")))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<NspPair>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pairs_from(std::io::BufReader::new(file))
}

pub fn read_pairs_from(reader: impl BufRead) -> Result<Vec<NspPair>> {
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::line(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = serde_json::from_str(&line)
            .map_err(|e| Error::line(line_no, format!("malformed pair record: {e}")))?;
        let label = match record.label.as_str() {
            "pos" => PairLabel::Positive,
            "neg" => PairLabel::Negative,
            other => {
                return Err(Error::line(line_no, format!("unknown pair label {other:?}")));
            }
        };
        let first: Vec<String> = record.first.split_whitespace().map(str::to_string).collect();
        let second: Vec<String> = record.second.split_whitespace().map(str::to_string).collect();
        if first.is_empty() || second.is_empty() {
            return Err(Error::line(line_no, "pair with an empty sentence"));
        }
        pairs.push(NspPair {
            first,
            second,
            label,
            source_doc: record.doc,
            first_index: record.first_index,
            second_index: record.second_index,
        });
    }
    Ok(pairs)
}

/// Pair scorer: mean-of-embeddings sentence encodings, concatenated,
/// one tanh hidden layer, then a sigmoid over a scalar score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NspScorer {
    pub vocab: Vocab,
    /// vocab.len() x d_w embedding table.
    pub table: Tensor,
    /// 2*d_w x d_hidden projection over the concatenated pair encoding.
    pub w_p: Tensor,
    /// d_hidden x 1 scoring vector.
    pub u_p: Tensor,
    /// 1 x 1 scoring bias.
    pub bias: Tensor,
}

impl NspScorer {
    /// The scoring head starts at zero so an untrained scorer emits 0.5
    /// for every pair.
    pub fn new(vocab: Vocab, d_w: usize, d_hidden: usize, rng: &mut impl Rng) -> NspScorer {
        let table = Tensor::glorot(vocab.len(), d_w, rng);
        let w_p = Tensor::glorot(2 * d_w, d_hidden, rng);
        NspScorer {
            vocab,
            table,
            w_p,
            u_p: Tensor::zeros(d_hidden, 1),
            bias: Tensor::zeros(1, 1),
        }
    }

    pub fn d_w(&self) -> usize {
        self.table.cols()
    }

    fn token_ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.vocab.id(t)).collect()
    }

    fn encode_plain(&self, tokens: &[String]) -> Vec<f64> {
        let d_w = self.d_w();
        let ids = self.token_ids(tokens);
        if ids.is_empty() {
            return vec![0.0; d_w];
        }
        let mut mean = vec![0.0; d_w];
        for &id in &ids {
            for (m, v) in mean.iter_mut().zip(self.table.row_slice(id)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= ids.len() as f64;
        }
        mean
    }

    /// Probability in (0,1) that `second` follows `first`.
    pub fn score_pair(&self, first: &[String], second: &[String]) -> f64 {
        let mut joined = self.encode_plain(first);
        joined.extend(self.encode_plain(second));
        let d_hidden = self.w_p.cols();
        let mut logit = self.bias.get(0, 0);
        for h in 0..d_hidden {
            let mut pre = 0.0;
            for (i, x) in joined.iter().enumerate() {
                pre += x * self.w_p.get(i, h);
            }
            logit += pre.tanh() * self.u_p.get(h, 0);
        }
        stable_sigmoid(logit)
    }

    /// One score per adjacent sentence pair, length sentences - 1.
    pub fn score_document(&self, doc: &Document) -> Vec<f64> {
        let s = doc.sentences.len();
        if s < 2 {
            return Vec::new();
        }
        let sentences: Vec<Vec<String>> = (0..s).map(|i| sentence_tokens(doc, i)).collect();
        (1..s)
            .map(|j| self.score_pair(&sentences[j - 1], &sentences[j]))
            .collect()
    }

    fn pair_loss<'t>(&self, tape: &'t Tape, bound: &BoundScorer<'t>, pair: &NspPair) -> Result<Value<'t>> {
        let enc_a = encode_on_tape(tape, bound, &self.token_ids(&pair.first), self.d_w())?;
        let enc_b = encode_on_tape(tape, bound, &self.token_ids(&pair.second), self.d_w())?;
        let joined = tape.concat_cols(&[enc_a, enc_b])?;
        let hidden = joined.matmul(bound.w_p)?.tanh();
        let logit = hidden.matmul(bound.u_p)?.add(bound.bias)?;
        let target = match pair.label {
            PairLabel::Positive => 1.0,
            PairLabel::Negative => 0.0,
        };
        logit.sigmoid_cross_entropy(target)
    }
}

struct BoundScorer<'t> {
    table: Value<'t>,
    w_p: Value<'t>,
    u_p: Value<'t>,
    bias: Value<'t>,
}

fn encode_on_tape<'t>(
    tape: &'t Tape,
    bound: &BoundScorer<'t>,
    ids: &[usize],
    d_w: usize,
) -> Result<Value<'t>> {
    if ids.is_empty() {
        return Ok(tape.constant(Tensor::zeros(1, d_w)));
    }
    bound.table.select_rows(ids)?.mean_rows()
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NspTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub d_w: usize,
    pub d_hidden: usize,
    /// Fraction of pairs held out for the per-epoch accuracy report.
    pub holdout_fraction: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl NspTrainConfig {
    pub fn full() -> NspTrainConfig {
        NspTrainConfig {
            learning_rate: 1e-5,
            batch_size: 8,
            epochs: 10,
            seed: 42,
            d_w: 64,
            d_hidden: 64,
            holdout_fraction: 0.2,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }

    /// CPU-scale settings; saturates the synthetic pair task in
    /// roughly ten epochs.
    pub fn desk() -> NspTrainConfig {
        NspTrainConfig {
            learning_rate: 1e-2,
            epochs: 15,
            ..NspTrainConfig::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.d_w == 0 || self.d_hidden == 0 {
            return Err(Error::Config("dimensions must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NspEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_accuracy: f64,
}

/// Fraction of pairs the scorer classifies correctly at threshold 0.5.
pub fn pair_accuracy(scorer: &NspScorer, pairs: &[NspPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let correct = pairs
        .iter()
        .filter(|p| {
            let predicted_positive = scorer.score_pair(&p.first, &p.second) > 0.5;
            predicted_positive == (p.label == PairLabel::Positive)
        })
        .count();
    correct as f64 / pairs.len() as f64
}

/// Trains a scorer with sigmoid cross-entropy over mini-batches.
/// The vocabulary is built from the pairs themselves.
pub fn train_nsp(pairs: &[NspPair], config: &NspTrainConfig) -> Result<(NspScorer, Vec<NspEpochLog>)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("cannot train an NSP scorer on zero pairs"));
    }
    for pair in pairs {
        if pair.first.is_empty() || pair.second.is_empty() {
            return Err(Error::document(
                &pair.source_doc,
                "NSP pair with an empty sentence",
            ));
        }
    }
    let vocab = Vocab::from_tokens(
        pairs
            .iter()
            .flat_map(|p| p.first.iter().chain(p.second.iter()))
            .map(String::as_str),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut scorer = NspScorer::new(vocab, config.d_w, config.d_hidden, &mut rng);

    let mut shuffled: Vec<&NspPair> = pairs.iter().collect();
    shuffled.shuffle(&mut rng);
    let holdout_len = (pairs.len() as f64 * config.holdout_fraction).floor() as usize;
    let (holdout, train): (Vec<&NspPair>, Vec<&NspPair>) = {
        let (h, t) = shuffled.split_at(holdout_len);
        (h.to_vec(), t.to_vec())
    };
    if train.is_empty() {
        return Err(Error::invalid("holdout fraction leaves no training pairs"));
    }

    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay);
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let bound = BoundScorer {
                table: tape.param(&scorer.table),
                w_p: tape.param(&scorer.w_p),
                u_p: tape.param(&scorer.u_p),
                bias: tape.param(&scorer.bias),
            };
            let mut batch_loss: Option<Value<'_>> = None;
            for &idx in batch {
                let loss = scorer.pair_loss(&tape, &bound, train[idx])?;
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => acc.add(loss)?,
                });
            }
            let total = batch_loss.expect("chunks are non-empty");
            let mean = total.scale(1.0 / batch.len() as f64)?;
            loss_sum += mean.value().item()? * batch.len() as f64;
            let mut grads: Gradients = mean.backward()?;
            let mut grad_vec = vec![
                grads.take(bound.table).expect("table is a parameter"),
                grads.take(bound.w_p).expect("w_p is a parameter"),
                grads.take(bound.u_p).expect("u_p is a parameter"),
                grads.take(bound.bias).expect("bias is a parameter"),
            ];
            clip_global_norm(&mut grad_vec, config.clip_norm)?;
            optimizer.step(
                &mut [
                    &mut scorer.table,
                    &mut scorer.w_p,
                    &mut scorer.u_p,
                    &mut scorer.bias,
                ],
                &grad_vec,
            )?;
        }
        let eval_pairs: Vec<NspPair> = if holdout.is_empty() {
            train.iter().map(|p| (*p).clone()).collect()
        } else {
            holdout.iter().map(|p| (*p).clone()).collect()
        };
        log.push(NspEpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            holdout_accuracy: pair_accuracy(&scorer, &eval_pairs),
        });
    }
    Ok((scorer, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str) -> Document {
        Document::from_text(id, text)
    }

    #[test]
    fn two_sentence_document_yields_no_pairs() {
        let d = doc("d", "Alpha left . Bravo stayed .");
        assert_eq!(d.sentences.len(), 2);
        assert!(build_nsp_dataset(&[d]).is_empty());
    }

    #[test]
    fn negative_is_the_most_similar_to_the_successor() {
        // For the pair (s0, s1) the candidates are s2 and s3; s2 shares
        // two normalized tokens with s1, s3 shares none.
        let d = doc(
            "d",
            "Alpha stayed home . Bravo went north . Bravo went south . Plums are cheap .",
        );
        let pairs = build_nsp_dataset(&[d]);
        assert_eq!(pairs.len(), 6);
        assert_eq!(pairs[0].label, PairLabel::Positive);
        assert_eq!(pairs[0].second_index, 1);
        assert_eq!(pairs[1].label, PairLabel::Negative);
        assert_eq!(pairs[1].first_index, 0);
        assert_eq!(pairs[1].second_index, 2);
    }

    #[test]
    fn ties_break_to_the_earliest_index() {
        let d = doc("d", "go on . go on . go on . go on .");
        let pairs = build_nsp_dataset(&[d]);
        // Pair (0,1): candidates 2 and 3 are equally similar; earliest wins.
        assert_eq!(pairs[1].second_index, 2);
        // Pair (1,2): candidates 0 and 3; earliest wins.
        assert_eq!(pairs[3].second_index, 0);
    }

    #[test]
    fn dataset_is_balanced_and_negatives_differ() {
        let docs = vec![
            doc("a", "Red birds sing . Blue fish swim . Green frogs jump . Red birds rest ."),
            doc("b", "One thing . Two things . Three things ."),
        ];
        let pairs = build_nsp_dataset(&docs);
        let positives = pairs.iter().filter(|p| p.label == PairLabel::Positive).count();
        let negatives = pairs.len() - positives;
        assert_eq!(positives, negatives);
        for chunk in pairs.chunks(2) {
            assert_eq!(chunk[0].label, PairLabel::Positive);
            assert_eq!(chunk[1].label, PairLabel::Negative);
            assert_ne!(chunk[0].second_index, chunk[1].second_index);
            assert_eq!(chunk[0].first_index, chunk[1].first_index);
        }
    }

    #[test]
    fn fresh_scorer_scores_every_pair_at_half() {
        let vocab = Vocab::from_tokens(["a", "b", "c"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scorer = NspScorer::new(vocab, 4, 3, &mut rng);
        let d = doc("d", "a b . b c . c a .");
        let scores = scorer.score_document(&d);
        assert_eq!(scores.len(), 2);
        for s in scores {
            assert_eq!(s, 0.5);
        }
    }

    #[test]
    fn score_document_shape_contract() {
        let vocab = Vocab::from_tokens(["x"]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut scorer = NspScorer::new(vocab, 2, 2, &mut rng);
        scorer.u_p = Tensor::filled(2, 1, 0.3).unwrap();
        scorer.bias = Tensor::filled(1, 1, -0.1).unwrap();
        assert!(scorer.score_document(&doc("d", "x .")).is_empty());
        let scores = scorer.score_document(&doc("d", "x . x x . x ."));
        assert_eq!(scores.len(), 2);
        for s in scores {
            assert!(s > 0.0 && s < 1.0);
        }
    }

    fn separable_pairs() -> Vec<NspPair> {
        // Positives end in "yes", negatives in "no"; filler varies.
        let fillers = ["ash", "birch", "cedar", "dogwood", "elm"];
        let mut pairs = Vec::new();
        for (i, f) in fillers.iter().cycle().take(30).enumerate() {
            let label = if i % 2 == 0 { PairLabel::Positive } else { PairLabel::Negative };
            let marker = if label == PairLabel::Positive { "yes" } else { "no" };
            pairs.push(NspPair {
                first: vec!["the".into(), (*f).into()],
                second: vec![(*f).into(), marker.into()],
                label,
                source_doc: format!("s{i}"),
                first_index: 0,
                second_index: 1,
            });
        }
        pairs
    }

    #[test]
    fn separable_pairs_reach_high_holdout_accuracy() {
        let pairs = separable_pairs();
        let config = NspTrainConfig {
            epochs: 20,
            d_w: 8,
            d_hidden: 8,
            ..NspTrainConfig::desk()
        };
        let (_, log) = train_nsp(&pairs, &config).unwrap();
        let best = log.iter().map(|e| e.holdout_accuracy).fold(0.0, f64::max);
        assert!(best >= 0.95, "best holdout accuracy {best}");
    }

    #[test]
    fn training_loss_drops_between_first_epochs() {
        let pairs = separable_pairs();
        let config = NspTrainConfig {
            epochs: 2,
            d_w: 8,
            d_hidden: 8,
            ..NspTrainConfig::desk()
        };
        let (_, log) = train_nsp(&pairs, &config).unwrap();
        assert!(log[1].train_loss <= log[0].train_loss, "{log:?}");
    }

    #[test]
    fn training_on_zero_pairs_fails() {
        let err = train_nsp(&[], &NspTrainConfig::desk()).unwrap_err();
        assert!(err.to_string().contains("zero pairs"));
    }

    #[test]
    fn same_seed_reproduces_the_log() {
        let pairs = separable_pairs();
        let config = NspTrainConfig {
            epochs: 3,
            d_w: 8,
            d_hidden: 8,
            ..NspTrainConfig::desk()
        };
        let (_, log_a) = train_nsp(&pairs, &config).unwrap();
        let (_, log_b) = train_nsp(&pairs, &config).unwrap();
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn pair_files_round_trip() {
        let d = doc("src", "Ada wrote code . The code ran fast . Everyone cheered loudly .");
        let pairs = build_nsp_dataset(&[d]);
        assert!(!pairs.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        write_pairs(&path, &pairs).unwrap();
        let back = read_pairs(&path).unwrap();
        assert_eq!(pairs, back);
    }

    #[test]
    fn scorer_survives_serde() {
        let vocab = Vocab::from_tokens(["a", "b"]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut scorer = NspScorer::new(vocab, 3, 2, &mut rng);
        scorer.u_p = Tensor::filled(2, 1, 0.7).unwrap();
        let json = serde_json::to_string(&scorer).unwrap();
        let back: NspScorer = serde_json::from_str(&json).unwrap();
        let first = vec!["a".to_string()];
        let second = vec!["b".to_string()];
        assert_eq!(scorer.score_pair(&first, &second), back.score_pair(&first, &second));
    }
}
