//! Tokenization, sentence segmentation, and the JSONL corpus format.
//!
//! A word is a whitespace-delimited token with leading/trailing punctuation
//! split off as separate tokens. All offsets are byte offsets into the raw
//! text, so `&doc.text[t.char_start..t.char_end] == t.text` always holds.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Tokens kept whole even though they end with a period.
/// Checked case-sensitively, after leading punctuation has been removed.
const ABBREVIATIONS: &[&str] = &[
    "Co.", "Dr.", "Gen.", "Gov.", "Inc.", "Jr.", "Ltd.", "Mr.", "Mrs.", "Ms.", "Prof.", "Rep.",
    "Sen.", "Sr.", "St.", "etc.", "e.g.", "i.e.", "vs.",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    /// Byte offset of the first byte of the token in the raw text.
    pub char_start: usize,
    /// Byte offset one past the last byte of the token.
    pub char_end: usize,
}

/// Half-open range of token indices forming one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentenceSpan {
    pub token_start: usize,
    pub token_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Human,
    Machine,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Human => "human",
            Label::Machine => "machine",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "human" => Some(Label::Human),
            "machine" => Some(Label::Machine),
            _ => None,
        }
    }

    /// Class index used by the classifier: human is 0, machine is 1.
    pub fn class_index(self) -> usize {
        match self {
            Label::Human => 0,
            Label::Machine => 1,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An entity span supplied by the corpus rather than the rule extractor.
/// Token indices are resolved against the document during construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityAnnotation {
    pub sentence: usize,
    pub token_start: usize,
    pub token_end: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub ner_type: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub sentences: Vec<SentenceSpan>,
    pub label: Option<Label>,
    pub meta: BTreeMap<String, String>,
    /// `Some` when the corpus supplied entity spans; these take precedence
    /// over the rule-based extractor, even when empty.
    pub entity_annotations: Option<Vec<EntityAnnotation>>,
}

impl Document {
    /// Builds a document by running the built-in tokenizer and segmenter.
    pub fn from_text(id: impl Into<String>, text: impl Into<String>) -> Document {
        let text = text.into();
        let tokens = tokenize(&text);
        let sentences = segment_sentences(&tokens);
        Document {
            id: id.into(),
            text,
            tokens,
            sentences,
            label: None,
            meta: BTreeMap::new(),
            entity_annotations: None,
        }
    }

    pub fn with_label(mut self, label: Label) -> Document {
        self.label = Some(label);
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Document {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn sentence_tokens(&self, sentence: usize) -> &[Token] {
        let span = &self.sentences[sentence];
        &self.tokens[span.token_start..span.token_end]
    }

    /// Checks the structural invariants that the rest of the pipeline
    /// relies on. Constructors in this module uphold them; this exists for
    /// documents assembled by hand.
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0;
        for t in &self.tokens {
            if t.char_start < prev_end || t.char_start >= t.char_end {
                return Err(Error::document(&self.id, "tokens overlap or are empty"));
            }
            if self.text.get(t.char_start..t.char_end) != Some(t.text.as_str()) {
                return Err(Error::document(
                    &self.id,
                    format!("token `{}` does not match its span", t.text),
                ));
            }
            prev_end = t.char_end;
        }
        let mut covered = 0;
        for s in &self.sentences {
            if s.token_start != covered || s.token_start >= s.token_end {
                return Err(Error::document(
                    &self.id,
                    "sentence spans must be sorted, non-empty, and cover all tokens",
                ));
            }
            covered = s.token_end;
        }
        if covered != self.tokens.len() {
            return Err(Error::document(
                &self.id,
                "sentence spans do not cover all tokens",
            ));
        }
        Ok(())
    }
}

fn is_letter_period_alternation(s: &str) -> bool {
    let mut chars = s.chars();
    let mut groups = 0;
    loop {
        match chars.next() {
            None => return groups >= 2,
            Some(c) if c.is_alphabetic() => match chars.next() {
                Some('.') => groups += 1,
                _ => return false,
            },
            Some(_) => return false,
        }
    }
}

fn keep_whole(s: &str) -> bool {
    ABBREVIATIONS.contains(&s) || is_letter_period_alternation(s)
}

/// Splits raw text into tokens with byte offsets.
///
/// Whitespace separates words; leading and trailing ASCII punctuation become
/// tokens of their own. Abbreviations and letter-period forms like `U.S.`
/// keep their periods.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word_start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(start) = word_start.take() {
                split_word(text, start, i, &mut tokens);
            }
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    if let Some(start) = word_start {
        split_word(text, start, text.len(), &mut tokens);
    }
    tokens
}

fn split_word(text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
    let push = |out: &mut Vec<Token>, a: usize, b: usize| {
        out.push(Token {
            text: text[a..b].to_string(),
            char_start: a,
            char_end: b,
        });
    };
    let mut a = start;
    let mut b = end;
    loop {
        if a >= b {
            return;
        }
        let s = &text[a..b];
        if keep_whole(s) {
            push(out, a, b);
            return;
        }
        let c = s.chars().next().unwrap();
        if c.is_ascii_punctuation() {
            push(out, a, a + c.len_utf8());
            a += c.len_utf8();
        } else {
            break;
        }
    }
    let mut tail = Vec::new();
    loop {
        let s = &text[a..b];
        if keep_whole(s) {
            break;
        }
        let c = s.chars().next_back().unwrap();
        if c.is_ascii_punctuation() && b - c.len_utf8() > a {
            tail.push((b - c.len_utf8(), b));
            b -= c.len_utf8();
        } else {
            break;
        }
    }
    push(out, a, b);
    for &(ta, tb) in tail.iter().rev() {
        push(out, ta, tb);
    }
}

fn is_terminator(t: &Token) -> bool {
    !t.text.is_empty() && t.text.chars().all(|c| matches!(c, '.' | '!' | '?'))
}

/// Groups tokens into sentences. A boundary falls after a run of terminator
/// tokens (`.`, `!`, `?`); abbreviations never produce such tokens because
/// the tokenizer keeps their periods attached. Trailing tokens without a
/// terminator form the final sentence.
pub fn segment_sentences(tokens: &[Token]) -> Vec<SentenceSpan> {
    let mut spans = Vec::new();
    let mut sent_start = 0;
    for i in 0..tokens.len() {
        let boundary =
            is_terminator(&tokens[i]) && (i + 1 == tokens.len() || !is_terminator(&tokens[i + 1]));
        if boundary {
            spans.push(SentenceSpan {
                token_start: sent_start,
                token_end: i + 1,
            });
            sent_start = i + 1;
        }
    }
    if sent_start < tokens.len() {
        spans.push(SentenceSpan {
            token_start: sent_start,
            token_end: tokens.len(),
        });
    }
    spans
}

#[derive(serde::Deserialize)]
struct RawEntity {
    sentence: usize,
    char_start: usize,
    char_end: usize,
    #[serde(rename = "type", default)]
    ner_type: Option<String>,
}

#[derive(serde::Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    meta: Option<BTreeMap<String, String>>,
    #[serde(default)]
    sentences: Option<Vec<(usize, usize)>>,
    #[serde(default)]
    entities: Option<Vec<RawEntity>>,
}

#[derive(serde::Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<&'static str>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    meta: &'a BTreeMap<String, String>,
}

fn document_from_record(record: RawRecord, line: usize) -> Result<Document> {
    let RawRecord {
        id,
        text,
        label,
        meta,
        sentences,
        entities,
    } = record;

    let label = match label {
        None => None,
        Some(s) => Some(
            Label::parse(&s)
                .ok_or_else(|| Error::line(line, format!("unknown label `{s}` in document {id}")))?,
        ),
    };

    let tokens = tokenize(&text);
    let sentence_spans = match sentences {
        None => segment_sentences(&tokens),
        Some(char_spans) => sentences_from_char_spans(&id, &tokens, &char_spans)?,
    };

    let entity_annotations = match entities {
        None => None,
        Some(raw) => Some(resolve_entities(&id, &tokens, &sentence_spans, raw)?),
    };

    let doc = Document {
        id,
        text,
        tokens,
        sentences: sentence_spans,
        label,
        meta: meta.unwrap_or_default(),
        entity_annotations,
    };
    doc.validate()?;
    Ok(doc)
}

fn sentences_from_char_spans(
    id: &str,
    tokens: &[Token],
    char_spans: &[(usize, usize)],
) -> Result<Vec<SentenceSpan>> {
    let mut spans = Vec::with_capacity(char_spans.len());
    let mut k = 0;
    let mut prev_end = 0;
    for &(cs, ce) in char_spans {
        if cs >= ce || cs < prev_end {
            return Err(Error::document(
                id,
                "sentence annotations must be sorted, non-overlapping char spans",
            ));
        }
        prev_end = ce;
        let token_start = k;
        while k < tokens.len() && tokens[k].char_start >= cs && tokens[k].char_end <= ce {
            k += 1;
        }
        if k == token_start {
            return Err(Error::document(
                id,
                format!("sentence annotation {cs}..{ce} contains no tokens"),
            ));
        }
        spans.push(SentenceSpan {
            token_start,
            token_end: k,
        });
    }
    if k != tokens.len() {
        return Err(Error::document(
            id,
            format!(
                "token `{}` at {} is outside every sentence annotation",
                tokens[k].text, tokens[k].char_start
            ),
        ));
    }
    Ok(spans)
}

fn resolve_entities(
    id: &str,
    tokens: &[Token],
    sentences: &[SentenceSpan],
    raw: Vec<RawEntity>,
) -> Result<Vec<EntityAnnotation>> {
    let mut out = Vec::with_capacity(raw.len());
    for e in raw {
        let span = sentences.get(e.sentence).ok_or_else(|| {
            Error::document(id, format!("entity names sentence {} of {}", e.sentence, sentences.len()))
        })?;
        let toks = &tokens[span.token_start..span.token_end];
        let token_start = toks.iter().position(|t| t.char_start == e.char_start);
        let token_last = toks.iter().position(|t| t.char_end == e.char_end);
        let (ts, tl) = match (token_start, token_last) {
            (Some(a), Some(b)) if a <= b => (a, b),
            _ => {
                return Err(Error::document(
                    id,
                    format!(
                        "entity span {}..{} is not aligned to token boundaries",
                        e.char_start, e.char_end
                    ),
                ))
            }
        };
        out.push(EntityAnnotation {
            sentence: e.sentence,
            token_start: span.token_start + ts,
            token_end: span.token_start + tl + 1,
            char_start: e.char_start,
            char_end: e.char_end,
            ner_type: e.ner_type,
        });
    }
    out.sort_by_key(|e| (e.sentence, e.token_start, e.token_end));
    Ok(out)
}

/// Parses one document per line. Blank lines are skipped; anything else that
/// fails to parse reports its 1-based line number.
pub fn read_corpus_from(reader: impl BufRead) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let n = idx + 1;
        let line = line.map_err(|e| Error::line(n, format!("unreadable line: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::line(n, format!("malformed record: {e}")))?;
        docs.push(document_from_record(record, n)?);
    }
    Ok(docs)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus_from(std::io::BufReader::new(file))
}

/// Writes documents as JSONL with `id`, `text`, and any label and metadata.
/// Output is byte-stable for identical input.
pub fn write_corpus(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for doc in docs {
        let record = OutRecord {
            id: &doc.id,
            text: &doc.text,
            label: doc.label.map(Label::as_str),
            meta: &doc.meta,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::invalid(format!("serializing document {}: {e}", doc.id)))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
