//! Corpus ingestion and tokenization: TSV files in, fixed-length token-ID
//! sequences out.
//!
//! The input format is one example per line, `id \t text \t label`, UTF-8,
//! LF line endings. Text is taken verbatim — upstream corpora arrive
//! preprocessed and we do no normalization of our own.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// Subword continuation marker (`##affable`).
pub const CONTINUATION_PREFIX: &str = "##";

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: no data lines")]
    EmptyFile { path: String },
    #[error("vocab: {0}")]
    InvalidVocab(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("max_len must be at least 3, got {0}")]
    MaxLenTooSmall(usize),
    #[error("vocab size {requested} cannot fit the {special} special tokens")]
    VocabTooSmall { requested: usize, special: usize },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One dataset row, exactly as read from disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawExample {
    pub id: String,
    pub text: String,
    pub label: String,
}

/// The ordered class names of a run. Order is fixed and defines both
/// `label_id` and the confusion-matrix axes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new(names: Vec<String>) -> Self {
        LabelSet { names }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id_of(&self, label: &str) -> Option<usize> {
        self.names.iter().position(|n| n == label)
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }
}

/// WordPiece vocabulary: token string per ID, with the four special tokens
/// resolved. `[PAD]` must sit at ID 0.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, usize>,
    pad_id: usize,
    unk_id: usize,
    cls_id: usize,
    sep_id: usize,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if lookup.insert(tok.clone(), i).is_some() {
                return Err(CorpusError::InvalidVocab(format!(
                    "duplicate token {:?}",
                    tok
                )));
            }
        }
        let find = |name: &str| {
            lookup
                .get(name)
                .copied()
                .ok_or_else(|| CorpusError::InvalidVocab(format!("missing special token {}", name)))
        };
        let pad_id = find(PAD_TOKEN)?;
        if pad_id != 0 {
            return Err(CorpusError::InvalidVocab(format!(
                "{} must have ID 0, found {}",
                PAD_TOKEN, pad_id
            )));
        }
        let unk_id = find(UNK_TOKEN)?;
        let cls_id = find(CLS_TOKEN)?;
        let sep_id = find(SEP_TOKEN)?;
        Ok(Vocab {
            tokens,
            lookup,
            pad_id,
            unk_id,
            cls_id,
            sep_id,
        })
    }

    /// One token per line, UTF-8, line index = token ID.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Vocab::new(text.lines().map(|l| l.to_string()).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn pad_id(&self) -> usize {
        self.pad_id
    }
    pub fn unk_id(&self) -> usize {
        self.unk_id
    }
    pub fn cls_id(&self) -> usize {
        self.cls_id
    }
    pub fn sep_id(&self) -> usize {
        self.sep_id
    }
}

/// A fixed-length encoded example ready for the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    /// Length exactly `max_len`; starts with CLS, one SEP at the last
    /// unmasked position, PAD after.
    pub token_ids: Vec<usize>,
    /// Prefix of 1s (real tokens) followed by 0s.
    pub attention_mask: Vec<u8>,
    pub label_id: usize,
    /// Whitespace word count of the raw text, `USER`/`URL` tokens excluded.
    pub word_length: usize,
}

impl EncodedExample {
    pub fn seq_len(&self) -> usize {
        self.attention_mask.iter().map(|&m| m as usize).sum()
    }
}

/// Parse a TSV corpus file. Columns are `id`, `text`, `label` in that order;
/// extra columns are ignored. Errors name the offending line.
pub fn load_tsv(path: impl AsRef<Path>, has_header: bool) -> Result<Vec<RawExample>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let path_str = path.display().to_string();
    let mut examples = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if has_header && idx == 0 {
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(CorpusError::MalformedLine {
                path: path_str.clone(),
                line: line_no,
                reason: format!("expected at least 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let (id, text, label) = (fields[0], fields[1], fields[2]);
        if id.is_empty() {
            return Err(CorpusError::MalformedLine {
                path: path_str.clone(),
                line: line_no,
                reason: "empty id".into(),
            });
        }
        if text.trim().is_empty() {
            return Err(CorpusError::MalformedLine {
                path: path_str.clone(),
                line: line_no,
                reason: "empty text".into(),
            });
        }
        if label.is_empty() {
            return Err(CorpusError::MalformedLine {
                path: path_str.clone(),
                line: line_no,
                reason: "empty label".into(),
            });
        }
        examples.push(RawExample {
            id: id.to_string(),
            text: text.to_string(),
            label: label.to_string(),
        });
    }
    if examples.is_empty() {
        return Err(CorpusError::EmptyFile { path: path_str });
    }
    Ok(examples)
}

/// Distinct labels in first-occurrence order.
pub fn build_label_set(examples: &[RawExample]) -> LabelSet {
    let mut names: Vec<String> = Vec::new();
    for ex in examples {
        if !names.iter().any(|n| n == &ex.label) {
            names.push(ex.label.clone());
        }
    }
    LabelSet::new(names)
}

/// Greedy longest-match-first WordPiece segmentation of one whitespace word.
/// A word with no valid segmentation becomes the single UNK token.
fn wordpiece_word(word: &str, vocab: &Vocab) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut matched: Option<String> = None;
        while start < end {
            let body: String = chars[start..end].iter().collect();
            let candidate = if start == 0 {
                body
            } else {
                format!("{}{}", CONTINUATION_PREFIX, body)
            };
            if vocab.id_of(&candidate).is_some() {
                matched = Some(candidate);
                break;
            }
            end -= 1;
        }
        match matched {
            Some(tok) => {
                pieces.push(tok);
                start = end;
            }
            // Any unmatchable remainder collapses the whole word to UNK.
            None => return vec![UNK_TOKEN.to_string()],
        }
    }
    pieces
}

/// Whitespace-split, then WordPiece-segment each word.
pub fn tokenize_wordpiece(text: &str, vocab: &Vocab) -> Vec<String> {
    text.split_whitespace()
        .flat_map(|w| wordpiece_word(w, vocab))
        .collect()
}

/// Whitespace word count excluding the literal `USER` and `URL` tokens.
pub fn word_length(text: &str) -> usize {
    text.split_whitespace()
        .filter(|w| *w != "USER" && *w != "URL")
        .count()
}

/// Encode one example to exactly `max_len` token IDs:
/// `[CLS] tokens... [SEP] [PAD]...`, tokens truncated (head kept) to fit.
pub fn encode(
    example: &RawExample,
    vocab: &Vocab,
    labels: &LabelSet,
    max_len: usize,
) -> Result<EncodedExample> {
    if max_len < 3 {
        return Err(CorpusError::MaxLenTooSmall(max_len));
    }
    let label_id = labels
        .id_of(&example.label)
        .ok_or_else(|| CorpusError::UnknownLabel(example.label.clone()))?;
    let mut ids: Vec<usize> = tokenize_wordpiece(&example.text, vocab)
        .iter()
        .map(|t| vocab.id_of(t).expect("tokenizer only emits vocab tokens"))
        .collect();
    ids.truncate(max_len - 2);

    let mut token_ids = Vec::with_capacity(max_len);
    token_ids.push(vocab.cls_id());
    token_ids.extend_from_slice(&ids);
    token_ids.push(vocab.sep_id());
    let real = token_ids.len();
    token_ids.resize(max_len, vocab.pad_id());

    let mut attention_mask = vec![0u8; max_len];
    attention_mask[..real].fill(1);

    Ok(EncodedExample {
        token_ids,
        attention_mask,
        label_id,
        word_length: word_length(&example.text),
    })
}

/// Per-class counts plus the most and least frequent classes
/// (ties broken by class order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStats {
    pub counts: Vec<usize>,
    pub most_frequent: usize,
    pub least_frequent: usize,
}

pub fn corpus_stats(examples: &[RawExample], labels: &LabelSet) -> Result<CorpusStats> {
    let mut counts = vec![0usize; labels.len()];
    for ex in examples {
        let id = labels
            .id_of(&ex.label)
            .ok_or_else(|| CorpusError::UnknownLabel(ex.label.clone()))?;
        counts[id] += 1;
    }
    let most_frequent = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let least_frequent = counts
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(CorpusStats {
        counts,
        most_frequent,
        least_frequent,
    })
}

/// Frequency-based vocabulary builder for fixtures and tests: special tokens,
/// then every character seen (plain and continuation forms), then the most
/// frequent whole words until `size` entries exist.
pub fn build_vocab(examples: &[RawExample], size: usize) -> Result<Vocab> {
    let special = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];
    if size < special.len() {
        return Err(CorpusError::VocabTooSmall {
            requested: size,
            special: special.len(),
        });
    }
    let mut word_counts: HashMap<String, usize> = HashMap::new();
    let mut chars: Vec<char> = Vec::new();
    for ex in examples {
        for word in ex.text.split_whitespace() {
            *word_counts.entry(word.to_string()).or_insert(0) += 1;
            for c in word.chars() {
                if !chars.contains(&c) {
                    chars.push(c);
                }
            }
        }
    }
    chars.sort_unstable();

    let mut tokens: Vec<String> = special.iter().map(|s| s.to_string()).collect();
    for &c in &chars {
        if tokens.len() >= size {
            break;
        }
        let plain = c.to_string();
        if !tokens.contains(&plain) {
            tokens.push(plain);
        }
    }
    for &c in &chars {
        if tokens.len() >= size {
            break;
        }
        let cont = format!("{}{}", CONTINUATION_PREFIX, c);
        if !tokens.contains(&cont) {
            tokens.push(cont);
        }
    }
    let mut by_freq: Vec<(&String, &usize)> = word_counts.iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    for (word, _) in by_freq {
        if tokens.len() >= size {
            break;
        }
        if !tokens.contains(word) {
            tokens.push(word.clone());
        }
    }
    Vocab::new(tokens)
}
