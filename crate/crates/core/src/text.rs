//! Word-level vocabulary, tokenisation, encoding and batching.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{GemError, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Angle-bracket tokens that are always in the vocabulary and never split.
pub const CONCEPT_TOKENS: [&str; 9] = [
    "<depression>",
    "<anxiety>",
    "<bipolar>",
    "<ptsd>",
    "<man>",
    "<woman>",
    "<cvd>",
    "<url>",
    "<user>",
];

const VOCAB_HEADER: &str = "#gem-vocab v1";

/// Default sequence length for synthetic corpora.
pub const DEFAULT_MAX_LEN: usize = 64;

/// Lower-cases and splits `text` into words, single punctuation marks and
/// `<name>` tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    while i < chars.len() {
        let c = chars[i];
        if c == '<' {
            if let Some(len) = angle_token_len(&chars[i..]) {
                flush(&mut word, &mut out);
                out.push(chars[i..i + len].iter().collect::<String>().to_ascii_lowercase());
                i += len;
                continue;
            }
        }
        if c.is_alphanumeric() || c == '\'' && !word.is_empty() && next_is_alnum(&chars, i) {
            word.extend(c.to_lowercase());
        } else if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else {
            flush(&mut word, &mut out);
            out.push(c.to_string());
        }
        i += 1;
    }
    flush(&mut word, &mut out);
    out
}

fn next_is_alnum(chars: &[char], i: usize) -> bool {
    chars.get(i + 1).is_some_and(|c| c.is_alphanumeric())
}

/// Length of a `<letters>` token at the start of `chars`, if any.
fn angle_token_len(chars: &[char]) -> Option<usize> {
    let mut j = 1;
    while j < chars.len() && chars[j].is_ascii_alphabetic() {
        j += 1;
    }
    (j > 1 && j < chars.len() && chars[j] == '>').then_some(j + 1)
}

/// Bijective token ↔ id mapping with fixed special and concept ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from texts keeping words with frequency ≥ `min_freq`, ordered by
    /// frequency descending then lexicographically.
    pub fn build<S: AsRef<str>>(texts: &[S], min_freq: usize) -> Result<Self> {
        if texts.is_empty() {
            return Err(GemError::Invalid("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in tokenize(t.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let reserved: Vec<&str> = SPECIAL_TOKENS.iter().chain(CONCEPT_TOKENS.iter()).copied().collect();
        let mut content: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !reserved.contains(&t.as_str()))
            .collect();
        content.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = reserved
            .iter()
            .map(|s| s.to_string())
            .chain(content.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(GemError::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if ids.get(*s) != Some(&i) {
                return Err(GemError::Invalid(format!("special token {s} must have id {i}")));
            }
        }
        for c in CONCEPT_TOKENS {
            if !ids.contains_key(c) {
                return Err(GemError::Invalid(format!("vocabulary lacks concept token {c}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids that never act as MLM targets or random replacements.
    pub fn is_reserved(&self, id: usize) -> bool {
        id < SPECIAL_TOKENS.len() + CONCEPT_TOKENS.len()
    }

    /// First id available for ordinary words.
    pub fn first_content_id(&self) -> usize {
        SPECIAL_TOKENS.len() + CONCEPT_TOKENS.len()
    }

    /// Header line, then one token per line; the token on the n-th line after the
    /// header (zero-based) has id n.
    pub fn serialize(&self) -> String {
        let mut s = String::with_capacity(self.tokens.len() * 8);
        s.push_str(VOCAB_HEADER);
        s.push('\n');
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn deserialize(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(VOCAB_HEADER) => {}
            other => {
                return Err(GemError::parse(
                    "vocabulary",
                    format!("expected header {VOCAB_HEADER:?}, found {other:?}"),
                ))
            }
        }
        Self::from_tokens(lines.map(str::to_string).collect())
    }

    /// SHA-256 of the serialised form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.serialize().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| GemError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GemError::io(path, e))?;
        Self::deserialize(&text)
    }

    /// `[CLS] tokens… [SEP]`, head-truncated so the total length is at most `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        if max_len < 3 {
            return Err(GemError::Config(format!("max_len must be at least 3, got {max_len}")));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        for tok in tokenize(text).into_iter().take(max_len - 2) {
            ids.push(self.id(&tok).unwrap_or(UNK_ID));
        }
        ids.push(SEP_ID);
        Ok(TokenSequence { ids })
    }

    /// Space-joined tokens between `[CLS]` and `[SEP]`.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.ids
            .iter()
            .filter(|&&i| i != CLS_ID && i != SEP_ID && i != PAD_ID)
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Right-padded `B×T` id matrix with its padding mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    /// `true` marks a real token.
    pub pad_mask: Vec<bool>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub symptom_labels: Option<Vec<usize>>,
    pub gender_labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn mask_row(&self, b: usize) -> &[bool] {
        &self.pad_mask[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

/// Pads `sequences` to `pad_to` (or the longest sequence).
pub fn make_batch(sequences: &[TokenSequence], pad_to: Option<usize>) -> Result<Batch> {
    if sequences.is_empty() {
        return Err(GemError::Invalid("cannot batch zero sequences".into()));
    }
    let longest = sequences.iter().map(TokenSequence::len).max().unwrap_or(0);
    let t = match pad_to {
        Some(p) if p < longest => {
            return Err(GemError::Invalid(format!("sequence of length {longest} exceeds pad_to={p}")))
        }
        Some(p) => p,
        None => longest,
    };
    let b = sequences.len();
    let mut ids = vec![PAD_ID; b * t];
    let mut pad_mask = vec![false; b * t];
    for (r, s) in sequences.iter().enumerate() {
        ids[r * t..r * t + s.len()].copy_from_slice(&s.ids);
        pad_mask[r * t..r * t + s.len()].iter_mut().for_each(|m| *m = true);
    }
    Ok(Batch {
        ids,
        pad_mask,
        batch_size: b,
        seq_len: t,
        symptom_labels: None,
        gender_labels: None,
    })
}

/// Inverse of [`make_batch`]: strips padding from each row.
pub fn unbatch(batch: &Batch) -> Vec<TokenSequence> {
    (0..batch.batch_size)
        .map(|b| TokenSequence {
            ids: batch
                .row(b)
                .iter()
                .zip(batch.mask_row(b))
                .filter(|(_, &m)| m)
                .map(|(&i, _)| i)
                .collect(),
        })
        .collect()
}

/// Symptom-view and gender-view batches padded to a shared length.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub symptom: Batch,
    pub gender: Batch,
}

impl PairedBatch {
    pub fn new(symptom: &[TokenSequence], gender: &[TokenSequence]) -> Result<Self> {
        if symptom.len() != gender.len() {
            return Err(GemError::Invalid(format!(
                "paired batch sizes differ: {} vs {}",
                symptom.len(),
                gender.len()
            )));
        }
        let t = symptom
            .iter()
            .chain(gender)
            .map(TokenSequence::len)
            .max()
            .unwrap_or(0);
        Ok(PairedBatch {
            symptom: make_batch(symptom, Some(t))?,
            gender: make_batch(gender, Some(t))?,
        })
    }

    pub fn with_labels(mut self, symptom: Option<Vec<usize>>, gender: Option<Vec<usize>>) -> Self {
        self.symptom.symptom_labels = symptom.clone();
        self.symptom.gender_labels = gender.clone();
        self.gender.symptom_labels = symptom;
        self.gender.gender_labels = gender;
        self
    }

    pub fn batch_size(&self) -> usize {
        self.symptom.batch_size
    }

    pub fn seq_len(&self) -> usize {
        self.symptom.seq_len
    }

    pub fn symptom_labels(&self) -> Option<&[usize]> {
        self.symptom.symptom_labels.as_deref()
    }

    pub fn gender_labels(&self) -> Option<&[usize]> {
        self.symptom.gender_labels.as_deref()
    }
}
