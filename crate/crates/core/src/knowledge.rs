//! Lexicons and the two-view entity masker.
//!
//! A lexicon maps lower-cased surface forms to a canonical concept token. Matching is
//! ASCII case-insensitive, respects word boundaries, and picks leftmost-longest
//! non-overlapping spans. Existing `<name>` tokens in a text are opaque, so masking
//! an already-masked view is the identity.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};

pub const SYMPTOM_CONCEPTS: [&str; 4] = ["<depression>", "<anxiety>", "<bipolar>", "<ptsd>"];
pub const GENDER_CONCEPTS: [&str; 2] = ["<man>", "<woman>"];
pub const CVD_CONCEPT: &str = "<cvd>";

const MAX_SURFACE_WORDS: usize = 6;

static BUNDLED_CVD: &str = include_str!("../lexicons/cvd.tsv");
static BUNDLED_SYMPTOM: &str = include_str!("../lexicons/symptom.tsv");
static BUNDLED_GENDER: &str = include_str!("../lexicons/gender.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Cvd,
    Symptom,
    Gender,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Cvd, Category::Symptom, Category::Gender];

    fn allows(self, concept: &str) -> bool {
        match self {
            Category::Cvd => concept == CVD_CONCEPT,
            Category::Symptom => SYMPTOM_CONCEPTS.contains(&concept),
            Category::Gender => GENDER_CONCEPTS.contains(&concept),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Cvd => "cvd",
            Category::Symptom => "symptom",
            Category::Gender => "gender",
        })
    }
}

impl FromStr for Category {
    type Err = GemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cvd" => Ok(Category::Cvd),
            "symptom" => Ok(Category::Symptom),
            "gender" => Ok(Category::Gender),
            other => Err(GemError::Config(format!("unknown lexicon category {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexiconEntry {
    pub surface: String,
    pub concept: String,
    pub category: Category,
    /// 1-based line in the source file.
    pub line: usize,
}

#[derive(Default, Debug, Clone)]
struct TrieNode {
    children: Vec<(u8, u32)>,
    terminal: Option<u32>,
}

#[derive(Clone, Debug)]
pub struct Lexicon {
    category: Category,
    entries: Vec<LexiconEntry>,
    nodes: Vec<TrieNode>,
}

/// Half-open byte range of the original text and the concept it maps to.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub concept: String,
}

/// Entry counts per category for every row of a lexicon file.
pub type CategoryCounts = BTreeMap<Category, usize>;

impl Lexicon {
    /// Builds a lexicon from already-validated entries of one category.
    pub fn from_entries(category: Category, entries: Vec<LexiconEntry>) -> Result<Self> {
        let text: String = entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.surface, e.concept, e.category))
            .collect();
        parse_lexicon(&text, "<entries>", category)
    }

    pub fn category(&self) -> Category {
        self.category
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lexicon shipped with the crate for `category`.
    pub fn bundled(category: Category) -> Lexicon {
        let (text, name) = match category {
            Category::Cvd => (BUNDLED_CVD, "cvd.tsv"),
            Category::Symptom => (BUNDLED_SYMPTOM, "symptom.tsv"),
            Category::Gender => (BUNDLED_GENDER, "gender.tsv"),
        };
        parse_lexicon(text, name, category).expect("bundled lexicons are valid")
    }

    fn build_trie(entries: &[LexiconEntry]) -> Vec<TrieNode> {
        let mut nodes = vec![TrieNode::default()];
        for (ei, e) in entries.iter().enumerate() {
            let mut cur = 0usize;
            for &b in e.surface.as_bytes() {
                cur = match nodes[cur].children.iter().find(|(c, _)| *c == b) {
                    Some(&(_, next)) => next as usize,
                    None => {
                        nodes.push(TrieNode::default());
                        let next = nodes.len() - 1;
                        nodes[cur].children.push((b, next as u32));
                        next
                    }
                };
            }
            nodes[cur].terminal = Some(ei as u32);
        }
        nodes
    }
}

/// Reads a lexicon file and keeps the rows of `category`.
///
/// Every row in the file is validated, whatever its category.
pub fn load_lexicon(path: &Path, category: Category) -> Result<Lexicon> {
    let text = std::fs::read_to_string(path).map_err(|e| GemError::io(path, e))?;
    parse_lexicon(&text, &path.display().to_string(), category)
}

/// Validates a lexicon file and counts its rows per category.
pub fn lexicon_counts(path: &Path) -> Result<CategoryCounts> {
    let text = std::fs::read_to_string(path).map_err(|e| GemError::io(path, e))?;
    let rows = parse_rows(&text, &path.display().to_string())?;
    let mut counts = CategoryCounts::new();
    for r in rows {
        *counts.entry(r.category).or_default() += 1;
    }
    Ok(counts)
}

pub fn parse_lexicon(text: &str, source: &str, category: Category) -> Result<Lexicon> {
    let entries: Vec<LexiconEntry> = parse_rows(text, source)?
        .into_iter()
        .filter(|e| e.category == category)
        .collect();
    if entries.is_empty() {
        return Err(GemError::Config(format!("{source} has no {category} entries")));
    }
    let nodes = Lexicon::build_trie(&entries);
    Ok(Lexicon {
        category,
        entries,
        nodes,
    })
}

fn parse_rows(text: &str, source: &str) -> Result<Vec<LexiconEntry>> {
    let mut problems = Vec::new();
    let mut entries = Vec::new();
    let mut first_seen: BTreeMap<(Category, String), usize> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 3 {
            problems.push(format!("line {line}: expected 3 tab-separated columns, found {}", cols.len()));
            continue;
        }
        let surface = cols[0].split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let concept = cols[1].trim().to_string();
        let category = match cols[2].trim().parse::<Category>() {
            Ok(c) => c,
            Err(_) => {
                problems.push(format!("line {line}: unknown category {:?}", cols[2].trim()));
                continue;
            }
        };
        let words = surface.split(' ').filter(|w| !w.is_empty()).count();
        if surface.is_empty() || words > MAX_SURFACE_WORDS {
            problems.push(format!("line {line}: surface must have 1..={MAX_SURFACE_WORDS} words"));
            continue;
        }
        if surface.contains(['<', '>']) {
            problems.push(format!("line {line}: surface {surface:?} may not contain angle brackets"));
            continue;
        }
        if !category.allows(&concept) {
            problems.push(format!(
                "line {line}: unknown concept token {concept:?} for category {category}"
            ));
            continue;
        }
        match first_seen.get(&(category, surface.clone())) {
            Some(&prev) => problems.push(format!(
                "duplicate surface {surface:?} on lines {prev} and {line}"
            )),
            None => {
                first_seen.insert((category, surface.clone()), line);
                entries.push(LexiconEntry {
                    surface,
                    concept,
                    category,
                    line,
                });
            }
        }
    }
    if problems.is_empty() {
        Ok(entries)
    } else {
        Err(GemError::LexiconValidation {
            path: source.to_string(),
            problems,
        })
    }
}

fn is_word_byte_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn char_before(text: &str, i: usize) -> Option<char> {
    text[..i].chars().next_back()
}

fn char_at(text: &str, i: usize) -> Option<char> {
    text[i..].chars().next()
}

/// Whether `[start, end)` is delimited by word boundaries in `text`.
pub fn is_word_bounded(text: &str, start: usize, end: usize) -> bool {
    !char_before(text, start).is_some_and(is_word_byte_char) && !char_at(text, end).is_some_and(is_word_byte_char)
}

/// Byte ranges of `<letters>` tokens, which matching treats as opaque.
pub fn protected_ranges(text: &str) -> Vec<(usize, usize)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"<[A-Za-z]+>").expect("valid regex"));
    re.find_iter(text).map(|m| (m.start(), m.end())).collect()
}

fn overlaps_any(ranges: &[(usize, usize)], start: usize, end: usize) -> bool {
    ranges.iter().any(|&(s, e)| start < e && s < end)
}

/// Leftmost-longest, non-overlapping, case-insensitive, word-bounded matches.
pub fn find_matches(text: &str, lexicon: &Lexicon) -> Vec<Span> {
    let lower = text.to_ascii_lowercase();
    let bytes = lower.as_bytes();
    let protected = protected_ranges(text);
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if !text.is_char_boundary(i) || char_before(text, i).is_some_and(is_word_byte_char) {
            i += 1;
            continue;
        }
        let mut node = 0usize;
        let mut best: Option<(usize, u32)> = None;
        let mut j = i;
        while j < bytes.len() {
            let Some(&(_, next)) = lexicon.nodes[node].children.iter().find(|(c, _)| *c == bytes[j]) else {
                break;
            };
            node = next as usize;
            j += 1;
            if let Some(ei) = lexicon.nodes[node].terminal {
                if text.is_char_boundary(j) && is_word_bounded(text, i, j) && !overlaps_any(&protected, i, j) {
                    best = Some((j, ei));
                }
            }
        }
        match best {
            Some((end, ei)) => {
                spans.push(Span {
                    start: i,
                    end,
                    concept: lexicon.entries[ei as usize].concept.clone(),
                });
                i = end;
            }
            None => i += 1,
        }
    }
    spans
}

/// Replaces each span of `original` by its concept token.
pub fn apply_spans(original: &str, spans: &[Span]) -> String {
    let mut out = String::with_capacity(original.len());
    let mut last = 0;
    for s in spans {
        out.push_str(&original[last..s.start]);
        out.push_str(&s.concept);
        last = s.end;
    }
    out.push_str(&original[last..]);
    out
}

pub fn mask_symptoms(text: &str, symptom_lexicon: &Lexicon) -> String {
    apply_spans(text, &find_matches(text, symptom_lexicon))
}

/// Age/gender shorthand (`29F`, `F29`, `[34M]`): only the letter is replaced so the
/// age digits survive.
pub fn shorthand_spans(text: &str) -> Vec<Span> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"\b(?:(\d{1,3})([FfMm])|([FfMm])(\d{1,3}))\b").expect("valid regex")
    });
    re.captures_iter(text)
        .map(|c| {
            let letter = c.get(2).or_else(|| c.get(3)).expect("one alternative matched");
            let concept = if letter.as_str().eq_ignore_ascii_case("f") {
                "<woman>"
            } else {
                "<man>"
            };
            Span {
                start: letter.start(),
                end: letter.end(),
                concept: concept.to_string(),
            }
        })
        .collect()
}

/// Lexicon matches plus shorthand matches, sorted and non-overlapping.
pub fn gender_spans(text: &str, gender_lexicon: &Lexicon) -> Vec<Span> {
    let mut spans = find_matches(text, gender_lexicon);
    let protected = protected_ranges(text);
    for s in shorthand_spans(text) {
        if !overlaps_any(&protected, s.start, s.end) && !spans.iter().any(|o| s.start < o.end && o.start < s.end) {
            spans.push(s);
        }
    }
    spans.sort();
    spans
}

pub fn mask_gender(text: &str, gender_lexicon: &Lexicon) -> String {
    apply_spans(text, &gender_spans(text, gender_lexicon))
}

/// The symptom-masked and gender-masked renderings of one text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedViews {
    pub original: String,
    pub symptom_view: String,
    pub gender_view: String,
    pub symptom_spans: Vec<Span>,
    pub gender_spans: Vec<Span>,
}

impl MaskedViews {
    /// Views that leave the text untouched (no entity masking).
    pub fn unmasked(text: &str) -> Self {
        MaskedViews {
            original: text.to_string(),
            symptom_view: text.to_string(),
            gender_view: text.to_string(),
            symptom_spans: Vec::new(),
            gender_spans: Vec::new(),
        }
    }
}

pub fn build_views(text: &str, symptom_lexicon: &Lexicon, gender_lexicon: &Lexicon) -> MaskedViews {
    let symptom_spans = find_matches(text, symptom_lexicon);
    let gender_spans = gender_spans(text, gender_lexicon);
    MaskedViews {
        original: text.to_string(),
        symptom_view: apply_spans(text, &symptom_spans),
        gender_view: apply_spans(text, &gender_spans),
        symptom_spans,
        gender_spans,
    }
}

/// The symptom and gender lexicons that produce the two encoder views.
#[derive(Clone, Debug)]
pub struct ViewLexicons {
    pub symptom: Lexicon,
    pub gender: Lexicon,
}

impl ViewLexicons {
    pub fn bundled() -> Self {
        ViewLexicons {
            symptom: Lexicon::bundled(Category::Symptom),
            gender: Lexicon::bundled(Category::Gender),
        }
    }

    pub fn load(symptom: &Path, gender: &Path) -> Result<Self> {
        Ok(ViewLexicons {
            symptom: load_lexicon(symptom, Category::Symptom)?,
            gender: load_lexicon(gender, Category::Gender)?,
        })
    }

    pub fn views(&self, text: &str) -> MaskedViews {
        build_views(text, &self.symptom, &self.gender)
    }
}
