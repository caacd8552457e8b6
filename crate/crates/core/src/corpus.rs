//! Items, the synthetic corpus generator, filters, anonymisation, splitting and
//! weak gender labelling.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::knowledge::{find_matches, gender_spans, Category, Lexicon};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Post,
    Comment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symptom {
    Depression,
    Anxiety,
    Bipolar,
    Ptsd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Man,
    Woman,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ChannelLabel,
    WeakLabeler,
    Synthetic,
}

impl Symptom {
    pub const ALL: [Symptom; 4] = [Symptom::Depression, Symptom::Anxiety, Symptom::Bipolar, Symptom::Ptsd];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn concept(self) -> &'static str {
        crate::knowledge::SYMPTOM_CONCEPTS[self.index()]
    }

    pub fn name(self) -> &'static str {
        ["depression", "anxiety", "bipolar", "ptsd"][self.index()]
    }

    /// Row label used in reports.
    pub fn display_name(self) -> &'static str {
        ["Depression", "Anxiety", "Bipolar", "PTSD"][self.index()]
    }
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Man, Gender::Woman];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn concept(self) -> &'static str {
        crate::knowledge::GENDER_CONCEPTS[self.index()]
    }

    pub fn name(self) -> &'static str {
        ["man", "woman"][self.index()]
    }
}

impl fmt::Display for Symptom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Symptom {
    type Err = GemError;

    fn from_str(s: &str) -> Result<Self> {
        Symptom::ALL
            .into_iter()
            .find(|c| c.name() == s.to_ascii_lowercase())
            .ok_or_else(|| GemError::Invalid(format!("unknown symptom class {s:?}")))
    }
}

impl FromStr for Gender {
    type Err = GemError;

    fn from_str(s: &str) -> Result<Self> {
        Gender::ALL
            .into_iter()
            .find(|c| c.name() == s.to_ascii_lowercase())
            .ok_or_else(|| GemError::Invalid(format!("unknown gender class {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawItem {
    pub id: String,
    pub author_id: String,
    pub kind: Kind,
    pub source: String,
    pub text: String,
    pub upvotes: u64,
    pub created_at: i64,
}

impl RawItem {
    pub fn token_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

impl AsRef<RawItem> for RawItem {
    fn as_ref(&self) -> &RawItem {
        self
    }
}

/// An item with optional labels. `provenance` is `None` for items that have not
/// been labelled yet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledItem {
    pub item: RawItem,
    pub symptom: Option<Symptom>,
    pub gender: Option<Gender>,
    pub provenance: Option<Provenance>,
}

impl AsRef<RawItem> for LabeledItem {
    fn as_ref(&self) -> &RawItem {
        &self.item
    }
}

impl LabeledItem {
    pub fn unlabeled(item: RawItem) -> Self {
        LabeledItem {
            item,
            symptom: None,
            gender: None,
            provenance: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.item.id;
        if self.item.text.trim().is_empty() {
            return Err(GemError::Invalid(format!("item {id} has empty text")));
        }
        let ok = match self.provenance {
            // a channel label comes from whichever channel the item was collected from
            Some(Provenance::ChannelLabel) => self.symptom.is_some() || self.gender.is_some(),
            Some(Provenance::WeakLabeler) => self.gender.is_some(),
            Some(Provenance::Synthetic) => self.symptom.is_some() && self.gender.is_some(),
            None => self.symptom.is_none() && self.gender.is_none(),
        };
        if ok {
            Ok(())
        } else {
            Err(GemError::Invalid(format!(
                "item {id}: labels inconsistent with provenance {:?}",
                self.provenance
            )))
        }
    }
}

// ---------------------------------------------------------------------------
// Corpus files

const CORPUS_HEADER: &str = r#"{"format":"gem-corpus","version":1}"#;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    author_id: String,
    kind: Kind,
    source: String,
    text: String,
    upvotes: u64,
    created_at: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    symptom: Option<Symptom>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gender: Option<Gender>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

pub fn corpus_to_string(items: &[LabeledItem]) -> String {
    let mut out = String::from(CORPUS_HEADER);
    out.push('\n');
    for it in items {
        let r = Record {
            id: it.item.id.clone(),
            author_id: it.item.author_id.clone(),
            kind: it.item.kind,
            source: it.item.source.clone(),
            text: it.item.text.clone(),
            upvotes: it.item.upvotes,
            created_at: it.item.created_at,
            symptom: it.symptom,
            gender: it.gender,
            provenance: it.provenance,
        };
        out.push_str(&serde_json::to_string(&r).expect("record serialises"));
        out.push('\n');
    }
    out
}

pub fn corpus_from_str(text: &str, context: &str) -> Result<Vec<LabeledItem>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CORPUS_HEADER => {}
        _ => return Err(GemError::parse(context, format!("missing header line {CORPUS_HEADER}"))),
    }
    let mut items = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(line)
            .map_err(|e| GemError::parse(format!("{context}:{}", i + 1), e.to_string()))?;
        if !seen.insert(r.id.clone()) {
            return Err(GemError::parse(format!("{context}:{}", i + 1), format!("duplicate id {:?}", r.id)));
        }
        let item = LabeledItem {
            item: RawItem {
                id: r.id,
                author_id: r.author_id,
                kind: r.kind,
                source: r.source,
                text: r.text,
                upvotes: r.upvotes,
                created_at: r.created_at,
            },
            symptom: r.symptom,
            gender: r.gender,
            provenance: r.provenance,
        };
        item.validate()
            .map_err(|e| GemError::parse(format!("{context}:{}", i + 1), e.to_string()))?;
        items.push(item);
    }
    Ok(items)
}

pub fn save_corpus(path: &Path, items: &[LabeledItem]) -> Result<()> {
    std::fs::write(path, corpus_to_string(items)).map_err(|e| GemError::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<Vec<LabeledItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| GemError::io(path, e))?;
    corpus_from_str(&text, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Filters

/// Keeps items mentioning at least one CVD lexicon term. Order is preserved.
pub fn filter_cvd<T: AsRef<RawItem> + Clone>(items: &[T], lexicon: &Lexicon) -> Result<Vec<T>> {
    if lexicon.category() != Category::Cvd {
        return Err(GemError::Config(format!(
            "filter_cvd needs a cvd lexicon, got {}",
            lexicon.category()
        )));
    }
    if lexicon.is_empty() {
        return Err(GemError::Config("cvd lexicon is empty".into()));
    }
    Ok(items
        .iter()
        .filter(|it| !find_matches(&it.as_ref().text, lexicon).is_empty())
        .cloned()
        .collect())
}

/// Thresholds of the quality filter: upvotes must exceed `min_upvotes`
/// (strictly) and the whitespace token count must reach `min_tokens`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityThresholds {
    pub min_upvotes: u64,
    pub min_tokens: usize,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        QualityThresholds {
            min_upvotes: 10,
            min_tokens: 50,
        }
    }
}

impl QualityThresholds {
    pub fn accepts(&self, item: &RawItem) -> bool {
        item.upvotes > self.min_upvotes && item.token_count() >= self.min_tokens
    }
}

/// Separate thresholds for posts and comments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityPolicy {
    pub post: QualityThresholds,
    pub comment: QualityThresholds,
}

impl QualityPolicy {
    pub fn uniform(t: QualityThresholds) -> Self {
        QualityPolicy { post: t, comment: t }
    }

    pub fn for_kind(&self, kind: Kind) -> &QualityThresholds {
        match kind {
            Kind::Post => &self.post,
            Kind::Comment => &self.comment,
        }
    }
}

pub fn quality_filter<T: AsRef<RawItem> + Clone>(items: &[T], min_upvotes: u64, min_tokens: usize) -> Vec<T> {
    quality_filter_by_kind(
        items,
        &QualityPolicy::uniform(QualityThresholds {
            min_upvotes,
            min_tokens,
        }),
    )
}

pub fn quality_filter_by_kind<T: AsRef<RawItem> + Clone>(items: &[T], policy: &QualityPolicy) -> Vec<T> {
    items
        .iter()
        .filter(|it| {
            let raw = it.as_ref();
            policy.for_kind(raw.kind).accepts(raw)
        })
        .cloned()
        .collect()
}

/// Replaces URLs with `<url>` and `u/name` / `@name` mentions with `<user>`.
pub fn anonymize(text: &str) -> String {
    static URL: OnceLock<Regex> = OnceLock::new();
    static USER: OnceLock<Regex> = OnceLock::new();
    let url = URL.get_or_init(|| {
        Regex::new(r#"(?i)\b(?:[a-z][a-z0-9+.-]*://|www\.)[^\s<>]*[^\s<>.,;:!?)\]'"]"#).expect("valid regex")
    });
    let user = USER.get_or_init(|| Regex::new(r"(?:\bu/|@)[A-Za-z0-9_-]+").expect("valid regex"));

    let text = url.replace_all(text, "<url>");
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for m in user.find_iter(&text) {
        // `@` glued to a word (an e-mail address) or to a placeholder is not a mention
        let prev = text[..m.start()].chars().next_back();
        if m.as_str().starts_with('@') && prev.is_some_and(|c| c.is_alphanumeric() || c == '_' || c == '>') {
            continue;
        }
        out.push_str(&text[last..m.start()]);
        out.push_str("<user>");
        last = m.end();
    }
    out.push_str(&text[last..]);
    out
}

// ---------------------------------------------------------------------------
// Splitting

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StratifyBy {
    None,
    Symptom,
    Gender,
    /// Cross product of whichever label families are present on each item.
    Both,
}

impl FromStr for StratifyBy {
    type Err = GemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(StratifyBy::None),
            "symptom" => Ok(StratifyBy::Symptom),
            "gender" => Ok(StratifyBy::Gender),
            "both" => Ok(StratifyBy::Both),
            other => Err(GemError::Config(format!("unknown stratification {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<LabeledItem>,
    pub dev: Vec<LabeledItem>,
    pub test: Vec<LabeledItem>,
    pub ratios: (f64, f64, f64),
}

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.75, 0.05, 0.20);

fn stratum_key(item: &LabeledItem, by: StratifyBy) -> String {
    let s = item.symptom.map_or("-", Symptom::name);
    let g = item.gender.map_or("-", Gender::name);
    match by {
        StratifyBy::None => "all".into(),
        StratifyBy::Symptom => s.into(),
        StratifyBy::Gender => g.into(),
        StratifyBy::Both => format!("{s}/{g}"),
    }
}

/// Largest-remainder allocation of `n` items over `ratios`.
fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    // tolerate products such as 0.05 * 100 = 5.000000000000001
    let mut counts: [usize; 3] = std::array::from_fn(|i| (exact[i] + 1e-9).floor() as usize);
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Stratified, seeded partition into train/dev/test. Within each part items keep
/// their input order.
pub fn split(items: &[LabeledItem], ratios: (f64, f64, f64), seed: u64, by: StratifyBy) -> Result<CorpusSplit> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|x| !(0.0..=1.0).contains(x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(GemError::Config(format!("split ratios {ratios:?} must be fractions summing to 1")));
    }
    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        strata.entry(stratum_key(it, by)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Each item gets the key (position + ½) / stratum size after a per-stratum
    // shuffle; cutting the key order at the global sizes keeps every stratum
    // proportional to within one item while the part sizes come out exact.
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(items.len());
    for (s, (key, mut idx)) in strata.into_iter().enumerate() {
        if idx.len() < 3 {
            return Err(GemError::Stratification {
                stratum: key,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        keyed.extend(idx.iter().enumerate().map(|(k, &i)| ((k as f64 + 0.5) / n, s, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let [n_train, n_dev, _] = allocate(items.len(), r);
    let mut part = vec![0u8; items.len()];
    for (k, &(_, _, i)) in keyed.iter().enumerate() {
        part[i] = if k < n_train {
            0
        } else if k < n_train + n_dev {
            1
        } else {
            2
        };
    }
    let pick = |p: u8| -> Vec<LabeledItem> {
        items
            .iter()
            .zip(&part)
            .filter(|(_, &q)| q == p)
            .map(|(it, _)| it.clone())
            .collect()
    };
    Ok(CorpusSplit {
        train: pick(0),
        dev: pick(1),
        test: pick(2),
        ratios,
    })
}

// ---------------------------------------------------------------------------
// Weak gender labelling

/// Anything that can assign a gender to raw texts.
pub trait GenderClassifier {
    fn predict_genders(&self, texts: &[&str]) -> Result<Vec<Gender>>;
}

/// Assigns a gender to every item using `labeler`; existing symptom labels are kept.
pub fn weak_label_gender<C: GenderClassifier + ?Sized>(labeler: &C, items: &[LabeledItem]) -> Result<Vec<LabeledItem>> {
    let texts: Vec<&str> = items.iter().map(|it| it.item.text.as_str()).collect();
    let genders = labeler.predict_genders(&texts)?;
    if genders.len() != items.len() {
        return Err(GemError::Invalid(format!(
            "labeler returned {} labels for {} items",
            genders.len(),
            items.len()
        )));
    }
    Ok(items
        .iter()
        .zip(genders)
        .map(|(it, g)| LabeledItem {
            item: it.item.clone(),
            symptom: it.symptom,
            gender: Some(g),
            provenance: Some(Provenance::WeakLabeler),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Synthetic corpora

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassBalance {
    /// Fractions for depression, anxiety, bipolar, ptsd.
    pub symptom: [f64; 4],
    /// Fractions for man, woman.
    pub gender: [f64; 2],
}

impl Default for ClassBalance {
    fn default() -> Self {
        ClassBalance {
            symptom: [0.25; 4],
            gender: [0.5; 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_items: usize,
    pub class_balance: ClassBalance,
    /// Probability that an item carries its symptom cue(s), and independently its
    /// gender cue.
    pub cue_density: f64,
    /// When set, every cued item mentions two symptom classes and the label is the
    /// one preferred for the item's gender.
    pub interaction_mode: bool,
    pub noise_vocab_size: usize,
    pub seed: u64,
    pub post_fraction: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_items: 1000,
            class_balance: ClassBalance::default(),
            cue_density: 1.0,
            interaction_mode: false,
            noise_vocab_size: 400,
            seed: 0,
            post_fraction: 0.35,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 {
            return Err(GemError::Config("n_items must be positive".into()));
        }
        check_fractions("symptom", &self.class_balance.symptom)?;
        check_fractions("gender", &self.class_balance.gender)?;
        for (name, v) in [("cue_density", self.cue_density), ("post_fraction", self.post_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(GemError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.noise_vocab_size == 0 {
            return Err(GemError::Config("noise_vocab_size must be positive".into()));
        }
        Ok(())
    }
}

fn check_fractions(family: &str, f: &[f64]) -> Result<()> {
    if f.iter().any(|x| !x.is_finite() || *x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(GemError::Config(format!(
            "{family} class balance {f:?} must be non-negative and sum to 1"
        )));
    }
    Ok(())
}

/// Classes that `winner` beats when the author is a woman. The relation is a
/// tournament with cycles (0 > 2 > 3 > 0), so no per-gender ranking of the
/// classes explains it; men prefer the opposite of every pair.
const WOMAN_BEATS: [&[usize]; 4] = [&[1, 2], &[2], &[3], &[0, 1]];

/// The class preferred by `gender` between two distinct symptom classes.
pub fn preferred_symptom(gender: Gender, a: Symptom, b: Symptom) -> Symptom {
    let a_wins_for_woman = WOMAN_BEATS[a.index()].contains(&b.index());
    match (gender, a_wins_for_woman) {
        (Gender::Woman, true) | (Gender::Man, false) => a,
        _ => b,
    }
}

fn partners(gender: Gender, label: Symptom) -> Vec<Symptom> {
    Symptom::ALL
        .into_iter()
        .filter(|&b| b != label && preferred_symptom(gender, label, b) == label)
        .collect()
}

/// Exact per-class counts by largest remainder, then shuffled.
fn label_stream(n: usize, fractions: &[f64], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - counts[b] as f64)
            .total_cmp(&(exact[a] - counts[a] as f64))
            .then(a.cmp(&b))
    });
    let mut rest = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    labels.shuffle(rng);
    labels
}

const CVD_TEMPLATES: &[&str] = &[
    "i was diagnosed with {} last year",
    "my cardiologist says the {} is stable",
    "since the {} everything feels different",
    "the doctor explained my {} again",
    "after the {} i started seeing a new doctor",
    "we talked about {} at the clinic today",
    "still recovering from the {}",
];

const SYMPTOM_TEMPLATES: &[&str] = &[
    "lately i have {}",
    "the {} has been bad this week",
    "i keep dealing with {}",
    "my therapist asked about {}",
    "honestly the {} is the hardest part",
    "dealing with {} again",
];

const GENDER_TEMPLATES: &[&str] = &[
    "posting as a {} here",
    "{} says this is normal",
    "for context i am the {}",
    "asking for the {}",
];

const SHORTHAND_TEMPLATES: &[&str] = &["{}", "me {} here", "about me : {}"];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "ve", "ru", "tam", "sel", "bri", "no", "qua", "zet", "pim", "dor", "fa", "gu", "xen", "yol",
    "wir", "sha", "thu", "kep", "ost", "lum", "rav", "dex",
];

const NOISE_TEMPLATES: &[&str] = &[
    "anyway {} {} {}",
    "the {} and {} thing",
    "we went to {} {}",
    "{} {} {} {}",
    "not sure about {} or {}",
];

struct Pools {
    cvd: Vec<String>,
    symptom: [Vec<String>; 4],
    gender: [Vec<String>; 2],
    noise: Vec<String>,
    noise_weights: WeightedIndex<f64>,
    cue_weights: [WeightedIndex<f64>; 4],
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| 1.0 / (r as f64).powf(s))).expect("non-empty weights")
}

impl Pools {
    fn new(noise_vocab_size: usize) -> Self {
        let cvd_lex = Lexicon::bundled(Category::Cvd);
        let sym_lex = Lexicon::bundled(Category::Symptom);
        let gen_lex = Lexicon::bundled(Category::Gender);
        let clean = |s: &str| find_matches(s, &sym_lex).is_empty() && gender_spans(s, &gen_lex).is_empty();

        let cvd = cvd_lex
            .entries()
            .iter()
            .map(|e| e.surface.clone())
            .filter(|s| clean(s))
            .collect();
        let symptom = std::array::from_fn(|c| {
            sym_lex
                .entries()
                .iter()
                .filter(|e| e.concept == Symptom::ALL[c].concept())
                .map(|e| e.surface.clone())
                .filter(|s| gender_spans(s, &gen_lex).is_empty())
                .collect::<Vec<_>>()
        });
        let gender = std::array::from_fn(|g| {
            gen_lex
                .entries()
                .iter()
                .filter(|e| e.concept == Gender::ALL[g].concept())
                .map(|e| e.surface.clone())
                .filter(|s| find_matches(s, &sym_lex).is_empty())
                .collect::<Vec<_>>()
        });

        // deterministic pseudo-words: two or three syllables in mixed-radix order
        let mut noise = Vec::with_capacity(noise_vocab_size);
        let ns = SYLLABLES.len();
        let mut k = 0usize;
        while noise.len() < noise_vocab_size {
            let a = k % ns;
            let b = (k / ns) % ns;
            let c = k / (ns * ns);
            let mut w = format!("{}{}", SYLLABLES[a], SYLLABLES[(b + 7) % ns]);
            if c > 0 {
                w.push_str(SYLLABLES[(c - 1) % ns]);
            }
            k += 1;
            if clean(&w) && find_matches(&w, &cvd_lex).is_empty() && !noise.contains(&w) {
                noise.push(w);
            }
        }
        let cue_weights = std::array::from_fn(|c: usize| zipf(symptom[c].len(), 1.1));
        Pools {
            cvd,
            noise_weights: zipf(noise.len(), 1.0),
            symptom,
            gender,
            noise,
            cue_weights,
        }
    }

    fn noise_word(&self, rng: &mut ChaCha8Rng) -> &str {
        &self.noise[self.noise_weights.sample(rng)]
    }

    fn fill(&self, template: &str, slot: &str) -> String {
        template.replacen("{}", slot, 1)
    }

    fn noise_sentence(&self, rng: &mut ChaCha8Rng) -> String {
        let mut s = NOISE_TEMPLATES[rng.random_range(0..NOISE_TEMPLATES.len())].to_string();
        while s.contains("{}") {
            let w = self.noise_word(rng).to_string();
            s = s.replacen("{}", &w, 1);
        }
        s
    }

    fn cvd_sentence(&self, rng: &mut ChaCha8Rng) -> String {
        let term = &self.cvd[rng.random_range(0..self.cvd.len())];
        self.fill(CVD_TEMPLATES[rng.random_range(0..CVD_TEMPLATES.len())], term)
    }

    fn symptom_sentence(&self, class: Symptom, rng: &mut ChaCha8Rng) -> String {
        let c = class.index();
        let cue = &self.symptom[c][self.cue_weights[c].sample(rng)];
        self.fill(SYMPTOM_TEMPLATES[rng.random_range(0..SYMPTOM_TEMPLATES.len())], cue)
    }

    fn gender_sentence(&self, gender: Gender, rng: &mut ChaCha8Rng) -> String {
        if rng.random_bool(0.3) {
            let age = rng.random_range(18..80);
            let letter = match gender {
                Gender::Man => "M",
                Gender::Woman => "F",
            };
            let tag = match rng.random_range(0..3) {
                0 => format!("{age}{letter}"),
                1 => format!("{letter}{age}"),
                _ => format!("[{age}{letter}]"),
            };
            return self.fill(SHORTHAND_TEMPLATES[rng.random_range(0..SHORTHAND_TEMPLATES.len())], &tag);
        }
        let pool = &self.gender[gender.index()];
        let word = &pool[rng.random_range(0..pool.len())];
        self.fill(GENDER_TEMPLATES[rng.random_range(0..GENDER_TEMPLATES.len())], word)
    }
}

fn metadata(rng: &mut ChaCha8Rng, post_fraction: f64) -> (Kind, u64, i64, String) {
    let kind = if rng.random_bool(post_fraction) {
        Kind::Post
    } else {
        Kind::Comment
    };
    let upvotes = if rng.random_bool(0.85) {
        rng.random_range(11..400)
    } else {
        rng.random_range(0..=10)
    };
    let created_at = 1_500_000_000 + rng.random_range(0..150_000_000i64);
    let author = format!("a{:05}", rng.random_range(0..5000u32));
    (kind, upvotes, created_at, author)
}

fn assemble(mut sentences: Vec<String>, rng: &mut ChaCha8Rng) -> String {
    sentences.shuffle(rng);
    let mut text = sentences.join(". ");
    text.push('.');
    text
}

/// Deterministic stand-in for a crawled and labelled CVD corpus.
///
/// Every item carries a CVD term, its symptom cue(s) and gender cue (each present
/// with probability `cue_density`), and two or three noise sentences.
pub fn generate_synthetic_corpus(spec: &GeneratorSpec) -> Result<Vec<LabeledItem>> {
    spec.validate()?;
    let pools = Pools::new(spec.noise_vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let symptoms = label_stream(spec.n_items, &spec.class_balance.symptom, &mut rng);
    let genders = label_stream(spec.n_items, &spec.class_balance.gender, &mut rng);

    let mut items = Vec::with_capacity(spec.n_items);
    for (i, (&s, &g)) in symptoms.iter().zip(&genders).enumerate() {
        let symptom = Symptom::ALL[s];
        let gender = Gender::ALL[g];
        let mut sentences = vec![pools.cvd_sentence(&mut rng)];
        if rng.random_bool(spec.cue_density) {
            if spec.interaction_mode {
                let options = partners(gender, symptom);
                let other = options[rng.random_range(0..options.len())];
                sentences.push(pools.symptom_sentence(symptom, &mut rng));
                sentences.push(pools.symptom_sentence(other, &mut rng));
            } else {
                sentences.push(pools.symptom_sentence(symptom, &mut rng));
                if rng.random_bool(0.3) {
                    sentences.push(pools.symptom_sentence(symptom, &mut rng));
                }
            }
        }
        if rng.random_bool(spec.cue_density) {
            sentences.push(pools.gender_sentence(gender, &mut rng));
        }
        for _ in 0..rng.random_range(2..4) {
            sentences.push(pools.noise_sentence(&mut rng));
        }
        let text = assemble(sentences, &mut rng);
        let (kind, upvotes, created_at, author_id) = metadata(&mut rng, spec.post_fraction);
        items.push(LabeledItem {
            item: RawItem {
                id: format!("syn-{i:06}"),
                author_id,
                kind,
                source: format!("r/{}", symptom.name()),
                text,
                upvotes,
                created_at,
            },
            symptom: Some(symptom),
            gender: Some(gender),
            provenance: Some(Provenance::Synthetic),
        });
    }
    Ok(items)
}

/// Items from gender-specific channels: gender label only, no symptom cues.
/// Used to train the weak gender labeller.
pub fn generate_gender_channel_corpus(spec: &GeneratorSpec) -> Result<Vec<LabeledItem>> {
    spec.validate()?;
    let pools = Pools::new(spec.noise_vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6765_6e64_6572);
    let genders = label_stream(spec.n_items, &spec.class_balance.gender, &mut rng);
    let mut items = Vec::with_capacity(spec.n_items);
    for (i, &g) in genders.iter().enumerate() {
        let gender = Gender::ALL[g];
        let mut sentences = Vec::new();
        if rng.random_bool(0.5) {
            sentences.push(pools.cvd_sentence(&mut rng));
        }
        if rng.random_bool(spec.cue_density) {
            sentences.push(pools.gender_sentence(gender, &mut rng));
            if rng.random_bool(0.4) {
                sentences.push(pools.gender_sentence(gender, &mut rng));
            }
        }
        for _ in 0..rng.random_range(2..5) {
            sentences.push(pools.noise_sentence(&mut rng));
        }
        let text = assemble(sentences, &mut rng);
        let (kind, upvotes, created_at, author_id) = metadata(&mut rng, spec.post_fraction);
        let source = match gender {
            Gender::Man => "r/askmen",
            Gender::Woman => "r/askwomen",
        };
        items.push(LabeledItem {
            item: RawItem {
                id: format!("gch-{i:06}"),
                author_id,
                kind,
                source: source.into(),
                text,
                upvotes,
                created_at,
            },
            symptom: None,
            gender: Some(gender),
            provenance: Some(Provenance::ChannelLabel),
        });
    }
    Ok(items)
}

/// Per-class post and comment counts of a corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorpusCounts {
    pub rows: BTreeMap<String, (usize, usize)>,
}

pub fn corpus_counts(items: &[LabeledItem]) -> CorpusCounts {
    let mut rows: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for it in items {
        let mut keys = Vec::new();
        if let Some(s) = it.symptom {
            keys.push(s.display_name().to_string());
        }
        if let Some(g) = it.gender {
            keys.push(g.name().to_string());
        }
        if keys.is_empty() {
            keys.push("unlabeled".into());
        }
        keys.push("total".into());
        for k in keys {
            let e = rows.entry(k).or_default();
            match it.item.kind {
                Kind::Post => e.0 += 1,
                Kind::Comment => e.1 += 1,
            }
        }
    }
    CorpusCounts { rows }
}
