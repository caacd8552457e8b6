//! Metrics, class-wise reports, the ablation runner, the Wilcoxon signed-rank
//! test and the gender-presence similarity analysis.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusSplit, Gender, Kind, LabeledItem, Symptom};
use crate::error::{GemError, Result};
use crate::knowledge::{gender_spans, ViewLexicons};
use crate::model::{GemModel, ModelConfig, Variant};
use crate::text::{make_batch, Vocabulary};
use crate::train::{
    build_vocab, encode_examples, mlm_pretrain, predict_examples, Example, InputMode, TrainConfig, Trainer,
};

pub fn symptom_class_names() -> Vec<String> {
    Symptom::ALL.iter().map(|s| s.display_name().to_string()).collect()
}

pub fn gender_class_names() -> Vec<String> {
    Gender::ALL.iter().map(|g| g.name().to_string()).collect()
}

/// Rows are gold classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(predictions: &[usize], golds: &[usize], classes: &[String]) -> Result<Self> {
        if predictions.len() != golds.len() {
            return Err(GemError::Invalid(format!(
                "{} predictions for {} gold labels",
                predictions.len(),
                golds.len()
            )));
        }
        if predictions.is_empty() {
            return Err(GemError::Invalid("cannot compute metrics on empty input".into()));
        }
        let c = classes.len();
        let mut counts = vec![vec![0u64; c]; c];
        for (&p, &g) in predictions.iter().zip(golds) {
            if p >= c || g >= c {
                return Err(GemError::Invalid(format!("label {} outside {} classes", p.max(g), c)));
            }
            counts[g][p] += 1;
        }
        Ok(ConfusionMatrix {
            classes: classes.to_vec(),
            counts,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when the class was never predicted or never occurs, so precision or
    /// recall had a zero denominator and was reported as 0.
    pub undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn compute_metrics(predictions: &[usize], golds: &[usize], classes: &[String]) -> Result<MetricsReport> {
    Ok(metrics_from_confusion(ConfusionMatrix::new(predictions, golds, classes)?))
}

pub fn metrics_from_confusion(cm: ConfusionMatrix) -> MetricsReport {
    let c = cm.classes.len();
    let total = cm.total();
    let mut per_class = Vec::with_capacity(c);
    let mut correct = 0;
    for k in 0..c {
        let tp = cm.counts[k][k];
        correct += tp;
        let predicted: u64 = (0..c).map(|g| cm.counts[g][k]).sum();
        let support: u64 = cm.counts[k].iter().sum();
        let (precision, p_undef) = ratio(tp, predicted);
        let (recall, r_undef) = ratio(tp, support);
        per_class.push(ClassMetrics {
            class: cm.classes[k].clone(),
            precision,
            recall,
            f1: harmonic(precision, recall),
            support,
            undefined: p_undef || r_undef,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
    };
    MetricsReport {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        accuracy: correct as f64 / total as f64,
        per_class,
        confusion: cm,
    }
}

// ---------------------------------------------------------------------------
// Class-wise report

/// Symptom and gender metrics of one stream (posts or comments).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StreamReport {
    pub symptom: Option<MetricsReport>,
    pub gender: Option<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClasswiseReport {
    pub all: StreamReport,
    pub posts: Option<StreamReport>,
    pub comments: Option<StreamReport>,
}

fn stream_report(model: &GemModel, examples: &[&Example], batch_size: usize) -> Result<Option<StreamReport>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let owned: Vec<Example> = examples.iter().map(|e| (*e).clone()).collect();
    let (sp, gp) = predict_examples(model, &owned, batch_size)?;
    let task = |preds: Option<Vec<usize>>, gold: fn(&Example) -> Option<usize>, names: Vec<String>| {
        let Some(preds) = preds else { return Ok(None) };
        let pairs: Vec<(usize, usize)> = preds
            .iter()
            .zip(&owned)
            .filter_map(|(&p, e)| gold(e).map(|g| (p, g)))
            .collect();
        if pairs.is_empty() {
            return Ok(None);
        }
        let (p, g): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        compute_metrics(&p, &g, &names).map(Some)
    };
    Ok(Some(StreamReport {
        symptom: task(sp, |e| e.symptom_label, symptom_class_names())?,
        gender: task(gp, |e| e.gender_label, gender_class_names())?,
    }))
}

/// Per-class metrics over the test examples, overall and per item kind.
pub fn classwise_report(model: &GemModel, test: &[Example], batch_size: usize) -> Result<ClasswiseReport> {
    let all: Vec<&Example> = test.iter().collect();
    let posts: Vec<&Example> = test.iter().filter(|e| e.kind == Kind::Post).collect();
    let comments: Vec<&Example> = test.iter().filter(|e| e.kind == Kind::Comment).collect();
    Ok(ClasswiseReport {
        all: stream_report(model, &all, batch_size)?
            .ok_or_else(|| GemError::Invalid("empty test set".into()))?,
        posts: stream_report(model, &posts, batch_size)?,
        comments: stream_report(model, &comments, batch_size)?,
    })
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// x tends to be smaller than y.
    Less,
    /// x tends to be larger than y.
    Greater,
}

impl FromStr for Alternative {
    type Err = GemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_sided" | "two-sided" => Ok(Alternative::TwoSided),
            "less" => Ok(Alternative::Less),
            "greater" => Ok(Alternative::Greater),
            other => Err(GemError::Config(format!("unknown alternative {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    NormalApproximation,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignificanceReport {
    /// min(W+, W-) for the two-sided test, W+ otherwise.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub p_value: f64,
    pub method: TestMethod,
    pub alternative: Alternative,
}

/// Largest sample evaluated with the exact null distribution.
pub const EXACT_MAX_N: usize = 25;

/// Average ranks (1-based) of `values`, plus the sizes of tied groups.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// Number of sign assignments giving each value of 2·W+ (ranks are multiples of ½).
fn signed_rank_counts(doubled_ranks: &[usize]) -> Vec<f64> {
    let total: usize = doubled_ranks.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in doubled_ranks {
        reach += r;
        for s in (r..=reach).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], alternative: Alternative) -> Result<SignificanceReport> {
    if x.len() != y.len() || x.is_empty() {
        return Err(GemError::Invalid(format!(
            "wilcoxon needs two equal-length non-empty samples, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(GemError::NonFinite("wilcoxon input".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(SignificanceReport {
            statistic: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            n: 0,
            p_value: 1.0,
            method: TestMethod::Exact,
            alternative,
        });
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = match alternative {
        Alternative::TwoSided => w_plus.min(w_minus),
        _ => w_plus,
    };

    let (p_value, method) = if n <= EXACT_MAX_N {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let counts = signed_rank_counts(&doubled);
        let all = 2f64.powi(n as i32);
        let obs = (2.0 * w_plus).round() as usize;
        let upper = counts[obs..].iter().sum::<f64>() / all;
        let lower = counts[..=obs].iter().sum::<f64>() / all;
        let p = match alternative {
            Alternative::Greater => upper,
            Alternative::Less => lower,
            Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
        };
        (p, TestMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term).sqrt();
        let diff = w_plus - mean;
        let p = match alternative {
            Alternative::Greater => normal_sf((diff - 0.5) / sd),
            Alternative::Less => normal_sf((-diff - 0.5) / sd),
            Alternative::TwoSided => (2.0 * normal_sf((diff.abs() - 0.5).max(0.0) / sd)).min(1.0),
        };
        (p, TestMethod::NormalApproximation)
    };
    Ok(SignificanceReport {
        statistic,
        w_plus,
        w_minus,
        n,
        p_value: p_value.clamp(0.0, 1.0),
        method,
        alternative,
    })
}

// ---------------------------------------------------------------------------
// Gender-presence similarity

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub n_present: usize,
    pub n_absent: usize,
    pub n_pairs: usize,
    pub mean_present: f64,
    pub mean_absent: f64,
    pub significance: SignificanceReport,
}

/// Compares how close symptom representations sit to their class centroid for
/// items with and without gender cues.
///
/// Items are split by whether gender masking finds a span in the raw text, then
/// paired within each symptom class by nearest token length. The similarity of an
/// item is the cosine between its S-encoder `[CLS]` vector and the centroid of its
/// class; the paired sequences (gender present as `x`) go through
/// [`wilcoxon_signed_rank`].
pub fn gender_presence_similarity(
    model: &GemModel,
    items: &[LabeledItem],
    lexicons: &ViewLexicons,
    vocab: &Vocabulary,
    mode: InputMode,
    alternative: Alternative,
) -> Result<SimilarityReport> {
    let items: Vec<&LabeledItem> = items.iter().filter(|i| i.symptom.is_some()).collect();
    let present_flags: Vec<bool> = items
        .iter()
        .map(|i| !gender_spans(&i.item.text, &lexicons.gender).is_empty())
        .collect();
    let n_present = present_flags.iter().filter(|p| **p).count();
    let n_absent = items.len() - n_present;
    if n_present == 0 {
        return Err(GemError::Invalid("gender-present partition is empty".into()));
    }
    if n_absent == 0 {
        return Err(GemError::Invalid("gender-absent partition is empty".into()));
    }
    let owned: Vec<LabeledItem> = items.iter().map(|i| (*i).clone()).collect();
    let examples = encode_examples(&owned, lexicons, vocab, mode, model.config.max_len)?;
    let d = model.config.d;
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let seqs: Vec<_> = chunk.iter().map(|e| e.symptom.clone()).collect();
        let batch = make_batch(&seqs, None)?;
        let cls = model.symptom_cls(&batch)?;
        vectors.extend(cls.data().chunks(d).map(<[f64]>::to_vec));
    }

    let mut sims = vec![0.0; items.len()];
    for class in Symptom::ALL {
        let members: Vec<usize> = (0..items.len()).filter(|&i| items[i].symptom == Some(class)).collect();
        if members.is_empty() {
            continue;
        }
        let mut centroid = vec![0.0; d];
        for &i in &members {
            for (c, v) in centroid.iter_mut().zip(&vectors[i]) {
                *c += v / members.len() as f64;
            }
        }
        for &i in &members {
            sims[i] = cosine(&vectors[i], &centroid);
        }
    }

    let len = |i: usize| items[i].item.token_count();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for class in Symptom::ALL {
        let of = |flag: bool| -> Vec<usize> {
            (0..items.len())
                .filter(|&i| items[i].symptom == Some(class) && present_flags[i] == flag)
                .collect()
        };
        let present = of(true);
        let mut absent = of(false);
        for p in present {
            let Some((k, _)) = absent
                .iter()
                .enumerate()
                .min_by_key(|(_, &a)| (len(a).abs_diff(len(p)), a))
            else {
                break;
            };
            let a = absent.remove(k);
            xs.push(sims[p]);
            ys.push(sims[a]);
        }
    }
    if xs.is_empty() {
        return Err(GemError::Invalid("no symptom class has items in both partitions".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SimilarityReport {
        n_present,
        n_absent,
        n_pairs: xs.len(),
        mean_present: mean(&xs),
        mean_absent: mean(&ys),
        significance: wilcoxon_signed_rank(&xs, &ys, alternative)?,
    })
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    Full,
    NoAttention,
    NoEntityMasking,
    NoTaskAdaptation,
}

impl AblationRow {
    pub const ALL: [AblationRow; 4] = [
        AblationRow::Full,
        AblationRow::NoAttention,
        AblationRow::NoEntityMasking,
        AblationRow::NoTaskAdaptation,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::Full => "full",
            AblationRow::NoAttention => "-attention",
            AblationRow::NoEntityMasking => "-entity_masking",
            AblationRow::NoTaskAdaptation => "-task_adaptation",
        }
    }

    fn variant(self) -> Variant {
        match self {
            AblationRow::NoAttention => Variant::ConcatAblation,
            _ => Variant::Gem,
        }
    }

    fn mode(self) -> InputMode {
        match self {
            AblationRow::NoEntityMasking => InputMode::Raw,
            _ => InputMode::Masked,
        }
    }

    fn pretrained(self) -> bool {
        self != AblationRow::NoTaskAdaptation
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub finetune: TrainConfig,
    pub pretrain: TrainConfig,
    pub min_freq: usize,
    pub rows: Vec<AblationRow>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            model: ModelConfig::default(),
            finetune: TrainConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            min_freq: 2,
            rows: AblationRow::ALL.to_vec(),
        }
    }
}

/// Test-set precision, recall and F1 of one run: macro averages per task and
/// their mean across the two tasks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub symptom_macro_f1: f64,
    pub gender_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub seed: u64,
    /// `None` when the run aborted (for example on a NaN loss).
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRowReport {
    pub row: AblationRow,
    pub median_precision: Option<f64>,
    pub median_recall: Option<f64>,
    pub median_f1: Option<f64>,
    pub runs: Vec<AblationCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// SHA-256 over the train/dev/test id lists every configuration used.
    pub split_hash: String,
    pub rows: Vec<AblationRowReport>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

pub fn split_hash(split: &CorpusSplit) -> String {
    let mut h = Sha256::new();
    for (name, part) in [("train", &split.train), ("dev", &split.dev), ("test", &split.test)] {
        h.update(name.as_bytes());
        for it in part.iter() {
            h.update(it.item.id.as_bytes());
            h.update([0u8]);
        }
    }
    hex::encode(h.finalize())
}

fn examples_hash(parts: [&[Example]; 3]) -> String {
    let mut h = Sha256::new();
    for (name, part) in ["train", "dev", "test"].into_iter().zip(parts) {
        h.update(name.as_bytes());
        for e in part {
            h.update(e.id.as_bytes());
            h.update([0u8]);
        }
    }
    hex::encode(h.finalize())
}

/// Test metrics of a trained model (macro per task, then averaged across tasks).
pub fn run_metrics(model: &GemModel, test: &[Example], batch_size: usize) -> Result<RunMetrics> {
    let report = classwise_report(model, test, batch_size)?;
    let s = report.all.symptom.as_ref();
    let g = report.all.gender.as_ref();
    let reports: Vec<&MetricsReport> = s.into_iter().chain(g).collect();
    if reports.is_empty() {
        return Err(GemError::MissingLabels("test set has no labels for this variant".into()));
    }
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / reports.len() as f64;
    Ok(RunMetrics {
        precision: avg(|r| r.macro_precision),
        recall: avg(|r| r.macro_recall),
        f1: avg(|r| r.macro_f1),
        symptom_macro_f1: s.map_or(f64::NAN, |r| r.macro_f1),
        gender_macro_f1: g.map_or(f64::NAN, |r| r.macro_f1),
    })
}

struct Prepared {
    vocab: Vocabulary,
    train: Vec<Example>,
    dev: Vec<Example>,
    test: Vec<Example>,
}

fn prepare(split: &CorpusSplit, lexicons: &ViewLexicons, mode: InputMode, cfg: &AblationConfig) -> Result<Prepared> {
    let vocab = build_vocab(&split.train, lexicons, mode, cfg.min_freq)?;
    let enc = |items: &[LabeledItem]| encode_examples(items, lexicons, &vocab, mode, cfg.model.max_len);
    Ok(Prepared {
        train: enc(&split.train)?,
        dev: enc(&split.dev)?,
        test: enc(&split.test)?,
        vocab,
    })
}

/// Trains and evaluates each requested configuration once per seed on the same
/// split. Encoders are task-adapted with MLM on the training texts of their own
/// view; the −attention row shares the pretrained encoders of the full row.
pub fn run_ablation(
    base: &AblationConfig,
    split: &CorpusSplit,
    lexicons: &ViewLexicons,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(GemError::Config(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let hash = split_hash(split);
    let mut prepared: BTreeMap<InputMode, Prepared> = BTreeMap::new();
    for row in &base.rows {
        if let std::collections::btree_map::Entry::Vacant(e) = prepared.entry(row.mode()) {
            e.insert(prepare(split, lexicons, row.mode(), base)?);
        }
    }
    for p in prepared.values() {
        if examples_hash([&p.train, &p.dev, &p.test]) != hash {
            return Err(GemError::Invalid("encoded examples diverged from the split".into()));
        }
    }

    let mut cells: BTreeMap<AblationRow, Vec<AblationCell>> = BTreeMap::new();
    for &seed in seeds {
        // pretrained parameters per input mode, shared by the rows that use that mode
        let mut pretrained: BTreeMap<InputMode, crate::numerics::ParamStore> = BTreeMap::new();
        for &row in &base.rows {
            let data = &prepared[&row.mode()];
            let mut mcfg = base.model.clone();
            mcfg.variant = row.variant();
            mcfg.vocab_size = data.vocab.len();
            let outcome = (|| -> Result<RunMetrics> {
                let mut model = GemModel::new(mcfg.clone(), seed)?;
                if row.pretrained() {
                    let src = match pretrained.entry(row.mode()) {
                        Entry::Occupied(e) => e.into_mut(),
                        Entry::Vacant(e) => {
                            let mut pcfg = base.pretrain.clone();
                            pcfg.seed = seed;
                            pcfg.input_mode = row.mode();
                            let mut gem_cfg = mcfg.clone();
                            gem_cfg.variant = Variant::Gem;
                            let mut donor = GemModel::new(gem_cfg, seed)?;
                            mlm_pretrain(&mut donor, &data.train, &data.vocab, &pcfg)?;
                            e.insert(donor.params)
                        }
                    };
                    model.params.copy_prefix_from(src, crate::model::S_ENCODER)?;
                    model.params.copy_prefix_from(src, crate::model::G_ENCODER)?;
                }
                let mut fcfg = base.finetune.clone();
                fcfg.seed = seed;
                fcfg.input_mode = row.mode();
                let mut trainer = Trainer::new(model, &fcfg);
                trainer.train(&data.train, &data.dev, &fcfg, |_| {})?;
                let best = trainer.into_best_model()?;
                run_metrics(&best, &data.test, fcfg.batch_size.max(64))
            })();
            let cell = match outcome {
                Ok(m) => {
                    progress(&format!("seed {seed} {}: f1 {:.4}", row.label(), m.f1));
                    AblationCell {
                        seed,
                        metrics: Some(m),
                        error: None,
                    }
                }
                Err(e) => {
                    progress(&format!("seed {seed} {}: aborted ({e})", row.label()));
                    AblationCell {
                        seed,
                        metrics: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            cells.entry(row).or_default().push(cell);
        }
    }

    let rows = base
        .rows
        .iter()
        .map(|&row| {
            let runs = cells.remove(&row).unwrap_or_default();
            let col = |f: fn(&RunMetrics) -> f64| {
                let v: Vec<f64> = runs.iter().filter_map(|c| c.metrics.as_ref().map(f)).collect();
                median(&v)
            };
            AblationRowReport {
                row,
                median_precision: col(|m| m.precision),
                median_recall: col(|m| m.recall),
                median_f1: col(|m| m.f1),
                runs,
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        split_hash: hash,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Rendering

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Table,
    Records,
}

impl FromStr for OutputFormat {
    type Err = GemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(OutputFormat::Table),
            "records" => Ok(OutputFormat::Records),
            other => Err(GemError::Config(format!("unknown output format {other:?}"))),
        }
    }
}

fn pct(v: f64) -> String {
    format!("{:6.2}", 100.0 * v)
}

/// Aligned text table of the class rows of each report, followed by the macro row.
pub fn metrics_table(title: &str, reports: &[&MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{:<12} {:>7} {:>7} {:>7} {:>8}", "class", "P", "R", "F1", "support");
    for r in reports {
        for m in &r.per_class {
            let flag = if m.undefined { " *" } else { "" };
            let _ = writeln!(
                out,
                "{:<12} {:>7} {:>7} {:>7} {:>8}{flag}",
                m.class,
                pct(m.precision),
                pct(m.recall),
                pct(m.f1),
                m.support
            );
        }
        let _ = writeln!(
            out,
            "{:<12} {:>7} {:>7} {:>7} {:>8}",
            "macro",
            pct(r.macro_precision),
            pct(r.macro_recall),
            pct(r.macro_f1),
            r.confusion.total()
        );
    }
    if reports.iter().any(|r| r.per_class.iter().any(|m| m.undefined)) {
        let _ = writeln!(out, "* zero denominator, reported as 0");
    }
    out
}

/// One JSON object per class row.
pub fn metrics_records(task: &str, stream: &str, report: &MetricsReport) -> String {
    let mut out = String::new();
    for m in &report.per_class {
        let rec = serde_json::json!({
            "stream": stream, "task": task, "class": m.class, "precision": m.precision,
            "recall": m.recall, "f1": m.f1, "support": m.support, "undefined": m.undefined,
        });
        let _ = writeln!(out, "{rec}");
    }
    let rec = serde_json::json!({
        "stream": stream, "task": task, "class": "macro", "precision": report.macro_precision,
        "recall": report.macro_recall, "f1": report.macro_f1, "weighted_f1": report.weighted_f1,
        "accuracy": report.accuracy,
    });
    let _ = writeln!(out, "{rec}");
    out
}

pub fn render_classwise(report: &ClasswiseReport, format: OutputFormat) -> String {
    let streams = [
        ("all", Some(&report.all)),
        ("posts", report.posts.as_ref()),
        ("comments", report.comments.as_ref()),
    ];
    let mut out = String::new();
    for (name, stream) in streams {
        match (stream, format) {
            (None, OutputFormat::Table) => {
                let _ = writeln!(out, "[{name}] no items\n");
            }
            (None, OutputFormat::Records) => {}
            (Some(s), OutputFormat::Table) => {
                let reports: Vec<&MetricsReport> = s.symptom.iter().chain(s.gender.iter()).collect();
                out.push_str(&metrics_table(&format!("[{name}]"), &reports));
                out.push('\n');
            }
            (Some(s), OutputFormat::Records) => {
                if let Some(r) = &s.symptom {
                    out.push_str(&metrics_records("symptom", name, r));
                }
                if let Some(r) = &s.gender {
                    out.push_str(&metrics_records("gender", name, r));
                }
            }
        }
    }
    out
}

pub fn render_ablation(report: &AblationReport, format: OutputFormat) -> String {
    let mut out = String::new();
    let fmt = |v: Option<f64>| v.map_or("   n/a".to_string(), pct);
    match format {
        OutputFormat::Table => {
            let _ = writeln!(out, "median over {} seeds {:?}", report.seeds.len(), report.seeds);
            let _ = writeln!(out, "{:<18} {:>7} {:>7} {:>7}", "configuration", "P", "R", "F1");
            for r in &report.rows {
                let aborted = r.runs.iter().filter(|c| c.metrics.is_none()).count();
                let note = if aborted > 0 { format!("  ({aborted} aborted)") } else { String::new() };
                let _ = writeln!(
                    out,
                    "{:<18} {:>7} {:>7} {:>7}{note}",
                    r.row.label(),
                    fmt(r.median_precision),
                    fmt(r.median_recall),
                    fmt(r.median_f1)
                );
            }
        }
        OutputFormat::Records => {
            for r in &report.rows {
                let rec = serde_json::json!({
                    "row": r.row.label(), "median_precision": r.median_precision,
                    "median_recall": r.median_recall, "median_f1": r.median_f1, "runs": r.runs,
                });
                let _ = writeln!(out, "{rec}");
            }
        }
    }
    out
}
