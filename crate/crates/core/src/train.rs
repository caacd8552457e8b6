//! Optimisation: Adam, masked-language-model task adaptation, supervised
//! fine-tuning with best-dev selection, checkpoints and the weak gender labeler.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Gender, GenderClassifier, Kind, LabeledItem};
use crate::error::{GemError, Result};
use crate::eval::{compute_metrics, gender_class_names, symptom_class_names, MetricsReport};
use crate::knowledge::ViewLexicons;
use crate::model::{argmax_rows, GemModel, ModelConfig, Variant, LN_EPS};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::text::{make_batch, Batch, PairedBatch, TokenSequence, Vocabulary, MASK_ID};

/// Mixes a run seed with a stream tag and an index (epoch, step) into an
/// independent RNG seed, so every random draw is a pure function of its position.
pub fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_MLM: u64 = 3;
const STREAM_MLM_SHUFFLE: u64 = 4;
const STREAM_MLM_DROPOUT: u64 = 5;

fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream, index))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub symptom_weight: f64,
    pub gender_weight: f64,
    pub seed: u64,
    /// Fraction of eligible tokens selected as MLM targets.
    pub mlm_rate: f64,
    /// Of the selected tokens: replaced by `[MASK]`, by a random word, kept.
    pub mlm_split: [f64; 3],
    pub input_mode: InputMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            symptom_weight: 1.0,
            gender_weight: 1.0,
            seed: 0,
            mlm_rate: 0.15,
            mlm_split: [0.8, 0.1, 0.1],
            input_mode: InputMode::Masked,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning settings at the published scale.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 1e-5,
            ..Self::default()
        }
    }

    /// Fine-tuning schedule paired with [`ModelConfig::desk`].
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn pretrain_default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn pretrain_paper() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 5e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(GemError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(GemError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(GemError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.symptom_weight < 0.0 || self.gender_weight < 0.0 {
            return Err(GemError::Config("loss weights must be non-negative".into()));
        }
        validate_mlm(self.mlm_rate, self.mlm_split)
    }
}

fn validate_mlm(rate: f64, split: [f64; 3]) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(GemError::Config(format!("mlm rate must lie in [0, 1], got {rate}")));
    }
    if split.iter().any(|p| *p < 0.0) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(GemError::Config(format!("mlm split {split:?} must be non-negative and sum to 1")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }
}

/// First and second moment estimates, aligned with the store's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update from the gradients in `store`.
///
/// Parameters whose gradient is entirely zero (not touched by this step's
/// graph) keep their values and moments.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(GemError::Shape(format!(
            "optimizer tracks {} tensors, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
        return Err(GemError::NonFinite(format!("gradient of {}", p.name)));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if p.grad.data().iter().all(|g| *g == 0.0) {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Masked language modelling

#[derive(Clone, Debug, PartialEq)]
pub struct MlmCorruption {
    pub batch: Batch,
    /// Flat `b * T + t` indices of the target positions, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
    /// How many targets were masked, randomised and kept.
    pub counts: [usize; 3],
}

/// Selects MLM targets among real, non-reserved tokens of `batch` and corrupts
/// them. The draw depends only on `(seed, step)`.
pub fn mlm_corrupt(
    batch: &Batch,
    vocab: &Vocabulary,
    rate: f64,
    split: [f64; 3],
    seed: u64,
    step: u64,
) -> Result<MlmCorruption> {
    validate_mlm(rate, split)?;
    let first = vocab.first_content_id();
    let v = vocab.len();
    let mut rng = rng_for(seed, STREAM_MLM, step);
    let mut out = batch.clone();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let mut counts = [0usize; 3];
    for (i, (&id, &real)) in batch.ids.iter().zip(&batch.pad_mask).enumerate() {
        if !real || vocab.is_reserved(id) {
            continue;
        }
        if rng.random::<f64>() >= rate {
            continue;
        }
        positions.push(i);
        targets.push(id);
        let u: f64 = rng.random();
        if u < split[0] {
            out.ids[i] = MASK_ID;
            counts[0] += 1;
        } else if u < split[0] + split[1] && v > first {
            out.ids[i] = rng.random_range(first..v);
            counts[1] += 1;
        } else {
            counts[2] += 1;
        }
    }
    Ok(MlmCorruption {
        batch: out,
        positions,
        targets,
        counts,
    })
}

fn mlm_loss(
    g: &mut Graph,
    store: &ParamStore,
    model: &GemModel,
    prefix: &str,
    c: &MlmCorruption,
) -> Result<crate::numerics::Var> {
    let enc = if prefix == crate::model::S_ENCODER {
        model.s_encoder()
    } else {
        model.g_encoder()
    }
    .ok_or_else(|| GemError::Invalid(format!("model has no {prefix}")))?;
    let id = |s: &str| {
        store
            .id(&format!("{prefix}.mlm.{s}"))
            .ok_or_else(|| GemError::Incompatible(format!("missing {prefix}.mlm.{s}")))
    };
    let x = enc.forward(g, store, &model.config, &c.batch)?;
    let h = g.gather_rows(x, &c.positions)?;
    let (lg, lb, bias) = (g.param(store, id("ln.g")?), g.param(store, id("ln.b")?), g.param(store, id("bias")?));
    let h = g.layer_norm(h, lg, lb, LN_EPS)?;
    let emb = g.param(store, enc.token_embedding());
    let logits = g.matmul(h, emb, true)?;
    let logits = g.add_row(logits, bias)?;
    g.cross_entropy(logits, &c.targets)
}

/// Task adaptation of one encoder with the MLM objective on `sequences`, using an
/// output layer tied to the token embedding. Returns the mean loss per epoch.
pub fn mlm_pretrain_encoder(
    model: &mut GemModel,
    prefix: &str,
    sequences: &[TokenSequence],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if vocab.len() != model.config.vocab_size {
        return Err(GemError::Incompatible(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    if sequences.len() < cfg.batch_size {
        return Err(GemError::Invalid(format!(
            "pretraining corpus has {} sequences, fewer than one batch of {}",
            sequences.len(),
            cfg.batch_size
        )));
    }
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let d = model.config.d;
    let mut store = model.params.clone();
    store.add_const(format!("{prefix}.mlm.ln.g"), &[d], 1.0)?;
    store.add_const(format!("{prefix}.mlm.ln.b"), &[d], 0.0)?;
    store.add_const(format!("{prefix}.mlm.bias"), &[vocab.len()], 0.0)?;
    let mut adam = AdamState::new(&store);
    let acfg = AdamConfig::from(cfg);
    let stream_tag = if prefix == crate::model::S_ENCODER { 0 } else { 1 << 32 };
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs as u64 {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, STREAM_MLM_SHUFFLE, stream_tag | epoch));
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<TokenSequence> = chunk.iter().map(|&i| sequences[i].clone()).collect();
            let batch = make_batch(&seqs, None)?;
            let c = mlm_corrupt(&batch, vocab, cfg.mlm_rate, cfg.mlm_split, cfg.seed, stream_tag | step)?;
            step += 1;
            if c.targets.is_empty() {
                continue;
            }
            let mut g = Graph::training(rng_for(cfg.seed, STREAM_MLM_DROPOUT, stream_tag | step));
            let loss = mlm_loss(&mut g, &store, model, prefix, &c)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(GemError::NanLoss { step });
            }
            store.zero_grad();
            g.backward(loss, &mut store)?;
            adam_step(&mut store, &mut adam, &acfg)?;
            total += lv;
            batches += 1;
        }
        losses.push(if batches == 0 { f64::NAN } else { total / batches as f64 });
    }
    model.params.copy_prefix_from(&store, &format!("{prefix}."))?;
    Ok(losses)
}

/// Adapts every encoder of `model` to its own view of `examples`: the S-encoder
/// on symptom views, the G-encoder on gender views.
pub fn mlm_pretrain(
    model: &mut GemModel,
    examples: &[Example],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<PretrainReport> {
    let mut report = PretrainReport::default();
    if model.s_encoder().is_some() {
        let seqs: Vec<TokenSequence> = examples.iter().map(|e| e.symptom.clone()).collect();
        report.s_encoder = mlm_pretrain_encoder(model, crate::model::S_ENCODER, &seqs, vocab, cfg)?;
    }
    if model.g_encoder().is_some() {
        let seqs: Vec<TokenSequence> = examples.iter().map(|e| e.gender.clone()).collect();
        report.g_encoder = mlm_pretrain_encoder(model, crate::model::G_ENCODER, &seqs, vocab, cfg)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PretrainReport {
    pub s_encoder: Vec<f64>,
    pub g_encoder: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Examples

/// Whether encoders see the entity-masked views or the raw text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Masked,
    Raw,
}

impl std::str::FromStr for InputMode {
    type Err = GemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(InputMode::Masked),
            "raw" => Ok(InputMode::Raw),
            other => Err(GemError::Config(format!("unknown input mode {other:?}"))),
        }
    }
}

/// One encoded item: both views plus optional label indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub kind: Kind,
    pub symptom: TokenSequence,
    pub gender: TokenSequence,
    pub symptom_label: Option<usize>,
    pub gender_label: Option<usize>,
}

fn view_texts(item: &LabeledItem, lexicons: &ViewLexicons, mode: InputMode) -> (String, String) {
    match mode {
        InputMode::Raw => (item.item.text.clone(), item.item.text.clone()),
        InputMode::Masked => {
            let v = lexicons.views(&item.item.text);
            (v.symptom_view, v.gender_view)
        }
    }
}

/// Vocabulary over both views of `items`.
pub fn build_vocab(items: &[LabeledItem], lexicons: &ViewLexicons, mode: InputMode, min_freq: usize) -> Result<Vocabulary> {
    let texts: Vec<String> = items
        .iter()
        .flat_map(|it| {
            let (s, g) = view_texts(it, lexicons, mode);
            [s, g]
        })
        .collect();
    Vocabulary::build(&texts, min_freq)
}

pub fn encode_examples(
    items: &[LabeledItem],
    lexicons: &ViewLexicons,
    vocab: &Vocabulary,
    mode: InputMode,
    max_len: usize,
) -> Result<Vec<Example>> {
    items
        .iter()
        .map(|it| {
            let (s, g) = view_texts(it, lexicons, mode);
            Ok(Example {
                id: it.item.id.clone(),
                kind: it.item.kind,
                symptom: vocab.encode(&s, max_len)?,
                gender: vocab.encode(&g, max_len)?,
                symptom_label: it.symptom.map(|s| s.index()),
                gender_label: it.gender.map(|g| g.index()),
            })
        })
        .collect()
}

fn paired_batch(examples: &[&Example]) -> Result<PairedBatch> {
    let s: Vec<TokenSequence> = examples.iter().map(|e| e.symptom.clone()).collect();
    let g: Vec<TokenSequence> = examples.iter().map(|e| e.gender.clone()).collect();
    let sl: Option<Vec<usize>> = examples.iter().map(|e| e.symptom_label).collect();
    let gl: Option<Vec<usize>> = examples.iter().map(|e| e.gender_label).collect();
    Ok(PairedBatch::new(&s, &g)?.with_labels(sl, gl))
}

/// Symptom and gender predictions; `None` for a task the variant has no head for.
pub type TaskPredictions = (Option<Vec<usize>>, Option<Vec<usize>>);

/// Argmax predictions per task.
pub fn predict_examples(model: &GemModel, examples: &[Example], batch_size: usize) -> Result<TaskPredictions> {
    let v = model.variant();
    let mut sp = v.has_symptom_head().then(Vec::new);
    let mut gp = v.has_gender_head().then(Vec::new);
    let refs: Vec<&Example> = examples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let pred = model.predict(&paired_batch(chunk)?)?;
        if let Some(sp) = sp.as_mut() {
            sp.extend(argmax_rows(pred.symptom_logits()?));
        }
        if let Some(gp) = gp.as_mut() {
            gp.extend(argmax_rows(pred.gender_logits()?));
        }
    }
    Ok((sp, gp))
}

fn check_labels(variant: Variant, examples: &[Example], split: &str) -> Result<()> {
    if variant.has_symptom_head() {
        if let Some(e) = examples.iter().find(|e| e.symptom_label.is_none()) {
            return Err(GemError::MissingLabels(format!("{split} item {} has no symptom label", e.id)));
        }
    }
    if variant.has_gender_head() {
        if let Some(e) = examples.iter().find(|e| e.gender_label.is_none()) {
            return Err(GemError::MissingLabels(format!("{split} item {} has no gender label", e.id)));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Fine-tuning

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<&MetricsReport> for TaskScores {
    fn from(r: &MetricsReport) -> Self {
        TaskScores {
            precision: r.macro_precision,
            recall: r.macro_recall,
            f1: r.macro_f1,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub symptom: Option<TaskScores>,
    pub gender: Option<TaskScores>,
}

impl EpochRecord {
    /// Mean macro-F1 over the tasks present.
    pub fn score(&self) -> f64 {
        let f: Vec<f64> = self.symptom.iter().chain(self.gender.iter()).map(|s| s.f1).collect();
        f.iter().sum::<f64>() / f.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub best_dev_score: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Loss and metrics of a model on a labelled set, in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub symptom: Option<MetricsReport>,
    pub gender: Option<MetricsReport>,
}

fn task_metrics(preds: &[usize], golds: Option<Vec<usize>>, names: Vec<String>) -> Result<Option<MetricsReport>> {
    match golds {
        Some(g) if !g.is_empty() => compute_metrics(preds, &g, &names).map(Some),
        _ => Ok(None),
    }
}

pub fn evaluate(model: &GemModel, examples: &[Example], cfg: &TrainConfig) -> Result<Evaluation> {
    check_labels(model.variant(), examples, "evaluation")?;
    let refs: Vec<&Example> = examples.iter().collect();
    let (mut sp, mut gp) = (Vec::new(), Vec::new());
    let mut loss_sum = 0.0;
    for chunk in refs.chunks(cfg.batch_size.max(64)) {
        let batch = paired_batch(chunk)?;
        let mut g = Graph::new();
        let fv = model.forward(&mut g, &batch)?;
        let loss = weighted_loss(&mut g, &fv, &batch, cfg)?;
        loss_sum += g.value(loss).item() * chunk.len() as f64;
        if let Some(l) = fv.symptom_logits {
            sp.extend(argmax_rows(g.value(l)));
        }
        if let Some(l) = fv.gender_logits {
            gp.extend(argmax_rows(g.value(l)));
        }
    }
    let v = model.variant();
    let sg = v.has_symptom_head().then(|| examples.iter().map(|e| e.symptom_label.unwrap()).collect());
    let gg = v.has_gender_head().then(|| examples.iter().map(|e| e.gender_label.unwrap()).collect());
    Ok(Evaluation {
        loss: loss_sum / examples.len().max(1) as f64,
        symptom: task_metrics(&sp, sg, symptom_class_names())?,
        gender: task_metrics(&gp, gg, gender_class_names())?,
    })
}

fn weighted_loss(
    g: &mut Graph,
    fv: &crate::model::ForwardVars,
    batch: &PairedBatch,
    cfg: &TrainConfig,
) -> Result<crate::numerics::Var> {
    let mut terms = Vec::new();
    if let Some(l) = fv.symptom_logits {
        let y = batch
            .symptom_labels()
            .ok_or_else(|| GemError::MissingLabels("batch has no symptom labels".into()))?;
        let ce = g.cross_entropy(l, y)?;
        terms.push(g.scale(ce, cfg.symptom_weight));
    }
    if let Some(l) = fv.gender_logits {
        let y = batch
            .gender_labels()
            .ok_or_else(|| GemError::MissingLabels("batch has no gender labels".into()))?;
        let ce = g.cross_entropy(l, y)?;
        terms.push(g.scale(ce, cfg.gender_weight));
    }
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| GemError::Invalid("variant has no heads".into()))?;
    it.try_fold(first, |acc, t| g.add(acc, t))
}

/// Supervised trainer holding the model, optimizer state and the best-dev snapshot.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: GemModel,
    pub config: TrainConfig,
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
    adam: AdamState,
    best: Option<ParamStore>,
}

impl Trainer {
    pub fn new(model: GemModel, config: &TrainConfig) -> Self {
        let adam = AdamState::new(&model.params);
        Trainer {
            model,
            config: config.clone(),
            state: TrainState {
                epoch: 0,
                step: 0,
                best_dev_score: None,
                best_epoch: None,
            },
            history: Vec::new(),
            adam,
            best: None,
        }
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn best_params(&self) -> Option<&ParamStore> {
        self.best.as_ref()
    }

    /// Trains until `cfg.epochs` epochs are complete (continuing from the current
    /// state), calling `on_record` with each train and dev record.
    pub fn train(
        &mut self,
        train: &[Example],
        dev: &[Example],
        cfg: &TrainConfig,
        mut on_record: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        cfg.validate()?;
        self.config = cfg.clone();
        if train.is_empty() {
            return Err(GemError::Invalid("training set is empty".into()));
        }
        let variant = self.model.variant();
        check_labels(variant, train, "train")?;
        check_labels(variant, dev, "dev")?;
        let acfg = AdamConfig::from(cfg);
        while self.state.epoch < cfg.epochs {
            let epoch = self.state.epoch;
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng_for(cfg.seed, STREAM_SHUFFLE, epoch as u64));
            let (mut sp, mut gp, mut sg, mut gg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            let mut loss_sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let exs: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
                let batch = paired_batch(&exs)?;
                let mut g = Graph::training(rng_for(cfg.seed, STREAM_DROPOUT, self.state.step));
                let fv = self.model.forward(&mut g, &batch)?;
                let loss = weighted_loss(&mut g, &fv, &batch, cfg)?;
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(GemError::NanLoss { step: self.state.step });
                }
                if let Some(l) = fv.symptom_logits {
                    sp.extend(argmax_rows(g.value(l)));
                    sg.extend(batch.symptom_labels().unwrap());
                }
                if let Some(l) = fv.gender_logits {
                    gp.extend(argmax_rows(g.value(l)));
                    gg.extend(batch.gender_labels().unwrap());
                }
                self.model.params.zero_grad();
                g.backward(loss, &mut self.model.params)?;
                adam_step(&mut self.model.params, &mut self.adam, &acfg)?;
                self.model.params.zero_grad();
                if !self.model.params.all_finite() {
                    return Err(GemError::NanLoss { step: self.state.step });
                }
                loss_sum += lv * chunk.len() as f64;
                self.state.step += 1;
            }
            let record = EpochRecord {
                epoch: epoch + 1,
                split: "train".into(),
                loss: loss_sum / train.len() as f64,
                symptom: task_metrics(&sp, Some(sg), symptom_class_names())?.as_ref().map(TaskScores::from),
                gender: task_metrics(&gp, Some(gg), gender_class_names())?.as_ref().map(TaskScores::from),
            };
            on_record(&record);
            self.history.push(record);

            if !dev.is_empty() {
                let ev = evaluate(&self.model, dev, cfg)?;
                let record = EpochRecord {
                    epoch: epoch + 1,
                    split: "dev".into(),
                    loss: ev.loss,
                    symptom: ev.symptom.as_ref().map(TaskScores::from),
                    gender: ev.gender.as_ref().map(TaskScores::from),
                };
                let score = record.score();
                if self.state.best_dev_score.is_none_or(|b| score > b) {
                    self.state.best_dev_score = Some(score);
                    self.state.best_epoch = Some(epoch + 1);
                    self.best = Some(self.model.params.clone());
                }
                on_record(&record);
                self.history.push(record);
            }
            self.state.epoch += 1;
        }
        Ok(())
    }

    /// The model with the best-dev parameters, or the final ones when no dev set
    /// was used.
    pub fn best_model(&self) -> Result<GemModel> {
        match &self.best {
            Some(p) => GemModel::from_params(self.model.config.clone(), p.clone()),
            None => Ok(self.model.clone()),
        }
    }

    pub fn into_best_model(self) -> Result<GemModel> {
        match self.best {
            Some(p) => GemModel::from_params(self.model.config, p),
            None => Ok(self.model),
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_HEADER: &str = "#gem-checkpoint v1";

fn config_digest(model: &str, train: &str) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update(b"\n");
    h.update(train.as_bytes());
    hex::encode(h.finalize())
}

fn write_store(out: &mut String, kind: &str, names: &ParamStore, tensors: &mut dyn Iterator<Item = &Tensor>) {
    for (p, t) in names.iter().zip(tensors) {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = write!(out, "{kind} {} {}", p.name, shape.join(","));
        for v in t.data() {
            let _ = write!(out, " {:016x}", v.to_bits());
        }
        out.push('\n');
    }
}

/// Serialises the complete trainer state. Floats are stored as their exact bit
/// patterns so a reload continues bit-for-bit.
pub fn checkpoint_to_string(trainer: &Trainer, vocab: &Vocabulary) -> Result<String> {
    let model_json = to_json(&trainer.model.config)?;
    let train_json = to_json(&trainer.config)?;
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_HEADER}");
    let _ = writeln!(out, "config_digest {}", config_digest(&model_json, &train_json));
    let _ = writeln!(out, "vocab_hash {}", vocab.hash());
    let _ = writeln!(out, "model_config {model_json}");
    let _ = writeln!(out, "train_config {train_json}");
    let _ = writeln!(out, "train_state {}", to_json(&trainer.state)?);
    let _ = writeln!(out, "history {}", to_json(&trainer.history)?);
    let _ = writeln!(out, "adam_t {}", trainer.adam.t);
    let p = &trainer.model.params;
    write_store(&mut out, "param", p, &mut p.iter().map(|x| &x.value));
    if let Some(b) = &trainer.best {
        write_store(&mut out, "best", p, &mut b.iter().map(|x| &x.value));
    }
    write_store(&mut out, "adam_m", p, &mut trainer.adam.m.iter());
    write_store(&mut out, "adam_v", p, &mut trainer.adam.v.iter());
    let sum = hex::encode(Sha256::digest(out.as_bytes()));
    let _ = writeln!(out, "checksum {sum}");
    Ok(out)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| GemError::Invalid(e.to_string()))
}

fn parse_tensor_line(rest: &str, ctx: &str) -> Result<(String, Tensor)> {
    let mut parts = rest.split(' ');
    let name = parts.next().unwrap_or_default().to_string();
    let shape_s = parts.next().ok_or_else(|| GemError::parse(ctx, format!("tensor {name} lacks a shape")))?;
    let shape: Vec<usize> = if shape_s.is_empty() {
        Vec::new()
    } else {
        shape_s
            .split(',')
            .map(|s| s.parse().map_err(|_| GemError::parse(ctx, format!("bad shape {shape_s:?}"))))
            .collect::<Result<_>>()?
    };
    let data: Vec<f64> = parts
        .map(|h| {
            u64::from_str_radix(h, 16)
                .map(f64::from_bits)
                .map_err(|_| GemError::parse(ctx, format!("bad value {h:?} in {name}")))
        })
        .collect::<Result<_>>()?;
    let t = Tensor::new(shape, data).map_err(|e| GemError::parse(ctx, format!("{name}: {e}")))?;
    Ok((name, t))
}

pub fn checkpoint_from_str(text: &str, vocab: &Vocabulary, context: &str) -> Result<Trainer> {
    let bad = |m: String| GemError::parse(context, m);
    let body_end = text
        .trim_end_matches('\n')
        .rfind('\n')
        .ok_or_else(|| bad("truncated checkpoint".into()))?
        + 1;
    let (body, last) = text.split_at(body_end);
    let expected = last
        .trim_end()
        .strip_prefix("checksum ")
        .ok_or_else(|| bad("missing checksum line".into()))?;
    if hex::encode(Sha256::digest(body.as_bytes())) != expected {
        return Err(bad("checksum mismatch; the file is corrupted".into()));
    }
    let mut lines = body.lines();
    if lines.next() != Some(CHECKPOINT_HEADER) {
        return Err(bad(format!("expected header {CHECKPOINT_HEADER:?}")));
    }
    let mut field = |key: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| bad(format!("missing {key}")))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected {key}, found {:?}", line.split(' ').next())))
    };
    let digest = field("config_digest")?;
    let vhash = field("vocab_hash")?;
    let model_json = field("model_config")?;
    let train_json = field("train_config")?;
    let state_json = field("train_state")?;
    let history_json = field("history")?;
    let adam_t = field("adam_t")?;
    if config_digest(&model_json, &train_json) != digest {
        return Err(bad("config digest does not match the stored configuration".into()));
    }
    if vhash != vocab.hash() {
        return Err(GemError::Incompatible(format!(
            "checkpoint was trained with vocabulary {vhash}, given vocabulary is {}",
            vocab.hash()
        )));
    }
    let json_err = |e: serde_json::Error| bad(e.to_string());
    let model_cfg: ModelConfig = serde_json::from_str(&model_json).map_err(json_err)?;
    let train_cfg: TrainConfig = serde_json::from_str(&train_json).map_err(json_err)?;
    let state: TrainState = serde_json::from_str(&state_json).map_err(json_err)?;
    let history: Vec<EpochRecord> = serde_json::from_str(&history_json).map_err(json_err)?;
    let t: u64 = adam_t.parse().map_err(|_| bad(format!("bad adam_t {adam_t:?}")))?;

    let mut params = ParamStore::new();
    let mut best = ParamStore::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for line in lines {
        let (kind, rest) = line.split_once(' ').ok_or_else(|| bad(format!("bad line {line:?}")))?;
        let (name, tensor) = parse_tensor_line(rest, context)?;
        match kind {
            "param" => {
                params.add(name, tensor)?;
            }
            "best" => {
                best.add(name, tensor)?;
            }
            "adam_m" => m.push(tensor),
            "adam_v" => v.push(tensor),
            other => return Err(bad(format!("unknown record kind {other:?}"))),
        }
    }
    if m.len() != params.len() || v.len() != params.len() || (!best.is_empty() && best.len() != params.len()) {
        return Err(bad("tensor sections have inconsistent lengths".into()));
    }
    if model_cfg.vocab_size != vocab.len() {
        return Err(GemError::Incompatible(format!(
            "model expects {} tokens, vocabulary has {}",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    let model = GemModel::from_params(model_cfg, params)?;
    Ok(Trainer {
        model,
        config: train_cfg,
        state,
        history,
        adam: AdamState { m, v, t },
        best: (!best.is_empty()).then_some(best),
    })
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer, vocab: &Vocabulary) -> Result<()> {
    let text = checkpoint_to_string(trainer, vocab)?;
    std::fs::write(path, text).map_err(|e| GemError::io(path, e))
}

pub fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<Trainer> {
    let text = std::fs::read_to_string(path).map_err(|e| GemError::io(path, e))?;
    checkpoint_from_str(&text, vocab, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Weak gender labeler

/// Gender classifier over the gender view, trained on channel-labelled items.
#[derive(Clone, Debug)]
pub struct WeakLabeler {
    pub model: GemModel,
    pub vocab: Vocabulary,
    lexicons: ViewLexicons,
}

impl WeakLabeler {
    pub fn new(model: GemModel, vocab: Vocabulary, lexicons: ViewLexicons) -> Result<Self> {
        if model.variant() != Variant::StlGender {
            return Err(GemError::Config(format!(
                "weak labeler needs a stl_gender model, got {}",
                model.variant()
            )));
        }
        Ok(WeakLabeler { model, vocab, lexicons })
    }
}

impl GenderClassifier for WeakLabeler {
    fn predict_genders(&self, texts: &[&str]) -> Result<Vec<Gender>> {
        let max_len = self.model.config.max_len;
        let examples: Vec<Example> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let v = self.lexicons.views(t);
                let s = self.vocab.encode(&v.symptom_view, max_len)?;
                let g = self.vocab.encode(&v.gender_view, max_len)?;
                Ok(Example {
                    id: i.to_string(),
                    kind: Kind::Post,
                    symptom: s,
                    gender: g,
                    symptom_label: None,
                    gender_label: None,
                })
            })
            .collect::<Result<_>>()?;
        let (_, gp) = predict_examples(&self.model, &examples, 64)?;
        Ok(gp
            .unwrap_or_default()
            .into_iter()
            .map(|i| Gender::from_index(i).expect("gender head has two classes"))
            .collect())
    }
}

/// Trains a weak labeler on gender-labelled `items`, holding out a tenth of them
/// for best-epoch selection.
pub fn train_weak_labeler(
    items: &[LabeledItem],
    lexicons: &ViewLexicons,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    min_freq: usize,
) -> Result<WeakLabeler> {
    if let Some(it) = items.iter().find(|it| it.gender.is_none()) {
        return Err(GemError::MissingLabels(format!("item {} has no gender label", it.item.id)));
    }
    let vocab = build_vocab(items, lexicons, InputMode::Masked, min_freq)?;
    let mut examples = encode_examples(items, lexicons, &vocab, InputMode::Masked, model_cfg.max_len)?;
    examples.shuffle(&mut rng_for(cfg.seed, STREAM_SHUFFLE, u64::MAX));
    let n_dev = examples.len() / 10;
    let dev = examples.split_off(examples.len() - n_dev);
    let mut mcfg = model_cfg.clone();
    mcfg.variant = Variant::StlGender;
    mcfg.vocab_size = vocab.len();
    let model = GemModel::new(mcfg, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg);
    trainer.train(&examples, &dev, cfg, |_| {})?;
    WeakLabeler::new(trainer.into_best_model()?, vocab, lexicons.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, GeneratorSpec};
    use crate::text::{CLS_ID, PAD_ID, SEP_ID};

    fn tiny_model_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d: 8,
            n_heads: 2,
            d_ffn: 16,
            vocab_size: vocab,
            max_len: 24,
            dropout_p: 0.1,
            ..ModelConfig::default()
        }
    }

    fn data(n: usize) -> (Vocabulary, Vec<Example>) {
        let items = generate_synthetic_corpus(&GeneratorSpec {
            n_items: n,
            seed: 5,
            ..GeneratorSpec::default()
        })
        .unwrap();
        let lex = ViewLexicons::bundled();
        let vocab = build_vocab(&items, &lex, InputMode::Masked, 1).unwrap();
        let ex = encode_examples(&items, &lex, &vocab, InputMode::Masked, 24).unwrap();
        (vocab, ex)
    }

    #[test]
    fn stream_seeds_differ() {
        assert_ne!(stream_seed(1, 2, 3), stream_seed(1, 2, 4));
        assert_ne!(stream_seed(1, 2, 3), stream_seed(1, 3, 3));
        assert_eq!(stream_seed(7, 1, 9), stream_seed(7, 1, 9));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![1.0, -2.0, 0.5])).unwrap();
        store.get_mut(id).grad = Tensor::from_vec(vec![0.3, -4.0, 0.0]);
        let mut st = AdamState::new(&store);
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        adam_step(&mut store, &mut st, &cfg).unwrap();
        let w = store.get(id).value.data();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 1.99).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("enc.w", Tensor::from_vec(vec![1.0])).unwrap();
        store.get_mut(id).grad = Tensor::from_vec(vec![f64::NAN]);
        let mut st = AdamState::new(&store);
        let err = adam_step(&mut store, &mut st, &AdamConfig::from(&TrainConfig::default())).unwrap_err();
        assert!(err.to_string().contains("enc.w"), "{err}");
    }

    fn mlm_batch(vocab: &Vocabulary) -> Batch {
        let (_, ex) = data(40);
        let seqs: Vec<TokenSequence> = ex.iter().map(|e| e.symptom.clone()).collect();
        let b = make_batch(&seqs, None).unwrap();
        assert!(b.ids.iter().all(|&i| i < vocab.len()));
        b
    }

    #[test]
    fn mlm_never_targets_reserved_tokens_and_is_deterministic() {
        let (vocab, _) = data(40);
        let b = mlm_batch(&vocab);
        let c = mlm_corrupt(&b, &vocab, 0.5, [0.8, 0.1, 0.1], 3, 7).unwrap();
        for (&p, &t) in c.positions.iter().zip(&c.targets) {
            assert!(b.pad_mask[p]);
            assert!(!vocab.is_reserved(t));
            assert_ne!(t, CLS_ID);
            assert_ne!(t, SEP_ID);
            assert_ne!(t, PAD_ID);
        }
        assert_eq!(c, mlm_corrupt(&b, &vocab, 0.5, [0.8, 0.1, 0.1], 3, 7).unwrap());
        assert_ne!(c.positions, mlm_corrupt(&b, &vocab, 0.5, [0.8, 0.1, 0.1], 3, 8).unwrap().positions);
        assert!(mlm_corrupt(&b, &vocab, 1.5, [0.8, 0.1, 0.1], 3, 7).is_err());
        assert!(mlm_corrupt(&b, &vocab, -0.1, [0.8, 0.1, 0.1], 3, 7).is_err());
    }

    #[test]
    fn mlm_rates_are_close_to_nominal() {
        let (vocab, ex) = data(400);
        let seqs: Vec<TokenSequence> = ex.iter().map(|e| e.symptom.clone()).collect();
        let b = make_batch(&seqs, None).unwrap();
        let eligible = b
            .ids
            .iter()
            .zip(&b.pad_mask)
            .filter(|(&i, &m)| m && !vocab.is_reserved(i))
            .count();
        let c = mlm_corrupt(&b, &vocab, 0.15, [0.8, 0.1, 0.1], 1, 0).unwrap();
        let n = c.targets.len() as f64;
        assert!((n / eligible as f64 - 0.15).abs() < 0.01);
        assert!((c.counts[0] as f64 / n - 0.8).abs() < 0.03);
        assert!((c.counts[1] as f64 / n - 0.1).abs() < 0.03);
        let masked = c.positions.iter().filter(|&&p| c.batch.ids[p] == MASK_ID).count();
        assert_eq!(masked, c.counts[0]);
    }

    #[test]
    fn pretraining_edge_cases() {
        let (vocab, ex) = data(40);
        let mut model = GemModel::new(tiny_model_cfg(vocab.len()), 1).unwrap();
        let before = model.params.clone();
        let zero = TrainConfig {
            epochs: 0,
            batch_size: 8,
            ..TrainConfig::pretrain_default()
        };
        mlm_pretrain(&mut model, &ex, &vocab, &zero).unwrap();
        assert_eq!(model.params, before);
        let big = TrainConfig {
            batch_size: 64,
            ..TrainConfig::pretrain_default()
        };
        assert!(mlm_pretrain(&mut model, &ex, &vocab, &big).is_err());
        let one = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::pretrain_default()
        };
        let r = mlm_pretrain(&mut model, &ex, &vocab, &one).unwrap();
        assert_eq!((r.s_encoder.len(), r.g_encoder.len()), (1, 1));
        assert_ne!(model.params, before);
        assert!(model.params.iter().all(|p| !p.name.contains(".mlm.")));
    }

    #[test]
    fn missing_labels_are_rejected() {
        let (vocab, mut ex) = data(40);
        ex[3].gender_label = None;
        let model = GemModel::new(tiny_model_cfg(vocab.len()), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let err = Trainer::new(model, &cfg).train(&ex, &[], &cfg, |_| {}).unwrap_err();
        assert!(matches!(err, GemError::MissingLabels(_)), "{err}");
        // a symptom-only model does not need gender labels
        let mut c = tiny_model_cfg(vocab.len());
        c.variant = Variant::StlSymptom;
        let model = GemModel::new(c, 1).unwrap();
        Trainer::new(model, &cfg).train(&ex, &[], &cfg, |_| {}).unwrap();
    }

    #[test]
    fn nan_loss_aborts_with_step() {
        let (vocab, ex) = data(40);
        let mut model = GemModel::new(tiny_model_cfg(vocab.len()), 1).unwrap();
        let id = model.params.id("symptom_head.b").unwrap();
        model.params.get_mut(id).value.data_mut()[0] = f64::INFINITY;
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let err = Trainer::new(model, &cfg).train(&ex, &[], &cfg, |_| {}).unwrap_err();
        assert!(matches!(err, GemError::NanLoss { step: 0 }), "{err}");
    }

    #[test]
    fn records_and_best_selection() {
        let (vocab, ex) = data(60);
        let (train, dev) = ex.split_at(48);
        let model = GemModel::new(tiny_model_cfg(vocab.len()), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut records = Vec::new();
        let mut t = Trainer::new(model, &cfg);
        t.train(train, dev, &cfg, |r| records.push(r.clone())).unwrap();
        assert_eq!(records.len(), 6);
        assert_eq!(records[1].split, "dev");
        let best = records.iter().filter(|r| r.split == "dev").map(EpochRecord::score).fold(f64::MIN, f64::max);
        assert_eq!(t.state.best_dev_score, Some(best));
        assert_eq!(t.state.step, 9);
        let json = serde_json::to_string(&records[0]).unwrap();
        for key in ["\"epoch\"", "\"split\"", "\"loss\"", "\"precision\"", "\"recall\"", "\"f1\""] {
            assert!(json.contains(key), "{json}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let (vocab, ex) = data(40);
        let (train, dev) = ex.split_at(32);
        let model = GemModel::new(tiny_model_cfg(vocab.len()), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, &cfg);
        t.train(train, dev, &cfg, |_| {}).unwrap();
        let text = checkpoint_to_string(&t, &vocab).unwrap();
        let back = checkpoint_from_str(&text, &vocab, "mem").unwrap();
        assert_eq!(back.model.params, t.model.params);
        assert_eq!(back.adam, t.adam);
        assert_eq!(back.state, t.state);
        assert_eq!(checkpoint_to_string(&back, &vocab).unwrap(), text);

        let other = Vocabulary::from_tokens(vocab.tokens()[..vocab.len() - 1].to_vec()).unwrap();
        assert!(matches!(
            checkpoint_from_str(&text, &other, "mem"),
            Err(GemError::Incompatible(_))
        ));
        let corrupted = text.replacen("param s_encoder.tok_emb", "param s_encoder.tok_emx", 1);
        assert!(matches!(
            checkpoint_from_str(&corrupted, &vocab, "mem"),
            Err(GemError::Parse { .. })
        ));
        assert!(matches!(
            checkpoint_from_str(&text[..text.len() / 2], &vocab, "mem"),
            Err(GemError::Parse { .. })
        ));
    }
}
