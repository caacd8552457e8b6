//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! when any fails. Criterion numbers given as arguments select a subset:
//! `cargo test -p gem-cli --test acceptance -- 2 8 9`.

use std::error::Error;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use gem_core::corpus::{
    generate_gender_channel_corpus, generate_synthetic_corpus, quality_filter, quality_filter_by_kind, split,
    CorpusSplit, GenderClassifier, GeneratorSpec, Kind, LabeledItem, QualityPolicy, RawItem, StratifyBy,
};
use gem_core::eval::{
    compute_metrics, gender_class_names, median, run_ablation, wilcoxon_signed_rank, AblationConfig, AblationRow,
    Alternative, TestMethod,
};
use gem_core::knowledge::{
    find_matches, is_word_bounded, mask_gender, mask_symptoms, parse_lexicon, Category, Lexicon, Span, ViewLexicons,
    SYMPTOM_CONCEPTS,
};
use gem_core::model::{encoder_forward, fuse, FusionValueSource, GemModel, ModelConfig};
use gem_core::numerics::{finite_diff_check, Tensor};
use gem_core::text::{PairedBatch, TokenSequence, CLS_ID, SEP_ID};
use gem_core::train::{
    build_vocab, checkpoint_to_string, encode_examples, evaluate, load_checkpoint, mlm_pretrain, save_checkpoint,
    train_weak_labeler, Example, InputMode, TrainConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, Box<dyn Error>>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+).into());
        }
    };
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

const fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

const CRITERIA: [Criterion; 12] = [
    Criterion { id: 1, name: "gradient correctness", limit: secs(60), run: c1_gradients },
    Criterion { id: 2, name: "fusion semantics", limit: None, run: c2_fusion },
    Criterion { id: 3, name: "masking fidelity", limit: None, run: c3_masking },
    Criterion { id: 4, name: "filter thresholds", limit: None, run: c4_filter },
    Criterion { id: 5, name: "overfit capacity", limit: secs(120), run: c5_overfit },
    Criterion { id: 6, name: "synthetic multi-task benchmark", limit: secs(600), run: c6_benchmark },
    Criterion { id: 7, name: "task-adaptive pretraining effect", limit: None, run: c7_pretraining },
    Criterion { id: 8, name: "metrics oracle", limit: None, run: c8_metrics },
    Criterion { id: 9, name: "wilcoxon oracle", limit: None, run: c9_wilcoxon },
    Criterion { id: 10, name: "weak-labeler pipeline", limit: secs(180), run: c10_weak_labeler },
    Criterion { id: 11, name: "determinism and checkpointing", limit: None, run: c11_determinism },
    Criterion { id: 12, name: "end-to-end quickstart", limit: secs(900), run: c12_quickstart },
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let t0 = Instant::now();
        let outcome = (c.run)();
        let elapsed = t0.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(d), Some(limit)) if elapsed > limit => Err(format!("{d}; over the {}s budget", limit.as_secs())),
            (Ok(d), _) => Ok(d),
            (Err(e), _) => Err(e.to_string()),
        };
        ran += 1;
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(e) => ("FAIL", e.as_str()),
        };
        failed += usize::from(outcome.is_err());
        println!("criterion {:>2} {tag} {} ({:.1}s): {detail}", c.id, c.name, elapsed.as_secs_f64());
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------------------
// shared fixtures

fn seq(ids: &[usize]) -> TokenSequence {
    let mut v = vec![CLS_ID];
    v.extend_from_slice(ids);
    v.push(SEP_ID);
    TokenSequence { ids: v }
}

fn interaction_corpus(n: usize, seed: u64) -> Vec<LabeledItem> {
    generate_synthetic_corpus(&GeneratorSpec {
        n_items: n,
        interaction_mode: true,
        seed,
        ..GeneratorSpec::default()
    })
    .expect("valid generator spec")
}

/// 2,000 / 200 / 500 split of a 2,700-item interaction corpus.
fn benchmark_split(seed: u64) -> Result<CorpusSplit, Box<dyn Error>> {
    let items = interaction_corpus(2700, seed);
    Ok(split(&items, (2000.0 / 2700.0, 200.0 / 2700.0, 500.0 / 2700.0), seed, StratifyBy::Both)?)
}

struct Encoded {
    vocab: gem_core::text::Vocabulary,
    train: Vec<Example>,
    dev: Vec<Example>,
}

fn encode(train: &[LabeledItem], dev: &[LabeledItem]) -> Result<Encoded, Box<dyn Error>> {
    let lex = ViewLexicons::bundled();
    let vocab = build_vocab(train, &lex, InputMode::Masked, 2)?;
    let max_len = ModelConfig::desk().max_len;
    let train = encode_examples(train, &lex, &vocab, InputMode::Masked, max_len)?;
    let dev = encode_examples(dev, &lex, &vocab, InputMode::Masked, max_len)?;
    Ok(Encoded { vocab, train, dev })
}

fn desk_model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        ..ModelConfig::desk()
    }
}

// ---------------------------------------------------------------------------
// 1

fn c1_gradients() -> Outcome {
    let cfg = ModelConfig {
        n_layers: 1,
        d: 8,
        n_heads: 2,
        d_ffn: 16,
        vocab_size: 20,
        max_len: 8,
        dropout_p: 0.0,
        ..ModelConfig::default()
    };
    let model = GemModel::new(cfg, 9)?;
    let pb = PairedBatch::new(&[seq(&[5, 6, 7, 8]), seq(&[9, 10])], &[seq(&[11, 6, 12]), seq(&[13, 14, 15, 16])])?
        .with_labels(Some(vec![2, 0]), Some(vec![1, 0]));
    ensure!(pb.seq_len() == 6, "batch length {}", pb.seq_len());
    let mut store = model.params.clone();
    let report = finite_diff_check(&mut store, 1e-5, |p, g| {
        let v = model.forward_with(g, p, &pb)?;
        let ls = g.cross_entropy(v.symptom_logits.expect("symptom head"), pb.symptom_labels().expect("labels"))?;
        let lg = g.cross_entropy(v.gender_logits.expect("gender head"), pb.gender_labels().expect("labels"))?;
        g.add(ls, lg)
    })?;
    ensure!(
        report.entries.len() == model.params.len(),
        "checked {} of {} parameters",
        report.entries.len(),
        model.params.len()
    );
    let worst = report.max_rel_error();
    let name = report
        .entries
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map_or("", |e| e.name.as_str());
    ensure!(worst <= 1e-5, "max relative error {worst:.3e} at {name}");
    Ok(format!("{} parameters, max relative error {worst:.2e} ({name})", report.entries.len()))
}

// ---------------------------------------------------------------------------
// 2

/// Scaled dot-product attention written out element by element.
fn brute_fuse(e_s: &[Vec<f64>], e_g: &[Vec<f64>], mask: &[bool]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = e_g[0].len() as f64;
    let mut weights = Vec::new();
    let mut h = Vec::new();
    for q in e_g {
        let scores: Vec<f64> = e_s.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
        let max = scores.iter().zip(mask).filter(|(_, m)| **m).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().zip(mask).map(|(s, m)| if *m { (s - max).exp() } else { 0.0 }).collect();
        let z: f64 = exps.iter().sum();
        let w: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let row: Vec<f64> = (0..q.len())
            .map(|j| q[j] + w.iter().zip(e_s).map(|(wi, k)| wi * k[j]).sum::<f64>())
            .collect();
        weights.push(w);
        h.push(row);
    }
    (weights, h)
}

fn c2_fusion() -> Outcome {
    // worked example: query (1, 0) against keys (1, 0) and (0, 1)
    let e_g = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0])?;
    let e_s = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    let f = fuse(&e_s, &e_g, &[true, true], FusionValueSource::Symptom)?;
    let (w, h) = brute_fuse(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0]], &[true, true]);
    for (got, want) in f.attn_weights.data().iter().zip(&w[0]) {
        ensure!((got - want).abs() <= 1e-6, "worked example weight {got} vs {want}");
    }
    for (got, want) in f.h_g.data().iter().zip(&h[0]) {
        ensure!((got - want).abs() <= 1e-6, "worked example h_g {got} vs {want}");
    }
    let w0 = f.attn_weights.data()[0];

    // random d=2 cases with padded keys
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let ts = rng.random_range(1..6);
        let tg = rng.random_range(1..4);
        let s: Vec<Vec<f64>> = (0..ts).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let g: Vec<Vec<f64>> = (0..tg).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut mask: Vec<bool> = (0..ts).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;
        let f = fuse(
            &Tensor::new(vec![1, ts, 2], s.concat())?,
            &Tensor::new(vec![1, tg, 2], g.concat())?,
            &mask,
            FusionValueSource::Symptom,
        )?;
        let (w, h) = brute_fuse(&s, &g, &mask);
        for (got, want) in f.attn_weights.data().iter().zip(w.concat()) {
            ensure!((got - want).abs() <= 1e-6, "weight {got} vs {want}");
        }
        for (got, want) in f.h_g.data().iter().zip(h.concat()) {
            ensure!((got - want).abs() <= 1e-6, "h_g {got} vs {want}");
        }
    }

    // inside a model: row sums, pad keys and the residual
    let cfg = ModelConfig {
        vocab_size: 40,
        dropout_p: 0.0,
        ..ModelConfig::desk()
    };
    let model = GemModel::new(cfg.clone(), 4)?;
    let pb = PairedBatch::new(
        &[seq(&[5, 6, 7, 8, 9, 10]), seq(&[11]), seq(&[12, 13, 14])],
        &[seq(&[15, 16]), seq(&[17, 18, 19, 20, 21]), seq(&[22])],
    )?;
    let fusion = model.predict(&pb)?.fusion.ok_or("gem variant returned no fusion")?;
    let ts = pb.symptom.seq_len;
    let tg = pb.gender.seq_len;
    let mut worst_sum: f64 = 0.0;
    for (r, row) in fusion.attn_weights.data().chunks(ts).enumerate() {
        let mask = pb.symptom.mask_row(r / tg);
        worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        for (w, real) in row.iter().zip(mask) {
            ensure!(*real || *w == 0.0, "pad key weight {w}");
        }
    }
    ensure!(worst_sum <= 1e-12, "attention row sum off by {worst_sum:e}");
    let g_enc = model.g_encoder().ok_or("no gender encoder")?;
    let e_g = encoder_forward(&model.params, g_enc, &cfg, &pb.gender)?.e;
    for ((h, a), e) in fusion.h_g.data().iter().zip(fusion.a.data()).zip(e_g.data()) {
        ensure!(h.to_bits() == (e + a).to_bits(), "h_g {h} is not e_g {e} + a {a}");
        ensure!((h - a - e).abs() <= f64::EPSILON * h.abs(), "h_g - a differs from e_g beyond rounding");
    }
    Ok(format!(
        "worked example weight {w0:.6}, 200 random cases match, max row-sum error {worst_sum:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 3

fn brute_spans(text: &str, surfaces: &[(String, String)]) -> Vec<Span> {
    let lower = text.to_ascii_lowercase();
    let mut cands = Vec::new();
    for (s, c) in surfaces {
        let mut from = 0;
        while let Some(pos) = lower[from..].find(s.as_str()) {
            let start = from + pos;
            let end = start + s.len();
            if is_word_bounded(text, start, end) {
                cands.push((start, end, c.clone()));
            }
            from = start + 1;
        }
    }
    cands.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut out: Vec<Span> = Vec::new();
    for (start, end, concept) in cands {
        if out.last().is_none_or(|l| start >= l.end) {
            out.push(Span { start, end, concept });
        }
    }
    out
}

fn c3_masking() -> Outcome {
    let g = Lexicon::bundled(Category::Gender);
    let s = Lexicon::bundled(Category::Symptom);
    let literal = [
        (mask_gender("bachelorette", &g), "<woman>"),
        (mask_gender("bachelor", &g), "<man>"),
        (mask_symptoms("I still get flashbacks", &s), "I still get <ptsd>"),
        (mask_symptoms("so much constant worry", &s), "so much <anxiety>"),
    ];
    for (got, want) in &literal {
        ensure!(got == want, "masked to {got:?}, expected {want:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let words = ["ab", "abc", "b", "ca", "panic", "attack", "a", "bc"];
    let seps = [" ", " ", " ", ", ", "-", ""];
    let cases = 600;
    for _ in 0..cases {
        let mut surfaces: Vec<(String, String)> = Vec::new();
        for _ in 0..rng.random_range(1..6) {
            let k = rng.random_range(1..4);
            let phrase: Vec<&str> = (0..k).map(|_| words[rng.random_range(0..words.len())]).collect();
            let phrase = phrase.join(" ");
            if surfaces.iter().all(|(x, _)| *x != phrase) {
                surfaces.push((phrase, SYMPTOM_CONCEPTS[rng.random_range(0..4)].to_string()));
            }
        }
        let mut text = String::new();
        for i in 0..rng.random_range(0..12) {
            if i > 0 {
                text.push_str(seps[rng.random_range(0..seps.len())]);
            }
            let w = words[rng.random_range(0..words.len())];
            text.push_str(&if rng.random_bool(0.2) { w.to_uppercase() } else { w.to_string() });
        }
        let tsv: String = surfaces.iter().map(|(s, c)| format!("{s}\t{c}\tsymptom\n")).collect();
        let lex = parse_lexicon(&tsv, "random", Category::Symptom)?;
        let got = find_matches(&text, &lex);
        let want = brute_spans(&text, &surfaces);
        ensure!(got == want, "text {text:?} with {surfaces:?}: {got:?} vs {want:?}");
    }

    let texts = interaction_corpus(1000, 21);
    for it in &texts {
        let ms = mask_symptoms(&it.item.text, &s);
        ensure!(mask_symptoms(&ms, &s) == ms, "symptom masking not idempotent on {:?}", it.item.id);
        let mg = mask_gender(&it.item.text, &g);
        ensure!(mask_gender(&mg, &g) == mg, "gender masking not idempotent on {:?}", it.item.id);
    }
    Ok(format!("{} literal examples, {cases} oracle cases, {} texts idempotent", literal.len(), texts.len()))
}

// ---------------------------------------------------------------------------
// 4

fn c4_filter() -> Outcome {
    let mut cells = 0;
    for kind in [Kind::Post, Kind::Comment] {
        for upvotes in [9u64, 10, 11] {
            for tokens in [49usize, 50, 51] {
                let item = RawItem {
                    id: format!("{upvotes}-{tokens}"),
                    author_id: "u1".into(),
                    kind,
                    source: "heart".into(),
                    text: vec!["beat"; tokens].join(" "),
                    upvotes,
                    created_at: 0,
                };
                let want = upvotes > 10 && tokens >= 50;
                let kept = quality_filter(std::slice::from_ref(&item), 10, 50).len() == 1;
                let by_kind = quality_filter_by_kind(std::slice::from_ref(&item), &QualityPolicy::default()).len() == 1;
                ensure!(kept == want && by_kind == want, "upvotes {upvotes}, tokens {tokens}: kept {kept}");
                cells += 1;
            }
        }
    }
    Ok(format!("{cells} grid cells retained exactly when upvotes > 10 and tokens >= 50"))
}

// ---------------------------------------------------------------------------
// 5

fn c5_overfit() -> Outcome {
    let items = generate_synthetic_corpus(&GeneratorSpec {
        n_items: 64,
        seed: 5,
        ..GeneratorSpec::default()
    })?;
    let data = encode(&items, &[])?;
    let model = GemModel::new(desk_model(data.vocab.len()), 5)?;
    let mut cfg = TrainConfig { seed: 5, ..TrainConfig::desk() };
    let mut trainer = Trainer::new(model, &cfg);
    for epoch in 1..=300 {
        cfg.epochs = epoch;
        trainer.train(&data.train, &[], &cfg, |_| {})?;
        let ev = evaluate(&trainer.model, &data.train, &cfg)?;
        let s = ev.symptom.map_or(0.0, |m| m.accuracy);
        let g = ev.gender.map_or(0.0, |m| m.accuracy);
        if s >= 0.99 && g >= 0.99 {
            return Ok(format!("train accuracy symptom {s:.3}, gender {g:.3} after {epoch} epochs"));
        }
    }
    Err("train accuracy stayed below 99% for 300 epochs".into())
}

// ---------------------------------------------------------------------------
// 6

fn c6_benchmark() -> Outcome {
    let sp = benchmark_split(2024)?;
    ensure!(
        (sp.train.len(), sp.dev.len(), sp.test.len()) == (2000, 200, 500),
        "split sizes {} / {} / {}",
        sp.train.len(),
        sp.dev.len(),
        sp.test.len()
    );
    let cfg = AblationConfig {
        model: ModelConfig::desk(),
        finetune: TrainConfig { epochs: 4, ..TrainConfig::desk() },
        pretrain: TrainConfig { epochs: 1, ..TrainConfig::pretrain_default() },
        min_freq: 2,
        rows: vec![AblationRow::Full, AblationRow::NoAttention, AblationRow::NoEntityMasking],
    };
    let seeds: Vec<u64> = (1..=5).collect();
    let report = run_ablation(&cfg, &sp, &ViewLexicons::bundled(), &seeds, |_| {})?;
    let f1 = |row: AblationRow| -> Result<f64, Box<dyn Error>> {
        let r = report.rows.iter().find(|r| r.row == row).ok_or("row missing")?;
        Ok(100.0 * r.median_f1.ok_or_else(|| format!("{} has no successful run", row.label()))?)
    };
    let (full, concat, raw) = (f1(AblationRow::Full)?, f1(AblationRow::NoAttention)?, f1(AblationRow::NoEntityMasking)?);
    let summary = format!("median macro-F1 full {full:.2}, -attention {concat:.2}, -entity_masking {raw:.2}");
    ensure!(full >= concat, "{summary}: full below -attention");
    ensure!(full - raw >= 2.0, "{summary}: gap to -entity_masking under 2 points");
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 7

fn c7_pretraining() -> Outcome {
    let sp = benchmark_split(11)?;
    let data = encode(&sp.train, &sp.dev)?;
    let (mut tapt, mut random) = (Vec::new(), Vec::new());
    for seed in 1..=5u64 {
        let cfg = TrainConfig { epochs: 1, seed, ..TrainConfig::desk() };
        for pretrain in [true, false] {
            let mut model = GemModel::new(desk_model(data.vocab.len()), seed)?;
            if pretrain {
                let pcfg = TrainConfig { epochs: 4, seed, ..TrainConfig::pretrain_default() };
                mlm_pretrain(&mut model, &data.train, &data.vocab, &pcfg)?;
            }
            let mut trainer = Trainer::new(model, &cfg);
            trainer.train(&data.train, &data.dev, &cfg, |_| {})?;
            let dev_loss = trainer.history.iter().find(|r| r.split == "dev").ok_or("no dev record")?.loss;
            if pretrain { &mut tapt } else { &mut random }.push(dev_loss);
        }
    }
    let (t, r) = (median(&tapt).ok_or("no runs")?, median(&random).ok_or("no runs")?);
    let summary = format!("median first-epoch dev loss pretrained {t:.4} vs random init {r:.4}");
    ensure!(t < r, "{summary}");
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 8

fn c8_metrics() -> Outcome {
    let names = |n: usize| (0..n).map(|i| format!("c{i}")).collect::<Vec<_>>();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    struct Case {
        pred: &'static [usize],
        gold: &'static [usize],
        classes: usize,
        f1: &'static [f64],
        macro_f1: f64,
        accuracy: f64,
    }
    let crafted = [
        Case { pred: &[0, 0, 1, 1, 0], gold: &[0, 0, 0, 1, 1], classes: 2, f1: &[2.0 / 3.0, 0.5], macro_f1: 7.0 / 12.0, accuracy: 0.6 },
        Case { pred: &[0, 2, 1, 0, 0, 1], gold: &[0, 1, 2, 0, 1, 2], classes: 3, f1: &[0.8, 0.0, 0.0], macro_f1: 0.8 / 3.0, accuracy: 1.0 / 3.0 },
        Case { pred: &[1, 1, 1, 1], gold: &[0, 1, 0, 1], classes: 2, f1: &[0.0, 2.0 / 3.0], macro_f1: 1.0 / 3.0, accuracy: 0.5 },
    ];
    for (i, c) in crafted.iter().enumerate() {
        let m = compute_metrics(c.pred, c.gold, &names(c.classes))?;
        for (got, want) in m.per_class.iter().zip(c.f1) {
            ensure!(close(got.f1, *want), "case {i}: {} f1 {} vs {want}", got.class, got.f1);
        }
        ensure!(close(m.macro_f1, c.macro_f1), "case {i}: macro f1 {} vs {}", m.macro_f1, c.macro_f1);
        ensure!(close(m.accuracy, c.accuracy), "case {i}: accuracy {} vs {}", m.accuracy, c.accuracy);
    }
    // all-man predictions on a balanced gender set
    let m = compute_metrics(&[0, 0, 0, 0], &[0, 1, 0, 1], &gender_class_names())?;
    ensure!(close(m.per_class[0].precision, 0.5) && close(m.per_class[0].recall, 1.0), "all-man case");
    ensure!(m.per_class[1].undefined && m.per_class[1].f1 == 0.0, "woman never predicted");

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let c = rng.random_range(2..=4);
        let n = rng.random_range(1..80);
        let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let m = compute_metrics(&pred, &gold, &names(c))?;
        let mut macro_f1 = 0.0;
        for k in 0..c {
            let count = |f: &dyn Fn(usize, usize) -> bool| pred.iter().zip(&gold).filter(|(p, g)| f(**p, **g)).count() as f64;
            let tp = count(&|p, g| p == k && g == k);
            let fp = count(&|p, g| p == k && g != k);
            let fn_ = count(&|p, g| p != k && g == k);
            let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
            let got = &m.per_class[k];
            ensure!(close(got.precision, prec) && close(got.recall, rec) && close(got.f1, f1), "class {k} differs from counting");
            macro_f1 += f1 / c as f64;
        }
        ensure!(close(m.macro_f1, macro_f1), "macro f1 {} vs {macro_f1}", m.macro_f1);
        let tp: u64 = (0..c).map(|k| m.confusion.counts[k][k]).sum();
        let micro_recall = tp as f64 / m.per_class.iter().map(|x| x.support).sum::<u64>() as f64;
        ensure!(close(micro_recall, m.accuracy), "micro recall {micro_recall} vs accuracy {}", m.accuracy);
    }
    Ok("3 crafted cases, 1000 random vectors, micro-recall = accuracy".into())
}

// ---------------------------------------------------------------------------
// 9

fn enumerate_p(x: &[f64], y: &[f64], alt: Alternative) -> f64 {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return 1.0;
    }
    let ranks: Vec<f64> = d
        .iter()
        .map(|v| {
            let below = d.iter().filter(|w| w.abs() < v.abs()).count() as f64;
            let tied = d.iter().filter(|w| w.abs() == v.abs()).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect();
    let obs: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let n = d.len();
    let (mut ge, mut le) = (0u64, 0u64);
    for signs in 0u32..(1 << n) {
        let w: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        ge += u64::from(w >= obs);
        le += u64::from(w <= obs);
    }
    let total = (1u64 << n) as f64;
    let (ge, le) = (ge as f64 / total, le as f64 / total);
    match alt {
        Alternative::Greater => ge,
        Alternative::Less => le,
        Alternative::TwoSided => (2.0 * ge.min(le)).min(1.0),
    }
}

fn c9_wilcoxon() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = 1 + case % 12;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
        for alt in [Alternative::TwoSided, Alternative::Less, Alternative::Greater] {
            let r = wilcoxon_signed_rank(&x, &y, alt)?;
            ensure!(r.method == TestMethod::Exact, "n={n} did not use the exact distribution");
            let want = enumerate_p(&x, &y, alt);
            worst = worst.max((r.p_value - want).abs());
            ensure!((r.p_value - want).abs() <= 1e-12, "case {case} {alt:?}: p {} vs {want}", r.p_value);
        }
    }
    let same = [0.71, 0.74, 0.69, 0.8];
    for alt in [Alternative::TwoSided, Alternative::Less, Alternative::Greater] {
        let p = wilcoxon_signed_rank(&same, &same, alt)?.p_value;
        ensure!(p == 1.0, "x = y gives p {p}");
    }
    let p = wilcoxon_signed_rank(&[0.9, 0.8, 0.7], &[0.5, 0.6, 0.4], Alternative::Greater)?.p_value;
    ensure!(p == 0.125, "n=3 one-sided p {p}");
    Ok(format!("100 samples match enumeration (max diff {worst:.1e}), x=y gives 1, n=3 gives 0.125"))
}

// ---------------------------------------------------------------------------
// 10

fn c10_weak_labeler() -> Outcome {
    let items = generate_gender_channel_corpus(&GeneratorSpec {
        n_items: 2500,
        cue_density: 0.9,
        seed: 3,
        ..GeneratorSpec::default()
    })?;
    let (train, test) = items.split_at(2000);
    let cfg = TrainConfig { epochs: 4, seed: 1, ..TrainConfig::desk() };
    let labeler = train_weak_labeler(train, &ViewLexicons::bundled(), &ModelConfig::desk(), &cfg, 2)?;
    let texts: Vec<&str> = test.iter().map(|i| i.item.text.as_str()).collect();
    let pred: Vec<usize> = labeler.predict_genders(&texts)?.iter().map(|g| g.index()).collect();
    let gold: Vec<usize> = test
        .iter()
        .map(|i| i.gender.map(|g| g.index()).ok_or("unlabelled channel item"))
        .collect::<Result<_, _>>()?;
    let m = compute_metrics(&pred, &gold, &gender_class_names())?;
    let summary = format!("held-out macro-F1 {:.4} on {} items", m.macro_f1, test.len());
    ensure!(m.macro_f1 >= 0.85, "{summary}");
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 11

fn c11_determinism() -> Outcome {
    let items = interaction_corpus(288, 13);
    let data = encode(&items[..256], &items[256..])?;
    let run = |epochs: usize, from: Option<Trainer>| -> Result<Trainer, Box<dyn Error>> {
        let cfg = TrainConfig { epochs, seed: 13, ..TrainConfig::desk() };
        let mut t = match from {
            Some(t) => t,
            None => Trainer::new(GemModel::new(desk_model(data.vocab.len()), 13)?, &cfg),
        };
        t.train(&data.train, &data.dev, &cfg, |_| {})?;
        Ok(t)
    };
    let a = checkpoint_to_string(&run(4, None)?, &data.vocab)?;
    let b = checkpoint_to_string(&run(4, None)?, &data.vocab)?;
    ensure!(a == b, "two runs with the same seed differ");

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("half.ckpt");
    let half = run(2, None)?;
    save_checkpoint(&path, &half, &data.vocab)?;
    let loaded = load_checkpoint(&path, &data.vocab)?;
    ensure!(
        checkpoint_to_string(&loaded, &data.vocab)? == checkpoint_to_string(&half, &data.vocab)?,
        "save/load round trip changed the checkpoint"
    );
    ensure!(loaded.model.params == half.model.params, "reloaded parameters differ");
    let resumed = checkpoint_to_string(&run(4, Some(loaded))?, &data.vocab)?;
    ensure!(resumed == a, "train-2 + resume-2 differs from train-4");
    Ok(format!("identical checkpoints ({} bytes), resume and round trip bit-exact", a.len()))
}

// ---------------------------------------------------------------------------
// 12

fn c12_quickstart() -> Outcome {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let work = tempfile::tempdir()?;
    let out = Command::new("bash")
        .arg(root.join("scripts/quickstart.sh"))
        .current_dir(&root)
        .env("GEM", env!("CARGO_BIN_EXE_gem"))
        .env("WORK", work.path())
        .output()?;
    if !out.status.success() {
        let err = String::from_utf8_lossy(&out.stderr);
        let tail: Vec<&str> = err.lines().rev().take(5).collect();
        return Err(format!("exit {:?}: {}", out.status.code(), tail.into_iter().rev().collect::<Vec<_>>().join(" | ")).into());
    }
    for f in ["eval.txt", "model/model.ckpt", "ablation/ablation.txt", "ablation/per_seed_f1.tsv"] {
        ensure!(work.path().join(f).exists(), "{f} was not written");
    }
    Ok("generate, filter, mask, split, pretrain, train, eval, ablate and stats exited 0".into())
}
