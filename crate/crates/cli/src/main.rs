mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gem_core::corpus::{
    self, anonymize, corpus_counts, filter_cvd, generate_gender_channel_corpus, generate_synthetic_corpus,
    quality_filter_by_kind, weak_label_gender, Gender, LabeledItem, QualityPolicy, StratifyBy, Symptom,
};
use gem_core::eval::{
    self, gender_presence_similarity, render_ablation, render_classwise, run_ablation, wilcoxon_signed_rank,
    AblationConfig, AblationReport, AblationRow, Alternative, OutputFormat, SignificanceReport, SimilarityReport,
};
use gem_core::knowledge::ViewLexicons;
use gem_core::model::{GemModel, Variant, G_ENCODER, S_ENCODER};
use gem_core::text::Vocabulary;
use gem_core::train::{
    build_vocab, encode_examples, load_checkpoint, mlm_pretrain, save_checkpoint, train_weak_labeler, InputMode,
    Trainer,
};
use serde::Serialize;

use config::{Preset, RunConfig};

const VIEWS_HEADER: &str = r#"{"format":"gem-views","version":1}"#;
const PRETRAIN_LOG_HEADER: &str = r#"{"format":"gem-pretrain-log","version":1}"#;
const METRICS_HEADER: &str = r#"{"format":"gem-metrics","version":1}"#;
const PER_SEED_HEADER: &str = "#gem-ablation-f1 v1";

#[derive(Parser)]
#[command(name = "gem", version, about = "Bi-encoder symptom and gender classification pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// TOML run configuration overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: Preset,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report format: aligned table or newline-delimited JSON records.
    #[arg(long, global = true, default_value = "table")]
    format: OutputFormat,
    /// Output file or directory (depends on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, filter, split or weakly label corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Write the symptom and gender views of every item.
    Mask(MaskArgs),
    /// Task-adaptive MLM pretraining of both encoders.
    Pretrain(PretrainArgs),
    /// Fine-tune a model variant.
    Train(TrainArgs),
    /// Class-wise report of a checkpoint on a test corpus.
    Eval(EvalArgs),
    /// Run the ablation protocol over several seeds.
    Ablate(AblateArgs),
    /// Significance tests.
    #[command(subcommand)]
    Stats(StatsCmd),
}

#[derive(Subcommand)]
enum CorpusCmd {
    Generate(GenerateArgs),
    Filter(FilterArgs),
    Split(SplitArgs),
    /// Train a gender classifier on channel-labelled items and label the rest.
    WeakLabel(WeakLabelArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of items (overrides the config).
    #[arg(long)]
    n: Option<usize>,
    /// Plant two symptom cues per item and pick the label by gender.
    #[arg(long)]
    interaction: bool,
    #[arg(long)]
    cue_density: Option<f64>,
    /// Generate gender-channel items (gender labels only).
    #[arg(long)]
    gender_channel: bool,
}

#[derive(Args)]
struct FilterArgs {
    input: PathBuf,
    /// CVD lexicon (defaults to the bundled one).
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    min_upvotes: Option<u64>,
    #[arg(long)]
    min_tokens: Option<usize>,
    #[arg(long)]
    no_anonymize: bool,
}

#[derive(Args)]
struct SplitArgs {
    input: PathBuf,
    /// Train, dev and test percentages.
    #[arg(long, default_value = "75,5,20")]
    ratios: String,
    #[arg(long, default_value = "both")]
    stratify: StratifyBy,
}

#[derive(Args)]
struct WeakLabelArgs {
    input: PathBuf,
    /// Gender-labelled training items.
    #[arg(long)]
    channel: PathBuf,
}

#[derive(Args)]
struct MaskArgs {
    input: PathBuf,
    #[arg(long)]
    symptom_lexicon: Option<PathBuf>,
    #[arg(long)]
    gender_lexicon: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// Feed raw text instead of the masked views.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "gem")]
    variant: Variant,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Pretrained checkpoint whose encoders initialise the model.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Vocabulary file; built from the training items when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Continue a checkpoint until the configured number of epochs.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Directory holding train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long)]
    split_dir: PathBuf,
    /// Number of seeds, or an explicit comma-separated list.
    #[arg(long, default_value = "5")]
    seeds: String,
    /// Subset of rows, comma separated (full,-attention,-entity_masking,-task_adaptation).
    #[arg(long, allow_hyphen_values = true)]
    rows: Option<String>,
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Wilcoxon signed-rank test on two numeric columns of a table.
    Wilcoxon(WilcoxonArgs),
    /// Centroid similarity of items with and without gender cues.
    Similarity(SimilarityArgs),
}

#[derive(Args)]
struct WilcoxonArgs {
    /// Whitespace- or comma-separated table with a header row.
    #[arg(long)]
    input: PathBuf,
    /// The two columns to compare, `x,y` (defaults to the first two numeric ones).
    #[arg(long, allow_hyphen_values = true)]
    columns: Option<String>,
    #[arg(long, default_value = "two_sided")]
    alternative: Alternative,
}

#[derive(Args)]
struct SimilarityArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    items: PathBuf,
    #[arg(long, default_value = "two_sided")]
    alternative: Alternative,
}

struct Ctx {
    cfg: RunConfig,
    format: OutputFormat,
    out: Option<PathBuf>,
}

impl Ctx {
    fn out_file(&self, what: &str) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| anyhow!("--out <file> is required for {what}"))
    }

    fn out_dir(&self, what: &str) -> Result<&Path> {
        let d = self.out.as_deref().ok_or_else(|| anyhow!("--out <dir> is required for {what}"))?;
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    /// Prints a report, or writes it when `--out` names a report file.
    fn emit_report(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(p) => write(p, text),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let format = cli.global.format;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            match format {
                OutputFormat::Records => {
                    eprintln!("{}", serde_json::json!({ "error": chain[0], "context": &chain[1..] }))
                }
                OutputFormat::Table => eprintln!("error: {}", chain.join(": ")),
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.global.preset, cli.global.config.as_deref())?;
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    cfg.propagate_seed();
    let ctx = Ctx {
        cfg,
        format: cli.global.format,
        out: cli.global.out,
    };
    match cli.command {
        Command::Corpus(CorpusCmd::Generate(a)) => cmd_generate(&ctx, a),
        Command::Corpus(CorpusCmd::Filter(a)) => cmd_filter(&ctx, a),
        Command::Corpus(CorpusCmd::Split(a)) => cmd_split(&ctx, a),
        Command::Corpus(CorpusCmd::WeakLabel(a)) => cmd_weak_label(&ctx, a),
        Command::Mask(a) => cmd_mask(&ctx, a),
        Command::Pretrain(a) => cmd_pretrain(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Ablate(a) => cmd_ablate(&ctx, a),
        Command::Stats(StatsCmd::Wilcoxon(a)) => cmd_wilcoxon(&ctx, a),
        Command::Stats(StatsCmd::Similarity(a)) => cmd_similarity(&ctx, a),
    }
}

fn load_items(path: &Path) -> Result<Vec<LabeledItem>> {
    Ok(corpus::load_corpus(path)?)
}

/// Per-class post and comment counts.
fn counts_report(items: &[LabeledItem], format: OutputFormat) -> String {
    let counts = corpus_counts(items);
    let order: Vec<String> = Symptom::ALL
        .iter()
        .map(|s| s.display_name().to_string())
        .chain(Gender::ALL.iter().map(|g| g.name().to_string()))
        .chain(counts.rows.keys().cloned())
        .collect();
    let mut seen = std::collections::BTreeSet::new();
    let rows: Vec<(&String, &(usize, usize))> = order
        .iter()
        .filter(|k| seen.insert(k.as_str()))
        .filter_map(|k| counts.rows.get_key_value(k))
        .collect();
    let mut out = String::new();
    match format {
        OutputFormat::Table => {
            let _ = writeln!(out, "{:<12} {:>7} {:>9}", "class", "posts", "comments");
            for (class, (p, c)) in &rows {
                let _ = writeln!(out, "{class:<12} {p:>7} {c:>9}");
            }
        }
        OutputFormat::Records => {
            for (class, (p, c)) in &rows {
                let _ = writeln!(out, "{}", serde_json::json!({"class": class, "posts": p, "comments": c}));
            }
        }
    }
    out
}

fn cmd_generate(ctx: &Ctx, a: GenerateArgs) -> Result<()> {
    let mut spec = ctx.cfg.generator.clone();
    if let Some(n) = a.n {
        spec.n_items = n;
    }
    if let Some(d) = a.cue_density {
        spec.cue_density = d;
    }
    spec.interaction_mode |= a.interaction;
    let items = if a.gender_channel {
        generate_gender_channel_corpus(&spec)?
    } else {
        generate_synthetic_corpus(&spec)?
    };
    let out = ctx.out_file("corpus generate")?;
    corpus::save_corpus(out, &items)?;
    print!("{}", counts_report(&items, ctx.format));
    Ok(())
}

fn cmd_filter(ctx: &Ctx, a: FilterArgs) -> Result<()> {
    let items = load_items(&a.input)?;
    let cvd = match &a.lexicon {
        Some(p) => gem_core::knowledge::load_lexicon(p, gem_core::knowledge::Category::Cvd)?,
        None => ctx.cfg.lexicons.cvd()?,
    };
    let relevant = filter_cvd(&items, &cvd)?;
    let mut policy: QualityPolicy = ctx.cfg.data.quality;
    for t in [&mut policy.post, &mut policy.comment] {
        if let Some(u) = a.min_upvotes {
            t.min_upvotes = u;
        }
        if let Some(m) = a.min_tokens {
            t.min_tokens = m;
        }
    }
    let mut kept = quality_filter_by_kind(&relevant, &policy);
    if ctx.cfg.data.anonymize && !a.no_anonymize {
        for it in &mut kept {
            it.item.text = anonymize(&it.item.text);
        }
    }
    corpus::save_corpus(ctx.out_file("corpus filter")?, &kept)?;
    eprintln!("{} items in, {} CVD-relevant, {} kept", items.len(), relevant.len(), kept.len());
    print!("{}", counts_report(&kept, ctx.format));
    Ok(())
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64)> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().with_context(|| format!("bad ratio {x:?}")))
        .collect::<Result<_>>()?;
    let [a, b, c] = v[..] else { bail!("--ratios needs three numbers, got {s:?}") };
    let total = a + b + c;
    if total <= 0.0 {
        bail!("--ratios must have a positive sum");
    }
    Ok((a / total, b / total, c / total))
}

fn cmd_split(ctx: &Ctx, a: SplitArgs) -> Result<()> {
    let items = load_items(&a.input)?;
    let sp = corpus::split(&items, parse_ratios(&a.ratios)?, ctx.cfg.seed, a.stratify)?;
    let dir = ctx.out_dir("corpus split")?;
    let mut report = String::new();
    for (name, part) in [("train", &sp.train), ("dev", &sp.dev), ("test", &sp.test)] {
        corpus::save_corpus(&dir.join(format!("{name}.jsonl")), part)?;
        match ctx.format {
            OutputFormat::Table => {
                let _ = writeln!(report, "{name:<6} {:>6}", part.len());
            }
            OutputFormat::Records => {
                let _ = writeln!(report, "{}", serde_json::json!({"split": name, "items": part.len()}));
            }
        }
    }
    print!("{report}");
    Ok(())
}

fn cmd_weak_label(ctx: &Ctx, a: WeakLabelArgs) -> Result<()> {
    let items = load_items(&a.input)?;
    let channel = load_items(&a.channel)?;
    let lex = ctx.cfg.lexicons.views()?;
    let labeler = train_weak_labeler(&channel, &lex, &ctx.cfg.model, &ctx.cfg.train, ctx.cfg.data.min_freq)?;
    let (todo, done): (Vec<LabeledItem>, Vec<LabeledItem>) = items.into_iter().partition(|it| it.gender.is_none());
    let labelled = weak_label_gender(&labeler, &todo)?;
    let n_new = labelled.len();
    let mut all: Vec<LabeledItem> = done.into_iter().chain(labelled).collect();
    all.sort_by(|x, y| x.item.id.cmp(&y.item.id));
    corpus::save_corpus(ctx.out_file("corpus weak-label")?, &all)?;
    eprintln!("labelled {n_new} items");
    print!("{}", counts_report(&all, ctx.format));
    Ok(())
}

#[derive(Serialize)]
struct ViewRecord<'a> {
    id: &'a str,
    original: &'a str,
    symptom_view: &'a str,
    gender_view: &'a str,
    symptom_spans: &'a [gem_core::knowledge::Span],
    gender_spans: &'a [gem_core::knowledge::Span],
}

fn cmd_mask(ctx: &Ctx, a: MaskArgs) -> Result<()> {
    let mut paths = ctx.cfg.lexicons.clone();
    if a.symptom_lexicon.is_some() {
        paths.symptom = a.symptom_lexicon;
    }
    if a.gender_lexicon.is_some() {
        paths.gender = a.gender_lexicon;
    }
    let lex = paths.views()?;
    let items = load_items(&a.input)?;
    let mut out = String::from(VIEWS_HEADER);
    out.push('\n');
    let (mut with_s, mut with_g) = (0, 0);
    for it in &items {
        let v = lex.views(&it.item.text);
        with_s += usize::from(!v.symptom_spans.is_empty());
        with_g += usize::from(!v.gender_spans.is_empty());
        let rec = ViewRecord {
            id: &it.item.id,
            original: &v.original,
            symptom_view: &v.symptom_view,
            gender_view: &v.gender_view,
            symptom_spans: &v.symptom_spans,
            gender_spans: &v.gender_spans,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    write(ctx.out_file("mask")?, &out)?;
    match ctx.format {
        OutputFormat::Table => println!(
            "{} items, {with_s} with symptom spans, {with_g} with gender spans",
            items.len()
        ),
        OutputFormat::Records => println!(
            "{}",
            serde_json::json!({"items": items.len(), "with_symptom_spans": with_s, "with_gender_spans": with_g})
        ),
    }
    Ok(())
}

fn mode(raw: bool) -> InputMode {
    if raw {
        InputMode::Raw
    } else {
        InputMode::Masked
    }
}

fn cmd_pretrain(ctx: &Ctx, a: PretrainArgs) -> Result<()> {
    let lex = ctx.cfg.lexicons.views()?;
    let items = load_items(&a.train)?;
    let mode = mode(a.raw);
    let vocab = build_vocab(&items, &lex, mode, ctx.cfg.data.min_freq)?;
    let mut mcfg = ctx.cfg.model.clone();
    mcfg.variant = Variant::Gem;
    mcfg.vocab_size = vocab.len();
    let examples = encode_examples(&items, &lex, &vocab, mode, mcfg.max_len)?;
    let mut pcfg = ctx.cfg.pretrain.clone();
    pcfg.input_mode = mode;
    if let Some(e) = a.epochs {
        pcfg.epochs = e;
    }
    let mut model = GemModel::new(mcfg, ctx.cfg.seed)?;
    let report = mlm_pretrain(&mut model, &examples, &vocab, &pcfg)?;
    let dir = ctx.out_dir("pretrain")?;
    vocab.save(&dir.join("vocab.txt"))?;
    save_checkpoint(&dir.join("pretrained.ckpt"), &Trainer::new(model, &pcfg), &vocab)?;
    let mut log = String::from(PRETRAIN_LOG_HEADER);
    log.push('\n');
    let mut table = String::new();
    for (enc, losses) in [(S_ENCODER, &report.s_encoder), (G_ENCODER, &report.g_encoder)] {
        for (i, l) in losses.iter().enumerate() {
            let _ = writeln!(log, "{}", serde_json::json!({"encoder": enc, "epoch": i + 1, "loss": l}));
            let _ = writeln!(table, "{enc:<10} epoch {:>3}  mlm loss {l:.4}", i + 1);
        }
    }
    write(&dir.join("pretrain_log.jsonl"), &log)?;
    match ctx.format {
        OutputFormat::Table => print!("{table}"),
        OutputFormat::Records => print!("{}", log.split_once('\n').map_or("", |x| x.1)),
    }
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let lex = ctx.cfg.lexicons.views()?;
    let train_items = load_items(&a.train)?;
    let dev_items = load_items(&a.dev)?;
    let dir = ctx.out_dir("train")?.to_path_buf();

    let vocab_path = a
        .vocab
        .clone()
        .or_else(|| a.init.as_ref().and_then(|p| p.parent()).map(|d| d.join("vocab.txt")))
        .or_else(|| a.resume.as_ref().and_then(|p| p.parent()).map(|d| d.join("vocab.txt")));
    let (mut trainer, vocab) = if let Some(ckpt) = &a.resume {
        let vp = vocab_path.ok_or_else(|| anyhow!("--vocab is required with --resume"))?;
        let vocab = Vocabulary::load(&vp)?;
        let t = load_checkpoint(ckpt, &vocab).with_context(|| format!("resuming {}", ckpt.display()))?;
        (t, vocab)
    } else {
        let input_mode = mode(a.raw);
        let vocab = match &vocab_path {
            Some(p) if a.vocab.is_some() || p.exists() => Vocabulary::load(p)?,
            _ => build_vocab(&train_items, &lex, input_mode, ctx.cfg.data.min_freq)?,
        };
        let mut mcfg = ctx.cfg.model.clone();
        mcfg.variant = a.variant;
        mcfg.vocab_size = vocab.len();
        let mut model = GemModel::new(mcfg, ctx.cfg.seed)?;
        if let Some(init) = &a.init {
            let src = load_checkpoint(init, &vocab).with_context(|| format!("loading {}", init.display()))?;
            if src.config.input_mode != input_mode {
                bail!("{} was pretrained on {:?} input", init.display(), src.config.input_mode);
            }
            for prefix in [S_ENCODER, G_ENCODER] {
                let owns = model.params.iter().any(|p| p.name.starts_with(prefix));
                if owns {
                    model.params.copy_prefix_from(&src.model.params, &format!("{prefix}."))?;
                }
            }
        }
        let mut tcfg = ctx.cfg.train.clone();
        tcfg.input_mode = input_mode;
        (Trainer::new(model, &tcfg), vocab)
    };

    let mut tcfg = trainer.config.clone();
    if a.resume.is_none() {
        tcfg = ctx.cfg.train.clone();
        tcfg.input_mode = trainer.config.input_mode;
    }
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    let max_len = trainer.model.config.max_len;
    let enc = |items: &[LabeledItem]| encode_examples(items, &lex, &vocab, tcfg.input_mode, max_len);
    let (train, dev) = (enc(&train_items)?, enc(&dev_items)?);
    let format = ctx.format;
    trainer.train(&train, &dev, &tcfg, |r| match format {
        OutputFormat::Table => println!(
            "epoch {:>3} {:<5} loss {:.4}  symptom F1 {}  gender F1 {}",
            r.epoch,
            r.split,
            r.loss,
            r.symptom.map_or("  n/a".into(), |s| format!("{:.4}", s.f1)),
            r.gender.map_or("  n/a".into(), |s| format!("{:.4}", s.f1)),
        ),
        OutputFormat::Records => println!("{}", serde_json::to_string(r).unwrap_or_default()),
    })?;

    vocab.save(&dir.join("vocab.txt"))?;
    save_checkpoint(&dir.join("model.ckpt"), &trainer, &vocab)?;
    let mut log = String::from(METRICS_HEADER);
    log.push('\n');
    for r in &trainer.history {
        log.push_str(&serde_json::to_string(r)?);
        log.push('\n');
    }
    write(&dir.join("metrics.jsonl"), &log)?;
    eprintln!(
        "best dev epoch {:?} (mean macro-F1 {:?}); checkpoint {}",
        trainer.state.best_epoch,
        trainer.state.best_dev_score,
        dir.join("model.ckpt").display()
    );
    Ok(())
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let trainer = load_checkpoint(&a.checkpoint, &vocab)?;
    let model = trainer.best_model()?;
    let lex = ctx.cfg.lexicons.views()?;
    let items = load_items(&a.test)?;
    let test = encode_examples(&items, &lex, &vocab, trainer.config.input_mode, model.config.max_len)?;
    let report = eval::classwise_report(&model, &test, 64)?;
    ctx.emit_report(&render_classwise(&report, ctx.format))
}

fn parse_seeds(s: &str, base: u64) -> Result<Vec<u64>> {
    if s.contains(',') {
        s.split(',')
            .map(|x| x.trim().parse().with_context(|| format!("bad seed {x:?}")))
            .collect()
    } else {
        let n: u64 = s.trim().parse().with_context(|| format!("bad seed count {s:?}"))?;
        Ok((0..n).map(|i| base + i).collect())
    }
}

fn parse_rows(s: &str) -> Result<Vec<AblationRow>> {
    s.split(',')
        .map(|x| {
            AblationRow::ALL
                .into_iter()
                .find(|r| r.label() == x.trim() || r.label().trim_start_matches('-') == x.trim())
                .ok_or_else(|| anyhow!("unknown ablation row {x:?}"))
        })
        .collect()
}

fn per_seed_table(report: &AblationReport) -> String {
    let mut out = String::from(PER_SEED_HEADER);
    out.push('\n');
    out.push_str("seed");
    for r in &report.rows {
        let _ = write!(out, "\t{}", r.row.label());
    }
    out.push('\n');
    for (i, seed) in report.seeds.iter().enumerate() {
        let _ = write!(out, "{seed}");
        for r in &report.rows {
            match r.runs.get(i).and_then(|c| c.metrics.as_ref()) {
                Some(m) => {
                    let _ = write!(out, "\t{}", m.f1);
                }
                None => out.push_str("\tnan"),
            }
        }
        out.push('\n');
    }
    out
}

fn cmd_ablate(ctx: &Ctx, a: AblateArgs) -> Result<()> {
    let load = |n: &str| load_items(&a.split_dir.join(format!("{n}.jsonl")));
    let split = corpus::CorpusSplit {
        train: load("train")?,
        dev: load("dev")?,
        test: load("test")?,
        ratios: (0.0, 0.0, 0.0),
    };
    let mut base = AblationConfig {
        model: ctx.cfg.model.clone(),
        finetune: ctx.cfg.train.clone(),
        pretrain: ctx.cfg.pretrain.clone(),
        min_freq: ctx.cfg.data.min_freq,
        rows: AblationRow::ALL.to_vec(),
    };
    if let Some(r) = &a.rows {
        base.rows = parse_rows(r)?;
    }
    let seeds = parse_seeds(&a.seeds, ctx.cfg.seed)?;
    let lex = ctx.cfg.lexicons.views()?;
    let report = run_ablation(&base, &split, &lex, &seeds, |m| eprintln!("{m}"))?;
    let dir = ctx.out_dir("ablate")?;
    let rendered = render_ablation(&report, ctx.format);
    write(&dir.join("ablation.txt"), &render_ablation(&report, OutputFormat::Table))?;
    write(&dir.join("ablation.jsonl"), &render_ablation(&report, OutputFormat::Records))?;
    write(&dir.join("per_seed_f1.tsv"), &per_seed_table(&report))?;
    print!("{rendered}");
    Ok(())
}

/// Reads a table whose first non-comment line names the columns.
fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let split = |l: &str| -> Vec<String> {
        l.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    };
    let header = split(lines.next().ok_or_else(|| anyhow!("{} is empty", path.display()))?);
    let mut cols = vec![Vec::new(); header.len()];
    for (i, l) in lines.enumerate() {
        let cells = split(l);
        if cells.len() != header.len() {
            bail!("{}: row {} has {} cells, header has {}", path.display(), i + 2, cells.len(), header.len());
        }
        for (c, cell) in cols.iter_mut().zip(cells) {
            c.push(cell.parse::<f64>().unwrap_or(f64::NAN));
        }
    }
    Ok((header, cols))
}

fn significance_text(r: &SignificanceReport, x: &str, y: &str, format: OutputFormat) -> String {
    match format {
        OutputFormat::Table => format!(
            "wilcoxon signed-rank {x} vs {y} ({:?})\nn = {}  W+ = {}  W- = {}  statistic = {}\np = {:.6e} ({:?})\n",
            r.alternative, r.n, r.w_plus, r.w_minus, r.statistic, r.p_value, r.method
        ),
        OutputFormat::Records => format!(
            "{}\n",
            serde_json::json!({"x": x, "y": y, "report": r})
        ),
    }
}

fn cmd_wilcoxon(ctx: &Ctx, a: WilcoxonArgs) -> Result<()> {
    let (header, cols) = read_columns(&a.input)?;
    let (ix, iy) = match &a.columns {
        Some(spec) => {
            let names: Vec<&str> = spec.split(',').map(str::trim).collect();
            let [x, y] = names[..] else { bail!("--columns needs two names, got {spec:?}") };
            let find = |n: &str| {
                header
                    .iter()
                    .position(|h| h == n)
                    .ok_or_else(|| anyhow!("no column {n:?} in {header:?}"))
            };
            (find(x)?, find(y)?)
        }
        None => {
            let numeric: Vec<usize> = (0..header.len())
                .filter(|&i| !cols[i].is_empty() && cols[i].iter().all(|v| v.is_finite()))
                .collect();
            match numeric[..] {
                [a, b, ..] => (a, b),
                _ => bail!("{} needs two numeric columns", a.input.display()),
            }
        }
    };
    let r = wilcoxon_signed_rank(&cols[ix], &cols[iy], a.alternative)?;
    ctx.emit_report(&significance_text(&r, &header[ix], &header[iy], ctx.format))
}

fn cmd_similarity(ctx: &Ctx, a: SimilarityArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let trainer = load_checkpoint(&a.checkpoint, &vocab)?;
    let model = trainer.best_model()?;
    let lex: ViewLexicons = ctx.cfg.lexicons.views()?;
    let items = load_items(&a.items)?;
    let r: SimilarityReport =
        gender_presence_similarity(&model, &items, &lex, &vocab, trainer.config.input_mode, a.alternative)?;
    let text = match ctx.format {
        OutputFormat::Table => format!(
            "gender present: {} items, absent: {} items, {} pairs\nmean centroid cosine present {:.4}, absent {:.4}\n{}",
            r.n_present,
            r.n_absent,
            r.n_pairs,
            r.mean_present,
            r.mean_absent,
            significance_text(&r.significance, "present", "absent", OutputFormat::Table)
        ),
        OutputFormat::Records => format!("{}\n", serde_json::to_string(&r)?),
    };
    ctx.emit_report(&text)
}
