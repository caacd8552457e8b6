use gem_core::corpus::{
    generate_synthetic_corpus, quality_filter, split, weak_label_gender, GeneratorSpec, Kind, LabeledItem, Provenance, RawItem,
    StratifyBy,
};
use gem_core::eval::{classwise_report, gender_presence_similarity, Alternative};
use gem_core::knowledge::{mask_gender, mask_symptoms, Category, Lexicon, ViewLexicons};
use gem_core::model::{GemModel, ModelConfig};
use gem_core::text::Vocabulary;
use gem_core::train::{
    build_vocab, checkpoint_from_str, checkpoint_to_string, encode_examples, mlm_pretrain, train_weak_labeler,
    Example, InputMode, TrainConfig, Trainer,
};

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d: 8,
        n_heads: 2,
        d_ffn: 16,
        vocab_size: vocab,
        max_len: 64,
        dropout_p: 0.1,
        ..ModelConfig::default()
    }
}

fn corpus(n: usize, seed: u64) -> Vec<LabeledItem> {
    corpus_with_density(n, seed, 1.0)
}

fn corpus_with_density(n: usize, seed: u64, cue_density: f64) -> Vec<LabeledItem> {
    generate_synthetic_corpus(&GeneratorSpec {
        n_items: n,
        seed,
        cue_density,
        interaction_mode: true,
        ..GeneratorSpec::default()
    })
    .unwrap()
}

fn encoded(items: &[LabeledItem]) -> (Vocabulary, Vec<Example>) {
    let lex = ViewLexicons::bundled();
    let vocab = build_vocab(items, &lex, InputMode::Masked, 1).unwrap();
    let ex = encode_examples(items, &lex, &vocab, InputMode::Masked, 64).unwrap();
    (vocab, ex)
}

#[test]
fn literal_masking_examples() {
    let g = Lexicon::bundled(Category::Gender);
    let s = Lexicon::bundled(Category::Symptom);
    assert_eq!(mask_gender("bachelorette", &g), "<woman>");
    assert_eq!(mask_gender("bachelor", &g), "<man>");
    assert_eq!(mask_symptoms("I still get flashbacks", &s), "I still get <ptsd>");
    assert_eq!(mask_symptoms("diagnosed with PTSD after surgery", &s), "diagnosed with <ptsd> after surgery");
}

#[test]
fn quality_grid_is_exhaustive() {
    for upvotes in [9u64, 10, 11] {
        for tokens in [49usize, 50, 51] {
            let item = RawItem {
                id: format!("{upvotes}-{tokens}"),
                author_id: "a".into(),
                kind: Kind::Post,
                source: "heart".into(),
                text: vec!["word"; tokens].join(" "),
                upvotes,
                created_at: 0,
            };
            let kept = !quality_filter(&[item], 10, 50).is_empty();
            assert_eq!(kept, upvotes > 10 && tokens >= 50, "upvotes {upvotes} tokens {tokens}");
        }
    }
}

#[test]
fn split_is_stratified_and_reproducible() {
    let items = corpus(400, 2);
    let a = split(&items, (0.75, 0.05, 0.20), 9, StratifyBy::Both).unwrap();
    let b = split(&items, (0.75, 0.05, 0.20), 9, StratifyBy::Both).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.train.len() + a.dev.len() + a.test.len(), 400);
    assert!((a.test.len() as f64 - 80.0).abs() <= 8.0);
}

#[test]
fn mlm_loss_decreases() {
    let (vocab, ex) = encoded(&corpus(256, 4));
    let mut drops = Vec::new();
    for seed in 1..=3 {
        let mut model = GemModel::new(tiny(vocab.len()), seed).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            seed,
            ..TrainConfig::pretrain_default()
        };
        let r = mlm_pretrain(&mut model, &ex, &vocab, &cfg).unwrap();
        assert_eq!(r.s_encoder.len(), 4);
        drops.push(r.s_encoder[0] - r.s_encoder[3]);
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] > 0.0, "{drops:?}");
}

#[test]
fn train_resume_and_reports() {
    let items = corpus_with_density(160, 6, 0.7);
    let (vocab, ex) = encoded(&items);
    let (train, dev) = ex.split_at(128);
    let cfg = |epochs| TrainConfig {
        epochs,
        seed: 3,
        ..TrainConfig::default()
    };

    let mut full = Trainer::new(GemModel::new(tiny(vocab.len()), 3).unwrap(), &cfg(4));
    full.train(train, dev, &cfg(4), |_| {}).unwrap();

    let mut half = Trainer::new(GemModel::new(tiny(vocab.len()), 3).unwrap(), &cfg(2));
    half.train(train, dev, &cfg(2), |_| {}).unwrap();
    let mut resumed = checkpoint_from_str(&checkpoint_to_string(&half, &vocab).unwrap(), &vocab, "mem").unwrap();
    resumed.train(train, dev, &cfg(4), |_| {}).unwrap();
    assert_eq!(
        checkpoint_to_string(&full, &vocab).unwrap(),
        checkpoint_to_string(&resumed, &vocab).unwrap()
    );
    assert_eq!(full.history.len(), 8);

    let model = full.into_best_model().unwrap();
    let posts: Vec<Example> = dev.iter().filter(|e| e.kind == Kind::Post).cloned().collect();
    let report = classwise_report(&model, &posts, 16).unwrap();
    assert!(report.comments.is_none());
    let p = report.posts.unwrap();
    assert_eq!(p, report.all);
    assert_eq!(p.symptom.unwrap().confusion.total(), posts.len() as u64);

    let sim = gender_presence_similarity(
        &model,
        &items,
        &ViewLexicons::bundled(),
        &vocab,
        InputMode::Masked,
        Alternative::TwoSided,
    )
    .unwrap();
    assert_eq!(sim.n_present + sim.n_absent, items.len());
    assert!(sim.n_pairs >= 1 && sim.n_pairs <= sim.n_present.min(sim.n_absent));
    assert!((0.0..=1.0).contains(&sim.significance.p_value));
}

#[test]
fn weak_labels_keep_symptoms() {
    let lex = ViewLexicons::bundled();
    let items = corpus(200, 8);
    let cfg = TrainConfig {
        epochs: 1,
        seed: 2,
        ..TrainConfig::default()
    };
    let labeler = train_weak_labeler(&items, &lex, &tiny(0), &cfg, 1).unwrap();
    let target = corpus(20, 9);
    let out = weak_label_gender(&labeler, &target).unwrap();
    assert_eq!(out.len(), target.len());
    for (a, b) in target.iter().zip(&out) {
        assert!(b.gender.is_some());
        assert_eq!((&a.item, a.symptom), (&b.item, b.symptom));
        assert_eq!(b.provenance, Some(Provenance::WeakLabeler));
    }
}
