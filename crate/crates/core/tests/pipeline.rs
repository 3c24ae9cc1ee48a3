use ctxtag::par::Execution;
use ctxtag::pipeline::annotate::{Sidecars, TreeRecord};
use ctxtag::pipeline::synth::literal_words;
use ctxtag::pipeline::*;
use ctxtag::tags::validate_tags;
use ctxtag::{apply_tags, SlottedRule};

fn corpus(spec: &SyntheticSpec) -> (Vec<SyntheticExample>, Sidecars) {
    let gen = generate_synthetic(spec).unwrap();
    let trees: Vec<TreeRecord> = gen.iter().map(|g| g.tree_record()).collect();
    (gen, Sidecars::from_records(&trees, &[]).unwrap())
}

#[test]
fn generator_is_deterministic_and_round_trips() {
    let spec = SyntheticSpec { size: 200, seed: 9, ..Default::default() };
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&SyntheticSpec { seed: 10, ..spec }).unwrap();
    assert_ne!(a, c);
    for g in &a {
        let ctx = g.example.context_sequence().unwrap();
        assert_eq!(&apply_tags(&g.example, &ctx, &g.tags).unwrap(), g.example.target.as_ref().unwrap());
    }
}

#[test]
fn synthetic_corpus_is_covered_and_rules_are_recovered() {
    let spec = SyntheticSpec::default();
    let (gen, sidecars) = corpus(&spec);
    let examples: Vec<_> = gen.iter().map(|g| g.example.clone()).collect();
    let (anns, stats) = annotate(&examples, &sidecars, Execution::Parallel).unwrap();
    assert!(stats.coverage >= 0.95, "{stats:?}");
    for (g, a) in gen.iter().zip(&anns) {
        assert!(a.fully_covered, "{}", g.example.id);
        assert_eq!(a.tags(), g.tags, "{}", g.example.id);
    }

    let build = build_rules(&anns, &RuleBuildConfig::default()).unwrap();
    let mut literal: Vec<String> = build
        .vocab
        .rules()
        .filter(|r| r.literal_count() > 0)
        .map(ToString::to_string)
        .collect();
    literal.sort();
    let mut planted: Vec<String> = RuleKind::ALL.iter().map(|k| k.planted().to_string()).collect();
    planted.sort();
    assert_eq!(literal, planted);
    assert_eq!(build.vocab.rule(0).unwrap(), &SlottedRule::null());
    assert!(build.vocab.glue_id(1).is_some() && build.vocab.glue_id(2).is_some());

    for ((rec, ex), g) in build.records.iter().zip(&examples).zip(&gen) {
        let tags = build.vocab.decode_tags(rec).unwrap();
        assert!(validate_tags(&ex.context_sequence().unwrap(), &tags, ex.source.len()).is_ok());
        if let ExampleKind::Rule(k) = g.kind {
            assert_eq!(tags.rules.iter().find(|r| !r.is_null()), Some(&k.planted()));
        }
    }

    let sweep = sweep_thresholds(&anns, &SWEEP_THRESHOLDS, &RuleBuildConfig::default());
    assert!(sweep.windows(2).all(|w| w[0].rules >= w[1].rules), "{sweep:?}");
    assert!(sweep[0].rules > sweep[3].rules, "{sweep:?}");
    let zero = sweep_thresholds(&anns, &[0.0], &RuleBuildConfig::default());
    assert!(zero[0].rules >= sweep[0].rules);
}

#[test]
fn planted_shares_are_recovered() {
    let spec = SyntheticSpec {
        size: 1000,
        seed: 3,
        rules: vec![(RuleKind::Besides, 0.7), (RuleKind::OtherThan, 0.25), (RuleKind::And, 0.05)],
        glue_weight: 0.0,
        identity_weight: 0.0,
        variant_instances: vec![],
        max_filler_turns: 1,
    };
    let (gen, sidecars) = corpus(&spec);
    let examples: Vec<_> = gen.iter().map(|g| g.example.clone()).collect();
    let (anns, _) = annotate(&examples, &sidecars, Execution::Parallel).unwrap();
    let extracted = extracted_rules(&anns);
    let total: usize = extracted.iter().map(|e| e.count).sum();
    for (kind, share) in [(RuleKind::Besides, 0.7), (RuleKind::OtherThan, 0.25), (RuleKind::And, 0.05)] {
        let c = extracted.iter().find(|e| e.rule == kind.planted()).map_or(0, |e| e.count);
        let got = c as f64 / total as f64;
        assert!((got - share).abs() <= 0.02, "{kind:?}: {got}");
    }
}

#[test]
fn empty_annotation_set_gives_null_plus_glue() {
    let build = build_rules(&[], &RuleBuildConfig::default()).unwrap();
    assert_eq!(build.vocab.len(), 2);
    assert_eq!(build.vocab.rule(1).unwrap(), &SlottedRule::glue(1));
}

#[test]
fn literals_never_appear_in_generated_context() {
    let lits = literal_words();
    for g in generate_synthetic(&SyntheticSpec::default()).unwrap() {
        assert!(g.example.context.iter().flatten().all(|t| !lits.contains(t)));
    }
}

#[test]
fn fitted_model_beats_keep_everything_baseline() {
    use ctxtag::metrics::corpus_bleu;
    use ctxtag::model::ModelConfig;
    use ctxtag::train::{train, TrainConfig};

    let (gen, sidecars) = corpus(&SyntheticSpec { size: 120, seed: 2, ..Default::default() });
    let examples: Vec<_> = gen.iter().map(|g| g.example.clone()).collect();
    let (anns, _) = annotate(&examples, &sidecars, Execution::Parallel).unwrap();
    let build = build_rules(&anns, &RuleBuildConfig::default()).unwrap();
    let model = new_model(ModelConfig::default(), &examples, &build.vocab, 0).unwrap();
    let data = training_examples(&model, &examples, &build.records, &build.vocab).unwrap();
    let cfg = TrainConfig { max_epochs: 8, min_epochs: 8, ..Default::default() };
    let model = train(model, &data, &data, &cfg, |_| {}).unwrap().model;

    let preds = predict(&examples, &model, Some(&build.vocab), Execution::Parallel).unwrap();
    assert_eq!(preds, predict(&examples, &model, Some(&build.vocab), Execution::Sequential).unwrap());
    let (report, _) = evaluate(&preds, &examples).unwrap();
    let keep: Vec<(&[String], &[String])> = examples
        .iter()
        .map(|e| (&e.source[..], &e.target.as_ref().unwrap()[..]))
        .collect();
    let baseline = 100.0 * corpus_bleu(&keep, 4);
    assert!(report.bleu_4 > baseline, "{} vs {baseline}", report.bleu_4);
}
