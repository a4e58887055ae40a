mod common;

use std::collections::HashSet;

use common::{random_tokens, rng, welch_fixture};
use pcw_core::harness::{
    build_label_trie, constrained_decode, mean, parse_dataset, run_experiment, std_dev, sweep_b, welch_t_test, Dataset,
    Evaluator, ExperimentConfig, LabelTrie, Mode, Record, StdKind,
};
use pcw_core::model::{Model, ModelConfig, ParallelContext, PositionalKind};
use pcw_core::packer::{Metric, TaskTemplate};
use pcw_core::tokenizer::ByteTokenizer;
use pcw_core::Error;
use rand::seq::SliceRandom;
use rand::Rng;

fn byte_model(kind: PositionalKind, seed: u64) -> Model {
    let mut cfg = ModelConfig::tiny(kind);
    cfg.vocab_size = 256;
    Model::random(cfg, seed, 0.2).unwrap()
}

fn random_labels(r: &mut impl Rng, count: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    while seen.len() < count {
        let len = r.gen_range(1..6);
        let s: String = (0..len).map(|_| char::from(r.gen_range(b'a'..=b'h'))).collect();
        seen.insert(s);
    }
    let mut v: Vec<String> = seen.into_iter().collect();
    v.sort();
    v.shuffle(r);
    v
}

#[test]
fn constrained_output_is_always_a_label() {
    let mut r = rng(31);
    let models: Vec<Model> = (0..5)
        .map(|s| {
            byte_model(
                if s % 2 == 0 {
                    PositionalKind::LearnedAbsolute
                } else {
                    PositionalKind::Rotary
                },
                s,
            )
        })
        .collect();
    for trial in 0..500 {
        let model = &models[trial % models.len()];
        let count = if trial % 5 == 0 { 77 } else { r.gen_range(2..=150) };
        let labels = random_labels(&mut r, count);
        let trie = build_label_trie(&labels, &ByteTokenizer, 10).unwrap();
        let b = r.gen_range(1..4);
        let windows: Vec<Vec<u32>> = (0..b)
            .map(|_| {
                let n = r.gen_range(1..30);
                random_tokens(&mut r, n, 256)
            })
            .collect();
        let t = r.gen_range(1..10);
        let task = random_tokens(&mut r, t, 256);
        let ctx = ParallelContext::encode(model, &windows, None).unwrap();
        let got = constrained_decode(model, &ctx.segments(), &task, &ctx.task_positions(task.len()), &trie).unwrap();
        assert!(got < labels.len());
        assert!(labels.contains(&trie.labels()[got]));
    }
}

#[test]
fn single_label_is_forced() {
    let model = byte_model(PositionalKind::LearnedAbsolute, 1);
    let ctx = ParallelContext::encode(&model, &[vec![1, 2, 3]], None).unwrap();
    let trie = build_label_trie(&["only".to_string()], &ByteTokenizer, 10).unwrap();
    for task in [vec![5u32], vec![200, 7, 9]] {
        let got = constrained_decode(&model, &ctx.segments(), &task, &ctx.task_positions(task.len()), &trie).unwrap();
        assert_eq!(got, 0);
    }
}

#[test]
fn unique_first_token_finishes_without_further_steps() {
    // the task ends on the last position, so any extra decoding step would
    // exhaust the position budget
    let model = byte_model(PositionalKind::LearnedAbsolute, 2);
    let ctx = ParallelContext::encode(&model, &[vec![3; 60]], None).unwrap();
    let task = [4, 5, 6, 7];
    let pos = ctx.task_positions(4);
    assert_eq!(*pos.last().unwrap(), 63);
    let labels = vec!["xylophone".to_string(), "banjo".to_string()];
    let trie = build_label_trie(&labels, &ByteTokenizer, 10).unwrap();
    let got = constrained_decode(&model, &ctx.segments(), &task, &pos, &trie).unwrap();
    let logits = ctx.decode(&model, &task).unwrap();
    let row = logits.row(3);
    let expect = if row[usize::from(b'x')] > row[usize::from(b'b')] {
        0
    } else {
        1
    };
    assert_eq!(got, expect);

    // a shared first token needs one more step, which does not fit
    let labels = vec!["bx".to_string(), "by".to_string()];
    let trie = build_label_trie(&labels, &ByteTokenizer, 10).unwrap();
    assert!(matches!(
        constrained_decode(&model, &ctx.segments(), &task, &pos, &trie),
        Err(Error::Generation(_))
    ));
}

#[test]
fn hand_built_trie_matches_tokenized_trie() {
    let labels: Vec<String> = ["cat", "car", "dog"].iter().map(|s| s.to_string()).collect();
    let seqs = vec![vec![99, 97, 116, 10], vec![99, 97, 114, 10], vec![100, 111, 103, 10]];
    let hand = LabelTrie::from_sequences(labels.clone(), seqs).unwrap();
    assert_eq!(hand, build_label_trie(&labels, &ByteTokenizer, 10).unwrap());
}

#[test]
fn welch_matches_reference_statistics() {
    let f = welch_fixture();
    let w = welch_t_test(&f.worked.a, &f.worked.b).unwrap();
    assert!((w.t - f.worked.t).abs() < 1e-3);
    assert!((w.p - f.worked.p).abs() < 1e-3);
    assert_eq!(f.random.len(), 100);
    for c in &f.random {
        let w = welch_t_test(&c.a, &c.b).unwrap();
        assert!((w.t - c.t).abs() < 1e-3, "t {} vs {}", w.t, c.t);
        assert!((w.p - c.p).abs() < 1e-3, "p {} vs {}", w.p, c.p);
        // swapping the samples flips t and keeps p
        let s = welch_t_test(&c.b, &c.a).unwrap();
        assert_eq!(s.t, -w.t);
        assert_eq!(s.p, w.p);
    }
}

fn synthetic_template() -> TaskTemplate {
    TaskTemplate::new("{x}=", "{y}").unwrap()
}

/// Two-label task: the label is `p` when the input has more `a`s than `b`s.
fn synthetic_dataset(seed: u64, n: usize) -> Dataset {
    let mut r = rng(seed);
    let records = (0..n)
        .map(|_| {
            let len = r.gen_range(1..4);
            let input: String = (0..len).map(|_| if r.gen_bool(0.5) { 'a' } else { 'b' }).collect();
            let a = input.chars().filter(|&c| c == 'a').count();
            let output = if 2 * a > len { "p" } else { "n" };
            Record {
                input,
                output: output.into(),
                documents: vec![],
                answers: vec![],
                kind: None,
            }
        })
        .collect();
    Dataset::new("synthetic", records, &synthetic_template()).unwrap()
}

fn config(b: usize, n_sets: usize) -> ExperimentConfig {
    ExperimentConfig {
        b,
        n_sets,
        test_size: 12,
        seed: 5,
        model_name: "tiny".into(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn one_window_equals_baseline() {
    let model = byte_model(PositionalKind::LearnedAbsolute, 7);
    let data = synthetic_dataset(8, 200);
    let report = run_experiment(&model, &ByteTokenizer, &data, None, &synthetic_template(), config(1, 4)).unwrap();
    assert_eq!(report.pcw.per_seed_scores, report.baseline.per_seed_scores);
    assert_eq!(report.welch.unwrap().p, 1.0);
}

#[test]
fn report_bookkeeping() {
    let model = byte_model(PositionalKind::Rotary, 9);
    let data = synthetic_dataset(10, 200);
    let report = run_experiment(&model, &ByteTokenizer, &data, None, &synthetic_template(), config(3, 5)).unwrap();
    let budget = report.budget.clone().unwrap();
    assert!(budget.n_max >= 1);
    for (r, b) in [(&report.baseline, 1), (&report.pcw, 3)] {
        assert_eq!(r.per_seed_scores.len(), 5);
        assert_eq!(r.config.b, b);
        assert_eq!(r.config.n_max, budget.n_max);
        assert_eq!(r.config.seeds, vec![5, 6, 7, 8, 9]);
        assert_eq!(r.config.test_size, 12);
        assert!((r.mean - mean(&r.per_seed_scores)).abs() <= 1e-9);
        assert!((r.std - std_dev(&r.per_seed_scores, StdKind::Population)).abs() <= 1e-9);
        assert!(r.per_seed_scores.iter().all(|s| (0.0..=100.0).contains(s)));
    }
    assert_eq!(report.baseline.p_value_vs_baseline, None);
    assert_eq!(report.pcw.p_value_vs_baseline, report.welch.map(|w| w.p));

    // identical JSON on a rerun
    let again = run_experiment(&model, &ByteTokenizer, &data, None, &synthetic_template(), config(3, 5)).unwrap();
    assert_eq!(
        serde_json::to_string(&report).unwrap(),
        serde_json::to_string(&again).unwrap()
    );
}

#[test]
fn sample_std_is_configurable() {
    let model = byte_model(PositionalKind::LearnedAbsolute, 11);
    let data = synthetic_dataset(12, 150);
    let mut cfg = config(2, 3);
    cfg.std_kind = StdKind::Sample;
    let report = run_experiment(&model, &ByteTokenizer, &data, None, &synthetic_template(), cfg).unwrap();
    let r = &report.pcw;
    assert!((r.std - std_dev(&r.per_seed_scores, StdKind::Sample)).abs() <= 1e-9);
}

#[test]
fn scores_do_not_depend_on_test_order() {
    let model = byte_model(PositionalKind::LearnedAbsolute, 13);
    let data = synthetic_dataset(14, 200);
    let template = synthetic_template();
    let ev = Evaluator::new(&model, &ByteTokenizer, &template, &data, None, config(2, 1)).unwrap();
    let n_max = ev.budget().unwrap().n_max;
    let forward = ev.run_seed(2, n_max, 3).unwrap();
    let mut reversed: Vec<Record> = ev.test_records().to_vec();
    reversed.reverse();
    let backward = ev.run_seed_on(2, n_max, 3, &reversed).unwrap();
    assert_eq!(forward.score, backward.score);
    let mut preds = backward.predictions.clone();
    preds.reverse();
    assert_eq!(forward.predictions, preds);
}

#[test]
fn sweep_rows_track_window_count() {
    let model = byte_model(PositionalKind::LearnedAbsolute, 15);
    let data = synthetic_dataset(16, 200);
    let sweep = sweep_b(
        &model,
        &ByteTokenizer,
        &data,
        None,
        &synthetic_template(),
        config(1, 2),
        &[1, 2, 3],
    )
    .unwrap();
    assert_eq!(sweep.rows.len(), 3);
    assert_eq!(sweep.rows[0].per_seed_scores, sweep.baseline.per_seed_scores);
    let n_max = sweep.budget.unwrap().n_max;
    let totals: Vec<usize> = sweep.rows.iter().map(|r| r.config.b * r.config.n_max).collect();
    assert_eq!(totals, vec![n_max, 2 * n_max, 3 * n_max]);
}

#[test]
fn overflowing_windows_are_rejected() {
    let model = byte_model(PositionalKind::LearnedAbsolute, 17);
    let data = synthetic_dataset(18, 200);
    let mut cfg = config(2, 1);
    cfg.n_max = Some(40);
    let err = run_experiment(&model, &ByteTokenizer, &data, None, &synthetic_template(), cfg).unwrap_err();
    assert!(matches!(err, Error::Capacity(_) | Error::Position(_)), "{err}");
}

#[test]
fn document_mode_runs_and_scores() {
    let mut template = TaskTemplate::new("Q: {x}\n", "A: {y}").unwrap();
    template.metric = Metric::F1;
    let text = r#"{"input":"w?","output":"ab","documents":["d1","d2","d3"]}
{"input":"v?","output":"cd","answers":["ef"],"documents":[{"title":"t","text":"x"}]}
{"input":"u?","output":"gh","documents":["d4"]}"#;
    let data = parse_dataset(text, "qa.jsonl", &template).unwrap();
    let model = byte_model(PositionalKind::LearnedAbsolute, 19);
    let cfg = ExperimentConfig {
        mode: Mode::Docs,
        prefix_examples: 0,
        max_new_tokens: 3,
        ..config(2, 2)
    };
    let report = run_experiment(&model, &ByteTokenizer, &data, Some(&data), &template, cfg.clone()).unwrap();
    assert_eq!(report.pcw.per_seed_scores.len(), 2);
    assert!(report.budget.is_none());

    let ev = Evaluator::new(&model, &ByteTokenizer, &template, &data, Some(&data), cfg).unwrap();
    let w = ev.assign_documents(&data.records[0], 2, 0);
    assert_eq!(
        w,
        vec![vec!["d3".to_string(), "d1".to_string()], vec!["d2".to_string()]]
    );
    let single = ev.assign_documents(&data.records[0], 1, 0);
    assert_eq!(single, vec![vec!["d3".to_string(), "d2".to_string(), "d1".to_string()]]);
}
