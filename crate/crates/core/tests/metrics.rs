use structflow::corpus::{parse_conllu_str, Sentence};
use structflow::eval::{evaluate, relation_recall, tagging_accuracy, uas, EvalReport};
use structflow::model::Task;

const GOLD: &str = include_str!("fixtures/gold.conllu");
const PRED: &str = include_str!("fixtures/pred.conllu");

fn load() -> (Vec<Sentence>, Vec<Sentence>) {
    (parse_conllu_str(PRED).unwrap(), parse_conllu_str(GOLD).unwrap())
}

// Hand count over the fixture:
//   tags   4/4 + 1/2 + 4/5 + 4/4 + 3/4                      = 16/19
//   heads  (non-PUNCT) 3/3 + 2/2 + 3/4 + 2/3 + 3/4         = 13/16
//   heads  (all)       3/4 + 2/2 + 3/5 + 3/4 + 3/4         = 14/19

#[test]
fn tagging_accuracy_by_hand() {
    let (pred, gold) = load();
    let report = evaluate(Task::Tag, &pred, &gold).unwrap();
    assert_eq!(report.sentence_count, 5);
    assert_eq!(report.token_count, 19);
    assert!((report.metric - 16.0 / 19.0).abs() < 1e-15);
    assert!(report.per_relation_recall.is_empty());
}

#[test]
fn uas_excludes_punctuation() {
    let (pred, gold) = load();
    let report = evaluate(Task::Parse, &pred, &gold).unwrap();
    assert!((report.metric - 13.0 / 16.0).abs() < 1e-15);
    // s1 gets its only error on the full stop, so it scores perfectly
    let one = uas(
        pred[0].heads.as_ref().unwrap(),
        gold[0].heads.as_ref().unwrap(),
        &gold[0].upos,
    )
    .unwrap();
    assert_eq!(one, 1.0);
}

#[test]
fn relation_recall_by_hand() {
    let (pred, gold) = load();
    let report = evaluate(Task::Parse, &pred, &gold).unwrap();
    let expect = [
        ("advmod", 1, 2),
        ("case", 1, 1),
        ("det", 1, 3),
        ("nsubj", 4, 4),
        ("obj", 1, 1),
        ("punct", 1, 3),
        ("root", 5, 5),
    ];
    assert_eq!(report.per_relation_recall.len(), expect.len());
    for (label, correct, total) in expect {
        let r = report.per_relation_recall[label];
        assert_eq!(r.gold_count, total, "{label}");
        assert!((r.recall - correct as f64 / total as f64).abs() < 1e-15, "{label}");
    }
}

#[test]
fn relation_recall_recomposes_overall_recall() {
    let (pred, gold) = load();
    let report = evaluate(Task::Parse, &pred, &gold).unwrap();
    let (num, den) = report
        .per_relation_recall
        .values()
        .fold((0.0, 0usize), |(n, d), r| (n + r.recall * r.gold_count as f64, d + r.gold_count));
    assert_eq!(den, 19);
    assert!((num / den as f64 - 14.0 / 19.0).abs() < 1e-12);
}

#[test]
fn single_sentence_helpers() {
    let (pred, gold) = load();
    let s = 4;
    let rels = gold[s].deprels.as_ref().unwrap();
    let (r, n) = relation_recall(
        pred[s].heads.as_ref().unwrap(),
        gold[s].heads.as_ref().unwrap(),
        rels,
        "advmod",
    )
    .unwrap();
    assert_eq!((r, n), (0.5, 2));
    assert_eq!(tagging_accuracy(&pred[s].upos, &gold[s].upos).unwrap(), 0.75);
}

#[test]
fn gold_against_itself_is_perfect() {
    let (_, gold) = load();
    for task in [Task::Tag, Task::Parse] {
        assert_eq!(evaluate(task, &gold, &gold).unwrap().metric, 1.0);
    }
}

#[test]
fn sentence_order_does_not_matter() {
    let (mut pred, mut gold) = load();
    let before = evaluate(Task::Parse, &pred, &gold).unwrap();
    pred.reverse();
    gold.reverse();
    pred.swap(0, 2);
    gold.swap(0, 2);
    let after = evaluate(Task::Parse, &pred, &gold).unwrap();
    assert_eq!(before, after);
}

#[test]
fn report_json_round_trips() {
    let (pred, gold) = load();
    let report = evaluate(Task::Parse, &pred, &gold).unwrap();
    let json = serde_json::to_string(&report).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    for key in ["task", "sentence_count", "token_count", "metric", "per_relation_recall"] {
        assert!(value.get(key).is_some(), "{key}");
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let (pred, gold) = load();
    assert!(evaluate(Task::Tag, &pred[..4], &gold).is_err());
    let mut short = pred.clone();
    short[1].tokens.pop();
    short[1].upos.pop();
    short[1].heads = Some(vec![0]);
    assert!(evaluate(Task::Tag, &short, &gold).is_err());
    let mut headless = pred;
    headless[0].heads = None;
    assert!(evaluate(Task::Parse, &headless, &gold).is_err());
}
