//! Tagging accuracy, attachment scores and per-relation recall.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{punct_id, Sentence};
use crate::error::{Error, Result};
use crate::model::Task;

/// Recall of one dependency label: fraction of gold arcs with that label whose
/// head was predicted correctly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationRecall {
    pub recall: f64,
    pub gold_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub sentence_count: usize,
    pub token_count: usize,
    /// Tagging accuracy or UAS, depending on `task`.
    pub metric: f64,
    pub per_relation_recall: BTreeMap<String, RelationRecall>,
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(format!("prediction has {a} items, gold has {b}")))
    }
}

/// Correct and total counts, so corpus-level scores are micro-averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn merge(&mut self, other: Tally) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

pub fn tag_tally(pred: &[usize], gold: &[usize]) -> Result<Tally> {
    same_len(pred.len(), gold.len())?;
    Ok(Tally {
        correct: pred.iter().zip(gold).filter(|(p, g)| p == g).count(),
        total: gold.len(),
    })
}

pub fn tagging_accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    tag_tally(pred, gold).map(|t| t.ratio())
}

/// Attachment tally over tokens whose gold tag is not PUNCT.
pub fn uas_tally(pred_heads: &[usize], gold_heads: &[usize], gold_upos: &[usize]) -> Result<Tally> {
    same_len(pred_heads.len(), gold_heads.len())?;
    same_len(gold_upos.len(), gold_heads.len())?;
    let punct = punct_id();
    let mut t = Tally::default();
    for ((p, g), &tag) in pred_heads.iter().zip(gold_heads).zip(gold_upos) {
        if tag == punct {
            continue;
        }
        t.total += 1;
        if p == g {
            t.correct += 1;
        }
    }
    Ok(t)
}

pub fn uas(pred_heads: &[usize], gold_heads: &[usize], gold_upos: &[usize]) -> Result<f64> {
    uas_tally(pred_heads, gold_heads, gold_upos).map(|t| t.ratio())
}

pub fn relation_tally(
    pred_heads: &[usize],
    gold_heads: &[usize],
    gold_deprels: &[String],
    label: &str,
) -> Result<Tally> {
    same_len(pred_heads.len(), gold_heads.len())?;
    same_len(gold_deprels.len(), gold_heads.len())?;
    let mut t = Tally::default();
    for ((p, g), rel) in pred_heads.iter().zip(gold_heads).zip(gold_deprels) {
        if rel == label {
            t.total += 1;
            if p == g {
                t.correct += 1;
            }
        }
    }
    Ok(t)
}

/// `(recall, gold_count)`; a label with no gold arcs reports `(0.0, 0)`.
pub fn relation_recall(
    pred_heads: &[usize],
    gold_heads: &[usize],
    gold_deprels: &[String],
    label: &str,
) -> Result<(f64, usize)> {
    relation_tally(pred_heads, gold_heads, gold_deprels, label).map(|t| (t.ratio(), t.total))
}

/// Mean of the genetic, geographic and syntactic distances.
pub fn language_distance(genetic: f64, geographic: f64, syntactic: f64) -> Result<f64> {
    for (name, v) in [
        ("genetic", genetic),
        ("geographic", geographic),
        ("syntactic", syntactic),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::data(format!("{name} distance {v} is outside [0, 1]")));
        }
    }
    Ok((genetic + geographic + syntactic) / 3.0)
}

/// Scores predicted sentences against gold sentences.
///
/// Relation recall covers every label seen in the gold deprels.
pub fn evaluate(task: Task, pred: &[Sentence], gold: &[Sentence]) -> Result<EvalReport> {
    same_len(pred.len(), gold.len())?;
    let mut metric = Tally::default();
    let mut relations: BTreeMap<String, Tally> = BTreeMap::new();
    let mut token_count = 0;
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(Error::data(format!(
                "sentence {} has {} predicted tokens and {} gold tokens",
                g.sent_id,
                p.len(),
                g.len()
            )));
        }
        token_count += g.len();
        match task {
            Task::Tag => metric.merge(tag_tally(&p.upos, &g.upos)?),
            Task::Parse => {
                let gold_heads = g
                    .heads
                    .as_ref()
                    .ok_or_else(|| Error::data(format!("gold sentence {} has no heads", g.sent_id)))?;
                let pred_heads = p.heads.as_ref().ok_or_else(|| {
                    Error::data(format!("predicted sentence {} has no heads", p.sent_id))
                })?;
                metric.merge(uas_tally(pred_heads, gold_heads, &g.upos)?);
                if let Some(deprels) = &g.deprels {
                    let labels: BTreeSet<&String> = deprels.iter().collect();
                    for label in labels {
                        let t = relation_tally(pred_heads, gold_heads, deprels, label)?;
                        relations.entry(label.clone()).or_default().merge(t);
                    }
                }
            }
        }
    }
    Ok(EvalReport {
        task,
        sentence_count: gold.len(),
        token_count,
        metric: metric.ratio(),
        per_relation_recall: relations
            .into_iter()
            .map(|(label, t)| {
                (
                    label,
                    RelationRecall {
                        recall: t.ratio(),
                        gold_count: t.total,
                    },
                )
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::upos_id;

    fn tags(names: &[&str]) -> Vec<usize> {
        names.iter().map(|n| upos_id(n).unwrap()).collect()
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(tagging_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(tagging_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(tagging_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn uas_cases() {
        let nv = tags(&["NOUN", "VERB"]);
        assert_eq!(uas(&[2, 0], &[2, 0], &nv).unwrap(), 1.0);
        let with_punct = tags(&["NOUN", "VERB", "PUNCT"]);
        assert_eq!(uas(&[2, 0, 1], &[2, 0, 2], &with_punct).unwrap(), 1.0);
        assert_eq!(uas(&[0, 0], &[2, 0], &nv).unwrap(), 0.5);
        assert!(uas(&[0], &[2, 0], &nv).is_err());
    }

    #[test]
    fn relation_recall_cases() {
        let rels: Vec<String> = ["nsubj", "root", "obj"].iter().map(|s| s.to_string()).collect();
        assert_eq!(relation_recall(&[2, 0, 2], &[2, 0, 2], &rels, "case").unwrap(), (0.0, 0));
        assert_eq!(relation_recall(&[2, 0, 2], &[2, 0, 2], &rels, "obj").unwrap(), (1.0, 1));
        let rels2: Vec<String> = ["obj", "root", "obj"].iter().map(|s| s.to_string()).collect();
        assert_eq!(relation_recall(&[3, 0, 2], &[2, 0, 2], &rels2, "obj").unwrap(), (0.5, 2));
    }

    #[test]
    fn distance_is_the_mean() {
        assert_eq!(language_distance(0.0, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(language_distance(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((language_distance(0.9, 0.8, 0.88).unwrap() - 0.86).abs() < 1e-12);
        assert!(language_distance(1.5, 0.0, 0.0).is_err());
    }
}
