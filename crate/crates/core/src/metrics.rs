//! Restoration and QA metrics: sentence BLEU, ROUGE-L, prefix exact match,
//! perplexity, and answer accuracy / exact match / token F1.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::tokenizer::encode;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU with clipped n-gram precisions for `n = 1..=min(max_n, |pred|)`
/// and brevity penalty `exp(min(0, 1 − |ref|/|pred|))`.
pub fn bleu<T: Eq + Hash>(pred: &[T], reference: &[T], max_n: usize) -> f64 {
    let orders = max_n.min(pred.len());
    if orders == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let p = ngram_counts(pred, n);
        let r = ngram_counts(reference, n);
        let matched: usize = p.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        if matched == 0 {
            return 0.0;
        }
        let total = pred.len() + 1 - n;
        log_sum += (matched as f64 / total as f64).ln();
    }
    let bp = (1.0 - reference.len() as f64 / pred.len() as f64).min(0.0);
    (log_sum / orders as f64 + bp).exp()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

pub fn rouge_l<T: PartialEq>(pred: &[T], reference: &[T]) -> RougeL {
    let lcs = lcs_len(pred, reference) as f64;
    let ratio = |d: usize| if d == 0 { 0.0 } else { lcs / d as f64 };
    let (recall, precision) = (ratio(reference.len()), ratio(pred.len()));
    let f1 = if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    };
    RougeL {
        recall,
        precision,
        f1,
    }
}

/// Length of the common prefix divided by `|ref|`.
pub fn prefix_exact_match<T: PartialEq>(pred: &[T], reference: &[T]) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    let prefix = pred.iter().zip(reference).take_while(|(a, b)| a == b).count();
    prefix as f64 / reference.len() as f64
}

/// `exp(mean nll)`.
pub fn perplexity(per_token_nll: &[f64]) -> Result<f64> {
    if per_token_nll.is_empty() {
        return Err(Error::Usage("perplexity of an empty list".into()));
    }
    Ok((per_token_nll.iter().sum::<f64>() / per_token_nll.len() as f64).exp())
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse spaces.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn token_f1(pred: &str, gold: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return f64::from(u8::from(p == g));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &g {
        *counts.entry(w).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaScores {
    pub acc: f64,
    pub em: f64,
    pub f1: f64,
}

pub fn qa_scores(pred: &str, golds: &[String]) -> QaScores {
    let p = normalize_answer(pred);
    if p.is_empty() {
        return QaScores {
            acc: 0.0,
            em: 0.0,
            f1: 0.0,
        };
    }
    let golds: Vec<String> = golds.iter().map(|g| normalize_answer(g)).collect();
    let hit = |f: &dyn Fn(&String) -> bool| f64::from(u8::from(golds.iter().any(f)));
    QaScores {
        acc: hit(&|g| !g.is_empty() && p.contains(g.as_str())),
        em: hit(&|g| *g == p),
        f1: golds.iter().map(|g| token_f1(&p, g)).fold(0.0, f64::max),
    }
}

/// A model output keyed by sample id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Restoration,
    Qa,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "restoration" => Ok(Task::Restoration),
            "qa" => Ok(Task::Qa),
            other => Err(Error::Usage(format!("unknown task `{other}`"))),
        }
    }
}

/// Scores each prediction against the reference record with the same id and
/// appends one aggregate record of means.
pub fn evaluate_batch(task: Task, preds: &[Prediction], refs: &[SampleRecord]) -> Result<Vec<Value>> {
    let by_id: HashMap<&str, &SampleRecord> = refs.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut rows = Vec::with_capacity(preds.len() + 1);
    let mut sums: Vec<(String, f64)> = Vec::new();
    for p in preds {
        let r = by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::Data(format!("no reference for prediction {}", p.id)))?;
        let scores: Vec<(&str, f64)> = match task {
            Task::Restoration => {
                let (pt, rt) = (encode(&p.prediction), encode(&r.context));
                let rl = rouge_l(&pt, &rt);
                vec![
                    ("bleu", bleu(&pt, &rt, 4)),
                    ("rouge_l_f1", rl.f1),
                    ("rouge_l_recall", rl.recall),
                    ("rouge_l_precision", rl.precision),
                    ("prefix_em", prefix_exact_match(&pt, &rt)),
                ]
            }
            Task::Qa => {
                let golds = r
                    .answers
                    .as_ref()
                    .filter(|a| !a.is_empty())
                    .ok_or_else(|| Error::Data(format!("reference {} has no answers", r.id)))?;
                let s = qa_scores(&p.prediction, golds);
                vec![("acc", s.acc), ("em", s.em), ("f1", s.f1)]
            }
        };
        if sums.is_empty() {
            sums = scores.iter().map(|(k, _)| (k.to_string(), 0.0)).collect();
        }
        let mut row = Map::new();
        row.insert("id".into(), Value::from(p.id.clone()));
        for ((k, v), (_, s)) in scores.iter().zip(sums.iter_mut()) {
            row.insert(k.to_string(), Value::from(*v));
            *s += v;
        }
        rows.push(Value::Object(row));
    }
    let mut agg = Map::new();
    agg.insert("id".into(), Value::from("aggregate"));
    agg.insert("count".into(), Value::from(preds.len()));
    for (k, s) in sums {
        agg.insert(k, Value::from(s / preds.len().max(1) as f64));
    }
    if task == Task::Restoration {
        agg.insert("bleu_kind".into(), Value::from("sentence-level mean"));
    }
    agg.insert("bert_score".into(), Value::from("unavailable"));
    rows.push(Value::Object(agg));
    Ok(rows)
}
