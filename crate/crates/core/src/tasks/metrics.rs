use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{invalid, Error, Result};
use crate::Task;

pub type MetricMap = BTreeMap<String, f64>;

/// Evaluation outputs accumulated over a split.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    /// Probability of class 1 and the true class per instance.
    Binary { scores: Vec<f64>, targets: Vec<usize> },
    /// 1-based rank of the true next user per cascade position.
    Ranking { ranks: Vec<usize> },
}

fn predicted(scores: &[f64]) -> impl Iterator<Item = usize> + '_ {
    scores.iter().map(|p| usize::from(*p > 0.5))
}

fn check_binary(scores: &[f64], targets: &[usize]) -> Result<()> {
    if scores.len() != targets.len() {
        return invalid(format!("{} scores for {} targets", scores.len(), targets.len()));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("no instances".into()));
    }
    if targets.iter().any(|t| *t > 1) {
        return invalid("binary targets must be 0 or 1");
    }
    Ok(())
}

pub fn accuracy(scores: &[f64], targets: &[usize]) -> Result<f64> {
    check_binary(scores, targets)?;
    let hits = predicted(scores).zip(targets).filter(|(p, t)| p == *t).count();
    Ok(hits as f64 / targets.len() as f64)
}

/// F1 of the positive class; 0 when there are no true or predicted positives.
pub fn f1_score(scores: &[f64], targets: &[usize]) -> Result<f64> {
    check_binary(scores, targets)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, t) in predicted(scores).zip(targets) {
        match (p, *t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Mean per-class recall over the classes present in `targets`.
pub fn balanced_accuracy(scores: &[f64], targets: &[usize]) -> Result<f64> {
    check_binary(scores, targets)?;
    let mut recalls = Vec::new();
    for class in 0..2 {
        let members: Vec<usize> = predicted(scores)
            .zip(targets)
            .filter(|(_, t)| **t == class)
            .map(|(p, _)| p)
            .collect();
        if !members.is_empty() {
            recalls.push(members.iter().filter(|p| **p == class).count() as f64 / members.len() as f64);
        }
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Area under the ROC curve via the rank-sum statistic, ties counted as
/// half. Undefined when only one class is present.
pub fn auc(scores: &[f64], targets: &[usize]) -> Result<f64> {
    check_binary(scores, targets)?;
    let pos = targets.iter().filter(|t| **t == 1).count();
    let neg = targets.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in &order[i..=j] {
            ranks[*k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = targets.iter().zip(&ranks).filter(|(t, _)| **t == 1).map(|(_, r)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// 1-based rank of `target` among the non-excluded entries of `probs`;
/// equal scores are ordered by user index.
pub fn rank_of(probs: &[f64], target: usize, excluded: &[usize]) -> Result<usize> {
    if target >= probs.len() || excluded.contains(&target) {
        return invalid(format!("target {target} is not a candidate"));
    }
    let pt = probs[target];
    let ahead = probs
        .iter()
        .enumerate()
        .filter(|(j, p)| !excluded.contains(j) && (**p > pt || (**p == pt && *j < target)))
        .count();
    Ok(ahead + 1)
}

fn check_ranks(ranks: &[usize], k: usize) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::UndefinedMetric("no ranked positions".into()));
    }
    if k == 0 || ranks.contains(&0) {
        return invalid("ranks and cutoffs are 1-based");
    }
    Ok(())
}

pub fn hit_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks, k)?;
    Ok(ranks.iter().filter(|r| **r <= k).count() as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank truncated at `k` (a single relevant item per query).
pub fn map_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks, k)?;
    Ok(ranks.iter().map(|r| if *r <= k { 1.0 / *r as f64 } else { 0.0 }).sum::<f64>() / ranks.len() as f64)
}

/// All reported metrics for a task.
pub fn metric_suite(task: Task, preds: &Predictions) -> Result<MetricMap> {
    let mut m = MetricMap::new();
    match (task, preds) {
        (Task::Graph, Predictions::Binary { scores, targets }) => {
            m.insert("acc".into(), accuracy(scores, targets)?);
            m.insert("f1".into(), f1_score(scores, targets)?);
            m.insert("auc".into(), auc(scores, targets)?);
        }
        (Task::Node, Predictions::Binary { scores, targets }) => {
            m.insert("acc".into(), accuracy(scores, targets)?);
            m.insert("b_acc".into(), balanced_accuracy(scores, targets)?);
            m.insert("f1".into(), f1_score(scores, targets)?);
        }
        (Task::Link, Predictions::Ranking { ranks }) => {
            for k in [10, 100] {
                m.insert(format!("hit@{k}"), hit_at_k(ranks, k)?);
                m.insert(format!("map@{k}"), map_at_k(ranks, k)?);
            }
        }
        _ => return invalid(format!("prediction kind does not match the {task} task")),
    }
    Ok(m)
}

/// The validation metric used for early stopping, with its name.
pub fn primary_metric(task: Task, preds: &Predictions) -> Result<(&'static str, f64)> {
    match (task, preds) {
        (Task::Graph, Predictions::Binary { scores, targets }) => Ok(("acc", accuracy(scores, targets)?)),
        (Task::Node, Predictions::Binary { scores, targets }) => {
            Ok(("b_acc", balanced_accuracy(scores, targets)?))
        }
        (Task::Link, Predictions::Ranking { ranks }) => Ok(("map@100", map_at_k(ranks, 100)?)),
        _ => invalid(format!("prediction kind does not match the {task} task")),
    }
}

pub fn write_metrics_json<W: Write>(w: W, metrics: &MetricMap) -> Result<()> {
    serde_json::to_writer_pretty(w, metrics)?;
    Ok(())
}

/// Header line of metric names followed by one line of values.
pub fn write_metrics_csv<W: Write>(mut w: W, metrics: &MetricMap) -> Result<()> {
    let names: Vec<&str> = metrics.keys().map(String::as_str).collect();
    let values: Vec<String> = metrics.values().map(|v| v.to_string()).collect();
    writeln!(w, "{}", names.join(","))?;
    writeln!(w, "{}", values.join(","))?;
    Ok(())
}
