//! Utility metrics and the membership AUC.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[serde(rename = "rouge1")]
    Rouge1,
    #[serde(rename = "rougeL")]
    RougeL,
    Accuracy,
    MacroF1,
    Mae,
    Rmse,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricKind::Mae | MetricKind::Rmse)
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Rouge1 => "rouge1",
            MetricKind::RougeL => "rougeL",
            MetricKind::Accuracy => "accuracy",
            MetricKind::MacroF1 => "macro_f1",
            MetricKind::Mae => "mae",
            MetricKind::Rmse => "rmse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "rouge1" => MetricKind::Rouge1,
            "rougeL" | "rouge_l" => MetricKind::RougeL,
            "accuracy" => MetricKind::Accuracy,
            "macro_f1" | "f1" => MetricKind::MacroF1,
            "mae" => MetricKind::Mae,
            "rmse" => MetricKind::Rmse,
            other => return Err(Error::Config(format!("unknown metric `{other}`"))),
        })
    }

    /// Set-level value of this metric for generated sequences against references.
    ///
    /// ROUGE variants average per-example scores. Classification metrics treat
    /// each whole sequence as a label. Ordinal metrics read a sequence's value
    /// as the id of its first token (0 when empty).
    pub fn evaluate(self, preds: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<f64> {
        if preds.len() != refs.len() {
            return Err(Error::data(format!(
                "{} predictions for {} references",
                preds.len(),
                refs.len()
            )));
        }
        if preds.is_empty() {
            return Err(Error::data("empty evaluation set"));
        }
        let mean = |f: fn(&[Token], &[Token]) -> Result<f64>| -> Result<f64> {
            let mut total = 0.0;
            for (p, r) in preds.iter().zip(refs) {
                total += f(p, r)?;
            }
            Ok(total / preds.len() as f64)
        };
        let ordinal = |xs: &[Vec<Token>]| -> Vec<f64> {
            xs.iter()
                .map(|s| s.first().copied().unwrap_or(0) as f64)
                .collect()
        };
        Ok(match self {
            MetricKind::Rouge1 => mean(rouge1)?,
            MetricKind::RougeL => mean(rouge_l)?,
            MetricKind::Accuracy => classification_scores(preds, refs)?.accuracy,
            MetricKind::MacroF1 => classification_scores(preds, refs)?.macro_f1,
            MetricKind::Mae => ordinal_scores(&ordinal(preds), &ordinal(refs))?.mae,
            MetricKind::Rmse => ordinal_scores(&ordinal(preds), &ordinal(refs))?.rmse,
        })
    }

    /// Value oriented so that larger is better.
    pub fn score(self, preds: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<f64> {
        let v = self.evaluate(preds, refs)?;
        Ok(if self.higher_is_better() { v } else { -v })
    }

    /// Like [`MetricKind::score`], but tolerates empty reference sequences:
    /// a ROUGE pair with an empty reference scores 1 when the prediction is
    /// also empty and 0 otherwise.
    pub fn similarity(self, preds: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<f64> {
        let lenient = |f: fn(&[Token], &[Token]) -> Result<f64>| -> Result<f64> {
            if preds.len() != refs.len() || preds.is_empty() {
                return Err(Error::data("similarity needs equal, nonempty sequence lists"));
            }
            let mut total = 0.0;
            for (p, r) in preds.iter().zip(refs) {
                total += match (p.is_empty(), r.is_empty()) {
                    (true, true) => 1.0,
                    (false, true) => 0.0,
                    _ => f(p, r)?,
                };
            }
            Ok(total / preds.len() as f64)
        };
        match self {
            MetricKind::Rouge1 => lenient(rouge1),
            MetricKind::RougeL => lenient(rouge_l),
            _ => self.score(preds, refs),
        }
    }
}

/// The objective `f`: one metric, or the sum of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum UtilityMetric {
    Single(MetricKind),
    Sum(MetricKind, MetricKind),
}

impl Default for UtilityMetric {
    fn default() -> Self {
        UtilityMetric::Sum(MetricKind::Rouge1, MetricKind::RougeL)
    }
}

impl UtilityMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once('+') {
            Some((a, b)) => Ok(UtilityMetric::Sum(
                MetricKind::parse(a.trim())?,
                MetricKind::parse(b.trim())?,
            )),
            None => Ok(UtilityMetric::Single(MetricKind::parse(s.trim())?)),
        }
    }

    pub fn components(self) -> Vec<MetricKind> {
        match self {
            UtilityMetric::Single(m) => vec![m],
            UtilityMetric::Sum(a, b) => vec![a, b],
        }
    }

    /// Sum of the component scores (each oriented larger-is-better).
    pub fn score(self, preds: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<f64> {
        let mut total = 0.0;
        for m in self.components() {
            total += m.score(preds, refs)?;
        }
        Ok(total)
    }

    /// Sum of component similarities; see [`MetricKind::similarity`].
    pub fn similarity(self, preds: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<f64> {
        let mut total = 0.0;
        for m in self.components() {
            total += m.similarity(preds, refs)?;
        }
        Ok(total)
    }
}

impl TryFrom<String> for UtilityMetric {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<UtilityMetric> for String {
    fn from(m: UtilityMetric) -> String {
        m.components()
            .iter()
            .map(|k| k.name())
            .collect::<Vec<_>>()
            .join("+")
    }
}

fn f1(overlap: f64, pred_len: usize, ref_len: usize) -> f64 {
    if pred_len == 0 || overlap == 0.0 {
        return 0.0;
    }
    let p = overlap / pred_len as f64;
    let r = overlap / ref_len as f64;
    2.0 * p * r / (p + r)
}

fn counts<T: Eq + Hash + Copy>(xs: &[T]) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for &x in xs {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

/// Unigram-overlap F1 with clipped counts.
pub fn rouge1<T: Eq + Hash + Copy>(pred: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::data("rouge reference must be nonempty"));
    }
    let pc = counts(pred);
    let rc = counts(reference);
    let overlap: usize = pc
        .iter()
        .map(|(t, &n)| n.min(rc.get(t).copied().unwrap_or(0)))
        .sum();
    Ok(f1(overlap as f64, pred.len(), reference.len()))
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS-based F1.
pub fn rouge_l<T: PartialEq>(pred: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::data("rouge reference must be nonempty"));
    }
    Ok(f1(lcs_len(pred, reference) as f64, pred.len(), reference.len()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationScores {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro-F1 over the union of observed labels.
pub fn classification_scores<L: Ord + Clone>(preds: &[L], refs: &[L]) -> Result<ClassificationScores> {
    if preds.len() != refs.len() {
        return Err(Error::data("prediction and reference counts differ"));
    }
    if preds.is_empty() {
        return Err(Error::data("empty label lists"));
    }
    let n = preds.len() as f64;
    let correct = preds.iter().zip(refs).filter(|(p, r)| p == r).count();
    let classes: BTreeSet<&L> = preds.iter().chain(refs).collect();
    let mut f1_sum = 0.0;
    for c in &classes {
        let tp = preds.iter().zip(refs).filter(|(p, r)| p == c && r == c).count() as f64;
        let fp = preds.iter().zip(refs).filter(|(p, r)| p == c && r != c).count() as f64;
        let fn_ = preds.iter().zip(refs).filter(|(p, r)| p != c && r == c).count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(ClassificationScores {
        accuracy: correct as f64 / n,
        macro_f1: f1_sum / classes.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrdinalScores {
    pub mae: f64,
    pub rmse: f64,
}

pub fn ordinal_scores(preds: &[f64], refs: &[f64]) -> Result<OrdinalScores> {
    if preds.len() != refs.len() {
        return Err(Error::data("prediction and reference counts differ"));
    }
    if preds.is_empty() {
        return Err(Error::data("empty value lists"));
    }
    let n = preds.len() as f64;
    let (abs, sq) = preds
        .iter()
        .zip(refs)
        .fold((0.0, 0.0), |(a, s), (p, r)| (a + (p - r).abs(), s + (p - r).powi(2)));
    Ok(OrdinalScores {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
    })
}

/// Mann-Whitney AUC: fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half. Sort-based, `O((n + m) log(n + m))`.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::data("auc needs nonempty positive and negative scores"));
    }
    let mut sorted_neg = neg.to_vec();
    sorted_neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in pos {
        let below = sorted_neg.partition_point(|&x| x < p);
        let not_above = sorted_neg.partition_point(|&x| x <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}
