//! Ranking and classification metrics, with macro-averaging over groups.
//!
//! Ties: AP and P/R/F1@K rank by a stable descending sort (input order breaks
//! ties); AUC gives half credit to tied positive/negative pairs. Metrics that
//! are undefined for the given items are errors, never silent zeros.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cut-offs reported for every binary evaluation.
pub const DEFAULT_KS: [usize; 5] = [200, 50, 20, 10, 5];

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredLabel<T> {
    pub score: T,
    pub label: usize,
    pub group: Option<String>,
}

impl<T: Scalar> ScoredLabel<T> {
    pub fn new(score: T, label: usize) -> Self {
        Self {
            score,
            label,
            group: None,
        }
    }

    pub fn grouped(score: T, label: usize, group: impl Into<String>) -> Self {
        Self {
            score,
            label,
            group: Some(group.into()),
        }
    }

    fn is_positive(&self) -> bool {
        self.label == 1
    }
}

fn check_finite<T: Scalar>(items: &[ScoredLabel<T>]) -> Result<()> {
    match items.iter().position(|i| !i.score.is_finite()) {
        Some(p) => Err(Error::Input(format!("score at position {p} is not finite"))),
        None => Ok(()),
    }
}

/// Indices ordered by descending score, ties kept in input order.
fn ranking<T: Scalar>(items: &[ScoredLabel<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .score
            .partial_cmp(&items[a].score)
            .expect("finite scores")
    });
    order
}

fn positives<T: Scalar>(items: &[ScoredLabel<T>]) -> usize {
    items.iter().filter(|i| i.is_positive()).count()
}

/// Non-interpolated average precision: mean precision at the rank of each positive.
pub fn average_precision<T: Scalar>(items: &[ScoredLabel<T>]) -> Result<T> {
    check_finite(items)?;
    let n_pos = positives(items);
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive item".into()));
    }
    let mut hits = 0usize;
    let mut total = T::zero();
    for (rank, &i) in ranking(items).iter().enumerate() {
        if items[i].is_positive() {
            hits += 1;
            total += T::from_count(hits) / T::from_count(rank + 1);
        }
    }
    Ok(total / T::from_count(n_pos))
}

/// Area under the ROC curve via mid-rank sums (Mann–Whitney U).
pub fn roc_auc<T: Scalar>(items: &[ScoredLabel<T>]) -> Result<T> {
    check_finite(items)?;
    let n_pos = positives(items);
    let n_neg = items.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROC AUC needs both positive and negative items".into(),
        ));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].score.partial_cmp(&items[b].score).expect("finite scores"));
    // Ranks doubled so tie midpoints stay integral.
    let mut pos_rank_sum2: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && items[order[end]].score == items[order[start]].score {
            end += 1;
        }
        let mid_rank2 = (start + 1 + end) as u128;
        let pos_in_block = order[start..end].iter().filter(|&&i| items[i].is_positive()).count() as u128;
        pos_rank_sum2 += mid_rank2 * pos_in_block;
        start = end;
    }
    let p = n_pos as u128;
    let u2 = pos_rank_sum2 - p * (p + 1);
    Ok(T::lit(u2 as f64) / (T::lit(2.0) * T::from_count(n_pos) * T::from_count(n_neg)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AtK<T> {
    pub k: usize,
    pub precision: T,
    pub recall: T,
    pub f1: T,
}

fn f1<T: Scalar>(p: T, r: T) -> T {
    if p + r == T::zero() {
        T::zero()
    } else {
        T::lit(2.0) * p * r / (p + r)
    }
}

/// Precision, recall and F1 over the top `min(k, n)` items.
pub fn prf_at_k<T: Scalar>(items: &[ScoredLabel<T>], k: usize) -> Result<AtK<T>> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    check_finite(items)?;
    let n_pos = positives(items);
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("recall@K needs a positive item".into()));
    }
    let cut = k.min(items.len());
    let tp = ranking(items)[..cut].iter().filter(|&&i| items[i].is_positive()).count();
    let precision = T::from_count(tp) / T::from_count(cut);
    let recall = T::from_count(tp) / T::from_count(n_pos);
    Ok(AtK {
        k,
        precision,
        recall,
        f1: f1(precision, recall),
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<T: Scalar>(rows: &[Vec<T>], labels: &[usize]) -> Result<T> {
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(Error::Input(format!(
            "accuracy over {} rows and {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let correct = rows.iter().zip(labels).filter(|(r, &l)| argmax(r) == l).count();
    Ok(T::from_count(correct) / T::from_count(rows.len()))
}

/// Metric bundle for one evaluation set. Undefined metrics are `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport<T> {
    pub n: usize,
    pub n_pos: usize,
    pub avgp: Option<T>,
    pub auc: Option<T>,
    pub accuracy: Option<T>,
    pub at_k: Vec<AtK<T>>,
}

impl<T: Scalar> EvalReport<T> {
    /// Binary report from positive-class scores. Accuracy thresholds at 0.5,
    /// matching argmax over `[1 − s, s]` with ties to class 0.
    pub fn from_scores(items: &[ScoredLabel<T>], ks: &[usize]) -> Result<Self> {
        check_finite(items)?;
        let half = T::lit(0.5);
        let accuracy = (!items.is_empty()).then(|| {
            let correct = items.iter().filter(|i| usize::from(i.score > half) == i.label).count();
            T::from_count(correct) / T::from_count(items.len())
        });
        Ok(Self {
            n: items.len(),
            n_pos: positives(items),
            avgp: average_precision(items).ok(),
            auc: roc_auc(items).ok(),
            accuracy,
            at_k: ks.iter().filter_map(|&k| prf_at_k(items, k).ok()).collect(),
        })
    }

    /// Report from class-probability rows. Ranking metrics are computed only
    /// for two classes, using the class-1 probability as the score.
    pub fn from_probabilities(rows: &[Vec<T>], labels: &[usize], ks: &[usize]) -> Result<Self> {
        let accuracy = accuracy(rows, labels)?;
        if rows[0].len() == 2 {
            let items: Vec<ScoredLabel<T>> = rows.iter().zip(labels).map(|(r, &l)| ScoredLabel::new(r[1], l)).collect();
            let mut report = Self::from_scores(&items, ks)?;
            report.accuracy = Some(accuracy);
            return Ok(report);
        }
        Ok(Self {
            n: rows.len(),
            n_pos: 0,
            avgp: None,
            auc: None,
            accuracy: Some(accuracy),
            at_k: Vec::new(),
        })
    }

    pub fn at(&self, k: usize) -> Option<&AtK<T>> {
        self.at_k.iter().find(|a| a.k == k)
    }

    pub fn to_f64(&self) -> EvalReport<f64> {
        EvalReport {
            n: self.n,
            n_pos: self.n_pos,
            avgp: self.avgp.map(Scalar::as_f64),
            auc: self.auc.map(Scalar::as_f64),
            accuracy: self.accuracy.map(Scalar::as_f64),
            at_k: self
                .at_k
                .iter()
                .map(|a| AtK {
                    k: a.k,
                    precision: a.precision.as_f64(),
                    recall: a.recall.as_f64(),
                    f1: a.f1.as_f64(),
                })
                .collect(),
        }
    }
}

/// Unweighted per-metric means over groups.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacroReport<T> {
    pub groups: Vec<(String, EvalReport<T>)>,
    pub avgp: Option<T>,
    pub auc: Option<T>,
    pub accuracy: Option<T>,
    pub at_k: Vec<AtK<T>>,
    /// Groups left out of the AP/AUC means because those are undefined there.
    pub skipped: Vec<String>,
}

fn mean<T: Scalar>(values: impl Iterator<Item = T>) -> Option<T> {
    let (sum, n) = values.fold((T::zero(), 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / T::from_count(n))
}

impl<T: Scalar> MacroReport<T> {
    pub fn from_reports(groups: Vec<(String, EvalReport<T>)>) -> Result<Self> {
        let any_defined = groups
            .iter()
            .any(|(_, r)| r.avgp.is_some() || r.auc.is_some() || r.accuracy.is_some());
        if !any_defined {
            return Err(Error::UndefinedMetric("no group has a defined metric".into()));
        }
        let skipped = groups
            .iter()
            .filter(|(_, r)| r.avgp.is_none() || r.auc.is_none())
            .map(|(g, _)| g.clone())
            .collect();
        let mut ks: Vec<usize> = groups.iter().flat_map(|(_, r)| r.at_k.iter().map(|a| a.k)).collect();
        ks.sort_unstable_by(|a, b| b.cmp(a));
        ks.dedup();
        let at_k = ks
            .into_iter()
            .map(|k| {
                let rows: Vec<&AtK<T>> = groups.iter().filter_map(|(_, r)| r.at(k)).collect();
                AtK {
                    k,
                    precision: mean(rows.iter().map(|a| a.precision)).expect("non-empty"),
                    recall: mean(rows.iter().map(|a| a.recall)).expect("non-empty"),
                    f1: mean(rows.iter().map(|a| a.f1)).expect("non-empty"),
                }
            })
            .collect();
        Ok(Self {
            avgp: mean(groups.iter().filter_map(|(_, r)| r.avgp)),
            auc: mean(groups.iter().filter_map(|(_, r)| r.auc)),
            accuracy: mean(groups.iter().filter_map(|(_, r)| r.accuracy)),
            at_k,
            skipped,
            groups,
        })
    }
}

/// Groups `items` by group id (missing ids form the group `""`) and
/// macro-averages the per-group binary reports.
pub fn macro_average<T: Scalar>(items: &[ScoredLabel<T>], ks: &[usize]) -> Result<MacroReport<T>> {
    let mut grouped: BTreeMap<String, Vec<ScoredLabel<T>>> = BTreeMap::new();
    for item in items {
        grouped
            .entry(item.group.clone().unwrap_or_default())
            .or_default()
            .push(item.clone());
    }
    let reports = grouped
        .into_iter()
        .map(|(g, its)| EvalReport::from_scores(&its, ks).map(|r| (g, r)))
        .collect::<Result<Vec<_>>>()?;
    MacroReport::from_reports(reports)
}
