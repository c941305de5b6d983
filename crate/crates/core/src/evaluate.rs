//! Top-k micro-F1 over seen, unseen and overall queries, plus the
//! per-relation distribution of correct top-1 predictions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::RelationSplit;
use crate::error::{Error, Result};
use crate::inference::{InferenceMode, RankedPrediction};

/// Pooled true positives, false positives and false negatives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn f1(self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

pub type Golds = BTreeMap<String, BTreeSet<String>>;

/// Each query emits its top `k` relations.
pub fn topk_counts<'a>(
    predictions: impl IntoIterator<Item = &'a RankedPrediction>,
    golds: &Golds,
    k: usize,
) -> Result<Counts> {
    let mut c = Counts::default();
    for p in predictions {
        let gold = golds
            .get(&p.query_id)
            .ok_or_else(|| Error::MissingGold(p.query_id.clone()))?;
        if p.candidates.len() < k {
            return Err(Error::Config(format!(
                "query {} has {} candidates, fewer than k = {k}",
                p.query_id,
                p.candidates.len()
            )));
        }
        let emitted: BTreeSet<&str> = p.top(k).iter().map(|s| s.relation_id.as_str()).collect();
        let hits = emitted.iter().filter(|r| gold.contains(**r)).count();
        c.tp += hits;
        c.fp += emitted.len() - hits;
        c.fn_ += gold.len() - hits;
    }
    Ok(c)
}

pub fn micro_f1_topk(predictions: &[RankedPrediction], golds: &Golds, k: usize) -> Result<f64> {
    Ok(topk_counts(predictions, golds, k)?.f1())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub n: usize,
    pub top1: f64,
    pub top2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionEntry {
    /// Queries whose top-1 prediction is this relation and correct.
    pub correct: usize,
    /// Queries with this relation among the gold relations.
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub mode: Option<InferenceMode>,
    pub topk_convention: String,
    pub overall_weighting: String,
    pub straddling_policy: String,
}

impl Default for ReportMetadata {
    fn default() -> Self {
        Self {
            mode: None,
            topk_convention: "each query emits its k highest-ranked relations; F1 = 2TP/(2TP+FP+FN) pooled over queries"
                .into(),
            overall_weighting: "overall = (n_seen*F_seen + n_unseen*F_unseen) / (n_seen + n_unseen)".into(),
            straddling_policy: "queries with gold relations in both splits are scored in both".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seen: SplitScores,
    pub unseen: SplitScores,
    pub overall: SplitScores,
    pub n_seen: usize,
    pub n_unseen: usize,
    /// Query ids counted in both splits.
    pub straddling: Vec<String>,
    /// Unseen relation → top-1 correct count and support.
    pub distribution: BTreeMap<String, DistributionEntry>,
    pub metadata: ReportMetadata,
}

/// `(n_s·F_s + n_u·F_u) / (n_s + n_u)`, 0 when both are empty.
pub fn weighted_overall(n_seen: usize, f_seen: f64, n_unseen: usize, f_unseen: f64) -> f64 {
    let n = n_seen + n_unseen;
    if n == 0 {
        0.0
    } else {
        (n_seen as f64 * f_seen + n_unseen as f64 * f_unseen) / n as f64
    }
}

pub fn evaluate_splits(predictions: &[RankedPrediction], golds: &Golds, split: &RelationSplit) -> Result<EvalReport> {
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    let mut straddling = Vec::new();
    let mut distribution: BTreeMap<String, DistributionEntry> = split
        .unseen
        .iter()
        .map(|r| (r.clone(), DistributionEntry { correct: 0, total: 0 }))
        .collect();
    for p in predictions {
        let gold = golds
            .get(&p.query_id)
            .ok_or_else(|| Error::MissingGold(p.query_id.clone()))?;
        if let Some(r) = gold.iter().find(|r| !split.contains(r)) {
            return Err(Error::InvalidSplit(format!(
                "gold relation `{r}` of query {} is in neither split",
                p.query_id
            )));
        }
        let in_seen = gold.iter().any(|r| split.seen.contains(r));
        let in_unseen = gold.iter().any(|r| split.unseen.contains(r));
        if in_seen {
            seen.push(p);
        }
        if in_unseen {
            unseen.push(p);
        }
        if in_seen && in_unseen {
            straddling.push(p.query_id.clone());
        }
        let top1 = p.top(1).first().map(|s| s.relation_id.as_str());
        for r in gold {
            if let Some(entry) = distribution.get_mut(r) {
                entry.total += 1;
                if top1 == Some(r.as_str()) {
                    entry.correct += 1;
                }
            }
        }
    }
    let scores = |ps: &[&RankedPrediction]| -> Result<SplitScores> {
        Ok(SplitScores {
            n: ps.len(),
            top1: topk_counts(ps.iter().copied(), golds, 1)?.f1(),
            top2: topk_counts(ps.iter().copied(), golds, 2)?.f1(),
        })
    };
    let seen = scores(&seen)?;
    let unseen = scores(&unseen)?;
    let overall = SplitScores {
        n: seen.n + unseen.n,
        top1: weighted_overall(seen.n, seen.top1, unseen.n, unseen.top1),
        top2: weighted_overall(seen.n, seen.top2, unseen.n, unseen.top2),
    };
    straddling.sort();
    Ok(EvalReport {
        n_seen: seen.n,
        n_unseen: unseen.n,
        seen,
        unseen,
        overall,
        straddling,
        distribution,
        metadata: ReportMetadata {
            mode: predictions.first().map(|p| p.mode),
            ..ReportMetadata::default()
        },
    })
}

/// Aligned micro-F1 table (percentages) with top-1 and top-2 columns per
/// setting.
pub fn render_table(rows: &[(String, &EvalReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$}  {:>15}  {:>15}  {:>15}",
        "",
        "Unseen",
        "Seen",
        "Overall"
    );
    let _ = writeln!(
        out,
        "{:<name_w$}  {:>7} {:>7}  {:>7} {:>7}  {:>7} {:>7}",
        "Model", "top-1", "top-2", "top-1", "top-2", "top-1", "top-2"
    );
    for (name, r) in rows {
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>7} {:>7}  {:>7} {:>7}  {:>7} {:>7}",
            name,
            pct(r.unseen.top1),
            pct(r.unseen.top2),
            pct(r.seen.top1),
            pct(r.seen.top2),
            pct(r.overall.top1),
            pct(r.overall.top2)
        );
    }
    if let Some((_, r)) = rows.first() {
        let _ = writeln!(out, "n_unseen = {}, n_seen = {}, straddling = {}", r.n_unseen, r.n_seen, r.straddling.len());
    }
    out
}

/// Per-unseen-relation correct top-1 counts.
pub fn render_distribution(report: &EvalReport) -> String {
    let w = report.distribution.keys().map(String::len).max().unwrap_or(8).max(8);
    let mut out = String::new();
    let _ = writeln!(out, "{:<w$}  {:>7}  {:>7}", "Relation", "Correct", "Total");
    for (r, e) in &report.distribution {
        let _ = writeln!(out, "{:<w$}  {:>7}  {:>7}", r, e.correct, e.total);
    }
    out
}
