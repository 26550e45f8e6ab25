//! Ranking and classification metrics.
//!
//! Ranks are 1-based. Candidates with equal scores keep their input order,
//! so a positive tied with an earlier negative ranks below it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// One scored candidate in a ranking list.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: usize,
    pub score: f64,
    pub relevant: bool,
}

/// Candidates for one query, with exactly one relevant entry.
#[derive(Debug, Clone, PartialEq)]
pub struct RankList {
    pub query: usize,
    pub candidates: Vec<Candidate>,
}

impl RankList {
    pub fn new(query: usize, candidates: Vec<Candidate>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Input(format!("ranking list {query} is empty")));
        }
        let positives = candidates.iter().filter(|c| c.relevant).count();
        if positives != 1 {
            return Err(Error::Input(format!("ranking list {query} has {positives} positives, expected exactly 1")));
        }
        Ok(RankList { query, candidates })
    }

    /// 1-based rank of the positive candidate.
    pub fn positive_rank(&self) -> usize {
        let pos = self.candidates.iter().position(|c| c.relevant).expect("validated on construction");
        let s = self.candidates[pos].score;
        let above = self
            .candidates
            .iter()
            .enumerate()
            .filter(|(k, c)| c.score > s || (c.score == s && *k < pos))
            .count();
        above + 1
    }
}

fn nonempty(lists: &[RankList]) -> Result<()> {
    if lists.is_empty() {
        return Err(Error::Input("no ranking lists to evaluate".into()));
    }
    Ok(())
}

/// Fraction of lists whose positive is ranked first.
pub fn p_at_1(lists: &[RankList]) -> Result<f64> {
    nonempty(lists)?;
    let hits = lists.iter().filter(|l| l.positive_rank() == 1).count();
    Ok(hits as f64 / lists.len() as f64)
}

/// Mean reciprocal rank of the positive.
pub fn mrr(lists: &[RankList]) -> Result<f64> {
    nonempty(lists)?;
    Ok(lists.iter().map(|l| 1.0 / l.positive_rank() as f64).sum::<f64>() / lists.len() as f64)
}

pub fn accuracy(preds: &[u8], labels: &[u8]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Input(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::Input("no predictions to evaluate".into()));
    }
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64)
}

/// Scored candidate with the query it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub query: usize,
    pub id: usize,
    pub score: f64,
    pub relevant: bool,
}

/// Group scored candidates by query (ascending query id, candidates in input
/// order) and validate that each group has exactly one positive and
/// `negatives` negatives when given.
pub fn build_ranklists(scored: &[ScoredInstance], negatives: Option<usize>) -> Result<Vec<RankList>> {
    let mut groups: BTreeMap<usize, Vec<Candidate>> = BTreeMap::new();
    for s in scored {
        groups.entry(s.query).or_default().push(Candidate { id: s.id, score: s.score, relevant: s.relevant });
    }
    groups
        .into_iter()
        .map(|(q, cands)| {
            if let Some(k) = negatives {
                let negs = cands.iter().filter(|c| !c.relevant).count();
                if negs != k {
                    return Err(Error::Input(format!("query {q} has {negs} negatives, expected {k}")));
                }
            }
            RankList::new(q, cands)
        })
        .collect()
}

/// Regression quality of predictions against targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionStats {
    pub mse: f64,
    pub mae: f64,
    pub pearson: f64,
    pub n: usize,
}

pub fn regression_stats(preds: &[f64], targets: &[f64]) -> Result<RegressionStats> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Input(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let n = preds.len() as f64;
    let mse = preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let mae = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mp = preds.iter().sum::<f64>() / n;
    let mt = targets.iter().sum::<f64>() / n;
    let cov: f64 = preds.iter().zip(targets).map(|(p, t)| (p - mp) * (t - mt)).sum();
    let vp: f64 = preds.iter().map(|p| (p - mp).powi(2)).sum();
    let vt: f64 = targets.iter().map(|t| (t - mt).powi(2)).sum();
    let pearson = if vp > 0.0 && vt > 0.0 { cov / (vp * vt).sqrt() } else { 0.0 };
    Ok(RegressionStats { mse, mae, pearson, n: preds.len() })
}

/// A named metric value over `n` items.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

pub fn report_text(rows: &[MetricRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(s, "{:<10} {:.6}  (N={})", r.metric, r.value, r.n);
    }
    s
}

pub fn report_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,value,N\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.metric, r.value, r.n);
    }
    s
}
