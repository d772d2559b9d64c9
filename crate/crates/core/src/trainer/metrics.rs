//! Exact match and Rouge scores over token-id sequences.
//!
//! Tokens are compared as raw ids; there is no stemming or stopword removal.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub exact_match: f64,
    pub rouge1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    #[serde(rename = "rougeLsum")]
    pub rouge_lsum: f64,
}

impl Scores {
    /// Unweighted mean.
    pub fn mean(all: &[Scores]) -> Scores {
        let n = all.len().max(1) as f64;
        let sum = all.iter().fold(Scores::default(), |a, s| Scores {
            exact_match: a.exact_match + s.exact_match,
            rouge1: a.rouge1 + s.rouge1,
            rouge_l: a.rouge_l + s.rouge_l,
            rouge_lsum: a.rouge_lsum + s.rouge_lsum,
        });
        Scores {
            exact_match: sum.exact_match / n,
            rouge1: sum.rouge1 / n,
            rouge_l: sum.rouge_l / n,
            rouge_lsum: sum.rouge_lsum / n,
        }
    }
}

fn f1(hits: usize, pred_len: usize, ref_len: usize) -> f64 {
    if pred_len == 0 && ref_len == 0 {
        return 1.0;
    }
    if hits == 0 {
        return 0.0;
    }
    let p = hits as f64 / pred_len as f64;
    let r = hits as f64 / ref_len as f64;
    2.0 * p * r / (p + r)
}

fn counts(seq: &[u32]) -> HashMap<u32, usize> {
    let mut c = HashMap::new();
    for &t in seq {
        *c.entry(t).or_insert(0) += 1;
    }
    c
}

/// Clipped unigram-overlap F1.
pub fn rouge1(pred: &[u32], reference: &[u32]) -> f64 {
    let rc = counts(reference);
    let hits = counts(pred)
        .iter()
        .map(|(t, &n)| n.min(rc.get(t).copied().unwrap_or(0)))
        .sum();
    f1(hits, pred.len(), reference.len())
}

fn lcs_table(a: &[u32], b: &[u32]) -> Vec<Vec<usize>> {
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            dp[i][j] = if a[i - 1] == b[j - 1] {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    dp
}

pub fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1.
pub fn rouge_l(pred: &[u32], reference: &[u32]) -> f64 {
    f1(lcs_len(pred, reference), pred.len(), reference.len())
}

/// Indices into `reference` of one LCS with `pred`.
fn lcs_ref_indices(reference: &[u32], pred: &[u32]) -> Vec<usize> {
    let dp = lcs_table(reference, pred);
    let (mut i, mut j) = (reference.len(), pred.len());
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if reference[i - 1] == pred[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if dp[i - 1][j] >= dp[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

fn segments(seq: &[u32], newline: Option<u32>) -> Vec<&[u32]> {
    match newline {
        Some(nl) => seq
            .split(|&t| t == nl)
            .filter(|s| !s.is_empty())
            .collect(),
        None => vec![seq],
    }
}

/// Summary-level LCS F1: both sides are split into segments on `newline`;
/// each reference segment scores the union of its LCS hits against every
/// predicted segment, with hits clipped by token counts.
pub fn rouge_lsum(pred: &[u32], reference: &[u32], newline: Option<u32>) -> f64 {
    let ref_segs = segments(reference, newline);
    let pred_segs = segments(pred, newline);
    let ref_len: usize = ref_segs.iter().map(|s| s.len()).sum();
    let pred_len: usize = pred_segs.iter().map(|s| s.len()).sum();
    let mut ref_left = counts(&ref_segs.concat());
    let mut pred_left = counts(&pred_segs.concat());
    let mut hits = 0;
    for r in &ref_segs {
        let mut union: Vec<usize> = pred_segs
            .iter()
            .flat_map(|p| lcs_ref_indices(r, p))
            .collect();
        union.sort_unstable();
        union.dedup();
        for i in union {
            let t = r[i];
            let (Some(a), Some(b)) = (ref_left.get_mut(&t), pred_left.get_mut(&t)) else {
                continue;
            };
            if *a > 0 && *b > 0 {
                *a -= 1;
                *b -= 1;
                hits += 1;
            }
        }
    }
    f1(hits, pred_len, ref_len)
}

pub fn score_pair(pred: &[u32], reference: &[u32], newline: Option<u32>) -> Scores {
    Scores {
        exact_match: f64::from(u8::from(pred == reference)),
        rouge1: rouge1(pred, reference),
        rouge_l: rouge_l(pred, reference),
        rouge_lsum: rouge_lsum(pred, reference, newline),
    }
}

/// Mean scores over paired predictions and references.
pub fn metrics(preds: &[Vec<u32>], refs: &[Vec<u32>], newline: Option<u32>) -> Result<Scores> {
    if refs.is_empty() {
        return Err(Error::Empty("no references to score".into()));
    }
    if preds.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} references",
            preds.len(),
            refs.len()
        )));
    }
    let all: Vec<Scores> = preds
        .iter()
        .zip(refs)
        .map(|(p, r)| score_pair(p, r, newline))
        .collect();
    Ok(Scores::mean(&all))
}
