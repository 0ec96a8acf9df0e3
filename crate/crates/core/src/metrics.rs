//! Corpus BLEU-1..4 (clipped counts, no smoothing) and ROUGE-L F1.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores for one evaluated split. Field names are the JSON interface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub bp: f64,
    /// Clipped corpus n-gram precisions p_1..p_4.
    pub n: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    /// BLEU-1..BLEU-max_n on the 0–100 scale.
    pub scores: Vec<f64>,
    pub precisions: Vec<f64>,
    pub bp: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<W: Eq + Hash>(tokens: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn bleu<W: Eq + Hash>(hypotheses: &[Vec<W>], references: &[Vec<W>], max_n: usize) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        return Err(Error::Domain(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Domain("BLEU over an empty corpus".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, &k) in &hc {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let precisions: Vec<f64> = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let bp = if c >= r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let scores = (1..=max_n)
        .map(|k| {
            let ps = &precisions[..k];
            if ps.contains(&0.0) {
                0.0
            } else {
                100.0 * bp * (ps.iter().map(|p| p.ln()).sum::<f64>() / k as f64).exp()
            }
        })
        .collect();
    Ok(BleuScore {
        scores,
        precisions,
        bp,
        hyp_len: c,
        ref_len: r,
    })
}

pub fn lcs_length<W: Eq>(a: &[W], b: &[W]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F1.
pub fn rouge_l<W: Eq>(hypothesis: &[W], reference: &[W]) -> f64 {
    let l = lcs_length(hypothesis, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hypothesis.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Unweighted mean of sentence ROUGE-L F1.
pub fn corpus_rouge_l<W: Eq>(hypotheses: &[Vec<W>], references: &[Vec<W>]) -> Result<f64> {
    if hypotheses.len() != references.len() || hypotheses.is_empty() {
        return Err(Error::Domain("ROUGE-L needs equal, non-empty corpora".into()));
    }
    let s: f64 = hypotheses.iter().zip(references).map(|(h, r)| rouge_l(h, r)).sum();
    Ok(s / hypotheses.len() as f64)
}

pub fn evaluate<W: Eq + Hash>(hypotheses: &[Vec<W>], references: &[Vec<W>]) -> Result<EvalReport> {
    let b = bleu(hypotheses, references, 4)?;
    Ok(EvalReport {
        bleu1: b.scores[0],
        bleu2: b.scores[1],
        bleu3: b.scores[2],
        bleu4: b.scores[3],
        rouge_l: corpus_rouge_l(hypotheses, references)?,
        bp: b.bp,
        n: b.precisions,
        count: hypotheses.len(),
    })
}
