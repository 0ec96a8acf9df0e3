//! Independent reference implementations used as test oracles. They favour
//! the most literal formulation over speed or numerical care.
#![allow(dead_code)]

use std::collections::HashMap;

use hialign_core::numerics::{Rng, Tensor};

pub fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// All n-grams of `s`, in order, as owned vectors.
fn ngrams<'a>(s: &[&'a str], n: usize) -> Vec<Vec<&'a str>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= s.len() {
        out.push(s[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn occurrences(list: &[Vec<&str>], g: &[&str]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub struct OracleBleu {
    pub scores: [f64; 4],
    pub precisions: [f64; 4],
    pub bp: f64,
}

/// Corpus BLEU by enumerating every hypothesis n-gram and counting matches
/// with linear scans.
pub fn oracle_bleu(hyps: &[Vec<&str>], refs: &[Vec<&str>]) -> OracleBleu {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hg = ngrams(h, n);
            let rg = ngrams(rf, n);
            let mut seen: Vec<Vec<&str>> = Vec::new();
            for g in &hg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                matched[n - 1] += occurrences(&hg, g).min(occurrences(&rg, g));
            }
            total[n - 1] += hg.len();
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        if total[n] > 0 {
            precisions[n] = matched[n] as f64 / total[n] as f64;
        }
    }
    let bp = if c > r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut scores = [0.0; 4];
    for k in 1..=4 {
        let prod: f64 = precisions[..k].iter().product();
        scores[k - 1] = 100.0 * bp * prod.powf(1.0 / k as f64);
    }
    OracleBleu {
        scores,
        precisions,
        bp,
    }
}

/// Longest common subsequence by memoized recursion.
pub fn oracle_lcs(a: &[&str], b: &[&str]) -> usize {
    fn go(a: &[&str], b: &[&str], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn oracle_rouge_l(hyps: &[Vec<&str>], refs: &[Vec<&str>]) -> f64 {
    let mut sum = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        let l = oracle_lcs(h, r) as f64;
        if l > 0.0 {
            let p = l / h.len() as f64;
            let rc = l / r.len() as f64;
            sum += 2.0 * p * rc / (p + rc);
        }
    }
    sum / hyps.len() as f64
}

/// Presence scores straight from the definition, without max-subtraction.
pub fn oracle_localize(s: &[Vec<f64>], tau_t: f64, tau_u: f64) -> Vec<f64> {
    let t = s.len();
    let u = s[0].len();
    let mut e = vec![0.0; u];
    for col in 0..u {
        let zt: f64 = (0..t).map(|k| (s[k][col] / tau_t).exp()).sum();
        for row in 0..t {
            let zu: f64 = (0..u).map(|k| (s[row][k] / tau_u).exp()).sum();
            e[col] += (s[row][col] / tau_t).exp() / zt * (s[row][col] / tau_u).exp() / zu;
        }
    }
    e
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    dot / (na * nb)
}

/// Symmetric InfoNCE written as the double sum over both directions.
pub fn oracle_align(m: &[Vec<f64>], l: &[Vec<f64>], tau: f64) -> f64 {
    let b = m.len();
    let sim = |i: usize, j: usize| oracle_cosine(&m[i], &l[j]) / tau;
    let mut total = 0.0;
    for i in 0..b {
        let row: f64 = (0..b).map(|j| sim(i, j).exp()).sum();
        let col: f64 = (0..b).map(|j| sim(j, i).exp()).sum();
        total += (sim(i, i).exp() / row).ln() + (sim(i, i).exp() / col).ln();
    }
    -total / (2.0 * b as f64)
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (m, _) = t.dims2().unwrap();
    (0..m).map(|i| t.row(i).to_vec()).collect()
}

/// Random corpus over a small alphabet so that n-gram matches are common.
pub fn random_corpus(rng: &mut Rng, sentences: usize) -> (Vec<Vec<&'static str>>, Vec<Vec<&'static str>>) {
    const WORDS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];
    let sent = |rng: &mut Rng| -> Vec<&'static str> {
        let len = rng.range_inclusive(0, 12);
        (0..len).map(|_| WORDS[rng.below(WORDS.len())]).collect()
    };
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..sentences {
        hyps.push(sent(rng));
        let mut r = sent(rng);
        if r.is_empty() {
            r.push("a");
        }
        refs.push(r);
    }
    (hyps, refs)
}
