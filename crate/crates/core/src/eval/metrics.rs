//! Exact match, corpus BLEU@4 and plain CIDEr.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// 1 iff the strings agree after trimming outer whitespace.
pub fn exact_match(pred: &str, gold: &str) -> u8 {
    u8::from(pred.trim() == gold.trim())
}

fn ngrams(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    m
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Corpus BLEU with uniform weights over n = 1..4, no smoothing, and the
/// brevity penalty measured against the closest reference length (shorter wins ties).
pub fn bleu4(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Empty("bleu candidates"));
    }
    if candidates.len() != references.len() {
        return Err(Error::shape("bleu4", &[candidates.len()], &[references.len()]));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Empty("bleu references"));
        }
        let c = words(cand);
        let rs: Vec<Vec<&str>> = refs.iter().map(|r| words(r)).collect();
        c_len += c.len();
        r_len += rs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .expect("references are non-empty");
        for n in 1..=4 {
            let cg = ngrams(&c, n);
            let mut max_ref: HashMap<Vec<String>, usize> = HashMap::new();
            for r in &rs {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cg {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if matched.iter().any(|&m| m == 0) || c_len == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c_len < r_len { (1.0 - r_len as f64 / c_len as f64).exp() } else { 1.0 };
    Ok(bp * log_p.exp())
}

/// Plain CIDEr (no length penalty, no clipping): TF-IDF cosine against each
/// reference, averaged over references and n = 1..4, times 10, averaged over
/// items. Document frequency counts items whose references contain the n-gram.
/// When every IDF of an order is zero (e.g. a one-item corpus) the IDF is taken as 1.
pub fn cider(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Empty("cider candidates"));
    }
    if candidates.len() != references.len() {
        return Err(Error::shape("cider", &[candidates.len()], &[references.len()]));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Empty("cider references"));
    }
    let n_items = candidates.len() as f64;
    let mut per_item = vec![0.0; candidates.len()];
    for n in 1..=4 {
        let cand: Vec<_> = candidates.iter().map(|c| ngrams(&words(c), n)).collect();
        let refs: Vec<Vec<_>> = references
            .iter()
            .map(|rs| rs.iter().map(|r| ngrams(&words(r), n)).collect())
            .collect();
        let mut df: HashMap<&Vec<String>, usize> = HashMap::new();
        for item in &refs {
            let mut seen = std::collections::HashSet::new();
            for r in item {
                for g in r.keys() {
                    if seen.insert(g) {
                        *df.entry(g).or_insert(0) += 1;
                    }
                }
            }
        }
        let floor = df.values().all(|&d| (n_items / d as f64).ln() == 0.0);
        let idf = |g: &Vec<String>| {
            if floor {
                1.0
            } else {
                (n_items / df.get(g).copied().unwrap_or(0).max(1) as f64).ln()
            }
        };
        for (i, c) in cand.iter().enumerate() {
            let cv: HashMap<&Vec<String>, f64> = c.iter().map(|(g, &k)| (g, k as f64 * idf(g))).collect();
            let cn = cv.values().map(|x| x * x).sum::<f64>().sqrt();
            let mut acc = 0.0;
            for r in &refs[i] {
                let rv: HashMap<&Vec<String>, f64> = r.iter().map(|(g, &k)| (g, k as f64 * idf(g))).collect();
                let rn = rv.values().map(|x| x * x).sum::<f64>().sqrt();
                if cn > 0.0 && rn > 0.0 {
                    let dot: f64 = cv.iter().map(|(g, x)| x * rv.get(g).copied().unwrap_or(0.0)).sum();
                    acc += dot / (cn * rn);
                }
            }
            per_item[i] += acc / refs[i].len() as f64;
        }
    }
    Ok(per_item.iter().map(|s| s / 4.0 * 10.0).sum::<f64>() / n_items)
}
