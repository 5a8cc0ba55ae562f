//! Exhaustive reference scorers shared by integration and acceptance tests.
//! Nothing here calls into the library under test.

#![allow(dead_code)]

use rand::Rng;

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

pub fn oracle_tokens(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in lowered.chars() {
        if c.is_alphanumeric() {
            cur.push(c);
        } else if !cur.is_empty() {
            out.push(cur.clone());
            cur.clear();
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Score every document against every query token by direct counting.
pub fn brute_force_scores(docs: &[(String, String)], query: &str) -> Vec<(String, f64)> {
    let toks: Vec<Vec<String>> = docs.iter().map(|(_, t)| oracle_tokens(t)).collect();
    let n = docs.len() as f64;
    let avgdl = toks.iter().map(|t| t.len()).sum::<usize>() as f64 / n;
    let q = oracle_tokens(query);
    let df: Vec<f64> = q
        .iter()
        .map(|term| toks.iter().filter(|t| t.contains(term)).count() as f64)
        .collect();
    docs.iter()
        .zip(&toks)
        .map(|((id, _), d)| {
            let dl = d.len() as f64;
            let mut score = 0.0;
            for (term, &df) in q.iter().zip(&df) {
                let tf = d.iter().filter(|t| *t == term).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                let len_norm = if avgdl > 0.0 { dl / avgdl } else { 0.0 };
                score += idf * tf * (K1 + 1.0) / (tf + K1 * (1.0 - B + B * len_norm));
            }
            (id.clone(), score)
        })
        .collect()
}

pub fn brute_force_search(docs: &[(String, String)], query: &str, k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = brute_force_scores(docs, query)
        .into_iter()
        .filter(|(_, s)| *s > 0.0)
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

const VOCAB: &[&str] = &[
    "cat", "dog", "river", "bank", "film", "actor", "deadpool", "sequel", "2018", "may", "the",
    "of", "in", "released", "ryan", "reynolds", "paris", "france", "tower", "Eiffel", "café",
    "naïve", "über", "x", "42", "alpha", "beta", "gamma", "delta", "omega",
];
const PUNCT: &[&str] = &[" ", " ", " ", " ", ", ", ". ", "-", "! ", " (", ") ", "'s "];

fn random_text<R: Rng>(rng: &mut R, max_words: usize) -> String {
    let len = rng.random_range(0..=max_words);
    let mut out = String::new();
    for _ in 0..len {
        let w = VOCAB[rng.random_range(0..VOCAB.len())];
        if rng.random_bool(0.1) {
            out.push_str(&w.to_uppercase());
        } else {
            out.push_str(w);
        }
        out.push_str(PUNCT[rng.random_range(0..PUNCT.len())]);
    }
    out
}

/// A corpus of up to `max_docs` passages with skewed lengths and vocabulary.
pub fn random_corpus<R: Rng>(rng: &mut R, max_docs: usize) -> Vec<(String, String)> {
    let n = rng.random_range(1..=max_docs);
    (0..n)
        .map(|i| {
            let max_words = if rng.random_bool(0.2) { 120 } else { 25 };
            (format!("d{:03}#{}", rng.random_range(0..1000), i), random_text(rng, max_words))
        })
        .collect()
}

pub fn random_query<R: Rng>(rng: &mut R) -> String {
    let mut q = random_text(rng, 5);
    if rng.random_bool(0.3) {
        q.push_str(" zzzunseen");
    }
    q
}
