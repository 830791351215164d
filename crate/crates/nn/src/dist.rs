//! Categorical sampling and ordered selection without replacement.

use crate::tape::plackett_luce;
use crate::NnError;
use rand::Rng;

/// Tolerance on Σp = 1.
pub const SIMPLEX_TOL: f64 = 1e-9;

pub fn check_simplex(probs: &[f64]) -> Result<(), NnError> {
    if probs.is_empty() {
        return Err(NnError::Simplex("empty distribution".into()));
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(NnError::Simplex(format!("invalid probability {p}")));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(NnError::Simplex(format!("probabilities sum to {s}")));
    }
    Ok(())
}

/// Inverse-CDF draw.
pub fn categorical_sample(probs: &[f64], rng: &mut impl Rng) -> Result<usize, NnError> {
    check_simplex(probs)?;
    Ok(inverse_cdf(probs, 1.0, rng))
}

fn inverse_cdf(weights: &[f64], total: f64, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

pub fn categorical_logprob(probs: &[f64], index: usize) -> Result<f64, NnError> {
    check_simplex(probs)?;
    probs
        .get(index)
        .map(|p| p.ln())
        .ok_or_else(|| NnError::Simplex(format!("index {index} out of {}", probs.len())))
}

/// `k` sequential categorical draws, each renormalized over the indices not
/// yet taken. Zero-probability indices are taken last, lowest first.
pub fn sample_without_replacement(probs: &[f64], k: usize, rng: &mut impl Rng) -> Result<Vec<usize>, NnError> {
    check_simplex(probs)?;
    if k > probs.len() {
        return Err(NnError::Config(format!("cannot select {k} of {}", probs.len())));
    }
    let mut w = probs.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            inverse_cdf(&w, total, rng)
        } else {
            (0..w.len()).find(|i| !out.contains(i)).expect("k <= n")
        };
        out.push(pick);
        w[pick] = 0.0;
    }
    Ok(out)
}

/// The `k` largest entries in decreasing order; ties go to the lower index.
pub fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Every ordered selection of `k` distinct indices with its probability.
pub fn enumerate_ordered(probs: &[f64], k: usize) -> Vec<(Vec<usize>, f64)> {
    fn rec(n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in 0..n {
            if !cur.contains(&i) {
                cur.push(i);
                rec(n, k, cur, out);
                cur.pop();
            }
        }
    }
    let mut all = Vec::new();
    rec(probs.len(), k, &mut Vec::new(), &mut all);
    all.into_iter()
        .map(|s| {
            let p = plackett_luce(probs, &s).exp();
            (s, p)
        })
        .collect()
}
