//! Top-k collaborator selection: a shared two-layer head maps each
//! intersection representation to a softmax row of the collaborator matrix,
//! from which ordered collaborator sets are drawn without replacement.

use crate::AgentError;
use rand::Rng;
use tsclab_core::{IntersectionId, RoadNetwork};
use tsclab_nn::dist::{sample_without_replacement, top_k};
use tsclab_nn::tape::plackett_luce;
use tsclab_nn::{Dense, NnError, ParamStore, Tape, Var};

/// Init bound of the output layers of the collaborator head and actor.
pub const OUTPUT_INIT: f64 = 0.01;

/// An ordered collaborator set with its joint log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub ids: Vec<usize>,
    pub logprob: f64,
}

#[derive(Clone, Debug)]
pub struct CosHead {
    pub hidden: Dense,
    pub out: Dense,
    pub n: usize,
}

impl CosHead {
    /// The output layer starts near zero so the initial matrix is close to
    /// uniform.
    pub fn new(store: &mut ParamStore, input: usize, hidden: usize, n: usize, rng: &mut impl Rng) -> Self {
        CosHead {
            hidden: Dense::new(store, "cos.hidden", input, hidden, rng),
            out: Dense::uniform(store, "cos.out", hidden, n, OUTPUT_INIT, rng),
            n,
        }
    }

    /// Logits `(B·N)×N`, one row per intersection.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, e_ir: Var) -> Result<Var, NnError> {
        let h = self.hidden.forward(tape, store, e_ir)?;
        let h = tape.relu(h);
        self.out.forward(tape, store, h)
    }

    /// Collaborator matrix rows `(B·N)×N`.
    pub fn matrix(&self, tape: &mut Tape, store: &ParamStore, e_ir: Var) -> Result<Var, NnError> {
        let l = self.logits(tape, store, e_ir)?;
        Ok(tape.softmax(l))
    }
}

/// Sequential draws without replacement, renormalising after each.
pub fn sample_topk(probs: &[f64], k: usize, rng: &mut impl Rng) -> Result<Selection, AgentError> {
    if k == 0 || k > probs.len() {
        return Err(AgentError::Config(format!("k = {k} must lie in 1..={}", probs.len())));
    }
    let ids = sample_without_replacement(probs, k, rng)?;
    let logprob = plackett_luce(probs, &ids);
    Ok(Selection { ids, logprob })
}

/// The `k` most probable indices, ties to the lowest index.
pub fn eval_topk(probs: &[f64], k: usize) -> Result<Selection, AgentError> {
    if k == 0 || k > probs.len() {
        return Err(AgentError::Config(format!("k = {k} must lie in 1..={}", probs.len())));
    }
    let ids = top_k(probs, k);
    let logprob = plackett_luce(probs, &ids);
    Ok(Selection { ids, logprob })
}

/// `(Σ_i M_ii, (1/N²) Σ_ij (M_ij − M_ji)²)` for a row-major `N×N` matrix.
pub fn constraint_terms(m: &[f64], n: usize) -> (f64, f64) {
    let diag = (0..n).map(|i| m[i * n + i]).sum();
    let mut sym = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = m[i * n + j] - m[j * n + i];
            sym += d * d;
        }
    }
    (diag, sym / (n * n) as f64)
}

/// Batch mean of the trace of each stacked `N×N` block of `m`.
pub fn diag_term(tape: &mut Tape, m: Var, n: usize) -> Result<Var, NnError> {
    let rows = tape.value(m).rows;
    let d = tape.pick_per_row(m, (0..rows).map(|r| r % n).collect())?;
    let s = tape.sum(d);
    Ok(tape.scale(s, n as f64 / rows as f64))
}

/// Batch mean of the asymmetry penalty of each stacked `N×N` block.
pub fn sym_term(tape: &mut Tape, m: Var, n: usize) -> Result<Var, NnError> {
    let rows = tape.value(m).rows;
    let blocks = rows / n;
    let flat = tape.reshape(m, rows * n, 1)?;
    let mut idx = Vec::with_capacity(rows * n);
    for b in 0..blocks {
        for i in 0..n {
            for j in 0..n {
                idx.push(b * n * n + j * n + i);
            }
        }
    }
    let t = tape.gather_rows(flat, idx)?;
    let d = tape.sub(flat, t)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / (blocks * n * n) as f64))
}

/// Rows of the stacked representation averaged into each team vector:
/// row `b·N + i` pools `b·N + j` for every `j` in `ids[b·N + i]`.
pub fn team_groups(ids: &[Vec<usize>], n: usize) -> Vec<Vec<usize>> {
    ids.iter()
        .enumerate()
        .map(|(r, sel)| {
            let base = (r / n) * n;
            sel.iter().map(|&j| base + j).collect()
        })
        .collect()
}

/// Intersections within `radius` hops of each node, nearest first then by
/// index, excluding the node itself; a node with none falls back to itself.
pub fn fixed_hop_sets(net: &RoadNetwork, radius: usize) -> Vec<Vec<usize>> {
    (0..net.len())
        .map(|i| {
            let dist = net.hop_distances(IntersectionId(i));
            let mut near: Vec<(usize, usize)> = dist
                .iter()
                .enumerate()
                .filter_map(|(j, d)| d.filter(|&d| j != i && d <= radius).map(|d| (d, j)))
                .collect();
            near.sort_unstable();
            if near.is_empty() {
                vec![i]
            } else {
                near.into_iter().map(|(_, j)| j).collect()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_symmetric_matrices() {
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(constraint_terms(&eye, 3), (3.0, 0.0));
        let s = [0.5, 0.25, 0.25, 0.25, 0.5, 0.25, 0.25, 0.25, 0.5];
        assert_eq!(constraint_terms(&s, 3).1, 0.0);
    }

    #[test]
    fn hand_computed_two_by_two() {
        let (d, s) = constraint_terms(&[0.5, 0.5, 0.1, 0.9], 2);
        assert!((d - 1.4).abs() < 1e-12);
        assert!((s - 0.08).abs() < 1e-12);
    }

    #[test]
    fn eval_topk_orders_and_breaks_ties_low() {
        let p = |l: &[f64]| {
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect::<Vec<_>>()
        };
        assert_eq!(eval_topk(&p(&[0.0, 3.0, 1.0]), 2).unwrap().ids, vec![1, 2]);
        assert_eq!(eval_topk(&p(&[0.0, 0.0, 0.0]), 2).unwrap().ids, vec![0, 1]);
        assert!(eval_topk(&p(&[0.0, 0.0]), 3).is_err());
    }

    #[test]
    fn team_groups_offset_by_block() {
        let g = team_groups(&[vec![1], vec![0, 1], vec![1, 0], vec![0]], 2);
        assert_eq!(g, vec![vec![1], vec![0, 1], vec![3, 2], vec![2]]);
    }
}
