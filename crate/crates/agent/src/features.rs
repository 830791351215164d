//! Dual feature extractor: a phase-competition network per intersection,
//! then a Transformer encoder across intersections.
//!
//! A batch of `B` joint observations over `N` intersections enters as a
//! `(B·N·8)×7` tensor, rows ordered batch, intersection, movement.

use crate::config::ModelConfig;
use rand::Rng;
use tsclab_core::net::standard_phase_table;
use tsclab_core::{Observation, CONTROLLED_MOVEMENTS, FEATURES, PHASES};
use tsclab_nn::{Dense, EncoderLayer, LayerNorm, NnError, ParamStore, PositionalEmbedding, Tape, Tensor, Var};

/// Ordered pairs of distinct phases.
pub const PHASE_PAIRS: usize = PHASES * (PHASES - 1);

/// Stack scaled observations into `(B·N·8)×7`.
pub fn observation_tensor(batch: &[&[Observation]], scale: &[f64; FEATURES]) -> Tensor {
    let n: usize = batch.iter().map(|b| b.len()).sum();
    let mut data = Vec::with_capacity(n * CONTROLLED_MOVEMENTS * FEATURES);
    for joint in batch {
        for obs in joint.iter() {
            for row in &obs.0 {
                data.extend(row.iter().zip(scale).map(|(v, s)| v * s));
            }
        }
    }
    Tensor {
        rows: n * CONTROLLED_MOVEMENTS,
        cols: FEATURES,
        data,
    }
}

/// Movement slots of each phase.
pub fn phase_movements() -> [[usize; 2]; PHASES] {
    let mut out = [[0; 2]; PHASES];
    for (p, phase) in standard_phase_table().iter().enumerate() {
        out[p] = [phase.movements[0].slot(), phase.movements[1].slot()];
    }
    out
}

/// `(p, q)` for every ordered pair of distinct phases, row-major.
pub fn phase_pairs() -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(PHASE_PAIRS);
    for p in 0..PHASES {
        for q in 0..PHASES {
            if p != q {
                pairs.push((p, q));
            }
        }
    }
    pairs
}

/// 1 where the two phases of a pair share no movement, else 0.
pub fn competition_mask() -> Vec<f64> {
    let table = standard_phase_table();
    phase_pairs()
        .iter()
        .map(|&(p, q)| if table[p].shares_movement(&table[q]) { 0.0 } else { 1.0 })
        .collect()
}

#[derive(Clone, Debug)]
struct Frap {
    features: Vec<Dense>,
    relation: Dense,
    combine: Dense,
    norm: LayerNorm,
    out: Dense,
}

#[derive(Clone, Debug)]
struct Encoder {
    input: Dense,
    pos: PositionalEmbedding,
    layers: Vec<EncoderLayer>,
    out: Dense,
}

#[derive(Clone, Debug)]
pub struct Extractor {
    frap: Option<Frap>,
    flat: Option<Dense>,
    encoder: Option<Encoder>,
    mix: Option<Dense>,
    mask: Vec<f64>,
    phases: [[usize; 2]; PHASES],
    relation_channels: usize,
    pub repr_dim: usize,
    pub n: usize,
}

impl Extractor {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, n: usize, rng: &mut impl Rng) -> Result<Self, NnError> {
        let e = cfg.feature_embed;
        let (frap, flat) = if cfg.use_frap {
            let features = (0..FEATURES)
                .map(|k| Dense::new(store, &format!("frap.feature{k}"), 1, e, rng))
                .collect();
            let pair = 2 * FEATURES * e;
            let frap = Frap {
                features,
                relation: Dense::new(store, "frap.relation", pair, cfg.relation_channels, rng),
                combine: Dense::new(store, "frap.combine", cfg.relation_channels, cfg.pair_out_channels, rng),
                norm: LayerNorm::new(store, "frap.norm", PHASE_PAIRS * cfg.pair_out_channels),
                out: Dense::new(store, "frap.out", PHASE_PAIRS * cfg.pair_out_channels, cfg.repr_dim, rng),
            };
            (Some(frap), None)
        } else {
            let d = Dense::new(store, "flat.out", CONTROLLED_MOVEMENTS * FEATURES, cfg.repr_dim, rng);
            (None, Some(d))
        };
        let (encoder, mix) = if cfg.use_transformer {
            let layers = (0..cfg.encoder_layers)
                .map(|l| EncoderLayer::new(store, &format!("encoder.layer{l}"), cfg.model_dim, cfg.heads, cfg.ff_dim, rng))
                .collect::<Result<Vec<_>, _>>()?;
            let enc = Encoder {
                input: Dense::new(store, "encoder.input", cfg.repr_dim, cfg.model_dim, rng),
                pos: PositionalEmbedding::new(store, "encoder.pos", n, cfg.model_dim, rng),
                layers,
                out: Dense::new(store, "encoder.out", cfg.model_dim, cfg.repr_dim, rng),
            };
            (Some(enc), None)
        } else {
            (None, Some(Dense::new(store, "mix.out", cfg.repr_dim, cfg.repr_dim, rng)))
        };
        Ok(Extractor {
            frap,
            flat,
            encoder,
            mix,
            mask: competition_mask(),
            phases: phase_movements(),
            relation_channels: cfg.relation_channels,
            repr_dim: cfg.repr_dim,
            n,
        })
    }

    /// Per-movement embeddings `(B·N·8)×(7·E)`: each feature through its own
    /// scalar map and a sigmoid.
    pub fn movement_embeddings(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let frap = self.frap.as_ref().ok_or_else(|| NnError::Config("phase-competition network disabled".into()))?;
        let mut parts = Vec::with_capacity(FEATURES);
        for (k, d) in frap.features.iter().enumerate() {
            let col = tape.slice_cols(x, k, 1)?;
            let h = d.forward(tape, store, col)?;
            parts.push(tape.sigmoid(h));
        }
        tape.concat_cols(&parts)
    }

    /// Phase embeddings `(B·N·8)×(7·E)`, each the sum of its two movements.
    pub fn phase_embeddings(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let em = self.movement_embeddings(tape, store, x)?;
        let groups = tape.value(em).rows / CONTROLLED_MOVEMENTS;
        let mut first = Vec::with_capacity(groups * PHASES);
        let mut second = Vec::with_capacity(groups * PHASES);
        for g in 0..groups {
            for [a, b] in self.phases {
                first.push(g * CONTROLLED_MOVEMENTS + a);
                second.push(g * CONTROLLED_MOVEMENTS + b);
            }
        }
        let a = tape.gather_rows(em, first)?;
        let b = tape.gather_rows(em, second)?;
        tape.add(a, b)
    }

    /// Phase representation `(B·N)×repr_dim`.
    pub fn phase_repr(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let groups = tape.value(x).rows / CONTROLLED_MOVEMENTS;
        if let Some(flat) = &self.flat {
            let f = tape.reshape(x, groups, CONTROLLED_MOVEMENTS * FEATURES)?;
            return flat.forward(tape, store, f);
        }
        let frap = self.frap.as_ref().ok_or_else(|| NnError::Config("no phase network".into()))?;
        let ep = self.phase_embeddings(tape, store, x)?;
        let pairs = phase_pairs();
        let mut left = Vec::with_capacity(groups * PHASE_PAIRS);
        let mut right = Vec::with_capacity(groups * PHASE_PAIRS);
        for g in 0..groups {
            for &(p, q) in &pairs {
                left.push(g * PHASES + p);
                right.push(g * PHASES + q);
            }
        }
        let l = tape.gather_rows(ep, left)?;
        let r = tape.gather_rows(ep, right)?;
        let volume = tape.concat_cols(&[l, r])?;
        let rel = frap.relation.forward(tape, store, volume)?;
        let rel = tape.relu(rel);
        let c = self.relation_channels;
        let mut mask = Vec::with_capacity(groups * PHASE_PAIRS * c);
        for _ in 0..groups {
            for &m in &self.mask {
                mask.extend(std::iter::repeat_n(m, c));
            }
        }
        let mask = tape.constant(Tensor {
            rows: groups * PHASE_PAIRS,
            cols: c,
            data: mask,
        });
        let masked = tape.mul(rel, mask)?;
        let comb = frap.combine.forward(tape, store, masked)?;
        let flat = tape.reshape(comb, groups, PHASE_PAIRS * frap.combine.output)?;
        let flat = frap.norm.forward(tape, store, flat)?;
        frap.out.forward(tape, store, flat)
    }

    /// Intersection representation `(B·N)×repr_dim` from `(B·N·8)×7` input.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let epr = self.phase_repr(tape, store, x)?;
        if let Some(mix) = &self.mix {
            let h = tape.relu(epr);
            return mix.forward(tape, store, h);
        }
        let enc = self.encoder.as_ref().ok_or_else(|| NnError::Config("no encoder".into()))?;
        let mut h = enc.input.forward(tape, store, epr)?;
        h = enc.pos.forward(tape, store, h, self.n)?;
        for layer in &enc.layers {
            h = layer.forward(tape, store, h, self.n)?;
        }
        enc.out.forward(tape, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_is_symmetric_under_pair_swap() {
        let pairs = phase_pairs();
        let mask = competition_mask();
        for (i, &(p, q)) in pairs.iter().enumerate() {
            let j = pairs.iter().position(|&x| x == (q, p)).unwrap();
            assert_eq!(mask[i], mask[j]);
        }
        // Each phase shares a movement with exactly two others.
        assert_eq!(mask.iter().filter(|m| **m == 0.0).count(), 16);
    }

    #[test]
    fn phase_a_and_e_share_left_turn() {
        let ph = phase_movements();
        assert_eq!(ph[0], [0, 4]);
        assert_eq!(ph[4], [0, 1]);
    }
}
