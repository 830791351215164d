//! Layers built on the tape: dense/1×1 conv, layer norm, multi-head
//! self-attention, learned positional embedding, GRU cell and a post-norm
//! Transformer encoder layer.
//!
//! Sequences are stored as stacked rows: a batch of `G` sequences of length
//! `n` is a `(G·n)×d` tensor.

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::NnError;
use rand::Rng;

fn in_layer<T>(layer: &str, r: Result<T, NnError>) -> Result<T, NnError> {
    r.map_err(|e| NnError::Layer {
        layer: layer.to_string(),
        source: Box::new(e),
    })
}

fn expect_cols(layer: &str, tape: &Tape, x: Var, cols: usize) -> Result<(), NnError> {
    let got = tape.value(x).cols;
    if got != cols {
        return Err(NnError::Layer {
            layer: layer.to_string(),
            source: Box::new(NnError::Shape {
                op: "input".into(),
                detail: format!("expected {cols} columns, got {got}"),
            }),
        });
    }
    Ok(())
}

/// Affine map `x·W + b` applied to every row.
#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

/// A 1×1 convolution over positions laid out as rows is a dense map over
/// the channel axis shared across positions.
pub type Conv1x1 = Dense;

impl Dense {
    /// Uniform init in ±1/√input for weights and bias.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Dense::uniform(store, name, input, output, 1.0 / (input as f64).sqrt(), rng)
    }

    /// Uniform init in ±`bound` for weights and bias.
    pub fn uniform(store: &mut ParamStore, name: &str, input: usize, output: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let w = store.add(&format!("{name}.w"), Tensor::uniform(input, output, bound, rng));
        let b = store.add(&format!("{name}.b"), Tensor::uniform(1, output, bound, rng));
        Dense {
            name: name.to_string(),
            w,
            b,
            input,
            output,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        let w = store.add(&format!("{name}.w"), Tensor::zeros(input, output));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(1, output));
        Dense {
            name: name.to_string(),
            w,
            b,
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        expect_cols(&self.name, tape, x, self.input)?;
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xw = in_layer(&self.name, tape.matmul(x, w))?;
        in_layer(&self.name, tape.add_row(xw, b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            name: name.to_string(),
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(1, dim, 1.0)),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(1, dim)),
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        expect_cols(&self.name, tape, x, self.dim)?;
        let n = tape.layer_norm(x, self.eps);
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let s = in_layer(&self.name, tape.mul_row(n, g))?;
        in_layer(&self.name, tape.add_row(s, b))
    }
}

/// Multi-head scaled dot-product self-attention within each sequence.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub name: String,
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self, NnError> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(NnError::Config(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            name: name.to_string(),
            q: Dense::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Dense::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Dense::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Dense::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// `x` holds sequences of `seq_len` rows each.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, seq_len: usize) -> Result<Var, NnError> {
        expect_cols(&self.name, tape, x, self.dim)?;
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = in_layer(&self.name, tape.slice_cols(q, h * dh, dh))?;
            let kh = in_layer(&self.name, tape.slice_cols(k, h * dh, dh))?;
            let vh = in_layer(&self.name, tape.slice_cols(v, h * dh, dh))?;
            let s = in_layer(&self.name, tape.block_matmul_nt(qh, kh, seq_len))?;
            let s = tape.scale(s, scale);
            let p = tape.softmax(s);
            outs.push(in_layer(&self.name, tape.block_matmul(p, vh, seq_len))?);
        }
        let cat = in_layer(&self.name, tape.concat_cols(&outs))?;
        self.o.forward(tape, store, cat)
    }
}

/// Learned table of `max_len` position vectors added to each sequence.
#[derive(Clone, Debug)]
pub struct PositionalEmbedding {
    pub name: String,
    pub table: ParamId,
    pub max_len: usize,
    pub dim: usize,
}

impl PositionalEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, max_len: usize, dim: usize, rng: &mut impl Rng) -> Self {
        PositionalEmbedding {
            name: name.to_string(),
            table: store.add(&format!("{name}.table"), Tensor::uniform(max_len, dim, 0.02, rng)),
            max_len,
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, seq_len: usize) -> Result<Var, NnError> {
        expect_cols(&self.name, tape, x, self.dim)?;
        if seq_len > self.max_len {
            return Err(NnError::Config(format!("{}: sequence length {seq_len} exceeds {}", self.name, self.max_len)));
        }
        let rows = tape.value(x).rows;
        let t = tape.param(store, self.table);
        let idx = (0..rows).map(|r| r % seq_len.max(1)).collect();
        let pos = in_layer(&self.name, tape.gather_rows(t, idx))?;
        in_layer(&self.name, tape.add(x, pos))
    }
}

/// Gated recurrent unit: r, z gates and candidate n as in the usual
/// formulation `h' = (1 − z)⊙n + z⊙h`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub name: String,
    pub wx: Dense,
    pub wh: Dense,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        GruCell {
            name: name.to_string(),
            wx: Dense::new(store, &format!("{name}.x"), input, 3 * hidden, rng),
            wh: Dense::new(store, &format!("{name}.h"), hidden, 3 * hidden, rng),
            input,
            hidden,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var, NnError> {
        expect_cols(&self.name, tape, x, self.input)?;
        expect_cols(&self.name, tape, h, self.hidden)?;
        let n = self.hidden;
        let gx = self.wx.forward(tape, store, x)?;
        let gh = self.wh.forward(tape, store, h)?;
        let l = &self.name;
        let xr = in_layer(l, tape.slice_cols(gx, 0, n))?;
        let xz = in_layer(l, tape.slice_cols(gx, n, n))?;
        let xn = in_layer(l, tape.slice_cols(gx, 2 * n, n))?;
        let hr = in_layer(l, tape.slice_cols(gh, 0, n))?;
        let hz = in_layer(l, tape.slice_cols(gh, n, n))?;
        let hn = in_layer(l, tape.slice_cols(gh, 2 * n, n))?;
        let r = in_layer(l, tape.add(xr, hr))?;
        let r = tape.sigmoid(r);
        let z = in_layer(l, tape.add(xz, hz))?;
        let z = tape.sigmoid(z);
        let rh = in_layer(l, tape.mul(r, hn))?;
        let cand = in_layer(l, tape.add(xn, rh))?;
        let cand = tape.tanh(cand);
        let diff = in_layer(l, tape.sub(h, cand))?;
        let zd = in_layer(l, tape.mul(z, diff))?;
        in_layer(l, tape.add(cand, zd))
    }
}

/// Post-norm encoder block: `x = LN(x + MHA(x)); x = LN(x + FF(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ff: usize, rng: &mut impl Rng) -> Result<Self, NnError> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ff1: Dense::new(store, &format!("{name}.ff1"), dim, ff, rng),
            ff2: Dense::new(store, &format!("{name}.ff2"), ff, dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, seq_len: usize) -> Result<Var, NnError> {
        let a = self.attn.forward(tape, store, x, seq_len)?;
        let r = tape.add(x, a)?;
        let x1 = self.ln1.forward(tape, store, r)?;
        let f = self.ff1.forward(tape, store, x1)?;
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, store, f)?;
        let r2 = tape.add(x1, f)?;
        self.ln2.forward(tape, store, r2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_dense_gives_zero_output() {
        let mut store = ParamStore::new();
        let d = Dense::zeros(&mut store, "d", 3, 2);
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(4, 3, 1.7));
        let y = d.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.value(y), &Tensor::zeros(4, 2));
    }

    #[test]
    fn shape_error_names_the_layer() {
        let mut store = ParamStore::new();
        let d = Dense::zeros(&mut store, "actor.head", 3, 2);
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(1, 4));
        let err = d.forward(&mut t, &store, x).unwrap_err();
        assert!(err.to_string().contains("actor.head"), "{err}");
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut rng).unwrap();
        for d in [&mha.q, &mha.k, &mha.v, &mha.o] {
            *store.get_mut(d.w) = Tensor::eye(8);
            *store.get_mut(d.b) = Tensor::zeros(1, 8);
        }
        let x = Tensor::uniform(3, 8, 1.0, &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = mha.forward(&mut t, &store, xv, 1).unwrap();
        assert!(t.value(y).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn gru_zero_in_zero_state_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, "gru", 4, 5, &mut rng);
        *store.get_mut(gru.wx.b) = Tensor::zeros(1, 15);
        *store.get_mut(gru.wh.b) = Tensor::zeros(1, 15);
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(2, 4));
        let h = t.constant(Tensor::zeros(2, 5));
        let y = gru.forward(&mut t, &store, x, h).unwrap();
        assert_eq!(t.value(y), &Tensor::zeros(2, 5));
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, "m", 10, 3, &mut rng).is_err());
    }
}
