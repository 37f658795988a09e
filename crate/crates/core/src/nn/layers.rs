//! Reusable network building blocks: linear layers, layer norm,
//! multi-head attention, pre-norm transformer blocks, and an LSTM cell.
//!
//! A block owns [`ParamId`]s into a shared [`ParamStore`]; `forward`
//! re-reads parameters through the tape each call, so the same block can
//! be run on many tapes (one per step) without copying weights around.

use ndarray::Array2;

use super::params::{init, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::rng::Rng;

/// Weight initialization choices for [`Linear`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightInit {
    Xavier,
    Zeros,
}

/// Dense layer: y = x W + b with x (N, in), W (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        Self::with_init(store, rng, prefix, in_dim, out_dim, bias, WeightInit::Xavier)
    }

    pub fn with_init(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        weight_init: WeightInit,
    ) -> Self {
        let w = match weight_init {
            WeightInit::Xavier => store.add(
                &format!("{prefix}.w"),
                init::xavier(rng, in_dim, out_dim),
            ),
            WeightInit::Zeros => store.add(&format!("{prefix}.w"), init::zeros(&[in_dim, out_dim])),
        };
        let b = bias.then(|| store.add(&format!("{prefix}.b"), init::zeros(&[out_dim])));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, t: &Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => t.add_row(y, t.param(b)),
            None => y,
        }
    }
}

/// Learnable per-feature affine layer norm.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{prefix}.gamma"), init::ones(&[dim]));
        let beta = store.add(&format!("{prefix}.beta"), init::zeros(&[dim]));
        Self {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &Tape, x: Var) -> Var {
        t.layer_norm_rows(x, t.param(self.gamma), t.param(self.beta), self.eps)
    }
}

/// Multi-head self-attention over a single sequence (T, D).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wqkv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
    pub causal: bool,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
        causal: bool,
    ) -> Self {
        assert_eq!(dim % heads, 0, "dim must divide evenly into heads");
        Self {
            wqkv: Linear::new(store, rng, &format!("{prefix}.qkv"), dim, 3 * dim, true),
            wo: Linear::new(store, rng, &format!("{prefix}.out"), dim, dim, true),
            heads,
            dim,
            causal,
        }
    }

    pub fn forward(&self, t: &Tape, x: Var) -> Var {
        let seq_len = t.shape(x)[0];
        let dh = self.dim / self.heads;
        let qkv = self.wqkv.forward(t, x);
        let mask = self.causal.then(|| {
            let mut m = Array2::<f64>::zeros((seq_len, seq_len));
            for i in 0..seq_len {
                for j in (i + 1)..seq_len {
                    m[[i, j]] = -1e9;
                }
            }
            t.constant(m.into_dyn())
        });
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = t.slice_cols(qkv, h * dh, dh);
            let k = t.slice_cols(qkv, self.dim + h * dh, dh);
            let v = t.slice_cols(qkv, 2 * self.dim + h * dh, dh);
            let kt = t.transpose(k);
            let mut scores = t.matmul(q, kt);
            scores = t.scale(scores, 1.0 / (dh as f64).sqrt());
            if let Some(m) = mask {
                scores = t.add(scores, m);
            }
            let attn = t.softmax_rows(scores);
            head_outs.push(t.matmul(attn, v));
        }
        let merged = t.concat_cols(&head_outs);
        self.wo.forward(t, merged)
    }
}

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
        causal: bool,
    ) -> Self {
        let hidden = 4 * dim;
        Self {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{prefix}.attn"), dim, heads, causal),
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), dim),
            fc1: Linear::new(store, rng, &format!("{prefix}.fc1"), dim, hidden, true),
            fc2: Linear::new(store, rng, &format!("{prefix}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, t: &Tape, x: Var) -> Var {
        let a = self.attn.forward(t, self.ln1.forward(t, x));
        let x = t.add(x, a);
        let h = self.fc1.forward(t, self.ln2.forward(t, x));
        let h = t.gelu(h);
        let m = self.fc2.forward(t, h);
        t.add(x, m)
    }
}

/// Single LSTM cell; state tensors are (1, hidden) rows.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub wx: Linear,
    pub wh: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let wx = Linear::new(store, rng, &format!("{prefix}.wx"), in_dim, 4 * hidden, true);
        let wh = Linear::new(store, rng, &format!("{prefix}.wh"), hidden, 4 * hidden, false);
        // bias the forget gate open so long-range state survives early training
        if let Some(b) = wx.b {
            let bias = store.value_mut(b);
            for j in hidden..2 * hidden {
                bias[[j]] = 1.0;
            }
        }
        Self { wx, wh, hidden }
    }

    /// One step: returns (h', c'). Gate layout along columns: [i, f, g, o].
    pub fn step(&self, t: &Tape, x: Var, h: Var, c: Var) -> (Var, Var) {
        let gates = t.add(self.wx.forward(t, x), self.wh.forward(t, h));
        let hsz = self.hidden;
        let i = t.sigmoid(t.slice_cols(gates, 0, hsz));
        let f = t.sigmoid(t.slice_cols(gates, hsz, hsz));
        let g = t.tanh(t.slice_cols(gates, 2 * hsz, hsz));
        let o = t.sigmoid(t.slice_cols(gates, 3 * hsz, hsz));
        let c_next = t.add(t.mul(f, c), t.mul(i, g));
        let h_next = t.mul(o, t.tanh(c_next));
        (h_next, c_next)
    }
}

/// Classic sinusoidal positional encoding table (len, dim).
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::<f64>::zeros((len, dim));
    for pos in 0..len {
        for i in 0..dim / 2 {
            let rate = (pos as f64) / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            pe[[pos, 2 * i]] = rate.sin();
            pe[[pos, 2 * i + 1]] = rate.cos();
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::IxDyn;

    #[test]
    fn transformer_block_preserves_shape() {
        let mut store = ParamStore::new();
        let mut r = rng::root(7);
        let blk = TransformerBlock::new(&mut store, &mut r, "blk", 16, 4, false);
        let t = Tape::new(&store);
        let x = t.constant(ndarray::ArrayD::from_elem(IxDyn(&[5, 16]), 0.3));
        let y = blk.forward(&t, x);
        assert_eq!(t.shape(y), vec![5, 16]);
    }

    #[test]
    fn causal_attention_ignores_future_tokens() {
        let mut store = ParamStore::new();
        let mut r = rng::root(8);
        let attn = MultiHeadAttention::new(&mut store, &mut r, "a", 8, 2, true);
        let mut x0 = ndarray::ArrayD::from_elem(IxDyn(&[4, 8]), 0.0);
        for (i, v) in x0.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let mut x1 = x0.clone();
        // perturb only the final token
        for j in 0..8 {
            x1[[3, j]] += 5.0;
        }
        let t = Tape::new(&store);
        let y0 = attn.forward(&t, t.constant(x0));
        let y1 = attn.forward(&t, t.constant(x1));
        let v0 = t.value_owned(y0);
        let v1 = t.value_owned(y1);
        for i in 0..3 {
            for j in 0..8 {
                assert!(
                    (v0[[i, j]] - v1[[i, j]]).abs() < 1e-12,
                    "position {i} saw the future"
                );
            }
        }
    }

    #[test]
    fn lstm_step_shapes_and_state_change() {
        let mut store = ParamStore::new();
        let mut r = rng::root(9);
        let cell = LstmCell::new(&mut store, &mut r, "lstm", 6, 10);
        let t = Tape::new(&store);
        let x = t.constant(ndarray::ArrayD::from_elem(IxDyn(&[1, 6]), 0.5));
        let h = t.constant(ndarray::ArrayD::zeros(IxDyn(&[1, 10])));
        let c = t.constant(ndarray::ArrayD::zeros(IxDyn(&[1, 10])));
        let (h1, c1) = cell.step(&t, x, h, c);
        assert_eq!(t.shape(h1), vec![1, 10]);
        assert_eq!(t.shape(c1), vec![1, 10]);
        assert!(t.value_owned(h1).iter().any(|&v| v.abs() > 1e-9));
    }

    #[test]
    fn sinusoidal_encoding_is_bounded_and_distinct() {
        let pe = sinusoidal_encoding(32, 12);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        let r0 = pe.row(0).to_owned();
        let r1 = pe.row(1).to_owned();
        assert!(r0.iter().zip(r1.iter()).any(|(a, b)| (a - b).abs() > 1e-6));
    }
}
