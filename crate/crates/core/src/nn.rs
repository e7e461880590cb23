//! Transformer building blocks shared by the context, audio and label encoders.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mask, ParamId, ParamStore, Tape, Var};
use crate::tensor::Matrix;

/// Uniform in `±1/sqrt(fan_in)`.
pub fn init_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Fixed sinusoidal position table, `len × dim`.
pub fn sinusoid_positions(len: usize, dim: usize) -> Matrix {
    Matrix::from_fn(len, dim, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, input, output, input));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, output));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Matrix::from_fn(1, dim, |_, _| 1.0));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Scaled dot-product attention split over `heads` column blocks.
///
/// Returns the concatenated head outputs and the per-head weight matrices.
pub fn multi_head(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Arc<Mask>>,
) -> (Var, Vec<Var>) {
    let dim = tape.value(q).cols();
    debug_assert_eq!(dim % heads, 0);
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim);
        let kh = tape.slice_cols(k, h * head_dim, head_dim);
        let vh = tape.slice_cols(v, h * head_dim, head_dim);
        let scores = tape.matmul_bt(qh, kh);
        let scores = tape.scale(scores, scale);
        let w = tape.softmax(scores, mask);
        outs.push(tape.matmul(w, vh));
        weights.push(w);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    };
    (out, weights)
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
            heads,
        }
    }

    /// Attention of `queries` over `memory`; returns the projected output and per-head weights.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        queries: Var,
        memory: Var,
        mask: Option<&Arc<Mask>>,
    ) -> (Var, Vec<Var>) {
        let q = self.query.forward(tape, queries);
        let k = self.key.forward(tape, memory);
        let v = self.value.forward(tape, memory);
        let (mixed, weights) = multi_head(tape, q, k, v, self.heads, mask);
        (self.output.forward(tape, mixed), weights)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let h = self.up.forward(tape, x);
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mask: Option<&Arc<Mask>>) -> Var {
        let n = self.attn_norm.forward(tape, x);
        let (a, _) = self.attn.forward(tape, n, n, mask);
        let x = tape.add(x, a);
        let n = self.ffn_norm.forward(tape, x);
        let f = self.ffn.forward(tape, n);
        tape.add(x, f)
    }
}

#[derive(Clone, Debug, Default)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
}

impl EncoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            layers: (0..layers)
                .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), dim, heads, hidden, rng))
                .collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, mut x: Var, mask: Option<&Arc<Mask>>) -> Var {
        for layer in &self.layers {
            x = layer.forward(tape, x, mask);
        }
        x
    }
}
