//! Building blocks shared by the encoder and the decoupled decoder.

use dca_autodiff::{ConvGeometry, Var};
use ndarray::Array2;
use rand::Rng;

use super::params::{xavier, ParamGroup, ParamId, ParamStore, Session};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize, group: ParamGroup) -> Self {
        let weight = store.insert(format!("{name}.weight"), xavier(rng, fan_in, fan_out), group);
        let bias = store.insert(format!("{name}.bias"), Array2::zeros((1, fan_out)), group);
        Self { weight, bias }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.p(self.weight);
        let b = s.p(self.bias);
        let y = s.tape.matmul(x, w);
        s.tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        let gamma = store.insert(format!("{name}.gamma"), Array2::ones((1, dim)), group);
        let beta = store.insert(format!("{name}.beta"), Array2::zeros((1, dim)), group);
        Self { gamma, beta }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let g = s.p(self.gamma);
        let b = s.p(self.beta);
        let n = s.tape.layer_norm_rows(x, LN_EPS);
        let y = s.tape.mul_row(n, g);
        s.tape.add_row(y, b)
    }
}

/// 3×3 convolution over a row-major `(h·w) × c` map.
#[derive(Debug, Clone)]
pub struct Conv {
    pub geometry: ConvGeometry,
    pub linear: Linear,
}

impl Conv {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, geometry: ConvGeometry, out_channels: usize) -> Self {
        let linear = Linear::new(store, rng, name, geometry.patch_len(), out_channels, ParamGroup::Backbone);
        Self { geometry, linear }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let cols = s.tape.im2col(x, self.geometry);
        self.linear.forward(s, cols)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, n_heads: usize) -> Self {
        let g = ParamGroup::Transformer;
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, g),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, g),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, g),
            out: Linear::new(store, rng, &format!("{name}.out"), d, d, g),
            n_heads,
        }
    }

    /// Key and value projections of a token set.
    pub fn project_kv(&self, s: &mut Session, x: Var) -> (Var, Var) {
        (self.k.forward(s, x), self.v.forward(s, x))
    }

    pub fn forward(&self, s: &mut Session, query: Var, keys_values: Var) -> Var {
        let kv = self.project_kv(s, keys_values);
        self.forward_projected(s, query, kv)
    }

    pub fn forward_projected(&self, s: &mut Session, query: Var, (k, v): (Var, Var)) -> Var {
        let q = self.q.forward(s, query);
        let d = s.tape.shape(q).1;
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = s.tape.slice_cols(q, a, b);
            let kh = s.tape.slice_cols(k, a, b);
            let vh = s.tape.slice_cols(v, a, b);
            let scores = s.tape.matmul_t(qh, kh);
            let scores = s.tape.scale(scores, scale);
            let attn = s.tape.softmax_rows(scores);
            heads.push(s.tape.matmul(attn, vh));
        }
        let merged = if heads.len() == 1 { heads[0] } else { s.tape.concat_cols(&heads) };
        self.out.forward(s, merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, hidden: usize) -> Self {
        let g = ParamGroup::Transformer;
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, hidden, g),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d, g),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.fc1.forward(s, x);
        let h = s.tape.relu(h);
        self.fc2.forward(s, h)
    }
}

/// Post-norm encoder block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn: Attention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize, hidden: usize) -> Self {
        let g = ParamGroup::Transformer;
        Self {
            attn: Attention::new(store, rng, &format!("{name}.self_attn"), d, heads),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, g),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, hidden),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, g),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let a = self.attn.forward(s, x, x);
        let x = s.tape.add(x, a);
        let x = self.norm1.forward(s, x);
        let f = self.ffn.forward(s, x);
        let x = s.tape.add(x, f);
        self.norm2.forward(s, x)
    }
}

/// Decoder block shared by the localization and recognition passes.
///
/// Self-attention runs over all input tokens; only the leading `n_query`
/// tokens continue through cross-attention and the feed-forward sublayer.
/// Trailing (semantic) tokens leave the block straight after self-attention.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize, hidden: usize) -> Self {
        let g = ParamGroup::Transformer;
        Self {
            self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), d, heads),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, g),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), d, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, g),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, hidden),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d, g),
        }
    }

    /// Returns `(query tokens, semantic tokens)`; the second is `None` when
    /// the input holds only query tokens.
    pub fn forward(&self, s: &mut Session, tokens: Var, n_query: usize, memory_kv: (Var, Var)) -> (Var, Option<Var>) {
        let total = s.tape.shape(tokens).0;
        let a = self.self_attn.forward(s, tokens, tokens);
        let x = s.tape.add(tokens, a);
        let x = self.norm1.forward(s, x);
        let (queries, semantic) = if total > n_query {
            (s.tape.slice_rows(x, 0, n_query), Some(s.tape.slice_rows(x, n_query, total)))
        } else {
            (x, None)
        };
        let c = self.cross_attn.forward_projected(s, queries, memory_kv);
        let y = s.tape.add(queries, c);
        let y = self.norm2.forward(s, y);
        let f = self.ffn.forward(s, y);
        let y = s.tape.add(y, f);
        (self.norm3.forward(s, y), semantic)
    }
}

/// Three-layer perceptron with ReLU between layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1], ParamGroup::Transformer))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, s: &mut Session, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(s, x);
            if i < last {
                x = s.tape.relu(x);
            }
        }
        x
    }
}

/// Fixed 2-D sinusoidal position code for an `h × w` token grid; the first
/// half of the channels encodes the row, the second half the column.
pub fn sine_position_encoding(h: usize, w: usize, d: usize) -> Array2<f64> {
    let half = d / 2;
    let mut out = Array2::zeros((h * w, d));
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for (offset, pos) in [(0, y), (half, x)] {
                for i in 0..half {
                    let freq = 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
                    let angle = (pos as f64 + 0.5) / freq;
                    out[[row, offset + i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                }
            }
        }
    }
    out
}
