//! Self-attention encoder blocks.
//!
//! The encoder layer is post-norm:
//!
//! ```text
//! y   = LayerNorm(x + MultiHeadAttention(x))
//! out = LayerNorm(y + Dense(Elu(Dense(y))))
//! ```
//!
//! Nothing inside a layer depends on row order, so a stack of layers is
//! permutation-equivariant until a [`PositionalEncoding`] is added.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor, Var};

/// Base of the sinusoid wavelengths used by the lens detectors.
pub const PE_BASE: f64 = 12800.0;
/// The base of the original transformer, kept for cross-checks.
pub const PE_BASE_CLASSIC: f64 = 10000.0;

/// Fixed sinusoidal position table.
///
/// `table[pos, 2i] = sin(pos / base^(2i/d_model))` and
/// `table[pos, 2i+1] = cos(pos / base^(2i/d_model))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    d_model: usize,
    max_len: usize,
    base: f64,
    table: Tensor<f64>,
}

/// Builds the table with the detector base of 12800.
pub fn positional_encoding(d_model: usize, max_len: usize) -> Result<PositionalEncoding> {
    PositionalEncoding::with_base(d_model, max_len, PE_BASE)
}

impl PositionalEncoding {
    pub fn with_base(d_model: usize, max_len: usize, base: f64) -> Result<Self> {
        if d_model == 0 || d_model % 2 != 0 {
            return Err(Error::Config(format!("positional encoding needs an even d_model, got {d_model}")));
        }
        if max_len == 0 {
            return Err(Error::Config("positional encoding needs max_len >= 1".into()));
        }
        if !(base > 1.0) {
            return Err(Error::Config(format!("positional encoding base must exceed 1, got {base}")));
        }
        let table = Tensor::from_fn(&[max_len, d_model], |flat| {
            let (pos, col) = (flat / d_model, flat % d_model);
            let two_i = (col - col % 2) as f64;
            let angle = pos as f64 / base.powf(two_i / d_model as f64);
            if col % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        });
        Ok(Self { d_model, max_len, base, table })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn table(&self) -> &Tensor<f64> {
        &self.table
    }

    /// Adds the first `L` rows of the table to an `[L, d_model]` sequence.
    pub fn add_to<'t, F: Scalar>(&self, x: &Var<'t, F>) -> Result<Var<'t, F>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.d_model || shape[0] > self.max_len {
            return dim_err(format!(
                "sequence {shape:?} does not fit a [{}, {}] positional table",
                self.max_len, self.d_model
            ));
        }
        let rows = &self.table.data()[..shape[0] * self.d_model];
        let pe = Tensor::new(shape.clone(), rows.iter().map(|&v| F::of(v)).collect())?;
        x.add(&x.tape().constant(pe))
    }
}

/// How the `d` in an "H heads of dimension d" description is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimReading {
    /// `d` is the total model width shared by all heads.
    Total,
    /// `d` is the width of each head.
    PerHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
}

impl AttentionConfig {
    pub fn new(num_heads: usize, head_dim: usize) -> Result<Self> {
        let cfg = Self { num_heads, head_dim };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Interprets an "`heads` H_`dim`" model description.
    pub fn from_notation(heads: usize, dim: usize, reading: DimReading) -> Result<Self> {
        match reading {
            DimReading::PerHead => Self::new(heads, dim),
            DimReading::Total => {
                if heads == 0 || dim % heads != 0 {
                    return Err(Error::Config(format!("model width {dim} is not divisible by {heads} heads")));
                }
                Self::new(heads, dim / heads)
            }
        }
    }

    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("attention needs at least one head of positive width".into()));
        }
        Ok(())
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V`.
///
/// Accepts `[L, d]` operands or batched `[H, L, d]` operands.
pub fn scaled_dot_attention<'t, F: Scalar>(
    q: &Var<'t, F>,
    k: &Var<'t, F>,
    v: &Var<'t, F>,
) -> Result<Var<'t, F>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let r = qs.len();
    let ok = (r == 2 || r == 3)
        && ks.len() == r
        && vs.len() == r
        && qs[r - 1] == ks[r - 1]
        && ks[r - 2] == vs[r - 2]
        && qs[..r - 2] == ks[..r - 2]
        && ks[..r - 2] == vs[..r - 2];
    if !ok {
        return dim_err(format!("attention shapes Q {qs:?}, K {ks:?}, V {vs:?} are inconsistent"));
    }
    let d_k = qs[r - 1];
    let scores = q.matmul(&k.transpose()?)?.scale(F::of(1.0 / (d_k as f64).sqrt()));
    scores.softmax(r - 1)?.matmul(v)
}

/// Query/key/value/output projections of one multi-head attention block.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub cfg: AttentionConfig,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionWeights {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, cfg: AttentionConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim();
        let mut proj = |name: &str| {
            let w = store.add_xavier(format!("{prefix}.{name}.weight"), &[d, d], d, d, rng);
            let b = store.add_zeros(format!("{prefix}.{name}.bias"), &[d]);
            (w, b)
        };
        let (wq, bq) = proj("query");
        let (wk, bk) = proj("key");
        let (wv, bv) = proj("value");
        let (wo, bo) = proj("output");
        Self { cfg, wq, bq, wk, bk, wv, bv, wo, bo }
    }
}

/// Projects `[L, model_dim]` input to per-head Q, K, V, attends per head,
/// concatenates the heads and applies the output projection.
pub fn multi_head_attention<'t, F: Scalar>(
    x: &Var<'t, F>,
    w: &AttentionWeights,
    p: &Bound<'t, F>,
) -> Result<Var<'t, F>> {
    let shape = x.shape();
    let (h, dh, d) = (w.cfg.num_heads, w.cfg.head_dim, w.cfg.model_dim());
    if shape.len() != 2 || shape[1] != d {
        return dim_err(format!("attention input {shape:?} must be [L, {d}]"));
    }
    let l = shape[0];
    let split = |wt: ParamId, bias: ParamId| -> Result<Var<'t, F>> {
        x.dense(&p.var(wt), &p.var(bias))?.reshape(&[l, h, dh])?.permute(&[1, 0, 2])
    };
    let (q, k, v) = (split(w.wq, w.bq)?, split(w.wk, w.bk)?, split(w.wv, w.bv)?);
    let heads = scaled_dot_attention(&q, &k, &v)?;
    let merged = heads.permute(&[1, 0, 2])?.reshape(&[l, d])?;
    merged.dense(&p.var(w.wo), &p.var(w.bo))
}

/// One post-norm encoder layer: attention and a two-layer ELU feed-forward
/// network, each wrapped in a residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: AttentionWeights,
    pub ffn_in_w: ParamId,
    pub ffn_in_b: ParamId,
    pub ffn_out_w: ParamId,
    pub ffn_out_b: ParamId,
    pub norm1_gamma: ParamId,
    pub norm1_beta: ParamId,
    pub norm2_gamma: ParamId,
    pub norm2_beta: ParamId,
}

impl EncoderLayer {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: AttentionConfig,
        ffn_hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.model_dim();
        let attention = AttentionWeights::new(store, &format!("{prefix}.attention"), cfg, rng);
        let ffn_in_w = store.add_xavier(format!("{prefix}.ffn.0.weight"), &[d, ffn_hidden], d, ffn_hidden, rng);
        let ffn_in_b = store.add_zeros(format!("{prefix}.ffn.0.bias"), &[ffn_hidden]);
        let ffn_out_w = store.add_xavier(format!("{prefix}.ffn.1.weight"), &[ffn_hidden, d], ffn_hidden, d, rng);
        let ffn_out_b = store.add_zeros(format!("{prefix}.ffn.1.bias"), &[d]);
        let norm1_gamma = store.add_ones(format!("{prefix}.norm1.gamma"), &[d]);
        let norm1_beta = store.add_zeros(format!("{prefix}.norm1.beta"), &[d]);
        let norm2_gamma = store.add_ones(format!("{prefix}.norm2.gamma"), &[d]);
        let norm2_beta = store.add_zeros(format!("{prefix}.norm2.beta"), &[d]);
        Self {
            attention,
            ffn_in_w,
            ffn_in_b,
            ffn_out_w,
            ffn_out_b,
            norm1_gamma,
            norm1_beta,
            norm2_gamma,
            norm2_beta,
        }
    }

    pub fn forward<'t, F: Scalar>(&self, x: &Var<'t, F>, p: &Bound<'t, F>) -> Result<Var<'t, F>> {
        encoder_layer_forward(x, self, p)
    }
}

pub fn encoder_layer_forward<'t, F: Scalar>(
    x: &Var<'t, F>,
    layer: &EncoderLayer,
    p: &Bound<'t, F>,
) -> Result<Var<'t, F>> {
    let attended = multi_head_attention(x, &layer.attention, p)?;
    let y = x.add(&attended)?.layer_norm(&p.var(layer.norm1_gamma), &p.var(layer.norm1_beta))?;
    let hidden = y.dense(&p.var(layer.ffn_in_w), &p.var(layer.ffn_in_b))?.elu();
    let ffn = hidden.dense(&p.var(layer.ffn_out_w), &p.var(layer.ffn_out_b))?;
    y.add(&ffn)?.layer_norm(&p.var(layer.norm2_gamma), &p.var(layer.norm2_beta))
}

pub fn encoder_stack_forward<'t, F: Scalar>(
    x: &Var<'t, F>,
    layers: &[EncoderLayer],
    p: &Bound<'t, F>,
) -> Result<Var<'t, F>> {
    if layers.is_empty() {
        return Err(Error::Config("encoder stack needs at least one layer".into()));
    }
    layers.iter().try_fold(*x, |h, layer| encoder_layer_forward(&h, layer, p))
}
