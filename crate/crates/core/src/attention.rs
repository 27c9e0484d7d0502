//! Scaled dot-product attention, multi-head attention, the position-wise
//! feed-forward block and the post-norm residual wrapper.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{init, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionRole {
    #[serde(rename = "enc-SA")]
    EncoderSelf,
    #[serde(rename = "dec-SA")]
    DecoderSelf,
    #[serde(rename = "dec-GA")]
    DecoderGuided,
    #[serde(rename = "umv-GA")]
    MultiViewGuided,
}

impl AttentionRole {
    pub fn tag(self) -> &'static str {
        match self {
            AttentionRole::EncoderSelf => "enc-SA",
            AttentionRole::DecoderSelf => "dec-SA",
            AttentionRole::DecoderGuided => "dec-GA",
            AttentionRole::MultiViewGuided => "umv-GA",
        }
    }
}

/// Attention weights (queries × keys) captured from one head of one block.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub role: AttentionRole,
    pub block: usize,
    pub head: usize,
    /// Secondary view index for multi-view guided attention.
    pub view: Option<usize>,
    pub weights: Tensor<f64>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    role: AttentionRole,
    block: usize,
    head: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    view: Option<usize>,
    shape: [usize; 2],
    weights: Vec<f64>,
}

impl AttentionRecord {
    pub fn to_json_line(&self) -> String {
        let line = RecordLine {
            role: self.role,
            block: self.block,
            head: self.head,
            view: self.view,
            shape: [self.weights.rows(), self.weights.cols()],
            weights: self
                .weights
                .data()
                .iter()
                .map(|w| (w * 1e6).round() / 1e6)
                .collect(),
        };
        serde_json::to_string(&line).expect("record serialises")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let r: RecordLine = serde_json::from_str(line)?;
        Ok(AttentionRecord {
            role: r.role,
            block: r.block,
            head: r.head,
            view: r.view,
            weights: Tensor::matrix(r.shape[0], r.shape[1], r.weights)?,
        })
    }
}

pub fn write_records(out: &mut impl Write, records: &[AttentionRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    Ok(())
}

/// Shared knobs for every attention sublayer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Divide scores by sqrt(d) of the model width instead of sqrt(d_h).
    pub scale_by_model_dim: bool,
    pub use_bias: bool,
    /// Dropout inside the FFN, between the ReLU and the outer layer.
    pub ffn_dropout: f64,
    /// Optional dropout on post-softmax weights.
    pub attn_dropout: f64,
    /// Optional dropout on each sublayer output before the residual add.
    pub residual_dropout: f64,
    pub ln_eps: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: 8,
            scale_by_model_dim: false,
            use_bias: true,
            ffn_dropout: 0.1,
            attn_dropout: 0.0,
            residual_dropout: 0.0,
            ln_eps: 1e-5,
        }
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), init::xavier(rng, fan_in, fan_out));
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Linear { weight, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let xin = tape.shape(x)[tape.shape(x).len() - 1];
        let win = tape.shape(w)[0];
        if xin != win {
            return Err(Error::shape("linear", tape.shape(x), tape.shape(w)));
        }
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, eps)
    }
}

/// Multi-head attention weights. The per-head projections `W_i^Q` etc. are
/// stored side by side as the column blocks of one d × (h·d_h) matrix.
#[derive(Clone, Copy, Debug)]
pub struct MhaParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
}

impl MhaParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        use_bias: bool,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let head_dim = d / heads;
        let inner = heads * head_dim;
        Ok(MhaParams {
            query: Linear::new(store, rng, &format!("{name}.q"), d, inner, use_bias),
            key: Linear::new(store, rng, &format!("{name}.k"), d, inner, use_bias),
            value: Linear::new(store, rng, &format!("{name}.v"), d, inner, use_bias),
            output: Linear::new(store, rng, &format!("{name}.o"), inner, d, use_bias),
            heads,
            head_dim,
            model_dim: d,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub inner: Linear,
    pub outer: Linear,
}

impl FfnParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d: usize,
        d_ff: usize,
        use_bias: bool,
    ) -> Result<Self> {
        if d_ff < d {
            return Err(Error::Config(format!("FFN width {d_ff} is below model width {d}")));
        }
        Ok(FfnParams {
            inner: Linear::new(store, rng, &format!("{name}.inner"), d, d_ff, use_bias),
            outer: Linear::new(store, rng, &format!("{name}.outer"), d_ff, d, use_bias),
        })
    }
}

/// `softmax(Q Kᵀ · scale + mask) V`; returns the attended features and the
/// weight matrix.
pub fn sdpa_scaled<T: Real>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor<T>>,
    scale: T,
) -> Result<(Var, Var)> {
    if tape.shape(q)[1] != tape.shape(k)[1] {
        return Err(Error::shape("sdpa (queries vs keys)", tape.shape(q), tape.shape(k)));
    }
    if tape.shape(k)[0] != tape.shape(v)[0] {
        return Err(Error::shape("sdpa (keys vs values)", tape.shape(k), tape.shape(v)));
    }
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, scale);
    let weights = tape.softmax_rows(scores, mask)?;
    let out = tape.attend(weights, v)?;
    Ok((out, weights))
}

/// Scaled dot-product attention with the 1/sqrt(d) divisor.
pub fn sdpa<T: Real>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor<T>>,
) -> Result<(Var, Var)> {
    let d = tape.shape(q)[1] as f64;
    sdpa_scaled(tape, q, k, v, mask, T::of(1.0 / d.sqrt()))
}

/// `Concat(head_1..head_h) W^O` with `head_i = A(Q W_i^Q, K W_i^K, V W_i^V)`.
pub fn multi_head<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &MhaParams,
    cfg: &AttentionConfig,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let qp = p.query.forward(tape, q)?;
    let kp = p.key.forward(tape, k)?;
    let vp = p.value.forward(tape, v)?;
    let divisor = if cfg.scale_by_model_dim {
        p.model_dim
    } else {
        p.head_dim
    };
    let scale = T::of(1.0 / (divisor as f64).sqrt());
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let start = h * p.head_dim;
        let qh = tape.slice_cols(qp, start, p.head_dim)?;
        let kh = tape.slice_cols(kp, start, p.head_dim)?;
        let vh = tape.slice_cols(vp, start, p.head_dim)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores, mask)?;
        tape.record_attention(h, weights);
        let weights = tape.dropout(weights, cfg.attn_dropout)?;
        heads.push(tape.attend(weights, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    p.output.forward(tape, cat)
}

/// `FC(Dropout(ReLU(FC(x))))`.
pub fn ffn<T: Real>(tape: &mut Tape<'_, T>, p: &FfnParams, cfg: &AttentionConfig, x: Var) -> Result<Var> {
    let h = p.inner.forward(tape, x)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, cfg.ffn_dropout)?;
    p.outer.forward(tape, h)
}

/// Post-norm residual: `LayerNorm(x + sublayer_out)`.
pub fn add_norm<T: Real>(
    tape: &mut Tape<'_, T>,
    ln: &LayerNormParams,
    cfg: &AttentionConfig,
    x: Var,
    sublayer_out: Var,
) -> Result<Var> {
    let s = tape.dropout(sublayer_out, cfg.residual_dropout)?;
    let sum = tape.add(x, s)?;
    ln.forward(tape, sum, cfg.ln_eps)
}
