//! Caption decoder: vocabulary, teacher-forcing batches, temporal word
//! embedding (LSTM or sinusoidal positions), masked self-attention /
//! image-guided attention blocks and the vocabulary projection.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    add_norm, ffn, multi_head, AttentionConfig, AttentionRole, FfnParams, LayerNormParams,
    Linear, MhaParams,
};
use crate::error::{Error, Result};
use crate::features::key_mask;
use crate::tensor::{init, lstm_cell, LstmParams, ParamId, ParamStore, Real, Tape, Tensor, Var, NEG_INF};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

pub const EMBEDDING_MAGIC: &[u8; 5] = b"MTEMB";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// `tokens[i]` is the token with id `i`; the first four must be the
    /// reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 5 {
            return Err(Error::Data(format!(
                "vocabulary needs at least 5 entries, got {}",
                tokens.len()
            )));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return Err(Error::Data(format!(
                    "vocabulary id {i} must be `{r}`, found `{}`",
                    tokens[i]
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// Maps ids back to words, stopping at `</s>` and skipping `<pad>`/`<s>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Teacher-forcing view of a batch of captions. Each row has exactly `n`
/// positions: inputs start with `<s>`, targets end with `</s>`, both padded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionBatch {
    pub n: usize,
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    /// Number of non-pad target positions (content words + `</s>`).
    pub lengths: Vec<usize>,
}

impl CaptionBatch {
    /// Builds a batch from word-id sequences (no delimiters), truncating each
    /// caption to `n − 1` words.
    pub fn new(captions: &[Vec<usize>], n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("max caption length must be ≥ 2, got {n}")));
        }
        let mut inputs = Vec::with_capacity(captions.len());
        let mut targets = Vec::with_capacity(captions.len());
        let mut lengths = Vec::with_capacity(captions.len());
        for words in captions {
            let words = &words[..words.len().min(n - 1)];
            if let Some(&bad) = words.iter().find(|&&w| w == PAD || w == BOS || w == EOS) {
                return Err(Error::Data(format!("caption contains reserved id {bad}")));
            }
            let mut inp = Vec::with_capacity(n);
            inp.push(BOS);
            inp.extend_from_slice(words);
            inp.resize(n, PAD);
            let mut tgt = words.to_vec();
            tgt.push(EOS);
            tgt.resize(n, PAD);
            inputs.push(inp);
            targets.push(tgt);
            lengths.push(words.len() + 1);
        }
        Ok(CaptionBatch {
            n,
            inputs,
            targets,
            lengths,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn pad_mask(&self, row: usize) -> Vec<bool> {
        (0..self.n).map(|t| t < self.lengths[row]).collect()
    }

    /// Non-pad target count across the batch.
    pub fn num_targets(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// n × n additive mask: 0 where `j ≤ i`, a large negative value above the
/// diagonal.
pub fn causal_mask<T: Real>(n: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            m.set(i, j, T::of(NEG_INF));
        }
    }
    m
}

/// Sinusoidal position table (`rows × width`): sine on even columns, cosine
/// on odd ones, wavelengths growing geometrically up to 10000·2π.
pub fn sinusoid_table<T: Real>(rows: usize, width: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[rows, width]);
    for pos in 0..rows {
        for j in 0..width {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / width as f64);
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            t.set(pos, j, T::of(v));
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalMode {
    Lstm,
    Pe,
}

impl std::str::FromStr for TemporalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(TemporalMode::Lstm),
            "pe" => Ok(TemporalMode::Pe),
            other => Err(Error::Config(format!("unknown temporal embedder `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum TemporalParams {
    Lstm {
        w_x: ParamId,
        w_h: ParamId,
        bias: ParamId,
        hidden: usize,
    },
    Pe {
        proj: Linear,
        width: usize,
    },
}

impl TemporalParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        mode: TemporalMode,
        e: usize,
        d_y: usize,
    ) -> Self {
        match mode {
            TemporalMode::Lstm => {
                let w_x = store.add("dec.lstm.wx", init::xavier(rng, e, 4 * d_y));
                let w_h = store.add("dec.lstm.wh", init::xavier(rng, d_y, 4 * d_y));
                let mut b = Tensor::zeros(&[4 * d_y]);
                for v in &mut b.data_mut()[d_y..2 * d_y] {
                    *v = T::one();
                }
                let bias = store.add("dec.lstm.b", b);
                TemporalParams::Lstm {
                    w_x,
                    w_h,
                    bias,
                    hidden: d_y,
                }
            }
            TemporalMode::Pe => TemporalParams::Pe {
                proj: Linear::new(store, rng, "dec.pe", e, d_y, true),
                width: d_y,
            },
        }
    }

    /// `embedded` is `len × e`; returns `len × d_y`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, embedded: Var) -> Result<Var> {
        let len = tape.shape(embedded)[0];
        match *self {
            TemporalParams::Lstm {
                w_x,
                w_h,
                bias,
                hidden,
            } => {
                let p = LstmParams {
                    w_x: tape.param(w_x),
                    w_h: tape.param(w_h),
                    bias: tape.param(bias),
                };
                let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
                let mut c = tape.constant(Tensor::zeros(&[1, hidden]));
                let mut outs = Vec::with_capacity(len);
                for t in 0..len {
                    let x = tape.slice_rows(embedded, t, 1)?;
                    (h, c) = lstm_cell(tape, x, h, c, &p)?;
                    outs.push(h);
                }
                if outs.len() == 1 {
                    Ok(outs[0])
                } else {
                    tape.concat_rows(&outs)
                }
            }
            TemporalParams::Pe { proj, width } => {
                let y = proj.forward(tape, embedded)?;
                let pe = tape.constant(sinusoid_table(len, width));
                tape.add(y, pe)
            }
        }
    }
}

/// Masked self-attention, image-guided attention and FFN, each wrapped in
/// add-norm.
#[derive(Clone, Copy, Debug)]
pub struct DecoderBlock {
    pub self_attn: MhaParams,
    pub ln_self: LayerNormParams,
    pub guided: MhaParams,
    pub ln_guided: LayerNormParams,
    pub ffn: FfnParams,
    pub ln_ffn: LayerNormParams,
}

impl DecoderBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d: usize,
        d_ff: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        Ok(DecoderBlock {
            self_attn: MhaParams::new(store, rng, &format!("{name}.sa"), d, cfg.heads, cfg.use_bias)?,
            ln_self: LayerNormParams::new(store, &format!("{name}.ln1"), d),
            guided: MhaParams::new(store, rng, &format!("{name}.ga"), d, cfg.heads, cfg.use_bias)?,
            ln_guided: LayerNormParams::new(store, &format!("{name}.ln2"), d),
            ffn: FfnParams::new(store, rng, &format!("{name}.ffn"), d, d_ff, cfg.use_bias)?,
            ln_ffn: LayerNormParams::new(store, &format!("{name}.ln3"), d),
        })
    }

    /// `y` is `len × d`, `memory` is `m × d`. `causal` must be `len × len`
    /// and `objects` (when given) `len × m`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        cfg: &AttentionConfig,
        block: usize,
        y: Var,
        memory: Var,
        causal: &Tensor<T>,
        objects: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let len = tape.shape(y)[0];
        let m = tape.shape(memory)[0];
        if causal.shape() != [len, len] {
            return Err(Error::shape("causal mask", causal.shape(), &[len, len]));
        }
        if let Some(om) = objects {
            if om.shape() != [len, m] {
                return Err(Error::shape("object mask", om.shape(), &[len, m]));
            }
        }
        tape.set_attention_context(AttentionRole::DecoderSelf, block);
        let s = multi_head(tape, &self.self_attn, cfg, y, y, y, Some(causal))?;
        let y = add_norm(tape, &self.ln_self, cfg, y, s)?;
        tape.set_attention_context(AttentionRole::DecoderGuided, block);
        let g = multi_head(tape, &self.guided, cfg, y, memory, memory, objects)?;
        let y = add_norm(tape, &self.ln_guided, cfg, y, g)?;
        let f = ffn(tape, &self.ffn, cfg, y)?;
        add_norm(tape, &self.ln_ffn, cfg, y, f)
    }
}

#[derive(Clone, Debug)]
pub struct CaptionDecoder {
    pub embed: ParamId,
    pub temporal: TemporalParams,
    /// Present only when d_y ≠ d.
    pub adapter: Option<Linear>,
    pub blocks: Vec<DecoderBlock>,
    pub vocab_proj: Linear,
    pub vocab_size: usize,
}

impl CaptionDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        vocab_size: usize,
        e: usize,
        d_y: usize,
        d: usize,
        d_ff: usize,
        layers: usize,
        mode: TemporalMode,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("decoder needs at least one block".into()));
        }
        if vocab_size < 5 {
            return Err(Error::Config(format!("vocabulary size {vocab_size} is below 5")));
        }
        let mut table: Tensor<T> = init::normal(rng, &[vocab_size, e], 0.02);
        table.row_mut(PAD).iter_mut().for_each(|v| *v = T::zero());
        let embed = store.add("dec.embed", table);
        let temporal = TemporalParams::new(store, rng, mode, e, d_y);
        let adapter = (d_y != d).then(|| Linear::new(store, rng, "dec.adapt", d_y, d, true));
        let blocks = (0..layers)
            .map(|l| DecoderBlock::new(store, rng, &format!("dec.block{l}"), d, d_ff, cfg))
            .collect::<Result<Vec<_>>>()?;
        let vocab_proj = Linear::new(store, rng, "dec.out", d, vocab_size, true);
        Ok(CaptionDecoder {
            embed,
            temporal,
            adapter,
            blocks,
            vocab_proj,
            vocab_size,
        })
    }

    /// Word-embedding lookup; `<pad>` maps to the zero vector.
    pub fn embed_tokens<T: Real>(&self, tape: &mut Tape<'_, T>, ids: &[usize]) -> Result<Var> {
        let table = tape.param(self.embed);
        tape.embedding(table, ids, Some(PAD))
    }

    /// Logits (`len × d_v`) for every position of `ids` given the encoded
    /// objects `memory` (`m × d`).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        cfg: &AttentionConfig,
        ids: &[usize],
        memory: Var,
        object_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let len = ids.len();
        let emb = self.embed_tokens(tape, ids)?;
        let mut y = self.temporal.forward(tape, emb)?;
        if let Some(a) = &self.adapter {
            y = a.forward(tape, y)?;
        }
        let causal = causal_mask::<T>(len);
        let objects = object_mask.map(|m| key_mask::<T>(len, m));
        for (l, block) in self.blocks.iter().enumerate() {
            y = block.forward(tape, cfg, l, y, memory, &causal, objects.as_ref())?;
        }
        self.vocab_proj.forward(tape, y)
    }
}

/// Reads an "MTEMB" table: magic, u32 d_v, u32 e, f32 LE rows in vocab order.
pub fn read_embeddings(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = crate::tensor::checkpoint_reader(&bytes, path);
    if r.take(5)? != EMBEDDING_MAGIC {
        return Err(Error::format(path, "bad magic, expected MTEMB"));
    }
    let v = r.u32()? as usize;
    let e = r.u32()? as usize;
    let data = r.f32s(v * e)?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after embedding table"));
    }
    Tensor::matrix(v, e, data).map_err(|err| Error::format(path, err.to_string()))
}

pub fn write_embeddings(path: &Path, table: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(13 + table.len() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&(table.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(table.cols() as u32).to_le_bytes());
    for x in table.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
