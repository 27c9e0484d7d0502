//! The full multimodal transformer: an image encoder feeding the caption
//! decoder, with checkpoint save/load.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::decoder::{CaptionDecoder, TemporalMode};
use crate::encoder::{EncoderKind, ImageEncoder};
use crate::error::{Error, Result};
use crate::features::FeatureViews;
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore, Real, Tape, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    /// Number of leading feature views consumed (M).
    pub num_views: usize,
    /// Width dᵢ of each consumed view.
    pub view_dims: Vec<usize>,
    pub primary_view: usize,
    /// Model width d.
    pub d: usize,
    pub d_ff: usize,
    /// Blocks L, shared by encoder and decoder.
    pub layers: usize,
    /// Word-embedding width e.
    pub word_dim: usize,
    /// Temporal-embedder output width d_y.
    pub d_y: usize,
    pub vocab_size: usize,
    /// Max caption length n.
    pub max_len: usize,
    pub temporal: TemporalMode,
    pub attention: AttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::Sv,
            num_views: 1,
            view_dims: vec![2048],
            primary_view: 0,
            d: 512,
            d_ff: 2048,
            layers: 6,
            word_dim: 300,
            d_y: 512,
            vocab_size: 10_000,
            max_len: 16,
            temporal: TemporalMode::Lstm,
            attention: AttentionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.attention.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.attention.heads == 0 || !self.d.is_multiple_of(self.attention.heads) {
            problems.push(format!(
                "d={} is not divisible by h={}",
                self.d, self.attention.heads
            ));
        }
        if self.layers == 0 {
            problems.push("layers must be ≥ 1".to_string());
        }
        if self.num_views == 0 || self.view_dims.len() != self.num_views {
            problems.push(format!(
                "num_views={} but {} view widths given",
                self.num_views,
                self.view_dims.len()
            ));
        }
        if self.encoder == EncoderKind::Sv && self.num_views != 1 {
            problems.push("sv encoder takes exactly one view".to_string());
        }
        if self.primary_view >= self.num_views.max(1) {
            problems.push(format!("primary_view {} out of range", self.primary_view));
        }
        if self.d_ff < self.d {
            problems.push(format!("d_ff={} is below d={}", self.d_ff, self.d));
        }
        if self.vocab_size < 5 {
            problems.push(format!("vocab_size={} is below 5", self.vocab_size));
        }
        if self.max_len < 2 {
            problems.push(format!("max_len={} is below 2", self.max_len));
        }
        if self.word_dim == 0 || self.d_y == 0 {
            problems.push("word_dim and d_y must be positive".to_string());
        }
        for (name, r) in [
            ("ffn_dropout", self.attention.ffn_dropout),
            ("attn_dropout", self.attention.attn_dropout),
            ("residual_dropout", self.attention.residual_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                problems.push(format!("{name}={r} outside [0, 1)"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Encoder output detached from any tape, reusable across decode steps.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub features: Tensor<T>,
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct MtModel<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: ImageEncoder,
    pub decoder: CaptionDecoder,
}

impl<T: Real> MtModel<T> {
    /// Initialises every parameter from `seed`: encoder first, then decoder.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = ImageEncoder::new(
            &mut store,
            &mut rng,
            cfg.encoder,
            &cfg.view_dims,
            cfg.primary_view,
            cfg.d,
            cfg.d_ff,
            cfg.layers,
            &cfg.attention,
        )?;
        let decoder = CaptionDecoder::new(
            &mut store,
            &mut rng,
            cfg.vocab_size,
            cfg.word_dim,
            cfg.d_y,
            cfg.d,
            cfg.d_ff,
            cfg.layers,
            cfg.temporal,
            &cfg.attention,
        )?;
        Ok(MtModel {
            cfg,
            store,
            encoder,
            decoder,
        })
    }

    pub fn cast<U: Real>(&self) -> MtModel<U> {
        MtModel {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Restricts `views` to the ones this model consumes and checks widths.
    pub fn select_views(&self, views: &FeatureViews<T>) -> Result<FeatureViews<T>> {
        let v = views.first(self.cfg.num_views)?;
        for (i, (&want, got)) in self.cfg.view_dims.iter().zip(v.widths()).enumerate() {
            if want != got {
                return Err(Error::Config(format!(
                    "view {i} has feature width {got}, model expects {want}"
                )));
            }
        }
        Ok(v)
    }

    /// Encoder plus decoder on one tape: logits (`ids.len() × d_v`) for every
    /// position of `ids`.
    pub fn forward(&self, tape: &mut Tape<'_, T>, views: &FeatureViews<T>, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.cfg.max_len {
            return Err(Error::Length {
                len: ids.len(),
                max: self.cfg.max_len,
            });
        }
        let views = self.select_views(views)?;
        let enc = self.encoder.encode(tape, &self.cfg.attention, &views)?;
        self.decoder
            .forward(tape, &self.cfg.attention, ids, enc.features, enc.mask.as_deref())
    }

    /// Teacher-forced logits for all positions in one inference pass.
    pub fn decode_train(&self, views: &FeatureViews<T>, inputs: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::inference(&self.store);
        let out = self.forward(&mut tape, views, inputs)?;
        Ok(tape.value(out).clone())
    }

    pub fn encode(&self, views: &FeatureViews<T>) -> Result<Encoded<T>> {
        let views = self.select_views(views)?;
        let mut tape = Tape::inference(&self.store);
        let enc = self.encoder.encode(&mut tape, &self.cfg.attention, &views)?;
        Ok(Encoded {
            features: tape.value(enc.features).clone(),
            mask: enc.mask,
        })
    }

    /// Next-token logits after `prefix` (which starts with `<s>`), given an
    /// already encoded image.
    pub fn step_logits(&self, enc: &Encoded<T>, prefix: &[usize]) -> Result<Vec<T>> {
        let t = prefix.len();
        if t == 0 || t > self.cfg.max_len {
            return Err(Error::Length {
                len: t,
                max: self.cfg.max_len,
            });
        }
        let mut tape = Tape::inference(&self.store);
        let memory = tape.constant(enc.features.clone());
        let logits = self
            .decoder
            .forward(&mut tape, &self.cfg.attention, prefix, memory, enc.mask.as_deref())?;
        Ok(tape.value(logits).row(t - 1).to_vec())
    }

    /// Logits for position `prefix.len()`; recomputes the encoder.
    pub fn decode_step(&self, views: &FeatureViews<T>, prefix: &[usize]) -> Result<Vec<T>> {
        let enc = self.encode(views)?;
        self.step_logits(&enc, prefix)
    }

    /// Forward pass with attention recording on; returns the logits and the
    /// captured attention matrices.
    pub fn forward_recorded(
        &self,
        views: &FeatureViews<T>,
        ids: &[usize],
    ) -> Result<(Tensor<T>, Vec<crate::attention::AttentionRecord>)> {
        let mut tape = Tape::inference(&self.store);
        tape.enable_recording();
        let out = self.forward(&mut tape, views, ids)?;
        let logits = tape.value(out).clone();
        Ok((logits, tape.take_records()))
    }

    pub fn save(&self, path: &Path, extra: &[(String, Tensor<f32>)]) -> Result<()> {
        let mut tensors = self.store.named_f32();
        tensors.extend_from_slice(extra);
        write_checkpoint(path, &tensors)
    }

    /// Loads parameters by name; returns the checkpoint entries that are not
    /// model parameters (optimizer state and the like).
    pub fn load_params(&mut self, path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
        let tensors = read_checkpoint(path)?;
        self.store
            .load_named(&tensors)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(tensors
            .into_iter()
            .filter(|(n, _)| self.store.id(n).is_none())
            .collect())
    }

    pub fn write_config(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(&self.cfg)?;
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

impl MtModel<f32> {
    /// Rebuilds a model from its config JSON and a checkpoint.
    pub fn from_files(config: &Path, checkpoint: &Path) -> Result<Self> {
        let text = fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::format(config, e.to_string()))?;
        let mut m = MtModel::new(cfg, 0)?;
        m.load_params(checkpoint)?;
        Ok(m)
    }
}
