//! Resolved run configuration: one JSON document covering model, training,
//! decoding and paths, with `paper` and `desk` profiles as starting points.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mtcap_core::attention::AttentionConfig;
use mtcap_core::data::DatasetManifest;
use mtcap_core::decoder::TemporalMode;
use mtcap_core::decoding::DecodeConfig;
use mtcap_core::encoder::EncoderKind;
use mtcap_core::model::ModelConfig;
use mtcap_core::training::TrainConfig;

/// Block counts explored in the ablation study.
pub const ABLATION_LAYERS: [usize; 5] = [1, 2, 4, 6, 8];

pub const SEED_ENV: &str = "MTCAP_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset root holding `train/`, `val/` and `test/`.
    pub dataset: PathBuf,
    /// Vocabulary file; `<dataset>/vocab.txt` when absent.
    pub vocab: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Reject block counts outside the ablation set.
    pub strict_ablation: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::profile(Profile::Paper)
    }
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => RunConfig {
                seed: 0,
                dataset: PathBuf::from("data"),
                vocab: None,
                out_dir: PathBuf::from("runs/paper"),
                strict_ablation: false,
                model: ModelConfig {
                    view_dims: vec![2048],
                    d: 512,
                    d_ff: 2048,
                    layers: 6,
                    word_dim: 300,
                    d_y: 512,
                    max_len: 16,
                    attention: AttentionConfig {
                        heads: 8,
                        ..AttentionConfig::default()
                    },
                    ..ModelConfig::default()
                },
                train: TrainConfig::default(),
                decode: DecodeConfig::default(),
            },
            Profile::Desk => RunConfig {
                seed: 0,
                dataset: PathBuf::from("data"),
                vocab: None,
                out_dir: PathBuf::from("runs/desk"),
                strict_ablation: false,
                model: ModelConfig {
                    encoder: EncoderKind::Sv,
                    num_views: 1,
                    view_dims: Vec::new(),
                    primary_view: 0,
                    d: 64,
                    d_ff: 256,
                    layers: 2,
                    word_dim: 64,
                    d_y: 64,
                    vocab_size: 0,
                    max_len: 12,
                    temporal: TemporalMode::Lstm,
                    attention: AttentionConfig {
                        heads: 4,
                        ..AttentionConfig::default()
                    },
                },
                train: TrainConfig {
                    xe_epochs: 8,
                    scst_epochs: 0,
                    lr_step: 1e-3,
                    lr_cap: 3e-3,
                    decay_start: 5,
                    decay_every: 2,
                    ..TrainConfig::default()
                },
                decode: DecodeConfig::default(),
            },
        }
    }

    /// Reads a JSON config, filling missing fields from `base`. Object
    /// fields merge recursively, so a file may override a single nested key.
    pub fn load(path: &Path, base: &RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let patch: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Self::merged(base, patch).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn merged(base: &RunConfig, patch: serde_json::Value) -> Result<Self> {
        let mut v = serde_json::to_value(base)?;
        merge(&mut v, patch);
        Ok(serde_json::from_value(v)?)
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| self.dataset.join("vocab.txt"))
    }

    /// Fills dataset-derived fields and checks every constraint, listing
    /// all problems at once.
    pub fn resolve(&mut self, manifest: &DatasetManifest, vocab_size: usize) -> Result<()> {
        self.train.seed = self.seed;
        self.decode.seed = self.seed;
        self.model.vocab_size = vocab_size;
        let m = self.model.num_views;
        let mut problems = Vec::new();
        if m == 0 || m > manifest.view_dims.len() {
            problems.push(format!(
                "num_views={m} but the dataset provides {} views",
                manifest.view_dims.len()
            ));
        } else {
            let dims = manifest.view_dims[..m].to_vec();
            if !self.model.view_dims.is_empty() && self.model.view_dims != dims {
                problems.push(format!(
                    "model.view_dims {:?} disagree with dataset widths {dims:?}",
                    self.model.view_dims
                ));
            }
            self.model.view_dims = dims;
        }
        if self.model.encoder == EncoderKind::Amv && !manifest.aligned {
            problems.push("amv encoder requires an aligned dataset".to_string());
        }
        if self.strict_ablation && !ABLATION_LAYERS.contains(&self.model.layers) {
            problems.push(format!(
                "layers={} not in the ablation set {ABLATION_LAYERS:?}",
                self.model.layers
            ));
        }
        if let Err(e) = self.model.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.decode.validate() {
            problems.push(e.to_string());
        }
        if !problems.is_empty() {
            bail!("invalid run config:\n  - {}", problems.join("\n  - "));
        }
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(aligned: bool) -> DatasetManifest {
        DatasetManifest {
            split: "train".into(),
            ids: vec![],
            features: vec![],
            references: "references.jsonl".into(),
            config_hash: String::new(),
            aligned,
            view_dims: vec![16, 24, 20],
        }
    }

    #[test]
    fn nested_override_keeps_other_fields() {
        let base = RunConfig::profile(Profile::Desk);
        let c = RunConfig::merged(&base, serde_json::json!({"model": {"layers": 3}})).unwrap();
        assert_eq!(c.model.layers, 3);
        assert_eq!(c.model.d, 64);
        assert!(RunConfig::merged(&base, serde_json::json!({"bogus": 1})).is_err());
    }

    #[test]
    fn strict_ablation_rejects_three_blocks() {
        let mut c = RunConfig::profile(Profile::Desk);
        c.model.layers = 3;
        c.strict_ablation = true;
        let err = c.resolve(&manifest(true), 20).unwrap_err().to_string();
        assert!(err.contains("ablation"), "{err}");
        c.model.layers = 4;
        c.resolve(&manifest(true), 20).unwrap();
        assert_eq!(c.model.view_dims, vec![16]);
    }

    #[test]
    fn amv_on_unaligned_data_is_rejected() {
        let mut c = RunConfig::profile(Profile::Desk);
        c.model.encoder = EncoderKind::Amv;
        c.model.num_views = 2;
        assert!(c.resolve(&manifest(false), 20).is_err());
        c.resolve(&manifest(true), 20).unwrap();
        assert_eq!(c.model.view_dims, vec![16, 24]);
    }
}
