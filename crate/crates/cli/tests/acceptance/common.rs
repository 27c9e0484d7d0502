use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mtcap_core::attention::AttentionConfig;
use mtcap_core::decoder::{TemporalMode, RESERVED};
use mtcap_core::encoder::EncoderKind;
use mtcap_core::features::FeatureViews;
use mtcap_core::model::ModelConfig;
use mtcap_core::tensor::Tensor;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Self::new(false, detail)
    }
}

/// Small model for property checks: d=8, h=2, L=2, V=9, n=6, no dropout.
pub fn tiny_cfg(kind: EncoderKind, view_dims: &[usize], temporal: TemporalMode) -> ModelConfig {
    ModelConfig {
        encoder: kind,
        num_views: view_dims.len(),
        view_dims: view_dims.to_vec(),
        primary_view: 0,
        d: 8,
        d_ff: 16,
        layers: 2,
        word_dim: 6,
        d_y: 8,
        vocab_size: 9,
        max_len: 6,
        temporal,
        attention: AttentionConfig {
            heads: 2,
            ffn_dropout: 0.0,
            ..AttentionConfig::default()
        },
    }
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn random_views(rng: &mut ChaCha8Rng, dims: &[usize], rows: &[usize], aligned: bool) -> FeatureViews<f64> {
    let views = dims
        .iter()
        .zip(rows)
        .map(|(&d, &m)| normal_matrix(rng, m, d))
        .collect();
    FeatureViews::new(views, aligned).unwrap()
}

/// Word ids (never reserved) of length `len`.
pub fn random_words(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(RESERVED.len()..vocab)).collect()
}

pub fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
