//! Caption generation: greedy, multinomial sampling and beam search over any
//! model exposing next-token log-probabilities.

use std::cmp::Ordering;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{Encoded, MtModel};
use crate::tensor::Real;

/// Anything that can score the next token after a prefix.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    /// Maximum number of generated tokens (including `</s>`).
    fn max_len(&self) -> usize;
    /// Log-probabilities over the vocabulary for the position after
    /// `prefix`. The prefix always starts with `<s>`.
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Numerically stable log-softmax in f64.
pub fn log_softmax<T: Real>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|x| (x.f64() - max).exp()).sum();
    let lz = z.ln() + max;
    logits.iter().map(|x| x.f64() - lz).collect()
}

/// A model bound to one encoded image.
pub struct ImageStepper<'m, T> {
    pub model: &'m MtModel<T>,
    pub encoded: Encoded<T>,
}

impl<'m, T: Real> ImageStepper<'m, T> {
    pub fn new(model: &'m MtModel<T>, views: &crate::features::FeatureViews<T>) -> Result<Self> {
        Ok(ImageStepper {
            model,
            encoded: model.encode(views)?,
        })
    }
}

impl<T: Real> StepModel for ImageStepper<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.cfg.vocab_size
    }

    fn max_len(&self) -> usize {
        self.model.cfg.max_len
    }

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.model.step_logits(&self.encoded, prefix)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
    Beam,
}

impl DecodeMode {
    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Sample => "sample",
            DecodeMode::Beam => "beam",
        }
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "sample" => Ok(DecodeMode::Sample),
            "beam" => Ok(DecodeMode::Beam),
            other => Err(Error::Config(format!("unknown decode mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    /// Length-normalisation exponent α in `logp / len^α`.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Beam,
            beam_width: 3,
            alpha: 0.0,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha={} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// A generated sequence. `tokens` holds every emitted id, including the
/// final `</s>` when one was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub step_logps: Vec<f64>,
    pub logp: f64,
    /// True when `</s>` was emitted; false when cut at the length limit.
    pub finished: bool,
}

impl Hypothesis {
    fn empty() -> Self {
        Hypothesis {
            tokens: Vec::new(),
            step_logps: Vec::new(),
            logp: 0.0,
            finished: false,
        }
    }

    pub fn truncated(&self) -> bool {
        !self.finished
    }

    /// Content words (everything before `</s>`).
    pub fn words(&self) -> &[usize] {
        match self.tokens.iter().position(|&t| t == EOS) {
            Some(p) => &self.tokens[..p],
            None => &self.tokens,
        }
    }

    /// `logp / len^α`, with len counting every emitted token.
    pub fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 || self.tokens.is_empty() {
            self.logp
        } else {
            self.logp / (self.tokens.len() as f64).powf(alpha)
        }
    }

    fn extend(&self, tok: usize, lp: f64) -> Hypothesis {
        let mut h = self.clone();
        h.tokens.push(tok);
        h.step_logps.push(lp);
        h.logp += lp;
        h.finished = tok == EOS;
        h
    }

    fn prefix(&self) -> Vec<usize> {
        let mut p = Vec::with_capacity(self.tokens.len() + 1);
        p.push(BOS);
        p.extend_from_slice(&self.tokens);
        p
    }
}

/// Ordering used everywhere: higher score first, then lexicographically
/// smaller token ids.
fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.score(alpha)
        .partial_cmp(&a.score(alpha))
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_dist(model: &impl StepModel, lp: &[f64]) -> Result<()> {
    if lp.len() != model.vocab_size() {
        return Err(Error::shape("log_probs", &[model.vocab_size()], &[lp.len()]));
    }
    Ok(())
}

pub fn greedy_decode(model: &impl StepModel) -> Result<Hypothesis> {
    let mut h = Hypothesis::empty();
    while h.tokens.len() < model.max_len() {
        let lp = model.log_probs(&h.prefix())?;
        check_dist(model, &lp)?;
        let tok = argmax(&lp);
        h = h.extend(tok, lp[tok]);
        if h.finished {
            break;
        }
    }
    Ok(h)
}

/// Draws each token from the model's distribution (temperature 1).
pub fn sample_decode<R: Rng>(model: &impl StepModel, rng: &mut R) -> Result<Hypothesis> {
    let mut h = Hypothesis::empty();
    while h.tokens.len() < model.max_len() {
        let lp = model.log_probs(&h.prefix())?;
        check_dist(model, &lp)?;
        let tok = sample_index(&lp, rng);
        h = h.extend(tok, lp[tok]);
        if h.finished {
            break;
        }
    }
    Ok(h)
}

/// Inverse-CDF draw from a log-probability vector.
pub fn sample_index<R: Rng>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

#[derive(Clone, Debug)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Every finished or length-truncated beam, best first.
    pub beams: Vec<Hypothesis>,
}

/// Beam search with a finished pool: each step keeps the top `B − finished`
/// expansions of the live beams; beams emitting `</s>` leave the search.
/// Stops once `B` beams have finished, no live beam remains, or the length
/// limit is hit.
pub fn beam_search(model: &impl StepModel, beam_width: usize, alpha: f64) -> Result<BeamResult> {
    if beam_width == 0 {
        return Err(Error::Config("beam_width must be ≥ 1".into()));
    }
    let mut live = vec![Hypothesis::empty()];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..model.max_len() {
        let mut cands = Vec::with_capacity(live.len() * model.vocab_size());
        for h in &live {
            let lp = model.log_probs(&h.prefix())?;
            check_dist(model, &lp)?;
            for (tok, &l) in lp.iter().enumerate() {
                cands.push(h.extend(tok, l));
            }
        }
        cands.sort_by(|a, b| rank(a, b, 0.0));
        cands.truncate(beam_width - finished.len());
        live.clear();
        for c in cands {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if finished.len() >= beam_width || live.is_empty() {
            break;
        }
    }
    finished.extend(live);
    finished.sort_by(|a, b| rank(a, b, alpha));
    Ok(BeamResult {
        best: finished[0].clone(),
        beams: finished,
    })
}

/// Decodes one image according to `cfg`.
pub fn decode<R: Rng>(model: &impl StepModel, cfg: &DecodeConfig, rng: &mut R) -> Result<Hypothesis> {
    match cfg.mode {
        DecodeMode::Greedy => greedy_decode(model),
        DecodeMode::Sample => sample_decode(model, rng),
        DecodeMode::Beam => Ok(beam_search(model, cfg.beam_width, cfg.alpha)?.best),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub id: String,
    pub caption: String,
    pub score: f64,
    pub tokens: Vec<String>,
    pub mode: String,
}

pub fn write_caption_lines(out: &mut impl Write, lines: &[CaptionLine]) -> Result<()> {
    for l in lines {
        let s = serde_json::to_string(l)?;
        writeln!(out, "{s}").map_err(|e| Error::Data(format!("writing captions: {e}")))?;
    }
    Ok(())
}
