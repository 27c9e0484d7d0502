//! Two-stage optimisation: teacher-forced cross-entropy, then self-critical
//! sequence training, driven by Adam under a per-epoch learning-rate
//! schedule.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, mix, Dataset};
use crate::decoder::{CaptionBatch, Vocab, BOS};
use crate::decoding::{greedy_decode, sample_decode, ImageStepper};
use crate::error::{Error, Result};
use crate::features::FeatureViews;
use crate::metrics::{bleu, evaluate, CiderScorer, CiderVariant, EvalCorpus, EvalItem, ScoreReport};
use crate::model::MtModel;
use crate::tensor::{Gradients, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Xe,
    Scst,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Xe => "xe",
            Stage::Scst => "scst",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMetric {
    CiderD,
    Cider,
    Bleu4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub xe_epochs: usize,
    pub scst_epochs: usize,
    /// Learning rate grows by `lr_step` per epoch up to `lr_cap`.
    pub lr_step: f64,
    pub lr_cap: f64,
    /// First epoch at which the decay factor applies.
    pub decay_start: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub reward: RewardMetric,
    pub freeze_embeddings_xe: bool,
    pub freeze_embeddings_scst: bool,
    /// Validate on at most this many images (all when `None`).
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            xe_epochs: 15,
            scst_epochs: 10,
            lr_step: 1e-4,
            lr_cap: 3e-4,
            decay_start: 7,
            decay_every: 3,
            decay_factor: 0.5,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(5.0),
            seed: 0,
            reward: RewardMetric::CiderD,
            freeze_embeddings_xe: false,
            freeze_embeddings_scst: false,
            val_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.batch_size == 0 {
            p.push("batch_size must be ≥ 1".to_string());
        }
        if self.xe_epochs + self.scst_epochs == 0 {
            p.push("at least one epoch required".to_string());
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            p.push("clip_norm must be > 0".to_string());
        }
        if self.decay_every == 0 {
            p.push("decay_every must be ≥ 1".to_string());
        }
        if !(self.lr_step > 0.0 && self.lr_cap > 0.0) {
            p.push("learning rates must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            p.push("Adam betas must lie in [0, 1)".to_string());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn stage_of(&self, epoch: usize) -> Stage {
        if epoch <= self.xe_epochs {
            Stage::Xe
        } else {
            Stage::Scst
        }
    }
}

/// `min(t · step, cap)`, halved (by `decay_factor`) at `decay_start` and
/// again every `decay_every` epochs after it.
pub fn lr_at_epoch(t: usize, cfg: &TrainConfig) -> Result<f64> {
    if t < 1 {
        return Err(Error::Config("epochs are numbered from 1".into()));
    }
    let base = (t as f64 * cfg.lr_step).min(cfg.lr_cap);
    if t < cfg.decay_start {
        return Ok(base);
    }
    let k = (t - cfg.decay_start) / cfg.decay_every + 1;
    Ok(base * cfg.decay_factor.powi(k as i32))
}

/// Mean target NLL over non-pad positions for a batch of logit matrices
/// (`n × d_v` each); `mask[i][t]` marks real targets.
pub fn xe_loss<T: Real>(logits: &[Tensor<T>], targets: &[Vec<usize>], mask: &[Vec<bool>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ((l, tg), mk) in logits.iter().zip(targets).zip(mask) {
        for (t, (&y, &m)) in tg.iter().zip(mk).enumerate() {
            if !m {
                continue;
            }
            let row: Vec<f64> = l.row(t).iter().map(|x| x.f64()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lz = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            total += lz - row[y];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("cross-entropy over a fully padded batch".into()));
    }
    Ok(total / count as f64)
}

/// Adam moments and step count.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let z: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        AdamState {
            m: z.clone(),
            v: z,
            step: 0,
        }
    }

    pub fn to_named(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (i, (_, p)) in store.iter().enumerate() {
            let shape = p.value.shape().to_vec();
            let conv = |b: &Vec<T>| Tensor::new(shape.clone(), b.iter().map(|x| x.f64() as f32).collect()).expect("shape");
            out.push((format!("adam.m.{}", p.name), conv(&self.m[i])));
            out.push((format!("adam.v.{}", p.name), conv(&self.v[i])));
        }
        out.push(("adam.step".into(), Tensor::scalar(self.step as f32)));
        out
    }

    pub fn from_named(store: &ParamStore<T>, named: &[(String, Tensor<f32>)]) -> Result<Self> {
        let find = |n: &str| {
            named
                .iter()
                .find(|(k, _)| k == n)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks `{n}`")))
        };
        let mut s = AdamState::new(store);
        for (i, (_, p)) in store.iter().enumerate() {
            for (buf, key) in [(&mut s.m[i], "m"), (&mut s.v[i], "v")] {
                let t = find(&format!("adam.{key}.{}", p.name))?;
                if t.len() != buf.len() {
                    return Err(Error::shape("adam state", p.value.shape(), t.shape()));
                }
                for (d, &x) in buf.iter_mut().zip(t.data()) {
                    *d = T::of(x as f64);
                }
            }
        }
        s.step = find("adam.step")?.data()[0] as u64;
        Ok(s)
    }
}

/// One bias-corrected Adam update of every trainable parameter, after
/// optional global-norm clipping. Returns the pre-clip gradient norm.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &mut Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    for (id, p) in store.iter() {
        if grads.get(id).iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    let norm = grads.global_norm();
    if let Some(c) = cfg.clip_norm {
        if norm > c {
            grads.scale(T::of(c / norm));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.trainable)).collect();
    for (i, (id, trainable)) in ids.into_iter().enumerate() {
        if !trainable {
            continue;
        }
        let g = grads.get(id);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let w = store.value_mut(id).data_mut();
        for k in 0..w.len() {
            m[k] = b1 * m[k] + (T::one() - b1) * g[k];
            v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            w[k] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(norm)
}

/// Batch-mean cross-entropy and its parameter gradients. Each example runs
/// on its own tape over its true length; gradients are summed in order.
pub fn xe_gradients<T: Real>(
    model: &MtModel<T>,
    captions: &CaptionBatch,
    views: &[FeatureViews<T>],
    dropout_seed: u64,
) -> Result<(f64, Gradients<T>)> {
    if views.len() != captions.len() {
        return Err(Error::Data(format!(
            "{} feature sets for {} captions",
            views.len(),
            captions.len()
        )));
    }
    let total = captions.num_targets();
    if total == 0 {
        return Err(Error::Data("cross-entropy over a fully padded batch".into()));
    }
    let w = T::of(1.0 / total as f64);
    let mut grads = Gradients::zeros_like(&model.store);
    let mut loss = 0.0;
    for i in 0..captions.len() {
        let len = captions.lengths[i];
        let mut tape = Tape::training(&model.store, true, mix(dropout_seed, i as u64));
        let logits = model.forward(&mut tape, &views[i], &captions.inputs[i][..len])?;
        let weights = vec![w; len];
        let l = tape.cross_entropy(logits, &captions.targets[i][..len], &weights)?;
        loss += tape.value(l).data()[0].f64();
        let g = tape.backward(l)?;
        tape.accumulate_param_grads(&g, &mut grads);
    }
    Ok((loss, grads))
}

/// `advantage · weight · Σ_t NLL(tokens[t])` for one sampled sequence given
/// its teacher-forced logits. Its gradient is the REINFORCE estimate with a
/// baseline folded into `advantage`.
pub fn scst_sequence_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    tokens: &[usize],
    advantage: f64,
    weight: f64,
) -> Result<Var> {
    let w = vec![T::of(advantage * weight); tokens.len()];
    tape.cross_entropy(logits, tokens, &w)
}

/// Scores a word sequence against references for the self-critical reward.
pub struct Rewarder {
    pub metric: RewardMetric,
    pub cider: CiderScorer,
}

impl Rewarder {
    pub fn new(metric: RewardMetric, train: &Dataset) -> Self {
        Rewarder {
            metric,
            cider: CiderScorer::from_references(train.examples.iter().map(|e| e.references.as_slice())),
        }
    }

    pub fn reward(&self, words: &[String], refs: &[Vec<String>]) -> Result<f64> {
        match self.metric {
            RewardMetric::CiderD => Ok(self.cider.score(words, refs, CiderVariant::D)),
            RewardMetric::Cider => Ok(self.cider.score(words, refs, CiderVariant::Plain)),
            RewardMetric::Bleu4 => {
                let c = EvalCorpus::new(vec![EvalItem {
                    id: String::new(),
                    candidate: words.to_vec(),
                    references: refs.to_vec(),
                }])?;
                Ok(bleu(&c, 4)?[3])
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScstOutcome<T> {
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_baseline: f64,
    pub grads: Gradients<T>,
}

/// Self-critical update for one batch: per image a sampled caption is
/// rewarded against the greedy caption's reward. Rollouts and the loss
/// forward run without dropout.
pub fn scst_update<T: Real>(
    model: &MtModel<T>,
    views: &[FeatureViews<T>],
    references: &[&[Vec<String>]],
    vocab: &Vocab,
    rewarder: &Rewarder,
    sample_seed: u64,
) -> Result<ScstOutcome<T>> {
    let b = views.len();
    let mut grads = Gradients::zeros_like(&model.store);
    let (mut loss, mut rs, mut rg) = (0.0, 0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    for (fv, refs) in views.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Data("self-critical update needs references".into()));
        }
        let stepper = ImageStepper::new(model, fv)?;
        let greedy = greedy_decode(&stepper)?;
        let sample = sample_decode(&stepper, &mut rng)?;
        let r_s = rewarder.reward(&vocab.decode(sample.words()), refs)?;
        let r_g = rewarder.reward(&vocab.decode(greedy.words()), refs)?;
        rs += r_s;
        rg += r_g;
        let adv = r_s - r_g;
        if adv == 0.0 {
            continue;
        }
        let mut inputs = Vec::with_capacity(sample.tokens.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&sample.tokens[..sample.tokens.len() - 1]);
        let mut tape = Tape::training(&model.store, false, 0);
        let logits = model.forward(&mut tape, fv, &inputs)?;
        let l = scst_sequence_loss(&mut tape, logits, &sample.tokens, adv, 1.0 / b as f64)?;
        loss += tape.value(l).data()[0].f64();
        let g = tape.backward(l)?;
        tape.accumulate_param_grads(&g, &mut grads);
    }
    Ok(ScstOutcome {
        loss,
        mean_reward: rs / b as f64,
        mean_baseline: rg / b as f64,
        grads,
    })
}

/// Greedy-decodes every example and scores the captions.
pub fn validate<T: Real>(model: &MtModel<T>, data: &Dataset, vocab: &Vocab, limit: Option<usize>) -> Result<ScoreReport> {
    let n = limit.unwrap_or(data.len()).min(data.len());
    let mut items = Vec::with_capacity(n);
    for ex in &data.examples[..n] {
        let stepper = ImageStepper::new(model, &ex.views.cast())?;
        let h = greedy_decode(&stepper)?;
        items.push(EvalItem {
            id: ex.id.clone(),
            candidate: vocab.decode(h.words()),
            references: ex.references.clone(),
        });
    }
    evaluate(&EvalCorpus::new(items)?, CiderVariant::D, false)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub train_loss: f64,
    pub val_bleu1: f64,
    pub val_bleu4: f64,
    pub val_rouge_l: f64,
    pub val_cider: f64,
    pub wallclock_s: f64,
}

pub const CSV_HEADER: &str = "epoch,stage,lr,train_loss,val_bleu1,val_bleu4,val_rougeL,val_cider,wallclock_s";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.stage.name(),
            self.lr,
            self.train_loss,
            self.val_bleu1,
            self.val_bleu4,
            self.val_rouge_l,
            self.val_cider,
            self.wallclock_s
        )
    }
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.mtck"))
}

/// Outputs of [`train_loop`].
#[derive(Debug)]
pub struct TrainRun {
    pub logs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs the XE stage then the SCST stage, validating, checkpointing and
/// appending a CSV row after every epoch. With `resume_from = Some(k)` the
/// model and optimiser are restored from epoch k's checkpoint and training
/// continues at epoch k + 1.
pub fn train_loop(
    model: &mut MtModel<f32>,
    train: &Dataset,
    val: &Dataset,
    vocab: &Vocab,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume_from: Option<usize>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("metrics.csv");
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut opt = AdamState::new(&model.store);
    let mut start = 1;
    if let Some(k) = resume_from {
        let ck = checkpoint_path(out_dir, k);
        let extra = model.load_params(&ck)?;
        opt = AdamState::from_named(&model.store, &extra).map_err(|e| Error::format(&ck, e.to_string()))?;
        let old = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        for line in old.lines().skip(1) {
            let ep: usize = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(&csv_path, "malformed row"))?;
            if ep <= k {
                csv.push_str(line);
                csv.push('\n');
            }
        }
        start = k + 1;
    }
    let total = cfg.xe_epochs + cfg.scst_epochs;
    let rewarder = (cfg.scst_epochs > 0).then(|| Rewarder::new(cfg.reward, train));
    let n = model.cfg.max_len;
    let clock = Instant::now();
    let mut logs = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in start..=total {
        let stage = cfg.stage_of(epoch);
        let frozen = match stage {
            Stage::Xe => cfg.freeze_embeddings_xe,
            Stage::Scst => cfg.freeze_embeddings_scst,
        };
        model.store.set_trainable("dec.embed", !frozen);
        let lr = lr_at_epoch(epoch, cfg)?;
        let batches = make_batches(&train.examples, vocab, cfg.batch_size, n, cfg.seed, epoch)?;
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let step_seed = mix(mix(cfg.seed, epoch as u64), bi as u64);
            let mut grads = match stage {
                Stage::Xe => {
                    let (l, g) = xe_gradients(model, &batch.captions, &batch.views, step_seed)?;
                    loss_sum += l;
                    g
                }
                Stage::Scst => {
                    let refs: Vec<&[Vec<String>]> = batch
                        .indices
                        .iter()
                        .map(|&i| train.examples[i].references.as_slice())
                        .collect();
                    let out = scst_update(
                        model,
                        &batch.views,
                        &refs,
                        vocab,
                        rewarder.as_ref().expect("built when scst epochs > 0"),
                        step_seed,
                    )?;
                    loss_sum += out.loss;
                    if out.grads.is_zero() {
                        continue;
                    }
                    out.grads
                }
            };
            adam_step(&mut model.store, &mut grads, &mut opt, lr, cfg)?;
        }
        let report = validate(model, val, vocab, cfg.val_limit)?;
        let log = EpochLog {
            epoch,
            stage,
            lr,
            train_loss: loss_sum / batches.len() as f64,
            val_bleu1: report.bleu1,
            val_bleu4: report.bleu4,
            val_rouge_l: report.rouge_l,
            val_cider: report.cider,
            wallclock_s: clock.elapsed().as_secs_f64(),
        };
        log::info!("{}", log.csv_row());
        let ck = checkpoint_path(out_dir, epoch);
        model.save(&ck, &opt.to_named(&model.store))?;
        let _ = writeln!(csv, "{}", log.csv_row());
        fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
        checkpoints.push(ck);
        logs.push(log);
    }
    model.store.set_trainable("dec.embed", true);
    if logs.is_empty() && resume_from.is_none() {
        fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
    }
    Ok(TrainRun { logs, checkpoints })
}
