//! Subcommand implementations. Each returns once its outputs are on disk;
//! validation happens before any work starts.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use mtcap_core::attention::{AttentionRecord, AttentionRole};
use mtcap_core::data::{build_vocab, mix, write_dataset, CorpusStats, Dataset, DatasetManifest, GenConfig};
use mtcap_core::decoder::{Vocab, BOS};
use mtcap_core::decoding::{decode, CaptionLine, DecodeConfig, ImageStepper};
use mtcap_core::features::FeatureViews;
use mtcap_core::metrics::{evaluate, read_candidates, read_references, CiderVariant, EvalCorpus, ScoreReport};
use mtcap_core::model::MtModel;
use mtcap_core::training::{checkpoint_path, train_loop, TrainRun};

use crate::config::RunConfig;

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

/// `out/captions.jsonl` gets its resolved config at `out/captions.config.json`.
pub fn config_echo_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.config.json"))
}

// ---- gen-data --------------------------------------------------------------

pub fn gen_data(cfg: &GenConfig, out: &Path) -> Result<Vec<CorpusStats>> {
    cfg.validate().context("invalid dataset config")?;
    let stats = write_dataset(cfg, out)?;
    for s in &stats {
        log::info!(
            "{}: {} scenes, {:.2} objects/scene, relations {:?}",
            s.split,
            s.scenes,
            s.mean_objects,
            s.relations
        );
    }
    Ok(stats)
}

// ---- build-vocab -----------------------------------------------------------

/// Vocabulary over every reference caption of the training split.
pub fn build_vocab_file(dataset: &Path, min_count: usize, out: &Path) -> Result<Vocab> {
    let train = dataset.join("train");
    let manifest = DatasetManifest::read(&train)?;
    let refs = read_references(&train.join(&manifest.references))?;
    let captions: Vec<Vec<String>> = refs
        .values()
        .flatten()
        .map(|c| mtcap_core::metrics::tokenize(c))
        .collect();
    let vocab = build_vocab(captions.iter(), min_count)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    vocab.write(out)?;
    log::info!("{} tokens (min count {min_count}) -> {}", vocab.len(), out.display());
    Ok(vocab)
}

// ---- train -----------------------------------------------------------------

/// Fills dataset-derived fields, checks the config against the dataset and
/// loads the vocabulary. Nothing is written.
pub fn prepare_run(cfg: &mut RunConfig) -> Result<Vocab> {
    for split in ["train", "val"] {
        let dir = cfg.dataset.join(split);
        ensure!(dir.join("manifest.json").is_file(), "dataset split missing: {}", dir.display());
    }
    let manifest = DatasetManifest::read(&cfg.dataset.join("train"))?;
    let vocab = Vocab::read(&cfg.vocab_path()).with_context(|| "run `mtcap build-vocab` first".to_string())?;
    cfg.resolve(&manifest, vocab.len())?;
    Ok(vocab)
}

/// Runs the configured training stages. `resume_from = Some(k)` restarts
/// from `epoch_k` in the output directory.
pub fn train(mut cfg: RunConfig, resume_from: Option<usize>) -> Result<TrainRun> {
    let vocab = prepare_run(&mut cfg)?;
    if let Some(k) = resume_from {
        let ck = checkpoint_path(&cfg.out_dir, k);
        ensure!(ck.is_file(), "cannot resume: {} not found", ck.display());
    }
    let train = Dataset::load(&cfg.dataset.join("train"))?;
    let val = Dataset::load(&cfg.dataset.join("val"))?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write_json(&cfg.out_dir.join("run_config.json"), &cfg)?;
    write_json(&cfg.out_dir.join("model.json"), &cfg.model)?;
    vocab.write(&cfg.out_dir.join("vocab.txt"))?;
    let mut model = MtModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    log::info!(
        "{:?} encoder, {} blocks, {} parameters, {} training images",
        cfg.model.encoder,
        cfg.model.layers,
        model.store.numel(),
        train.len()
    );
    Ok(train_loop(&mut model, &train, &val, &vocab, &cfg.train, &cfg.out_dir, resume_from)?)
}

// ---- caption ---------------------------------------------------------------

/// A trained model with its vocabulary. `model.json` and `vocab.txt` are
/// looked up beside the checkpoint unless given.
pub struct Captioner {
    pub model: MtModel<f32>,
    pub vocab: Vocab,
}

impl Captioner {
    pub fn load(checkpoint: &Path, model_config: Option<&Path>, vocab: Option<&Path>) -> Result<Self> {
        let dir = checkpoint.parent().unwrap_or(Path::new("."));
        let mc = model_config.map(Path::to_path_buf).unwrap_or_else(|| dir.join("model.json"));
        let vp = vocab.map(Path::to_path_buf).unwrap_or_else(|| dir.join("vocab.txt"));
        let model = MtModel::from_files(&mc, checkpoint)?;
        let vocab = Vocab::read(&vp)?;
        ensure!(
            vocab.len() == model.cfg.vocab_size,
            "vocabulary {} has {} tokens, model expects {}",
            vp.display(),
            vocab.len(),
            model.cfg.vocab_size
        );
        Ok(Captioner { model, vocab })
    }

    /// Checks view count and widths, naming the file on mismatch.
    pub fn check_features(&self, path: &Path, views: &FeatureViews<f32>) -> Result<()> {
        let want = &self.model.cfg.view_dims;
        let got = views.widths();
        if got.len() < want.len() || got[..want.len()] != want[..] {
            bail!(
                "{}: feature widths {:?} incompatible with the model's view widths {:?}",
                path.display(),
                got,
                want
            );
        }
        Ok(())
    }

    pub fn caption(&self, id: &str, views: &FeatureViews<f32>, cfg: &DecodeConfig, index: u64) -> Result<CaptionLine> {
        let views = self.model.select_views(views)?;
        let stepper = ImageStepper::new(&self.model, &views)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, index));
        let h = decode(&stepper, cfg, &mut rng)?;
        let tokens = self.vocab.decode(h.words());
        Ok(CaptionLine {
            id: id.to_string(),
            caption: tokens.join(" "),
            score: h.score(cfg.alpha),
            tokens,
            mode: cfg.mode.name().to_string(),
        })
    }
}

/// `.fvs` files of a directory, sorted by stem.
pub fn feature_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "fvs") {
            let stem = p.file_stem().expect("has extension").to_string_lossy().into_owned();
            files.push((stem, p));
        }
    }
    files.sort();
    Ok(files)
}

/// Alignment flag from a manifest in the directory or its parent, else
/// unaligned.
pub fn aligned_flag(dir: &Path) -> bool {
    [Some(dir), dir.parent()]
        .into_iter()
        .flatten()
        .find_map(|d| DatasetManifest::read(d).ok())
        .is_some_and(|m| m.aligned)
}

#[derive(Serialize)]
struct CaptionEcho<'a> {
    checkpoint: &'a Path,
    features: &'a Path,
    model: &'a mtcap_core::model::ModelConfig,
    decode: &'a DecodeConfig,
    workers: usize,
}

/// Decodes every image in `features`, writing one JSON line per image in id
/// order. Images are split over `workers` threads; the output does not
/// depend on the worker count.
pub fn caption(
    captioner: &Captioner,
    checkpoint: &Path,
    features: &Path,
    cfg: &DecodeConfig,
    out: &Path,
    workers: usize,
) -> Result<Vec<CaptionLine>> {
    cfg.validate()?;
    let files = feature_files(features)?;
    let aligned = aligned_flag(features);
    let mut inputs = Vec::with_capacity(files.len());
    for (id, p) in &files {
        let v = FeatureViews::<f32>::read(p, aligned)?;
        captioner.check_features(p, &v)?;
        inputs.push((id.as_str(), v));
    }
    let workers = workers.clamp(1, inputs.len().max(1));
    let chunk = inputs.len().div_ceil(workers).max(1);
    let lines: Vec<CaptionLine> = std::thread::scope(|s| {
        let handles: Vec<_> = inputs
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(k, (id, v))| captioner.caption(id, v, cfg, (c * chunk + k) as u64))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("caption worker panicked"))
            .collect::<Result<Vec<Vec<_>>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(out).with_context(|| format!("creating {}", out.display()))?);
    mtcap_core::decoding::write_caption_lines(&mut w, &lines)?;
    w.flush()?;
    write_json(
        &config_echo_path(out),
        &CaptionEcho {
            checkpoint,
            features,
            model: &captioner.model.cfg,
            decode: cfg,
            workers,
        },
    )?;
    Ok(lines)
}

// ---- eval ------------------------------------------------------------------

pub fn eval(candidates: &Path, references: &Path, variant: CiderVariant, per_image: bool) -> Result<ScoreReport> {
    let cands = read_candidates(candidates)?;
    let refs = read_references(references)?;
    let corpus = EvalCorpus::join(&cands, &refs)?;
    Ok(evaluate(&corpus, variant, per_image)?)
}

pub fn write_report(report: &ScoreReport, out: &Path) -> Result<()> {
    write_json(out, report)
}

// ---- inspect-attn ----------------------------------------------------------

/// Which attention maps to dump. Empty lists select everything.
#[derive(Clone, Debug, Default, Serialize)]
pub struct AttnSelector {
    pub blocks: Vec<usize>,
    pub heads: Vec<usize>,
    pub roles: Vec<AttentionRole>,
}

impl AttnSelector {
    fn check(&self, layers: usize, heads: usize) -> Result<()> {
        if let Some(b) = self.blocks.iter().find(|&&b| b >= layers) {
            bail!("block {b} out of range: model has {layers} blocks (0..{layers})");
        }
        if let Some(h) = self.heads.iter().find(|&&h| h >= heads) {
            bail!("head {h} out of range: model has {heads} heads (0..{heads})");
        }
        Ok(())
    }

    fn keeps(&self, r: &AttentionRecord) -> bool {
        (self.blocks.is_empty() || self.blocks.contains(&r.block))
            && (self.heads.is_empty() || self.heads.contains(&r.head))
            && (self.roles.is_empty() || self.roles.contains(&r.role))
    }
}

pub fn parse_role(s: &str) -> Result<AttentionRole> {
    Ok(match s {
        "enc-SA" | "enc-sa" => AttentionRole::EncoderSelf,
        "dec-SA" | "dec-sa" => AttentionRole::DecoderSelf,
        "dec-GA" | "dec-ga" => AttentionRole::DecoderGuided,
        "umv-GA" | "umv-ga" => AttentionRole::MultiViewGuided,
        _ => bail!("unknown attention role `{s}` (enc-SA, dec-SA, dec-GA, umv-GA)"),
    })
}

#[derive(Serialize)]
struct InspectHeader<'a> {
    caption: &'a str,
    input_tokens: Vec<&'a str>,
}

/// Decodes one image, then reruns the teacher-forced pass over the decoded
/// caption with recording on. Returns the caption and the selected maps.
pub fn inspect_attn(
    captioner: &Captioner,
    features: &Path,
    aligned: bool,
    decode_cfg: &DecodeConfig,
    sel: &AttnSelector,
) -> Result<(CaptionLine, Vec<String>, Vec<AttentionRecord>)> {
    let cfg = &captioner.model.cfg;
    sel.check(cfg.layers, cfg.attention.heads)?;
    let views = FeatureViews::<f32>::read(features, aligned)?;
    captioner.check_features(features, &views)?;
    let id = features.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let line = captioner.caption(&id, &views, decode_cfg, 0)?;
    let mut inputs = vec![BOS];
    inputs.extend(line.tokens.iter().map(|t| captioner.vocab.id(t)));
    inputs.truncate(cfg.max_len);
    let input_tokens = inputs
        .iter()
        .map(|&i| captioner.vocab.token(i).unwrap_or("<unk>").to_string())
        .collect();
    let views = captioner.model.select_views(&views)?.cast::<f64>();
    let (_, records) = captioner.model.cast::<f64>().forward_recorded(&views, &inputs)?;
    let records = records.into_iter().filter(|r| sel.keeps(r)).collect();
    Ok((line, input_tokens, records))
}

pub fn write_inspection(out: &Path, line: &CaptionLine, input_tokens: &[String], records: &[AttentionRecord]) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(out).with_context(|| format!("creating {}", out.display()))?);
    let header = InspectHeader {
        caption: &line.caption,
        input_tokens: input_tokens.iter().map(String::as_str).collect(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    mtcap_core::attention::write_records(&mut w, records)?;
    w.flush()?;
    Ok(())
}
