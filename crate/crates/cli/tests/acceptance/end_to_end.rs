//! Training runs on the synthetic dataset, and byte-level reruns of every
//! subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use tempfile::TempDir;

use mtcap_cli::commands::{self, Captioner};
use mtcap_cli::config::{Profile, RunConfig};
use mtcap_core::data::{Attribute, GenConfig, ViewSpec};
use mtcap_core::encoder::EncoderKind;
use mtcap_core::metrics::{CiderVariant, ScoreReport};
use mtcap_core::training::{checkpoint_path, EpochLog};

use crate::common::Outcome;

const SEEDS: [u64; 4] = [1, 2, 3, 4];
const NEEDED: usize = 3;
const TIME_LIMIT_S: f64 = 600.0;

struct Workspace {
    dir: TempDir,
}

fn workspace() -> &'static Workspace {
    static WS: OnceLock<Workspace> = OnceLock::new();
    WS.get_or_init(|| Workspace {
        dir: tempfile::tempdir().expect("temp dir"),
    })
}

fn dataset(name: &str, cfg: &GenConfig) -> PathBuf {
    let dir = workspace().dir.path().join(name);
    if !dir.join("vocab.txt").is_file() {
        commands::gen_data(cfg, &dir).expect("dataset generation");
        commands::build_vocab_file(&dir, 5, &dir.join("vocab.txt")).expect("vocabulary");
    }
    dir
}

fn default_dataset() -> PathBuf {
    dataset("default", &GenConfig::default())
}

/// Single views lose information: view 0 cannot see colour, view 1 cannot
/// see shape or size, both are noisier than the default, and the views are
/// unaligned with view 1 shuffled.
pub fn noise_elevated_config() -> GenConfig {
    GenConfig {
        aligned: false,
        views: vec![
            ViewSpec {
                width: 16,
                projection_seed: Some(101),
                noise_sigma: 0.1,
                blind_to: vec![Attribute::Color],
                ..ViewSpec::default()
            },
            ViewSpec {
                width: 24,
                projection_seed: Some(102),
                noise_sigma: 0.1,
                shuffle: true,
                blind_to: vec![Attribute::Shape, Attribute::Size],
                ..ViewSpec::default()
            },
        ],
        ..GenConfig::default()
    }
}

fn desk(dataset: &Path, out: PathBuf, seed: u64) -> RunConfig {
    let mut c = RunConfig::profile(Profile::Desk);
    c.dataset = dataset.to_path_buf();
    c.out_dir = out;
    c.seed = seed;
    c
}

/// Decodes the test split with the run's decode settings and scores it.
fn test_scores(cfg: &RunConfig, checkpoint: &Path, tag: &str) -> ScoreReport {
    let captioner = Captioner::load(checkpoint, None, None).expect("load model");
    let out = cfg.out_dir.join(format!("test_{tag}.jsonl"));
    commands::caption(
        &captioner,
        checkpoint,
        &cfg.dataset.join("test/features"),
        &cfg.decode,
        &out,
        1,
    )
    .expect("caption test split");
    commands::eval(&out, &cfg.dataset.join("test/references.jsonl"), CiderVariant::D, false).expect("eval")
}

#[derive(Clone)]
struct XeRun {
    cfg: RunConfig,
    logs: Vec<EpochLog>,
    test: ScoreReport,
    seconds: f64,
}

fn xe_runs() -> &'static Vec<XeRun> {
    static RUNS: OnceLock<Vec<XeRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let data = default_dataset();
        SEEDS
            .iter()
            .map(|&seed| {
                let cfg = desk(&data, workspace().dir.path().join(format!("xe_{seed}")), seed);
                let t = Instant::now();
                let run = commands::train(cfg.clone(), None).expect("xe training");
                let last = run.checkpoints.last().expect("checkpoint").clone();
                let test = test_scores(&cfg, &last, "xe");
                XeRun {
                    cfg,
                    logs: run.logs,
                    test,
                    seconds: t.elapsed().as_secs_f64(),
                }
            })
            .collect()
    })
}

pub fn toy_task_criterion() -> Outcome {
    let runs = xe_runs();
    let mut ok = 0;
    let mut parts = Vec::new();
    for r in runs {
        let good = r.test.bleu1 >= 0.95 && r.test.bleu4 >= 0.80 && r.seconds < TIME_LIMIT_S;
        ok += good as usize;
        parts.push(format!(
            "seed {} B1 {:.3} B4 {:.3} in {:.0}s",
            r.cfg.seed, r.test.bleu1, r.test.bleu4, r.seconds
        ));
    }
    Outcome::new(
        ok >= NEEDED,
        format!(
            "{ok}/{} seeds reach test BLEU-1 >= 0.95 and BLEU-4 >= 0.80 within {TIME_LIMIT_S:.0}s ({})",
            runs.len(),
            parts.join("; ")
        ),
    )
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let p = e.unwrap().path();
        if p.is_file() {
            fs::copy(&p, to.join(p.file_name().unwrap())).unwrap();
        }
    }
}

pub const SCST_EPOCHS: usize = 5;

pub fn scst_criterion() -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for r in xe_runs() {
        let xe_epochs = r.cfg.train.xe_epochs;
        let xe_cider = r.logs.last().expect("xe epochs").val_cider;
        let dir = workspace().dir.path().join(format!("scst_{}", r.cfg.seed));
        copy_dir(&r.cfg.out_dir, &dir);
        let mut cfg = r.cfg.clone();
        cfg.out_dir = dir;
        cfg.train.scst_epochs = SCST_EPOCHS;
        let run = commands::train(cfg.clone(), Some(xe_epochs)).expect("scst training");
        assert!(checkpoint_path(&cfg.out_dir, xe_epochs + SCST_EPOCHS).is_file());
        let scst_cider = run.logs.last().expect("scst epochs").val_cider;
        ok += (scst_cider >= xe_cider) as usize;
        parts.push(format!("seed {} {xe_cider:.3} -> {scst_cider:.3}", r.cfg.seed));
    }
    Outcome::new(
        ok >= NEEDED,
        format!(
            "{ok}/{} seeds keep or raise validation greedy CIDEr-D after {SCST_EPOCHS} self-critical epochs ({})",
            SEEDS.len(),
            parts.join("; ")
        ),
    )
}

pub fn multi_view_criterion() -> Outcome {
    let data = dataset("noisy", &noise_elevated_config());
    let mut ok = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let mut scores = Vec::new();
        for (kind, views) in [(EncoderKind::Sv, 1), (EncoderKind::Umv, 2)] {
            let tag = format!("{kind:?}").to_lowercase();
            let mut cfg = desk(&data, workspace().dir.path().join(format!("{tag}_{seed}")), seed);
            cfg.model.encoder = kind;
            cfg.model.num_views = views;
            let run = commands::train(cfg.clone(), None).expect("training");
            let last = run.checkpoints.last().expect("checkpoint").clone();
            scores.push(test_scores(&cfg, &last, &tag).cider);
        }
        ok += (scores[1] >= scores[0]) as usize;
        parts.push(format!("seed {seed} sv {:.3} umv {:.3}", scores[0], scores[1]));
    }
    Outcome::new(
        ok >= NEEDED,
        format!(
            "{ok}/{} seeds with UMV (2 views) test CIDEr-D >= SV on view 0 ({})",
            SEEDS.len(),
            parts.join("; ")
        ),
    )
}

// ---- reproducibility -------------------------------------------------------

fn mtcap(cwd: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_mtcap"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MTCAP_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mtcap");
    assert!(
        out.status.success(),
        "mtcap {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// The wall-clock column of the metric log is the one output that measures
/// the run instead of describing it; it is dropped before comparison.
fn normalise(path: &Path, bytes: Vec<u8>) -> Vec<u8> {
    if path.file_name().is_some_and(|n| n == "metrics.csv") {
        let text = String::from_utf8(bytes).unwrap();
        let kept: Vec<String> = text
            .lines()
            .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
            .collect();
        kept.join("\n").into_bytes()
    } else {
        bytes
    }
}

fn snapshot(root: &Path, targets: &[&str]) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack: Vec<PathBuf> = targets.iter().map(|t| root.join(t)).collect();
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            stack.extend(fs::read_dir(&p).unwrap().map(|e| e.unwrap().path()));
        } else {
            let bytes = fs::read(&p).unwrap();
            let key = p.strip_prefix(root).unwrap().display().to_string();
            out.insert(key, normalise(&p, bytes));
        }
    }
    out
}

fn remove(root: &Path, targets: &[&str]) {
    for t in targets {
        let p = root.join(t);
        if p.is_dir() {
            fs::remove_dir_all(&p).unwrap();
        } else if p.exists() {
            fs::remove_file(&p).unwrap();
        }
    }
}

pub fn reproducibility_criterion() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let small = GenConfig {
        train: 40,
        val: 10,
        test: 10,
        ..GenConfig::default()
    };
    fs::write(root.join("small.json"), serde_json::to_string(&small).unwrap()).unwrap();
    let ck = "run/epoch_002.mtck";
    let steps: Vec<(Vec<&str>, Vec<&str>)> = vec![
        (vec!["gen-data", "--config", "small.json", "--out", "data"], vec!["data"]),
        (vec!["build-vocab", "--dataset", "data", "--min-count", "1"], vec!["data/vocab.txt"]),
        (
            vec![
                "train", "--profile", "desk", "--dataset", "data", "--out-dir", "run", "--xe-epochs", "1",
                "--scst-epochs", "1",
            ],
            vec!["run"],
        ),
        (
            vec![
                "caption", "--checkpoint", ck, "--features", "data/test/features", "--out", "beam.jsonl", "--mode",
                "beam",
            ],
            vec!["beam.jsonl", "beam.config.json"],
        ),
        (
            vec![
                "caption", "--checkpoint", ck, "--features", "data/test/features", "--out", "sample.jsonl", "--mode",
                "sample", "--seed", "5",
            ],
            vec!["sample.jsonl", "sample.config.json"],
        ),
        (
            vec![
                "eval", "--candidates", "beam.jsonl", "--references", "data/test/references.jsonl", "--out",
                "report.json", "--per-image",
            ],
            vec!["report.json"],
        ),
        (
            vec![
                "inspect-attn", "--checkpoint", ck, "--features", "data/test/features/test_00000.fvs", "--out",
                "attn.jsonl",
            ],
            vec!["attn.jsonl"],
        ),
    ];
    let mut bad = Vec::new();
    let mut files = 0;
    for (args, outputs) in &steps {
        mtcap(root, args);
        let first = snapshot(root, outputs);
        remove(root, outputs);
        mtcap(root, args);
        let second = snapshot(root, outputs);
        files += first.len();
        if first != second {
            let differing: Vec<&String> = first
                .keys()
                .chain(second.keys())
                .filter(|k| first.get(*k) != second.get(*k))
                .collect();
            bad.push(format!("{}: {:?}", args[0], differing));
        }
    }
    Outcome::new(
        bad.is_empty(),
        if bad.is_empty() {
            format!(
                "{} commands rerun, {files} output files byte-identical (metric log compared without its wall-clock column)",
                steps.len()
            )
        } else {
            format!("differences: {}", bad.join("; "))
        },
    )
}
