use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mtcap_cli::commands::{self, AttnSelector, Captioner};
use mtcap_cli::config::{Profile, RunConfig};
use mtcap_core::data::GenConfig;
use mtcap_core::decoder::TemporalMode;
use mtcap_core::decoding::{DecodeConfig, DecodeMode};
use mtcap_core::encoder::EncoderKind;
use mtcap_core::metrics::CiderVariant;

#[derive(Parser, Debug)]
#[command(name = "mtcap", version, about = "Multi-view transformer image captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic scene dataset.
    GenData {
        /// Dataset config JSON; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = mtcap_cli::config::SEED_ENV)]
        seed: Option<u64>,
    },
    /// Build the vocabulary from training references.
    BuildVocab {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_count: usize,
        /// Defaults to `<dataset>/vocab.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model: cross-entropy stage, then optional self-critical stage.
    Train(TrainArgs),
    /// Caption every `.fvs` file in a directory.
    Caption {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, default_value_t = default_workers())]
        workers: usize,
    },
    /// Score candidate captions against references.
    Eval {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "d")]
        cider_variant: String,
        #[arg(long)]
        per_image: bool,
    },
    /// Dump attention maps for one image alongside its decoded caption.
    InspectAttn {
        #[command(flatten)]
        model: ModelArgs,
        /// One `.fvs` feature file.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Blocks to keep (0-based, repeatable); all when omitted.
        #[arg(long = "block")]
        blocks: Vec<usize>,
        #[arg(long = "head")]
        heads: Vec<usize>,
        /// enc-SA, dec-SA, dec-GA or umv-GA (repeatable).
        #[arg(long = "role")]
        roles: Vec<String>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get().min(8))
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to `model.json` beside the checkpoint.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Defaults to `vocab.txt` beside the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<Captioner> {
        Captioner::load(&self.checkpoint, self.model_config.as_deref(), self.vocab.as_deref())
    }
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long, default_value = "beam")]
    mode: String,
    #[arg(long, default_value_t = 3)]
    beam_width: usize,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, env = mtcap_cli::config::SEED_ENV, default_value_t = 0)]
    seed: u64,
}

impl DecodeArgs {
    fn config(&self) -> Result<DecodeConfig> {
        let cfg = DecodeConfig {
            mode: self.mode.parse::<DecodeMode>()?,
            beam_width: self.beam_width,
            alpha: self.alpha,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run config JSON; fields not given fall back to the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "paper")]
    profile: Profile,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, env = mtcap_cli::config::SEED_ENV)]
    seed: Option<u64>,
    /// sv, amv or umv.
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    num_views: Option<usize>,
    /// lstm or pe.
    #[arg(long)]
    temporal: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    xe_epochs: Option<usize>,
    #[arg(long)]
    scst_epochs: Option<usize>,
    #[arg(long)]
    strict_ablation: bool,
    /// Continue from `epoch_<k>` in the output directory.
    #[arg(long)]
    resume: Option<usize>,
}

impl TrainArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let base = RunConfig::profile(self.profile);
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p, &base)?,
            None => base,
        };
        if let Some(d) = &self.dataset {
            c.dataset = d.clone();
        }
        if let Some(v) = &self.vocab {
            c.vocab = Some(v.clone());
        }
        if let Some(o) = &self.out_dir {
            c.out_dir = o.clone();
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(e) = &self.encoder {
            c.model.encoder = e.parse::<EncoderKind>()?;
        }
        if let Some(m) = self.num_views {
            c.model.num_views = m;
        }
        if let Some(t) = &self.temporal {
            c.model.temporal = t.parse::<TemporalMode>()?;
        }
        if let Some(l) = self.layers {
            c.model.layers = l;
        }
        if let Some(n) = self.xe_epochs {
            c.train.xe_epochs = n;
        }
        if let Some(n) = self.scst_epochs {
            c.train.scst_epochs = n;
        }
        c.strict_ablation |= self.strict_ablation;
        Ok(c)
    }
}

fn read_gen_config(path: Option<&Path>) -> Result<GenConfig> {
    match path {
        None => Ok(GenConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid dataset config {}", p.display()))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg = read_gen_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let stats = commands::gen_data(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::BuildVocab { dataset, min_count, out } => {
            let out = out.unwrap_or_else(|| dataset.join("vocab.txt"));
            let v = commands::build_vocab_file(&dataset, min_count, &out)?;
            println!("{} tokens -> {}", v.len(), out.display());
        }
        Command::Train(args) => {
            let cfg = args.run_config()?;
            let run = commands::train(cfg, args.resume)?;
            if let Some(last) = run.logs.last() {
                println!("{}", mtcap_core::training::CSV_HEADER);
                println!("{}", last.csv_row());
            }
            for ck in &run.checkpoints {
                log::info!("wrote {}", ck.display());
            }
        }
        Command::Caption {
            model,
            features,
            out,
            decode,
            workers,
        } => {
            let dcfg = decode.config()?;
            let captioner = model.load()?;
            let lines = commands::caption(&captioner, &model.checkpoint, &features, &dcfg, &out, workers)?;
            log::info!("{} captions -> {}", lines.len(), out.display());
        }
        Command::Eval {
            candidates,
            references,
            out,
            cider_variant,
            per_image,
        } => {
            let variant = match cider_variant.as_str() {
                "d" | "D" | "cider-d" => CiderVariant::D,
                "plain" => CiderVariant::Plain,
                other => anyhow::bail!("unknown CIDEr variant `{other}` (d or plain)"),
            };
            let report = commands::eval(&candidates, &references, variant, per_image)?;
            match out {
                Some(p) => commands::write_report(&report, &p)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::InspectAttn {
            model,
            features,
            out,
            blocks,
            heads,
            roles,
            decode,
        } => {
            let dcfg = decode.config()?;
            let sel = AttnSelector {
                blocks,
                heads,
                roles: roles.iter().map(|r| commands::parse_role(r)).collect::<Result<_>>()?,
            };
            let captioner = model.load()?;
            let aligned = features.parent().is_some_and(commands::aligned_flag);
            let (line, inputs, records) = commands::inspect_attn(&captioner, &features, aligned, &dcfg, &sel)?;
            commands::write_inspection(&out, &line, &inputs, &records)?;
            log::info!("{} attention maps for \"{}\" -> {}", records.len(), line.caption, out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
