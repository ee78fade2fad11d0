//! Command-line front end and on-disk formats.

pub mod checkpoint;
pub mod config;
pub mod dataset;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;

use crate::cache::decode_with_cache;
use crate::decoder::{decode, DecodeVariant};
use crate::error::{Error, Result};
use crate::policy::{run_episodes, ModelPolicy, RolloutSummary};
use crate::sequence::AssembledSequence;
use crate::simworld::{self, generate_dataset, ExpertPolicy, RandomPolicy};
use crate::trainer::{encode_dataset, random_corpus, train_observed, write_log, Codecs};

/// Steps recorded per random-policy pretraining episode.
const PRETRAIN_EPISODE_LEN: usize = 40;

#[derive(Debug, Parser)]
#[command(name = "dvla", version, about = "Discrete-diffusion VLA toolkit on a 2D tabletop simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    Model,
    Expert,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Parallel,
    Sequential,
    NoWorldModel,
}

impl From<VariantArg> for DecodeVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Parallel => DecodeVariant::Parallel,
            VariantArg::Sequential => DecodeVariant::Sequential,
            VariantArg::NoWorldModel => DecodeVariant::NoWorldModel,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record expert demonstrations as JSONL.
    GenData {
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit codecs, train, and write a checkpoint plus the metrics CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set train.lr=3e-4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Print a progress line every N steps (0 = silent).
        #[arg(long, default_value_t = 100)]
        progress: usize,
    },
    /// Closed-loop evaluation over seeded episodes; prints a JSON summary.
    Rollout {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = PolicyKind::Model)]
        policy: PolicyKind,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        cache: Switch,
        #[arg(long)]
        lambda: Option<usize>,
        #[arg(long)]
        rho: Option<f64>,
        /// With the cache on, also decode uncached and report token agreement.
        #[arg(long)]
        compare: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode the first observation of a seeded episode and write the step trace.
    InspectDecode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        cache: Switch,
        #[arg(long)]
        lambda: Option<usize>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Output CSV (`-` for stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) if p != Path::new("-") => {
            let mut w = create(p)?;
            writeln!(w, "{text}")?;
            w.flush()?;
        }
        _ => println!("{text}"),
    }
    Ok(())
}

pub fn gen_data(episodes: usize, seed: u64, out: &Path) -> Result<()> {
    let data = generate_dataset(episodes, seed)?;
    dataset::write_jsonl(&data, create(out)?)?;
    eprintln!("wrote {} episodes to {}", data.len(), out.display());
    Ok(())
}

fn encode_all(t: &[simworld::Trajectory], codecs: &Codecs, cfg: &RunConfig) -> Result<Vec<AssembledSequence>> {
    Ok(encode_dataset(t, codecs, cfg.train.chunk_size, cfg.train.variant)?.into_iter().map(|e| e.seq).collect())
}

/// Fits codecs on `data`, sizes the model vocabulary to them, and trains.
pub fn train_run(
    data: &[simworld::Trajectory],
    mut cfg: RunConfig,
    progress: usize,
) -> Result<(Checkpoint, Vec<crate::trainer::LogRow>)> {
    let codecs = Codecs::fit(data, &cfg.codec)?;
    cfg.model.vocab = codecs.vocab_size();
    let len = codecs.sequence_len(cfg.train.chunk_size, cfg.train.variant);
    if len > cfg.model.max_seq {
        return Err(Error::Config(format!("sequence length {len} exceeds model.max_seq {}", cfg.model.max_seq)));
    }
    cfg.validate()?;
    let seqs = encode_all(data, &codecs, &cfg)?;
    let pre = if cfg.train.pretrain_episodes > 0 {
        let corpus =
            random_corpus(cfg.train.pretrain_episodes, cfg.train.seed.wrapping_add(1 << 32), PRETRAIN_EPISODE_LEN);
        encode_all(&corpus, &codecs, &cfg)?
    } else {
        Vec::new()
    };
    let start = Instant::now();
    let out = train_observed(&seqs, &pre, &cfg.model, &cfg.train, |r| {
        if progress > 0 && r.step % progress == 0 {
            eprintln!(
                "step {:>6} loss {:.4} mask {:.3} lr {:.3e} {:.0}s",
                r.step,
                r.loss,
                r.mask_ratio,
                r.lr,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    Ok((Checkpoint { config: cfg, codecs, params: out.params }, out.log))
}

fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in sets {
        cfg.set(s)?;
    }
    Ok(cfg)
}

fn apply_decode_flags(cfg: &mut RunConfig, lambda: Option<usize>, rho: Option<f64>, sets: &[String]) -> Result<()> {
    for s in sets {
        cfg.set(s)?;
    }
    if let Some(l) = lambda {
        cfg.cache.refresh_interval = l;
    }
    if let Some(r) = rho {
        cfg.cache.update_ratio = r;
    }
    cfg.decode.validate()?;
    cfg.cache.validate()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { episodes, seed, out } => gen_data(episodes, seed, &out),
        Command::Train { data, config, sets, out, log, progress } => {
            let cfg = load_config(config.as_deref(), &sets)?;
            cfg.validate()?;
            let trajs = dataset::read_jsonl(&data)?;
            let ck_path = out.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            let log_path = log.unwrap_or_else(|| cfg.paths.log.clone());
            let (ck, rows) = train_run(&trajs, cfg, progress)?;
            ck.save(&ck_path)?;
            let mut w = create(&log_path)?;
            write_log(&rows, &mut w)?;
            w.flush()?;
            let summary = json!({
                "steps": rows.len(),
                "initial_loss": rows.first().map(|r| r.loss),
                "final_loss": rows.last().map(|r| r.loss),
                "checkpoint": ck_path,
                "log": log_path,
            });
            emit(&serde_json::to_string_pretty(&summary)?, None)
        }
        Command::Rollout { ckpt, episodes, seed, policy, variant, cache, lambda, rho, compare, sets, out } => {
            let seeds: Vec<u64> = (0..episodes as u64).map(|i| seed.wrapping_add(i)).collect();
            let summary = match policy {
                PolicyKind::Expert | PolicyKind::Random => {
                    let mut cfg = RunConfig::default();
                    apply_decode_flags(&mut cfg, None, None, &sets)?;
                    let eps = if policy == PolicyKind::Expert {
                        run_episodes(&mut ExpertPolicy::new(seed), &seeds, cfg.sim.max_steps)?
                    } else {
                        run_episodes(&mut RandomPolicy::new(seed, cfg.train.chunk_size), &seeds, cfg.sim.max_steps)?
                    };
                    RolloutSummary::new(eps, &[], &[])
                }
                PolicyKind::Model => {
                    let path = ckpt.ok_or_else(|| Error::Config("--ckpt is required for --policy model".into()))?;
                    let ck = Checkpoint::load(&path)?;
                    let mut cfg = ck.config.clone();
                    apply_decode_flags(&mut cfg, lambda, rho, &sets)?;
                    if let Some(v) = variant {
                        cfg.decode.variant = v.into();
                    }
                    cfg.validate()?;
                    let cache_policy = (cache == Switch::On).then_some(cfg.cache);
                    let mut p = ModelPolicy::new(&ck.params, &ck.codecs, cfg.decode.clone(), cfg.train.chunk_size)
                        .with_cache(cache_policy, compare);
                    let eps = run_episodes(&mut p, &seeds, cfg.sim.max_steps)?;
                    RolloutSummary::new(eps, &p.decode_ms, &p.agreements)
                }
            };
            emit(&serde_json::to_string_pretty(&summary)?, out.as_deref())
        }
        Command::InspectDecode { ckpt, seed, cache, lambda, rho, sets, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mut cfg = ck.config.clone();
            apply_decode_flags(&mut cfg, lambda, rho, &sets)?;
            cfg.validate()?;
            let (state, spec) = simworld::reset(seed);
            let image = simworld::render(&state);
            let text = simworld::prompt(&spec, &state);
            let seq =
                ck.codecs.encode_query(&image, &text, cfg.train.chunk_size, cfg.decode.variant.sequence_variant())?;
            let plain = decode(&seq, &ck.params, &cfg.decode)?;
            let trace = if cache == Switch::On {
                let (mut cached, _) = decode_with_cache(&seq, &ck.params, &cfg.decode, &cfg.cache)?;
                cached.trace.annotate_agreement(&plain.trace);
                cached.trace
            } else {
                plain.trace
            };
            let path = out.unwrap_or_else(|| cfg.paths.trace.clone());
            if path == Path::new("-") {
                trace.write_csv(std::io::stdout().lock())
            } else {
                let mut w = create(&path)?;
                trace.write_csv(&mut w)?;
                w.flush()?;
                Ok(())
            }
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
