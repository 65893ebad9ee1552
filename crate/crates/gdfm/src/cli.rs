//! Command-line interface: config-file driven subcommands over the
//! library, with atomic output writes and provenance-stamped reports.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analysis::{
    action_stability_curve, entropy_vs_reveal_curve, mc_entropy_vs_tv, recover_cvr,
    temporal_gap_curve, ChannelMatrix, McConfig, TemporalGapConfig,
};
use crate::core::{read_stream, write_stream, ActionSpec};
use crate::datagen::{
    attach_conversion_actions, gen_stream, gen_world, ingest_criteo, GenConfig, IngestOptions,
    HASH_FUNCTION,
};
use crate::engine::{
    run_experiment_suite, run_method, run_pretrain_only, save_state, RunConfig, SuiteConfig,
};
use crate::error::{Error, Result};
use crate::par::Parallelism;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "gdfm", version, about = "Streaming conversion modeling under delayed feedback")]
pub struct Cli {
    /// Force the sequential execution path.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic drifting click stream to CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the sampled world parameters as JSON.
        #[arg(long)]
        world_out: Option<PathBuf>,
    },
    /// Convert a tab-separated conversion log into the stream format.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 65536)]
        hash_bins: u32,
        #[arg(long, default_value_t = 16)]
        numeric_bins: u32,
        /// Action spec JSON; when given, conversion-derived action columns
        /// are attached to the ingested stream.
        #[arg(long)]
        actions: Option<PathBuf>,
        /// Where to write the ingest summary (stdout when omitted).
        #[arg(long)]
        summary_out: Option<PathBuf>,
    },
    /// Pretrain on the initial window and write a model checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Run the full streaming protocol and write the metrics report.
    Stream {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also checkpoint the final models.
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
    },
    /// Run a methods-by-seeds experiment grid.
    Suite {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dataset diagnostics: reveal-delay entropy, per-day stability,
    /// optional temporal-gap curve.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo study of entropy versus total-variation contraction.
    McStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover a label distribution from an action marginal through a
    /// known channel.
    Recover {
        #[arg(long)]
        config: PathBuf,
        /// Output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Run config file: the action specs describing the stream plus the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFileConfig {
    pub actions: Vec<ActionSpec>,
    pub run: RunConfig,
}

/// Suite config file: action specs plus the methods-by-seeds grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteFileConfig {
    pub actions: Vec<ActionSpec>,
    pub suite: SuiteConfig,
}

fn default_true() -> bool {
    true
}

fn default_reveal_grid() -> Vec<f64> {
    vec![0.0, 1.0, 2.0, 4.0, 8.0, 12.0, 24.0, 48.0, 72.0, 96.0, 120.0, 168.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    #[serde(default = "default_reveal_grid")]
    pub reveal_grid: Vec<f64>,
    #[serde(default = "default_true")]
    pub stability: bool,
    #[serde(default)]
    pub temporal_gap: Option<TemporalGapConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoverConfig {
    /// Channel matrix rows: `channel[a][y] = p(a | y)`.
    pub channel: Vec<Vec<f64>>,
    pub marginal: Vec<f64>,
}

/// Provenance wrapper around every JSON report the CLI writes.
#[derive(Debug, Serialize)]
struct Envelope<T: Serialize> {
    version: &'static str,
    command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed_source: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hash_function: Option<&'static str>,
    report: T,
}

impl<T: Serialize> Envelope<T> {
    fn new(command: &'static str, report: T) -> Self {
        Envelope {
            version: VERSION,
            command,
            seed: None,
            seed_source: None,
            config_sha256: None,
            input_sha256: None,
            hash_function: None,
            report,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn sha256_file(path: &Path) -> Result<String> {
    use std::io::Read;
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_sibling(path);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes_atomic(path, &bytes)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<(T, String)> {
    let bytes = std::fs::read(path)?;
    let value: T = serde_json::from_slice(&bytes).map_err(|e| {
        Error::config(path.display().to_string(), format!("invalid config: {e}"))
    })?;
    Ok((value, sha256_hex(&bytes)))
}

/// Seed taken from the `GDFM_SEED` environment variable, when set.
fn env_seed() -> Result<Option<u64>> {
    match std::env::var("GDFM_SEED") {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::config("GDFM_SEED", "must be an unsigned 64-bit integer")),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(Error::config("GDFM_SEED", "must be valid unicode"))
        }
    }
}

fn apply_env_seed(seed: &mut u64) -> Result<&'static str> {
    match env_seed()? {
        Some(s) => {
            *seed = s;
            Ok("env:GDFM_SEED")
        }
        None => Ok("config"),
    }
}

/// Exit code for a failed invocation: 2 for configuration and input-format
/// problems, 1 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig { .. } | Error::Json(_) | Error::StreamFormat { .. } => 2,
        _ => 1,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let par = if cli.sequential { Parallelism::Sequential } else { Parallelism::Auto };
    match &cli.command {
        Command::Generate { config, out, world_out } => cmd_generate(config, out, world_out.as_deref()),
        Command::Ingest { input, out, hash_bins, numeric_bins, actions, summary_out } => cmd_ingest(
            input,
            out,
            IngestOptions { hash_bins: *hash_bins, numeric_bins: *numeric_bins },
            actions.as_deref(),
            summary_out.as_deref(),
        ),
        Command::Pretrain { config, stream, out, report_out } => {
            cmd_pretrain(config, stream, out, report_out.as_deref())
        }
        Command::Stream { config, stream, out, checkpoint_out } => {
            cmd_stream(config, stream, out, checkpoint_out.as_deref())
        }
        Command::Suite { config, stream, out } => cmd_suite(config, stream, out, par),
        Command::Analyze { config, stream, out } => cmd_analyze(config, stream, out),
        Command::McStudy { config, out } => cmd_mc_study(config, out, par),
        Command::Recover { config, out } => cmd_recover(config, out.as_deref()),
    }
}

fn cmd_generate(config: &Path, out: &Path, world_out: Option<&Path>) -> Result<()> {
    let (mut cfg, config_sha) = load_json::<GenConfig>(config)?;
    let seed_source = apply_env_seed(&mut cfg.seed)?;
    let world = gen_world(&cfg)?;
    let clicks = gen_stream(&world, cfg.n_clicks, cfg.horizon_hours)?;

    let tmp = tmp_sibling(out);
    write_stream(&tmp, &clicks)?;
    std::fs::rename(&tmp, out)?;

    if let Some(dest) = world_out {
        write_json_atomic(dest, &world)?;
    }

    let n_converted = clicks.iter().filter(|c| c.converts).count() as u64;
    let mut env = Envelope::new(
        "generate",
        json!({
            "out": out.display().to_string(),
            "n_clicks": clicks.len() as u64,
            "n_converted": n_converted,
            "stream_sha256": sha256_file(out)?,
        }),
    );
    env.seed = Some(cfg.seed);
    env.seed_source = Some(seed_source);
    env.config_sha256 = Some(config_sha);
    print_json(&env)
}

fn cmd_ingest(
    input: &Path,
    out: &Path,
    opts: IngestOptions,
    actions: Option<&Path>,
    summary_out: Option<&Path>,
) -> Result<()> {
    let (mut clicks, summary) = ingest_criteo(input, &opts)?;
    if let Some(spec_path) = actions {
        let (specs, _) = load_json::<Vec<ActionSpec>>(spec_path)?;
        attach_conversion_actions(&mut clicks, &specs)?;
    }
    let tmp = tmp_sibling(out);
    write_stream(&tmp, &clicks)?;
    std::fs::rename(&tmp, out)?;

    let mut env = Envelope::new(
        "ingest",
        json!({
            "out": out.display().to_string(),
            "options": opts,
            "summary": summary,
            "stream_sha256": sha256_file(out)?,
        }),
    );
    env.input_sha256 = Some(sha256_file(input)?);
    env.hash_function = Some(HASH_FUNCTION);
    match summary_out {
        Some(dest) => write_json_atomic(dest, &env),
        None => print_json(&env),
    }
}

fn cmd_pretrain(config: &Path, stream: &Path, out: &Path, report_out: Option<&Path>) -> Result<()> {
    let (mut cfg, config_sha) = load_json::<RunFileConfig>(config)?;
    let seed_source = apply_env_seed(&mut cfg.run.seed)?;
    let clicks = read_stream(stream)?;
    let output = run_pretrain_only(&clicks, &cfg.actions, &cfg.run)?;

    let meta = json!({
        "command": "pretrain",
        "version": VERSION,
        "seed": cfg.run.seed,
        "seed_source": seed_source,
        "config_sha256": config_sha,
        "split_hour": output.split_hour,
        "method": cfg.run.method,
    });
    let tmp = tmp_sibling(out);
    save_state(&tmp, &output.state, meta)?;
    std::fs::rename(&tmp, out)?;

    let mut env = Envelope::new(
        "pretrain",
        json!({
            "checkpoint": out.display().to_string(),
            "split_hour": output.split_hour,
            "horizon_hour": output.horizon_hour,
            "n_pretrain_clicks": output.n_pretrain_clicks,
            "weights": output.state.weights,
            "clamp_events": output.state.theta.clamp_count(),
        }),
    );
    env.seed = Some(cfg.run.seed);
    env.seed_source = Some(seed_source);
    env.config_sha256 = Some(config_sha);
    env.input_sha256 = Some(sha256_file(stream)?);
    match report_out {
        Some(dest) => write_json_atomic(dest, &env),
        None => print_json(&env),
    }
}

fn cmd_stream(config: &Path, stream: &Path, out: &Path, checkpoint_out: Option<&Path>) -> Result<()> {
    let (mut cfg, config_sha) = load_json::<RunFileConfig>(config)?;
    let seed_source = apply_env_seed(&mut cfg.run.seed)?;
    let clicks = read_stream(stream)?;
    let output = run_method(&clicks, &cfg.actions, &cfg.run)?;

    if let Some(ckpt) = checkpoint_out {
        let meta = json!({
            "command": "stream",
            "version": VERSION,
            "seed": cfg.run.seed,
            "seed_source": seed_source,
            "config_sha256": config_sha,
            "method": cfg.run.method,
        });
        let tmp = tmp_sibling(ckpt);
        save_state(&tmp, &output.state, meta)?;
        std::fs::rename(&tmp, ckpt)?;
    }

    let mut env = Envelope::new("stream", output.report);
    env.seed = Some(cfg.run.seed);
    env.seed_source = Some(seed_source);
    env.config_sha256 = Some(config_sha);
    env.input_sha256 = Some(sha256_file(stream)?);
    write_json_atomic(out, &env)
}

fn cmd_suite(config: &Path, stream: &Path, out: &Path, par: Parallelism) -> Result<()> {
    let (cfg, config_sha) = load_json::<SuiteFileConfig>(config)?;
    let clicks = read_stream(stream)?;
    let report = run_experiment_suite(&clicks, &cfg.actions, &cfg.suite, par)?;

    let mut env = Envelope::new("suite", report);
    env.config_sha256 = Some(config_sha);
    env.input_sha256 = Some(sha256_file(stream)?);
    write_json_atomic(out, &env)
}

fn cmd_analyze(config: &Path, stream: &Path, out: &Path) -> Result<()> {
    let (cfg, config_sha) = load_json::<AnalyzeConfig>(config)?;
    let clicks = read_stream(stream)?;

    let reveal = entropy_vs_reveal_curve(&clicks, &cfg.reveal_grid)?;
    let n_actions = clicks.first().map_or(0, |c| c.actions.len());
    let stability = if cfg.stability && n_actions > 0 {
        Some(action_stability_curve(&clicks, n_actions)?)
    } else {
        None
    };
    let temporal_gap = match &cfg.temporal_gap {
        Some(tg) => Some(temporal_gap_curve(&clicks, tg)?),
        None => None,
    };

    let mut env = Envelope::new(
        "analyze",
        json!({
            "reveal_entropy": reveal,
            "stability": stability,
            "temporal_gap": temporal_gap,
        }),
    );
    env.config_sha256 = Some(config_sha);
    env.input_sha256 = Some(sha256_file(stream)?);
    write_json_atomic(out, &env)
}

fn cmd_mc_study(config: &Path, out: &Path, par: Parallelism) -> Result<()> {
    let (mut cfg, config_sha) = load_json::<McConfig>(config)?;
    let seed_source = apply_env_seed(&mut cfg.seed)?;
    let result = mc_entropy_vs_tv(&cfg, par)?;

    let mut env = Envelope::new("mc-study", result);
    env.seed = Some(cfg.seed);
    env.seed_source = Some(seed_source);
    env.config_sha256 = Some(config_sha);
    write_json_atomic(out, &env)
}

fn cmd_recover(config: &Path, out: Option<&Path>) -> Result<()> {
    let (cfg, config_sha) = load_json::<RecoverConfig>(config)?;
    let k = cfg.channel.len();
    let n = cfg.channel.first().map_or(0, |r| r.len());
    if cfg.channel.iter().any(|r| r.len() != n) {
        return Err(Error::config("channel", "rows must all have the same length"));
    }
    let entries: Vec<f64> = cfg.channel.iter().flatten().copied().collect();
    let channel = ChannelMatrix::new(k, n, entries)?;
    let recovered = recover_cvr(&channel, &cfg.marginal)?;

    let mut env = Envelope::new("recover", json!({ "recovered": recovered }));
    env.config_sha256 = Some(config_sha);
    match out {
        Some(dest) => write_json_atomic(dest, &env),
        None => print_json(&env),
    }
}
