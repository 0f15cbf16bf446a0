//! Training configuration resolution: command-line flag, then config file,
//! then preset default. Seeds additionally fall back to `EARBALLS_SEED`.

use std::fmt;
use std::fs;
use std::path::PathBuf;

use clap::{Args, ValueEnum};

use earballs_core::{AudioMetric, TrainConfig};

use crate::CliError;

pub const SEED_ENV: &str = "EARBALLS_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 16384-sample clips, width 64, 30000 steps of 64.
    Full,
    /// 4096-sample clips, width 32, 2000 steps of 16.
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedSource {
    Flag,
    ConfigFile,
    Env,
    Default,
}

impl fmt::Display for SeedSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeedSource::Flag => "flag",
            SeedSource::ConfigFile => "config",
            SeedSource::Env => "env",
            SeedSource::Default => "default",
        })
    }
}

/// Every training knob as an optional flag.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    /// TOML file of training settings (keys as in the run manifest's config).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in defaults the config file and flags start from [default: full].
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Generator updates.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Records per batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Adam first-moment decay.
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Adam second-moment decay.
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Critic updates per generator update.
    #[arg(long)]
    pub d_updates_per_g: Option<usize>,
    /// Weight of the metric loss in the generator objective.
    #[arg(long)]
    pub lambda_metric: Option<f64>,
    /// Gradient-penalty weight.
    #[arg(long)]
    pub lambda_gp: Option<f64>,
    /// Probability a generator batch is uniform random input.
    #[arg(long)]
    pub uri_p: Option<f64>,
    /// Audio metric the generator is trained to match: mfcc or l2.
    #[arg(long)]
    pub target_metric: Option<AudioMetric>,
    /// Seed for every random stream (falls back to the config file, then EARBALLS_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Base channel width of both networks.
    #[arg(long)]
    pub model_dim: Option<usize>,
    /// Samples per generated clip.
    #[arg(long)]
    pub output_len: Option<usize>,
    /// Convolution kernel width.
    #[arg(long)]
    pub kernel: Option<usize>,
    /// Critic phase-shuffle radius in samples.
    #[arg(long)]
    pub phase_shuffle_n: Option<usize>,
    /// Log a row every this many steps.
    #[arg(long)]
    pub log_every: Option<u64>,
    /// Validate every this many steps (0 disables).
    #[arg(long)]
    pub validate_every: Option<u64>,
    /// Write checkpoint-<step>.ckpt every this many steps, checked at logged steps (0 disables).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

impl TrainOverrides {
    /// True when anything other than `--steps` is set.
    pub fn has_model_overrides(&self) -> bool {
        let o = self;
        o.config.is_some()
            || o.preset.is_some()
            || o.batch_size.is_some()
            || o.lr.is_some()
            || o.beta1.is_some()
            || o.beta2.is_some()
            || o.d_updates_per_g.is_some()
            || o.lambda_metric.is_some()
            || o.lambda_gp.is_some()
            || o.uri_p.is_some()
            || o.target_metric.is_some()
            || o.seed.is_some()
            || o.model_dim.is_some()
            || o.output_len.is_some()
            || o.kernel.is_some()
            || o.phase_shuffle_n.is_some()
            || o.log_every.is_some()
            || o.validate_every.is_some()
            || o.checkpoint_every.is_some()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<(u64, SeedSource), CliError> {
    if let Some(s) = flag {
        return Ok((s, SeedSource::Flag));
    }
    if let Some(s) = file {
        return Ok((s, SeedSource::ConfigFile));
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            v.trim().parse().map(|s| (s, SeedSource::Env)).map_err(|_| {
                CliError::Usage(format!("{SEED_ENV}='{v}' is not an unsigned integer"))
            })
        }
        Err(_) => Ok((0, SeedSource::Default)),
    }
}

/// The effective configuration and where its seed came from.
pub fn resolve_train_config(o: &TrainOverrides) -> Result<(TrainConfig, SeedSource), CliError> {
    let base = match o.preset {
        Some(Preset::Desk) => TrainConfig::desk(),
        Some(Preset::Full) | None => TrainConfig::default(),
    };
    let mut table = toml::Table::try_from(&base).expect("config serializes");
    let mut file_seed = None;
    if let Some(path) = &o.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: toml::Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        if let Some(v) = file.get("seed") {
            let s = v
                .as_integer()
                .and_then(|i| u64::try_from(i).ok())
                .ok_or_else(|| {
                    CliError::Usage(format!(
                        "config {}: seed must be a nonnegative integer",
                        path.display()
                    ))
                })?;
            file_seed = Some(s);
        }
        merge(&mut table, file);
    }
    let mut c: TrainConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;

    let (seed, source) = resolve_seed(o.seed, file_seed)?;
    c.seed = seed;
    macro_rules! set {
        ($($f:ident),*) => {
            $(if let Some(v) = o.$f { c.$f = v; })*
        };
    }
    set!(
        steps,
        batch_size,
        lr,
        beta1,
        beta2,
        d_updates_per_g,
        lambda_metric,
        lambda_gp,
        uri_p,
        target_metric,
        model_dim,
        output_len,
        kernel,
        phase_shuffle_n,
        log_every,
        validate_every,
        checkpoint_every
    );
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((c, source))
}
