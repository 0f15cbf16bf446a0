//! The `earballs` command line: data preparation, training, sonification,
//! evaluation, sweeps and listening-test packages.
//!
//! Failures end with exactly one stderr line of the form
//! `earballs: error: <kind>: <message>`; usage problems exit with 2 and
//! runtime failures with 1.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use earballs_core::audio::write_clip;
use earballs_core::datasets::{
    load_audio_corpus, load_feature_table, parse_feature_table, split_by_label, synth_desk,
    write_audio_corpus, write_feature_table, DeskSpec, SplitSpec,
};
use earballs_core::evaluation::{
    evaluate_model, load_sonifier, run_sweep, EvalOptions, SweepData, SweepParam,
};
use earballs_core::testgen::{
    check_package, generate_test, grade_responses, load_key, load_response, write_package,
    GenerateOptions,
};
use earballs_core::training::{format_log, Trainer};
use earballs_core::{AudioCorpus, AudioMetric, Error, FeatureTable};

mod config;
mod manifest;

pub use config::{
    resolve_seed, resolve_train_config, Preset, SeedSource, TrainOverrides, SEED_ENV,
};
pub use manifest::{hash_path, InputHash, RunManifest};

pub const TRAIN_TABLE: &str = "train.csv";
pub const VAL_TABLE: &str = "val.csv";
pub const TEST_TABLE: &str = "test.csv";
pub const CORPUS_DIR: &str = "corpus";

#[derive(Debug, Parser)]
#[command(
    name = "earballs",
    version,
    about = "Sonify feature vectors with metric-preserving GANs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a feature table by label and crop an audio corpus into a data directory.
    PrepareData(PrepareDataArgs),
    /// Write a synthetic desk-scale data directory.
    SynthData(SynthDataArgs),
    /// Train a generator on a data directory.
    Train(TrainArgs),
    /// Turn feature vectors into WAV files with a trained model.
    Sonify(SonifyArgs),
    /// Score a model on a split: MAE, Pearson correlation and centroid accuracy.
    Evaluate(EvaluateArgs),
    /// Train and evaluate one model per hyperparameter value.
    Sweep(SweepArgs),
    /// Generate listening-test packages.
    MakeTest(MakeTestArgs),
    /// Grade returned listening-test responses against package keys.
    Grade(GradeArgs),
    /// Validate listening-test package directories.
    CheckPackage(CheckPackageArgs),
}

#[derive(Debug, Args)]
pub struct PrepareDataArgs {
    /// Source feature table (CSV with header id,label,v0,...).
    #[arg(long)]
    pub features: PathBuf,
    /// Directory of target WAV files (searched recursively).
    #[arg(long)]
    pub audio_dir: PathBuf,
    /// Output data directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Labels reserved for validation.
    #[arg(long, conflicts_with_all = ["val_frac", "test_frac"])]
    pub val_labels: Option<usize>,
    /// Labels reserved for the test split.
    #[arg(long, conflicts_with_all = ["val_frac", "test_frac"])]
    pub test_labels: Option<usize>,
    /// Fraction of labels reserved for validation.
    #[arg(long)]
    pub val_frac: Option<f64>,
    /// Fraction of labels reserved for the test split.
    #[arg(long)]
    pub test_frac: Option<f64>,
    /// Samples per cropped clip.
    #[arg(long, default_value_t = 16384)]
    pub clip_len: usize,
    /// Seed for the split and the crops (falls back to EARBALLS_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    /// Output data directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Clusters per table.
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    /// Training records per cluster.
    #[arg(long, default_value_t = 25)]
    pub per_cluster: usize,
    /// Validation records per cluster.
    #[arg(long, default_value_t = 5)]
    pub val_per_cluster: usize,
    /// Test records per cluster.
    #[arg(long, default_value_t = 25)]
    pub test_per_cluster: usize,
    /// Vector dimension.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Standard deviation of members around their cluster center.
    #[arg(long, default_value_t = 0.1)]
    pub spread: f64,
    /// Target corpus size.
    #[arg(long, default_value_t = 500)]
    pub clips: usize,
    /// Samples per target clip.
    #[arg(long, default_value_t = 4096)]
    pub clip_len: usize,
    /// Seed (falls back to EARBALLS_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Data directory holding train.csv, corpus/ and optionally val.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the log, checkpoints and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run; only --steps may change.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct SonifyArgs {
    /// Model checkpoint or JSON stub model.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV of vectors: a feature table or bare comma-separated rows.
    #[arg(long, conflicts_with = "vector", required_unless_present = "vector")]
    pub vector_file: Option<PathBuf>,
    /// One vector given inline as comma-separated numbers.
    #[arg(long, allow_hyphen_values = true)]
    pub vector: Option<String>,
    /// Output directory; row i becomes 00000i.wav.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn file(self) -> &'static str {
        match self {
            Split::Train => TRAIN_TABLE,
            Split::Val => VAL_TABLE,
            Split::Test => TEST_TABLE,
        }
    }
}

/// Where a command reads its evaluation records from.
#[derive(Debug, Args)]
pub struct TableSource {
    /// Data directory to take the split from.
    #[arg(long, conflicts_with = "table", required_unless_present = "table")]
    pub data: Option<PathBuf>,
    /// Split of the data directory.
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Explicit feature table, instead of --data and --split.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

impl TableSource {
    fn path(&self) -> PathBuf {
        match (&self.table, &self.data) {
            (Some(t), _) => t.clone(),
            (None, Some(d)) => d.join(self.split.file()),
            (None, None) => unreachable!("clap requires one of them"),
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model checkpoint or JSON stub model.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub source: TableSource,
    /// Audio metric used for distances: mfcc or l2.
    #[arg(long, default_value_t = AudioMetric::Mfcc)]
    pub metric: AudioMetric,
    /// Output directory for report.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// Model id recorded in the report (defaults to the checkpoint file name).
    #[arg(long)]
    pub model_id: Option<String>,
    /// Seed for the pair subsample used on large tables.
    #[arg(long, default_value_t = 0)]
    pub pair_seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Data directory holding train.csv, test.csv, corpus/ and optionally val.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory: sweep.csv, per-metric .dat files and run-XX/ directories.
    #[arg(long)]
    pub out: PathBuf,
    /// Hyperparameter to vary: lambda_metric or uri_p.
    #[arg(long)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub values: Vec<f64>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct MakeTestArgs {
    /// Model checkpoint or JSON stub model.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub source: TableSource,
    /// Output directory; packages are written to <prefix>-000, <prefix>-001, ...
    #[arg(long)]
    pub out: PathBuf,
    /// Number of packages.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Package id prefix.
    #[arg(long, default_value = "pkg")]
    pub prefix: String,
    /// Model id recorded in the keys (defaults to the checkpoint file name).
    #[arg(long)]
    pub model_id: Option<String>,
    /// Built listening-ui bundle copied into each participant/assets/.
    #[arg(long)]
    pub ui_bundle: Option<PathBuf>,
    /// Give up after this many rejected draws (unbounded when omitted).
    #[arg(long)]
    pub max_attempts: Option<u64>,
    /// Seed; package i draws from stream i (falls back to EARBALLS_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradeArgs {
    /// Directory searched recursively for admin/key.json files.
    #[arg(long)]
    pub packages: PathBuf,
    /// Directory of response JSON files.
    #[arg(long)]
    pub responses: PathBuf,
    /// Output directory for grades.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckPackageArgs {
    /// Package directories.
    #[arg(required = true)]
    pub packages: Vec<PathBuf>,
    /// Output directory for check_report.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// The single stderr line describing the failure.
    pub fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::Runtime(e) => (e.kind(), e.to_string()),
        };
        format!(
            "earballs: error: {kind}: {}",
            msg.split_whitespace().collect::<Vec<_>>().join(" ")
        )
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.into()).line());
            return 2;
        }
    };
    match run(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, argv: &[String]) -> CliResult<()> {
    match cli.command {
        Command::PrepareData(a) => prepare_data(a, argv),
        Command::SynthData(a) => synth_data(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Sonify(a) => sonify(a, argv),
        Command::Evaluate(a) => evaluate(a, argv),
        Command::Sweep(a) => sweep(a, argv),
        Command::MakeTest(a) => make_test(a, argv),
        Command::Grade(a) => grade(a, argv),
        Command::CheckPackage(a) => check_packages(a, argv),
    }
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "missing input {what}: {}",
            path.display()
        )))
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("plain data serializes")
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| {
        CliError::Runtime(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn prepare_data(a: PrepareDataArgs, argv: &[String]) -> CliResult<()> {
    require(&a.features, "feature table")?;
    require(&a.audio_dir, "audio directory")?;
    let spec = match (a.val_labels, a.test_labels, a.val_frac, a.test_frac) {
        (None, None, None, None) => SplitSpec::Fractions {
            val: 0.1,
            test: 0.1,
        },
        (v, t, None, None) => SplitSpec::Reserve {
            val: v.unwrap_or(0),
            test: t.unwrap_or(0),
        },
        (None, None, v, t) => SplitSpec::Fractions {
            val: v.unwrap_or(0.0),
            test: t.unwrap_or(0.0),
        },
        _ => {
            return Err(CliError::Usage(
                "label counts and label fractions are exclusive".into(),
            ))
        }
    };
    let (seed, source) = resolve_seed(a.seed, None)?;
    let mut m = RunManifest::new("prepare-data", argv);
    m.config = serde_json::json!({ "split": format!("{spec:?}"), "clip_len": a.clip_len });
    m.seed = Some(seed);
    m.seed_source = source.to_string();
    m.input(&a.features)?;
    m.input(&a.audio_dir)?;
    for f in [TRAIN_TABLE, VAL_TABLE, TEST_TABLE, CORPUS_DIR] {
        m.output(&a.out.join(f));
    }
    m.write(&a.out)?;

    let table = load_feature_table(&a.features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, val, test) = split_by_label(&table, spec, &mut rng)?;
    let corpus = load_audio_corpus(&a.audio_dir, a.clip_len, &mut rng)?;
    write_feature_table(&train, a.out.join(TRAIN_TABLE))?;
    write_feature_table(&val, a.out.join(VAL_TABLE))?;
    write_feature_table(&test, a.out.join(TEST_TABLE))?;
    replace_corpus(&corpus, &a.out.join(CORPUS_DIR))?;
    log::info!(
        "split {} records into {}/{}/{}; {} clips ({} skipped)",
        table.len(),
        train.len(),
        val.len(),
        test.len(),
        corpus.len(),
        corpus.skipped.len()
    );
    Ok(())
}

fn replace_corpus(corpus: &AudioCorpus, dir: &Path) -> CliResult<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| {
            CliError::Runtime(Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })
        })?;
    }
    write_audio_corpus(corpus, dir)?;
    Ok(())
}

fn synth_data(a: SynthDataArgs, argv: &[String]) -> CliResult<()> {
    let spec = DeskSpec {
        clusters: a.clusters,
        per_cluster: a.per_cluster,
        dim: a.dim,
        spread: a.spread,
        val_per_cluster: a.val_per_cluster,
        test_per_cluster: a.test_per_cluster,
        clips: a.clips,
        clip_len: a.clip_len,
    };
    let (seed, source) = resolve_seed(a.seed, None)?;
    let mut m = RunManifest::new("synth-data", argv);
    m.config = to_json(&spec);
    m.seed = Some(seed);
    m.seed_source = source.to_string();
    for f in [TRAIN_TABLE, VAL_TABLE, TEST_TABLE, CORPUS_DIR] {
        m.output(&a.out.join(f));
    }
    m.write(&a.out)?;

    let data = synth_desk(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
    write_feature_table(&data.train, a.out.join(TRAIN_TABLE))?;
    write_feature_table(&data.validation, a.out.join(VAL_TABLE))?;
    write_feature_table(&data.test, a.out.join(TEST_TABLE))?;
    replace_corpus(&data.corpus, &a.out.join(CORPUS_DIR))?;
    log::info!("wrote desk data to {}", a.out.display());
    Ok(())
}

struct TrainingData {
    train: FeatureTable,
    validation: Option<FeatureTable>,
    corpus: AudioCorpus,
}

fn training_inputs(dir: &Path, m: &mut RunManifest) -> CliResult<()> {
    require(&dir.join(TRAIN_TABLE), "training table")?;
    require(&dir.join(CORPUS_DIR), "corpus directory")?;
    m.input(&dir.join(TRAIN_TABLE))?;
    if dir.join(VAL_TABLE).exists() {
        m.input(&dir.join(VAL_TABLE))?;
    }
    m.input(&dir.join(CORPUS_DIR))?;
    Ok(())
}

fn load_training_data(dir: &Path, clip_len: usize) -> CliResult<TrainingData> {
    let train = load_feature_table(dir.join(TRAIN_TABLE))?;
    let validation = match dir.join(VAL_TABLE) {
        p if p.exists() => Some(load_feature_table(p)?).filter(|t| !t.is_empty()),
        _ => None,
    };
    // clips are already cropped, so the crop stream is never consulted
    let corpus = load_audio_corpus(
        dir.join(CORPUS_DIR),
        clip_len,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    corpus.check(clip_len)?;
    Ok(TrainingData {
        train,
        validation,
        corpus,
    })
}

fn train(a: TrainArgs, argv: &[String]) -> CliResult<()> {
    let mut m = RunManifest::new("train", argv);
    training_inputs(&a.data, &mut m)?;
    let ckpt = a.out.join("model.ckpt");
    let log_path = a.out.join("train_log.csv");
    m.output(&log_path);
    m.output(&ckpt);

    if let Some(resume) = &a.resume {
        require(resume, "checkpoint")?;
        if a.train.has_model_overrides() {
            return Err(CliError::Usage(
                "--resume takes its configuration from the checkpoint; only --steps may be given"
                    .into(),
            ));
        }
        m.input(resume)?;
        m.config =
            serde_json::json!({ "resume": resume.display().to_string(), "steps": a.train.steps });
        m.seed_source = "checkpoint".into();
        m.write(&a.out)?;
        // the checkpoint fixes output_len, so peek at it for the corpus check
        let (state, _) = earballs_core::gan::load_checkpoint(resume)?;
        let data = load_training_data(&a.data, state.output_len())?;
        drop(state);
        let mut trainer =
            Trainer::resume(resume, &data.train, data.validation.as_ref(), &data.corpus)?;
        if let Some(steps) = a.train.steps {
            trainer.set_steps(steps);
        }
        return run_trainer(trainer, &a.out, &log_path, &ckpt);
    }

    let (cfg, seed_source) = resolve_train_config(&a.train)?;
    m.config = to_json(&cfg);
    m.seed = Some(cfg.seed);
    m.seed_source = seed_source.to_string();
    m.write(&a.out)?;
    let data = load_training_data(&a.data, cfg.output_len)?;
    let trainer = Trainer::new(&data.train, data.validation.as_ref(), &data.corpus, cfg)?;
    run_trainer(trainer, &a.out, &log_path, &ckpt)
}

fn run_trainer(
    mut trainer: Trainer<'_>,
    out: &Path,
    log_path: &Path,
    ckpt: &Path,
) -> CliResult<()> {
    let total = trainer.config().steps;
    let every = trainer.config().checkpoint_every;
    let report = (total / 20).max(1);
    trainer.run(|t, row| {
        if row.step % report == 0 || row.step == total {
            log::info!(
                "step {}/{total}: g_loss {:.4} d_loss {:.4} metric {}",
                row.step,
                row.g_loss,
                row.d_loss,
                row.metric_loss.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
        }
        if every > 0 && row.step % every == 0 {
            t.save(out.join(format!("checkpoint-{:06}.ckpt", row.step)))?;
        }
        Ok(())
    })?;
    write_text(log_path, &format_log(trainer.log()))?;
    trainer.save(ckpt)?;
    if let Some(v) = trainer.initial_validation() {
        log::info!("initial validation: pc {:.4} mae {:.4}", v.pc, v.mae);
    }
    Ok(())
}

/// Vectors from a feature table or from bare numeric CSV rows.
pub fn parse_vectors(text: &str) -> std::result::Result<Vec<Vec<f64>>, Error> {
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .unwrap_or("");
    if first.starts_with("id,") {
        return Ok(parse_feature_table(text)?
            .records
            .into_iter()
            .map(|r| r.vector)
            .collect());
    }
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        rows.push(parse_row(line).map_err(|reason| Error::Parse {
            line: i + 1,
            reason,
        })?);
    }
    Ok(rows)
}

fn parse_row(line: &str) -> std::result::Result<Vec<f64>, String> {
    line.split(',')
        .map(|f| {
            let f = f.trim();
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("'{f}' is not a finite number"))
        })
        .collect()
}

fn model_name(path: &Path) -> String {
    path.file_name()
        .map_or("model".into(), |f| f.to_string_lossy().into_owned())
}

fn sonify(a: SonifyArgs, argv: &[String]) -> CliResult<()> {
    require(&a.checkpoint, "checkpoint")?;
    let mut m = RunManifest::new("sonify", argv);
    m.input(&a.checkpoint)?;
    let vectors = match (&a.vector_file, &a.vector) {
        (Some(f), _) => {
            require(f, "vector file")?;
            m.input(f)?;
            let text = fs::read_to_string(f).map_err(|e| Error::Io {
                path: f.clone(),
                source: e,
            })?;
            parse_vectors(&text)?
        }
        (None, Some(v)) => {
            m.config = serde_json::json!({ "vector": v });
            vec![parse_row(v).map_err(|r| CliError::Usage(format!("--vector: {r}")))?]
        }
        (None, None) => unreachable!("clap requires one of them"),
    };
    for i in 0..vectors.len() {
        m.output(&a.out.join(format!("{i:05}.wav")));
    }
    m.write(&a.out)?;

    let model = load_sonifier(&a.checkpoint)?;
    let refs: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
    let clips = model.sonify(&refs)?;
    for (i, clip) in clips.iter().enumerate() {
        write_clip(clip, a.out.join(format!("{i:05}.wav")))?;
    }
    log::info!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs, argv: &[String]) -> CliResult<()> {
    require(&a.checkpoint, "checkpoint")?;
    let table_path = a.source.path();
    require(&table_path, "evaluation table")?;
    let opts = EvalOptions {
        pair_seed: a.pair_seed,
        ..EvalOptions::default()
    };
    let mut m = RunManifest::new("evaluate", argv);
    m.input(&a.checkpoint)?;
    m.input(&table_path)?;
    m.config = serde_json::json!({ "metric": a.metric.as_str(), "options": to_json(&opts) });
    let report_path = a.out.join("report.txt");
    m.output(&report_path);
    m.write(&a.out)?;

    let model = load_sonifier(&a.checkpoint)?;
    let table = load_feature_table(&table_path)?;
    let model_id = a.model_id.unwrap_or_else(|| model_name(&a.checkpoint));
    let report = evaluate_model(
        &*model,
        &table,
        a.metric,
        &opts,
        &model_id,
        &table_path.display().to_string(),
    )?;
    let text = report.to_kv();
    write_text(&report_path, &text)?;
    print!("{text}");
    Ok(())
}

fn sweep(a: SweepArgs, argv: &[String]) -> CliResult<()> {
    let mut m = RunManifest::new("sweep", argv);
    training_inputs(&a.data, &mut m)?;
    require(&a.data.join(TEST_TABLE), "test table")?;
    m.input(&a.data.join(TEST_TABLE))?;
    let (cfg, seed_source) = resolve_train_config(&a.train)?;
    m.config = serde_json::json!({
        "base": to_json(&cfg),
        "param": format!("{:?}", a.param),
        "values": a.values,
    });
    m.seed = Some(cfg.seed);
    m.seed_source = seed_source.to_string();
    m.output(&a.out.join("sweep.csv"));
    m.write(&a.out)?;

    let data = load_training_data(&a.data, cfg.output_len)?;
    let test = load_feature_table(a.data.join(TEST_TABLE))?;
    let rows = run_sweep(
        &cfg,
        a.param,
        &a.values,
        SweepData {
            train: &data.train,
            validation: data.validation.as_ref(),
            test: &test,
            corpus: &data.corpus,
        },
        &a.out,
    )?;
    for r in &rows {
        match &r.result {
            Ok(e) => log::info!(
                "{} = {}: pc {:.4} mae {:.4} nca {:.4}",
                a.param.name(),
                r.value,
                e.pc,
                e.mae,
                e.nca
            ),
            Err(e) => log::warn!("{} = {} failed: {e}", a.param.name(), r.value),
        }
    }
    Ok(())
}

fn make_test(a: MakeTestArgs, argv: &[String]) -> CliResult<()> {
    require(&a.checkpoint, "checkpoint")?;
    let table_path = a.source.path();
    require(&table_path, "test table")?;
    if let Some(b) = &a.ui_bundle {
        require(b, "UI bundle")?;
    }
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let (seed, source) = resolve_seed(a.seed, None)?;
    let model_id = a
        .model_id
        .clone()
        .unwrap_or_else(|| model_name(&a.checkpoint));
    let mut m = RunManifest::new("make-test", argv);
    m.input(&a.checkpoint)?;
    m.input(&table_path)?;
    if let Some(b) = &a.ui_bundle {
        m.input(b)?;
    }
    m.config = serde_json::json!({
        "count": a.count,
        "prefix": a.prefix,
        "model_id": model_id,
        "max_attempts": a.max_attempts,
    });
    m.seed = Some(seed);
    m.seed_source = source.to_string();
    let ids: Vec<String> = (0..a.count)
        .map(|i| format!("{}-{i:03}", a.prefix))
        .collect();
    for id in &ids {
        m.output(&a.out.join(id));
    }
    m.write(&a.out)?;

    let model = load_sonifier(&a.checkpoint)?;
    let table = load_feature_table(&table_path)?;
    for (i, id) in ids.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let opts = GenerateOptions {
            package_id: id.clone(),
            model_id: model_id.clone(),
            seed,
            max_attempts: a.max_attempts,
        };
        let pkg = generate_test(&*model, &table, &opts, &mut rng)?;
        let dir = a.out.join(id);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
        }
        write_package(&pkg, &dir, a.ui_bundle.as_deref())?;
        let check = check_package(&dir);
        if !check.is_valid() {
            return Err(Error::Generation(format!(
                "{id} failed validation: {}",
                check.violations.join("; ")
            ))
            .into());
        }
        log::info!(
            "{id}: composition {:?}, labels {:?}, {} attempts",
            pkg.log.composition,
            pkg.log.labels,
            pkg.log.attempts
        );
    }
    Ok(())
}

fn find_keys(root: &Path) -> Vec<PathBuf> {
    walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .flatten()
        .map(|e| e.into_path())
        .filter(|p| p.ends_with("admin/key.json"))
        .collect()
}

fn grade(a: GradeArgs, argv: &[String]) -> CliResult<()> {
    require(&a.packages, "package directory")?;
    require(&a.responses, "response directory")?;
    let mut m = RunManifest::new("grade", argv);
    let key_paths = find_keys(&a.packages);
    if key_paths.is_empty() {
        return Err(CliError::Usage(format!(
            "no admin/key.json under {}",
            a.packages.display()
        )));
    }
    for k in &key_paths {
        m.input(k)?;
    }
    m.input(&a.responses)?;
    let out = a.out.join("grades.json");
    m.output(&out);
    m.write(&a.out)?;

    let keys = key_paths
        .iter()
        .map(load_key)
        .collect::<Result<Vec<_>, _>>()?;
    let responses = earballs_core::testgen::json_files(&a.responses)?
        .iter()
        .map(load_response)
        .collect::<Result<Vec<_>, _>>()?;
    let report = grade_responses(&responses, &keys)?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
    write_text(&out, &text)?;
    let mut s = String::new();
    for model in &report.models {
        let _ = writeln!(
            s,
            "{}: {} participants, mean HSA {:.3}, correct {}-{} of 8, mean HSM {:.3}",
            model.model_id,
            model.participants,
            model.mean_hsa,
            model.min_correct,
            model.max_correct,
            model.mean_hsm
        );
    }
    for x in &report.excluded {
        let _ = writeln!(
            s,
            "excluded {} ({}): {}",
            x.participant_id, x.package_id, x.reason
        );
    }
    print!("{s}");
    Ok(())
}

fn check_packages(a: CheckPackageArgs, argv: &[String]) -> CliResult<()> {
    for p in &a.packages {
        require(p, "package")?;
    }
    let mut m = RunManifest::new("check-package", argv);
    for p in &a.packages {
        m.input(p)?;
    }
    let out = a.out.join("check_report.json");
    m.output(&out);
    m.write(&a.out)?;

    let mut report = serde_json::Map::new();
    let mut invalid = Vec::new();
    for p in &a.packages {
        let c = check_package(p);
        let name = p.display().to_string();
        if c.is_valid() {
            println!("{name}: valid");
        } else {
            for v in &c.violations {
                println!("{name}: {v}");
            }
            invalid.push(name.clone());
        }
        report.insert(name, to_json(&c.violations));
    }
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
    write_text(&out, &text)?;
    if invalid.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidPackage(invalid.join(", ")).into())
    }
}

impl CliError {
    pub fn is_usage(&self) -> bool {
        matches!(self, CliError::Usage(_))
    }
}
