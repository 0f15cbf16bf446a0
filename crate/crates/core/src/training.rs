//! Alternating WGAN-GP training with the metric-preservation term, URI
//! batches, per-purpose random streams and resumable checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioMetric, FeatureExtractor, FeatureParams, DEFAULT_SAMPLE_RATE};
use crate::datasets::{sample_indices, AudioCorpus, FeatureTable};
use crate::error::{Error, Result};
use crate::evaluation::{representations, Sonifier};
use crate::gan::{
    discriminator_loss, generator_loss, load_checkpoint, save_checkpoint, AdamConfig,
    DiscriminatorConfig, GeneratorConfig, GeneratorObjective, ModelState,
};
use crate::geometry::{metric_loss, pearson_distance_correlation, sample_unit_sphere, Metric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Generator updates.
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub d_updates_per_g: usize,
    pub lambda_metric: f64,
    pub lambda_gp: f64,
    /// Probability that a generator batch is undiscriminated random input.
    pub uri_p: f64,
    pub target_metric: AudioMetric,
    pub seed: u64,
    pub model_dim: usize,
    pub output_len: usize,
    pub kernel: usize,
    pub phase_shuffle_n: usize,
    /// Emit a log row every this many generator steps.
    pub log_every: u64,
    /// Validation cadence in generator steps (0 disables).
    pub validate_every: u64,
    /// Checkpoint cadence in generator steps (0 disables).
    pub checkpoint_every: u64,
    pub features: FeatureParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            batch_size: 64,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            d_updates_per_g: 5,
            lambda_metric: 3.0,
            lambda_gp: 10.0,
            uri_p: 0.5,
            target_metric: AudioMetric::Mfcc,
            seed: 0,
            model_dim: 64,
            output_len: 16384,
            kernel: 25,
            phase_shuffle_n: 2,
            log_every: 1,
            validate_every: 500,
            checkpoint_every: 0,
            features: FeatureParams::default(),
        }
    }
}

impl TrainConfig {
    /// CPU-scale schedule: 4096-sample clips, width 32, 2000 steps of 16.
    pub fn desk() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            model_dim: 32,
            output_len: 4096,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.uri_p) {
            return bad(format!("uri_p = {} outside [0, 1]", self.uri_p));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.d_updates_per_g == 0 || self.log_every == 0 {
            return bad("d_updates_per_g and log_every must be positive".into());
        }
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return bad("optimizer settings out of range".into());
        }
        if self.lambda_metric < 0.0 || self.lambda_gp < 0.0 {
            return bad("loss weights must be nonnegative".into());
        }
        self.features.validate(DEFAULT_SAMPLE_RATE)?;
        self.generator_config(1).validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn generator_config(&self, input_dim: usize) -> GeneratorConfig {
        GeneratorConfig {
            input_dim,
            model_dim: self.model_dim,
            output_len: self.output_len,
            upsample_factor: 4,
            kernel: self.kernel,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            phase_shuffle_n: self.phase_shuffle_n,
            ..DiscriminatorConfig::matching(&self.generator_config(1))
        }
    }
}

/// Independent random streams, one per purpose, all derived from one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Streams {
    pub init: ChaCha8Rng,
    pub batch: ChaCha8Rng,
    pub uri: ChaCha8Rng,
    pub epsilon: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
    pub audio: ChaCha8Rng,
}

/// Word positions of every stream; serialized as decimal strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamPositions(pub Vec<String>);

impl Streams {
    pub fn new(seed: u64) -> Self {
        let s = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            init: s(0),
            batch: s(1),
            uri: s(2),
            epsilon: s(3),
            shuffle: s(4),
            audio: s(5),
        }
    }

    fn all(&self) -> [&ChaCha8Rng; 6] {
        [
            &self.init,
            &self.batch,
            &self.uri,
            &self.epsilon,
            &self.shuffle,
            &self.audio,
        ]
    }

    pub fn positions(&self) -> StreamPositions {
        StreamPositions(
            self.all()
                .iter()
                .map(|r| r.get_word_pos().to_string())
                .collect(),
        )
    }

    pub fn restore(seed: u64, pos: &StreamPositions) -> Result<Self> {
        let mut s = Self::new(seed);
        if pos.0.len() != 6 {
            return Err(Error::Checkpoint(
                "expected 6 random stream positions".into(),
            ));
        }
        let rngs = [
            &mut s.init,
            &mut s.batch,
            &mut s.uri,
            &mut s.epsilon,
            &mut s.shuffle,
            &mut s.audio,
        ];
        for (r, p) in rngs.into_iter().zip(&pos.0) {
            let p: u128 = p
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad stream position '{p}'")))?;
            r.set_word_pos(p);
        }
        Ok(s)
    }
}

/// Draws the URI flag: true with probability `uri_p`.
pub fn draw_uri<R: Rng + ?Sized>(uri_p: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < uri_p
}

/// `batch_size` distinct records of the table.
pub fn record_batch<R: Rng + ?Sized>(
    source: &FeatureTable,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let idx = sample_indices(source.len(), batch_size, rng)?;
    Ok(idx
        .into_iter()
        .map(|i| source.records[i].vector.clone())
        .collect())
}

/// A whole batch from exactly one source: random unit vectors (flag set)
/// with probability `uri_p`, otherwise distinct dataset records.
pub fn make_batch<R: Rng + ?Sized>(
    source: &FeatureTable,
    batch_size: usize,
    uri_p: f64,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, bool)> {
    if source.is_empty() {
        return Err(Error::Sampling("empty source dataset".into()));
    }
    if draw_uri(uri_p, rng) {
        Ok((sample_unit_sphere(batch_size, source.dimension, rng)?, true))
    } else {
        Ok((record_batch(source, batch_size, rng)?, false))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub pc: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub g_loss: f64,
    /// Mean over the critic updates preceding this generator step.
    pub d_loss: f64,
    pub metric_loss: Option<f64>,
    pub val_pc: Option<f64>,
    pub val_mae: Option<f64>,
    pub uri_flag: bool,
}

pub const LOG_HEADER: &str = "step,g_loss,d_loss,metric_loss,val_pc,val_mae,uri_flag";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.g_loss,
            self.d_loss,
            opt(self.metric_loss),
            opt(self.val_pc),
            opt(self.val_mae),
            u8::from(self.uri_flag)
        )
    }
}

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

#[derive(Debug, Serialize, Deserialize)]
struct ResumeState {
    train_config: TrainConfig,
    streams: StreamPositions,
    log: Vec<LogRow>,
    d_updates: u64,
    initial_validation: Option<Validation>,
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: Vec<LogRow>,
    pub d_updates: u64,
    /// Critic updates that used URI batches (zero by construction).
    pub d_uri_updates: u64,
    /// Validation of the freshly initialized model.
    pub initial_validation: Option<Validation>,
}

/// Owns the model state and all training streams.
pub struct Trainer<'a> {
    config: TrainConfig,
    source: &'a FeatureTable,
    validation: Option<&'a FeatureTable>,
    audio: Vec<f32>,
    n_audio: usize,
    extractor: FeatureExtractor,
    pub state: ModelState,
    streams: Streams,
    log: Vec<LogRow>,
    d_updates: u64,
    initial_validation: Option<Validation>,
}

fn check_inputs(
    config: &TrainConfig,
    source: &FeatureTable,
    validation: Option<&FeatureTable>,
    corpus: &AudioCorpus,
) -> Result<()> {
    config.validate()?;
    if source.is_empty() || corpus.is_empty() {
        return Err(Error::Config(
            "source dataset and audio corpus must be nonempty".into(),
        ));
    }
    if source.len() < config.batch_size || corpus.len() < config.batch_size {
        return Err(Error::Config(format!(
            "batch size {} exceeds the source ({}) or corpus ({}) size",
            config.batch_size,
            source.len(),
            corpus.len()
        )));
    }
    corpus.check(config.output_len)?;
    if let Some(v) = validation {
        if v.dimension != source.dimension || v.len() < 2 {
            return Err(Error::Config(
                "validation table must match the source dimension and hold 2+ records".into(),
            ));
        }
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    pub fn new(
        source: &'a FeatureTable,
        validation: Option<&'a FeatureTable>,
        corpus: &AudioCorpus,
        config: TrainConfig,
    ) -> Result<Self> {
        check_inputs(&config, source, validation, corpus)?;
        let mut streams = Streams::new(config.seed);
        let state = ModelState::new(
            config.generator_config(source.dimension),
            config.discriminator_config(),
            config.adam(),
            &mut streams.init,
        )?;
        let mut t = Self::assemble(source, validation, corpus, config, state, streams)?;
        t.initial_validation = t.validate()?;
        Ok(t)
    }

    fn assemble(
        source: &'a FeatureTable,
        validation: Option<&'a FeatureTable>,
        corpus: &AudioCorpus,
        config: TrainConfig,
        state: ModelState,
        streams: Streams,
    ) -> Result<Self> {
        let audio = corpus
            .clips
            .iter()
            .flat_map(|c| c.samples.iter().map(|s| *s as f32))
            .collect();
        Ok(Self {
            extractor: FeatureExtractor::new(config.features.clone(), DEFAULT_SAMPLE_RATE)?,
            config,
            source,
            validation,
            audio,
            n_audio: corpus.len(),
            state,
            streams,
            log: Vec::new(),
            d_updates: 0,
            initial_validation: None,
        })
    }

    /// Continues a run from a checkpoint written by [`Self::save`].
    pub fn resume(
        path: impl AsRef<Path>,
        source: &'a FeatureTable,
        validation: Option<&'a FeatureTable>,
        corpus: &AudioCorpus,
    ) -> Result<Self> {
        let (state, extra) = load_checkpoint(path)?;
        let resume: ResumeState = serde_json::from_value(extra)
            .map_err(|e| Error::Checkpoint(format!("checkpoint carries no training state: {e}")))?;
        check_inputs(&resume.train_config, source, validation, corpus)?;
        if state.input_dim() != source.dimension {
            return Err(Error::Config(format!(
                "checkpoint expects {}-dimensional inputs, source has {}",
                state.input_dim(),
                source.dimension
            )));
        }
        let streams = Streams::restore(resume.train_config.seed, &resume.streams)?;
        let mut t = Self::assemble(
            source,
            validation,
            corpus,
            resume.train_config,
            state,
            streams,
        )?;
        t.log = resume.log;
        t.d_updates = resume.d_updates;
        t.initial_validation = resume.initial_validation;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Overrides the total step target (e.g. to extend a resumed run).
    pub fn set_steps(&mut self, steps: u64) {
        self.config.steps = steps;
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn initial_validation(&self) -> Option<Validation> {
        self.initial_validation
    }

    pub fn d_updates(&self) -> u64 {
        self.d_updates
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let extra = ResumeState {
            train_config: self.config.clone(),
            streams: self.streams.positions(),
            log: self.log.clone(),
            d_updates: self.d_updates,
            initial_validation: self.initial_validation,
        };
        save_checkpoint(&self.state, serde_json::to_value(extra)?, path)
    }

    /// PC and MAE of the current generator on the validation table.
    pub fn validate(&self) -> Result<Option<Validation>> {
        let Some(val) = self.validation else {
            return Ok(None);
        };
        let inputs: Vec<&[f64]> = val.vectors();
        let sonified = self.state.sonify(&inputs)?;
        let reps = representations(&sonified, self.config.target_metric, &self.config.features)?;
        let target = match self.config.target_metric {
            AudioMetric::L2 => Metric::Euclidean,
            AudioMetric::Mfcc => Metric::SquaredFeatureFrame,
        };
        let mae = metric_loss(&inputs, &reps, Metric::Euclidean, target);
        let pc = pearson_distance_correlation(&inputs, &reps, Metric::Euclidean, target);
        match (pc, mae) {
            (Ok(pc), Ok(mae)) => Ok(Some(Validation { pc, mae })),
            (pc, mae) => {
                log::warn!(
                    "validation undefined at step {}: pc {pc:?}, mae {mae:?}",
                    self.state.step
                );
                Ok(Some(Validation {
                    pc: pc.unwrap_or(f64::NAN),
                    mae: mae.unwrap_or(f64::NAN),
                }))
            }
        }
    }

    fn audio_batch(&mut self) -> Result<Vec<f32>> {
        let len = self.config.output_len;
        let idx = sample_indices(
            self.n_audio,
            self.config.batch_size,
            &mut self.streams.audio,
        )?;
        let mut out = Vec::with_capacity(idx.len() * len);
        for i in idx {
            out.extend_from_slice(&self.audio[i * len..(i + 1) * len]);
        }
        Ok(out)
    }

    /// One generator update preceded by `d_updates_per_g` critic updates.
    pub fn step(&mut self) -> Result<Option<LogRow>> {
        let cfg = self.config.clone();
        let b = cfg.batch_size;

        let mut d_loss = 0.0;
        for _ in 0..cfg.d_updates_per_g {
            // critic batches are never URI batches
            let x = record_batch(self.source, b, &mut self.streams.batch)?;
            let x: Vec<f32> = x.iter().flatten().map(|v| *v as f32).collect();
            let a = self.audio_batch()?;
            let s = &mut self.state;
            let (loss, grads) = discriminator_loss(
                &s.generator,
                &s.discriminator,
                &x,
                &a,
                b,
                cfg.lambda_gp,
                &mut self.streams.epsilon,
                &mut self.streams.shuffle,
                true,
            )?;
            s.d_opt.step(
                &mut s.discriminator.params,
                &grads.expect("gradients requested"),
            );
            self.d_updates += 1;
            if !loss.total.is_finite() {
                return Err(Error::Config(format!(
                    "critic loss diverged at step {}",
                    s.step
                )));
            }
            d_loss += loss.total / cfg.d_updates_per_g as f64;
        }

        let uri = draw_uri(cfg.uri_p, &mut self.streams.uri);
        let inputs = if uri {
            sample_unit_sphere(b, self.source.dimension, &mut self.streams.uri)?
        } else {
            record_batch(self.source, b, &mut self.streams.batch)?
        };
        let objective = GeneratorObjective {
            lambda_metric: cfg.lambda_metric,
            source_metric: Metric::Euclidean,
            target_metric: cfg.target_metric,
            features: &self.extractor,
        };
        let s = &mut self.state;
        let (g_loss, grads) = generator_loss(
            &s.generator,
            &s.discriminator,
            &inputs,
            &objective,
            uri,
            &mut self.streams.shuffle,
            true,
        )?;
        s.g_opt.step(
            &mut s.generator.params,
            &grads.expect("gradients requested"),
        );
        s.step += 1;
        let step = s.step;

        let val = if cfg.validate_every > 0 && step % cfg.validate_every == 0 {
            self.validate()?
        } else {
            None
        };
        if step % cfg.log_every != 0 && val.is_none() {
            return Ok(None);
        }
        let row = LogRow {
            step,
            g_loss: g_loss.total,
            d_loss,
            metric_loss: g_loss.metric.is_finite().then_some(g_loss.metric),
            val_pc: val.map(|v| v.pc),
            val_mae: val.map(|v| v.mae),
            uri_flag: uri,
        };
        self.log.push(row.clone());
        Ok(Some(row))
    }

    /// Runs until `config.steps` generator updates have been made. `hook`
    /// sees each emitted row after it is logged.
    pub fn run(&mut self, mut hook: impl FnMut(&Self, &LogRow) -> Result<()>) -> Result<()> {
        while self.state.step < self.config.steps {
            if let Some(row) = self.step()? {
                hook(self, &row)?;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            state: self.state,
            log: self.log,
            d_updates: self.d_updates,
            d_uri_updates: 0,
            initial_validation: self.initial_validation,
        }
    }
}

/// Trains from scratch with no checkpointing.
pub fn train(
    source: &FeatureTable,
    validation: Option<&FeatureTable>,
    corpus: &AudioCorpus,
    config: TrainConfig,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(source, validation, corpus, config)?;
    t.run(|_, _| Ok(()))?;
    Ok(t.finish())
}
