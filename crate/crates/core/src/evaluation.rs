//! MAE / PC / NCA reports for a sonifier on a test table, and sweeps over
//! training hyperparameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, AudioMetric, FeatureExtractor, FeatureParams, DEFAULT_SAMPLE_RATE};
use crate::datasets::{AudioCorpus, FeatureTable};
use crate::error::{Error, Result};
use crate::gan::{generate, Generator, ModelState};
use crate::geometry::{
    metric_loss_from_pairs, nearest_centroid_accuracy, nearest_centroid_predict, pearson, Metric,
    MetricBatchStats,
};
use crate::training::{format_log, TrainConfig, Trainer};

/// Anything that maps feature vectors to clips.
pub trait Sonifier {
    fn input_dim(&self) -> usize;
    fn output_len(&self) -> usize;
    fn sonify(&self, inputs: &[&[f64]]) -> Result<Vec<AudioClip>>;
}

impl Sonifier for Generator<f32> {
    fn input_dim(&self) -> usize {
        self.config().input_dim
    }

    fn output_len(&self) -> usize {
        self.config().output_len
    }

    fn sonify(&self, inputs: &[&[f64]]) -> Result<Vec<AudioClip>> {
        generate(self, inputs)
    }
}

impl Sonifier for ModelState {
    fn input_dim(&self) -> usize {
        ModelState::input_dim(self)
    }

    fn output_len(&self) -> usize {
        ModelState::output_len(self)
    }

    fn sonify(&self, inputs: &[&[f64]]) -> Result<Vec<AudioClip>> {
        self.generate(inputs)
    }
}

/// Writes `scale·x` into the first samples of an otherwise silent clip: an
/// exact scaled isometry under the L2 audio metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaledIsometry {
    pub input_dim: usize,
    pub output_len: usize,
    pub scale: f64,
}

impl Sonifier for ScaledIsometry {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_len(&self) -> usize {
        self.output_len
    }

    fn sonify(&self, inputs: &[&[f64]]) -> Result<Vec<AudioClip>> {
        if self.input_dim > self.output_len {
            return Err(Error::Config(
                "isometry needs output_len >= input_dim".into(),
            ));
        }
        inputs
            .iter()
            .map(|x| {
                check_dim(x, self.input_dim)?;
                let mut s = vec![0.0; self.output_len];
                for (o, v) in s.iter_mut().zip(x.iter()) {
                    *o = self.scale * v;
                }
                let clip = AudioClip::new(s, DEFAULT_SAMPLE_RATE);
                clip.validate()?;
                Ok(clip)
            })
            .collect()
    }
}

/// Tag a JSON stub-model file carries in its `stub` field.
pub const ISOMETRY_STUB: &str = "scaled-isometry";

#[derive(Deserialize)]
struct StubFile {
    stub: String,
    #[serde(flatten)]
    rest: serde_json::Value,
}

/// Loads a trained checkpoint, or a JSON stub model such as
/// `{"stub": "scaled-isometry", "input_dim": 16, "output_len": 4096, "scale": 0.5}`.
pub fn load_sonifier(path: impl AsRef<Path>) -> Result<Box<dyn Sonifier>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.first() == Some(&b'{') {
        let f: StubFile = serde_json::from_slice(&bytes)?;
        return match f.stub.as_str() {
            ISOMETRY_STUB => Ok(Box::new(serde_json::from_value::<ScaledIsometry>(f.rest)?)),
            other => Err(Error::Checkpoint(format!("unknown stub model '{other}'"))),
        };
    }
    let (state, _) = crate::gan::load_checkpoint(path)?;
    Ok(Box::new(state))
}

/// Emits the same clip for every input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantSonifier {
    pub input_dim: usize,
    pub clip: AudioClip,
}

impl Sonifier for ConstantSonifier {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_len(&self) -> usize {
        self.clip.len()
    }

    fn sonify(&self, inputs: &[&[f64]]) -> Result<Vec<AudioClip>> {
        inputs
            .iter()
            .map(|x| check_dim(x, self.input_dim).map(|_| self.clip.clone()))
            .collect()
    }
}

fn check_dim(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::Shape(format!(
            "input has dimension {}, expected {dim}",
            x.len()
        )));
    }
    Ok(())
}

/// The point representation each audio metric is defined on: raw samples for
/// L2, flattened feature frames for MFCC.
pub fn representations(
    clips: &[AudioClip],
    mode: AudioMetric,
    params: &FeatureParams,
) -> Result<Vec<Vec<f64>>> {
    match mode {
        AudioMetric::L2 => Ok(clips.iter().map(|c| c.samples.clone()).collect()),
        AudioMetric::Mfcc => {
            let fx = FeatureExtractor::new(params.clone(), DEFAULT_SAMPLE_RATE)?;
            clips
                .iter()
                .map(|c| fx.extract(&c.samples).map(|f| f.into_vec()))
                .collect()
        }
    }
}

pub fn target_metric(mode: AudioMetric) -> Metric {
    match mode {
        AudioMetric::L2 => Metric::Euclidean,
        AudioMetric::Mfcc => Metric::SquaredFeatureFrame,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Use every pair when the test set has at most this many records;
    /// otherwise draw `pair_samples` pairs uniformly.
    pub full_pairs_max_n: usize,
    pub pair_samples: usize,
    pub pair_seed: u64,
    pub features: FeatureParams,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            full_pairs_max_n: 2000,
            pair_samples: 2000 * 1999 / 2,
            pair_seed: 0,
            features: FeatureParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    pub test_set_id: String,
    pub metric_mode: AudioMetric,
    pub n_records: usize,
    pub n_pairs: usize,
    pub pairs_subsampled: bool,
    pub mae: f64,
    pub pc: f64,
    pub nca: f64,
    /// Nearest-centroid accuracy of the source vectors under their own labels.
    pub source_nca: f64,
    pub mean_pairwise_out: f64,
}

const REPORT_KEYS: [&str; 11] = [
    "model_id",
    "test_set_id",
    "metric_mode",
    "n_records",
    "n_pairs",
    "pairs_subsampled",
    "mae",
    "pc",
    "nca",
    "source_nca",
    "mean_pairwise_out",
];

impl EvalReport {
    /// Flat `key = value` document, one entry per line.
    pub fn to_kv(&self) -> String {
        let vals = [
            self.model_id.clone(),
            self.test_set_id.clone(),
            self.metric_mode.to_string(),
            self.n_records.to_string(),
            self.n_pairs.to_string(),
            self.pairs_subsampled.to_string(),
            self.mae.to_string(),
            self.pc.to_string(),
            self.nca.to_string(),
            self.source_nca.to_string(),
            self.mean_pairwise_out.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in REPORT_KEYS.iter().zip(vals) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                reason: "expected key = value".into(),
            })?;
            m.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            m.get(k).cloned().ok_or_else(|| Error::Parse {
                line: 0,
                reason: format!("missing key '{k}'"),
            })
        };
        fn num<T: FromStr>(k: &str, v: String) -> Result<T> {
            v.parse().map_err(|_| Error::Parse {
                line: 0,
                reason: format!("bad value for '{k}': {v}"),
            })
        }
        Ok(Self {
            model_id: get("model_id")?,
            test_set_id: get("test_set_id")?,
            metric_mode: get("metric_mode")?.parse()?,
            n_records: num("n_records", get("n_records")?)?,
            n_pairs: num("n_pairs", get("n_pairs")?)?,
            pairs_subsampled: num("pairs_subsampled", get("pairs_subsampled")?)?,
            mae: num("mae", get("mae")?)?,
            pc: num("pc", get("pc")?)?,
            nca: num("nca", get("nca")?)?,
            source_nca: num("source_nca", get("source_nca")?)?,
            mean_pairwise_out: num("mean_pairwise_out", get("mean_pairwise_out")?)?,
        })
    }
}

/// All `i < j` pairs, or a uniform sample of distinct-index pairs.
fn pair_set(n: usize, opts: &EvalOptions) -> (Vec<(usize, usize)>, bool) {
    if n <= opts.full_pairs_max_n {
        let mut v = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                v.push((i, j));
            }
        }
        (v, false)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.pair_seed);
        let v = (0..opts.pair_samples)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                (i.min(j), i.max(j))
            })
            .collect();
        (v, true)
    }
}

/// Sonifies every record once and scores the result.
pub fn evaluate_model<S: Sonifier + ?Sized>(
    sonifier: &S,
    test: &FeatureTable,
    mode: AudioMetric,
    opts: &EvalOptions,
    model_id: &str,
    test_set_id: &str,
) -> Result<EvalReport> {
    if test.len() < 2 {
        return Err(Error::Arity("test table needs at least 2 records".into()));
    }
    if test.dimension != sonifier.input_dim() {
        return Err(Error::Config(format!(
            "test table has dimension {}, model expects {}",
            test.dimension,
            sonifier.input_dim()
        )));
    }
    let x = test.vectors();
    let clips = sonifier.sonify(&x)?;
    let reps = representations(&clips, mode, &opts.features)?;
    let metric = target_metric(mode);

    let (pairs, subsampled) = pair_set(x.len(), opts);
    let dx: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| Metric::Euclidean.distance(x[i], x[j]))
        .collect();
    let dy: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| metric.distance(&reps[i], &reps[j]))
        .collect();
    let mae = metric_loss_from_pairs(&dx, &dy)?;
    let pc = pearson(&dx, &dy)?;
    let mean_pairwise_out = MetricBatchStats::from_pairs(&dy).mean_pairwise;

    let labels = test.labels();
    let source_nca = nearest_centroid_accuracy(&x, &labels, Metric::Euclidean)?;
    let predicted = nearest_centroid_predict(&x, &labels, Metric::Euclidean)?;
    let nca = nearest_centroid_accuracy(&reps, &predicted, metric)?;

    Ok(EvalReport {
        model_id: model_id.into(),
        test_set_id: test_set_id.into(),
        metric_mode: mode,
        n_records: x.len(),
        n_pairs: pairs.len(),
        pairs_subsampled: subsampled,
        mae,
        pc,
        nca,
        source_nca,
        mean_pairwise_out,
    })
}

/// Hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    LambdaMetric,
    UriP,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda-metric" | "lambda_metric" => Ok(SweepParam::LambdaMetric),
            "uri-p" | "uri_p" => Ok(SweepParam::UriP),
            other => Err(Error::Config(format!(
                "unknown sweep parameter '{other}' (lambda-metric|uri-p)"
            ))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::LambdaMetric => "lambda_metric",
            SweepParam::UriP => "uri_p",
        }
    }

    pub fn apply(self, base: &TrainConfig, value: f64) -> TrainConfig {
        let mut c = base.clone();
        match self {
            SweepParam::LambdaMetric => c.lambda_metric = value,
            SweepParam::UriP => c.uri_p = value,
        }
        c
    }
}

/// Training and evaluation data shared by every run of a sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepData<'a> {
    pub train: &'a FeatureTable,
    pub validation: Option<&'a FeatureTable>,
    pub test: &'a FeatureTable,
    pub corpus: &'a AudioCorpus,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub result: std::result::Result<EvalReport, String>,
    pub run_dir: PathBuf,
}

pub const SWEEP_HEADER: &str = "value,pc,mae,nca,mean_pairwise_out";

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        match &r.result {
            Ok(e) => {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    r.value, e.pc, e.mae, e.nca, e.mean_pairwise_out
                );
            }
            Err(_) => {
                let _ = writeln!(s, "{},NaN,NaN,NaN,NaN", r.value);
            }
        }
    }
    s
}

/// Trains one model per value with the base seed, evaluates each on the test
/// table and writes `sweep.csv`, one `<metric>.dat` per metric, and a run
/// directory per value holding its log, checkpoint and report. A failed run
/// is recorded in its row and in `errors.txt`; the sweep continues.
pub fn run_sweep(
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    data: SweepData<'_>,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Arity("sweep needs at least one value".into()));
    }
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::with_capacity(values.len());
    for (i, &value) in values.iter().enumerate() {
        let run_dir = out.join(format!("run-{i:02}"));
        let cfg = param.apply(base, value);
        log::info!("sweep {param:?} = {value}: training {} steps", cfg.steps);
        let result = sweep_run(&cfg, data, &run_dir, &format!("{param:?}={value}"))
            .map_err(|e| e.to_string());
        if let Err(e) = &result {
            log::warn!("sweep {param:?} = {value} failed: {e}");
        }
        rows.push(SweepRow {
            value,
            result,
            run_dir,
        });
    }

    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("sweep.csv", format_sweep(&rows))?;
    type Getter = fn(&EvalReport) -> f64;
    let metrics: [(&str, Getter); 4] = [
        ("pc", |e| e.pc),
        ("mae", |e| e.mae),
        ("nca", |e| e.nca),
        ("mean_pairwise_out", |e| e.mean_pairwise_out),
    ];
    let name = param.name();
    for (metric, get) in metrics {
        let mut s = format!("# {name} {metric}\n");
        for r in &rows {
            if let Ok(e) = &r.result {
                let _ = writeln!(s, "{} {}", r.value, get(e));
            }
        }
        write(&format!("{metric}.dat"), s)?;
    }
    let errors: String = rows
        .iter()
        .filter_map(|r| {
            r.result
                .as_ref()
                .err()
                .map(|e| format!("{}: {e}\n", r.value))
        })
        .collect();
    write("errors.txt", errors)?;
    Ok(rows)
}

fn sweep_run(
    cfg: &TrainConfig,
    data: SweepData<'_>,
    run_dir: &Path,
    model_id: &str,
) -> Result<EvalReport> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut trainer = Trainer::new(data.train, data.validation, data.corpus, cfg.clone())?;
    trainer.run(|_, _| Ok(()))?;
    let log_path = run_dir.join("train_log.csv");
    fs::write(&log_path, format_log(trainer.log())).map_err(|e| Error::io(&log_path, e))?;
    trainer.save(run_dir.join("model.ckpt"))?;
    if let Some(v) = trainer.initial_validation() {
        let p = run_dir.join("initial_validation.txt");
        fs::write(&p, format!("pc = {}\nmae = {}\n", v.pc, v.mae)).map_err(|e| Error::io(&p, e))?;
    }
    let opts = EvalOptions {
        features: cfg.features.clone(),
        ..EvalOptions::default()
    };
    let report = evaluate_model(
        &trainer.state,
        data.test,
        cfg.target_metric,
        &opts,
        model_id,
        &data.test.provenance,
    )?;
    let p = run_dir.join("report.txt");
    fs::write(&p, report.to_kv()).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}
