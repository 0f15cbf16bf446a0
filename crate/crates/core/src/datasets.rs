//! Source feature tables, target audio corpora, label-disjoint splits and
//! the synthetic stand-ins used for desk-scale experiments.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{read_clip, write_clip, AudioClip, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::geometry::sample_unit_sphere;

const UNIT_NORM_TOL: f64 = 1e-5;
const UNIT_NORM_TAG: &str = "unit-normalized";

/// One labeled source sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub label: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    pub records: Vec<FeatureRecord>,
    pub dimension: usize,
    pub provenance: String,
    /// Every vector has unit Euclidean norm (checked on construction).
    pub unit_normalized: bool,
}

impl FeatureTable {
    pub fn new(
        records: Vec<FeatureRecord>,
        provenance: impl Into<String>,
        unit_normalized: bool,
    ) -> Result<Self> {
        let dimension = records.first().map_or(0, |r| r.vector.len());
        let mut ids = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if r.vector.len() != dimension {
                return Err(Error::Shape(format!(
                    "record {i} ('{}') has dimension {}, expected {dimension}",
                    r.id,
                    r.vector.len()
                )));
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "record '{}' has a non-finite entry",
                    r.id
                )));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Config(format!("duplicate record id '{}'", r.id)));
            }
            if unit_normalized {
                check_unit(&r.vector)
                    .map_err(|n| Error::Domain(format!("record '{}' has norm {n}", r.id)))?;
            }
        }
        Ok(Self {
            records,
            dimension,
            provenance: provenance.into(),
            unit_normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn vectors(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.vector.as_slice()).collect()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.label.as_str()).collect()
    }

    pub fn distinct_labels(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.label.as_str()).collect()
    }

    /// Record indices grouped by label, labels in lexicographic order.
    pub fn indices_by_label(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            m.entry(r.label.as_str()).or_default().push(i);
        }
        m
    }

    fn subset(&self, keep: impl Fn(&FeatureRecord) -> bool, tag: &str) -> FeatureTable {
        FeatureTable {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            dimension: self.dimension,
            provenance: format!("{} [{tag}]", self.provenance),
            unit_normalized: self.unit_normalized,
        }
    }
}

fn check_unit(v: &[f64]) -> std::result::Result<(), f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() <= UNIT_NORM_TOL {
        Ok(())
    } else {
        Err(n)
    }
}

/// Parses the CSV feature-table format: a header `id,label,v0,...,v{d-1}`,
/// one record per line, `#` comment lines. The comments `# provenance: ...`
/// and `# unit-normalized` are recognized.
pub fn parse_feature_table(text: &str) -> Result<FeatureTable> {
    let mut header: Option<usize> = None;
    let mut provenance = Vec::new();
    let mut unit = false;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        let err = |reason: String| Error::Parse {
            line: line_no,
            reason,
        };
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(p) = comment.strip_prefix("provenance:") {
                provenance.push(p.trim().to_string());
            } else if comment == UNIT_NORM_TAG {
                unit = true;
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let Some(dim) = header else {
            if fields.len() < 3 || fields[0] != "id" || fields[1] != "label" {
                return Err(err("header must be id,label,v0,...".into()));
            }
            for (j, f) in fields[2..].iter().enumerate() {
                if *f != format!("v{j}") {
                    return Err(err(format!(
                        "header column {} is '{f}', expected 'v{j}'",
                        j + 2
                    )));
                }
            }
            header = Some(fields.len() - 2);
            continue;
        };
        if fields.len() != dim + 2 {
            return Err(err(format!(
                "row '{}' has {} values, expected {dim}",
                fields[0],
                fields.len().saturating_sub(2)
            )));
        }
        if fields[0].is_empty() {
            return Err(err("empty id".into()));
        }
        if !ids.insert(fields[0].to_string()) {
            return Err(err(format!("duplicate id '{}'", fields[0])));
        }
        let mut vector = Vec::with_capacity(dim);
        for (j, f) in fields[2..].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| err(format!("v{j} = '{f}' is not a number")))?;
            if !v.is_finite() {
                return Err(err(format!("v{j} is not finite")));
            }
            vector.push(v);
        }
        if unit {
            check_unit(&vector).map_err(|n| {
                err(format!(
                    "row '{}' is marked unit-normalized but has norm {n}",
                    fields[0]
                ))
            })?;
        }
        records.push(FeatureRecord {
            id: fields[0].to_string(),
            label: fields[1].to_string(),
            vector,
        });
    }
    if header.is_none() {
        return Err(Error::Parse {
            line: 0,
            reason: "missing header".into(),
        });
    }
    FeatureTable::new(records, provenance.join("; "), unit)
}

pub fn load_feature_table(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = parse_feature_table(&text)?;
    if table.provenance.is_empty() {
        table.provenance = path.display().to_string();
    }
    Ok(table)
}

pub fn format_feature_table(table: &FeatureTable) -> String {
    let mut s = String::new();
    if !table.provenance.is_empty() {
        let _ = writeln!(s, "# provenance: {}", table.provenance.replace('\n', " "));
    }
    if table.unit_normalized {
        let _ = writeln!(s, "# {UNIT_NORM_TAG}");
    }
    s.push_str("id,label");
    for j in 0..table.dimension {
        let _ = write!(s, ",v{j}");
    }
    s.push('\n');
    for r in &table.records {
        s.push_str(&r.id);
        s.push(',');
        s.push_str(&r.label);
        for v in &r.vector {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_feature_table(table: &FeatureTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_feature_table(table)).map_err(|e| Error::io(path, e))
}

/// How many labels go to the validation and test splits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    Reserve {
        val: usize,
        test: usize,
    },
    /// Fractions of the label set, rounded to the nearest count.
    Fractions {
        val: f64,
        test: f64,
    },
}

/// Label-disjoint partition into `(train, val, test)`.
pub fn split_by_label<R: Rng + ?Sized>(
    table: &FeatureTable,
    spec: SplitSpec,
    rng: &mut R,
) -> Result<(FeatureTable, FeatureTable, FeatureTable)> {
    let mut labels: Vec<&str> = table.distinct_labels().into_iter().collect();
    let n = labels.len();
    let (nv, nt) = match spec {
        SplitSpec::Reserve { val, test } => (val, test),
        SplitSpec::Fractions { val, test } => {
            if !(0.0..=1.0).contains(&val) || !(0.0..=1.0).contains(&test) {
                return Err(Error::Config("split fractions must lie in [0, 1]".into()));
            }
            (
                (val * n as f64).round() as usize,
                (test * n as f64).round() as usize,
            )
        }
    };
    if nv + nt > n {
        return Err(Error::Config(format!(
            "cannot reserve {nv} validation and {nt} test labels from {n} labels"
        )));
    }
    labels.shuffle(rng);
    let val: HashSet<&str> = labels[..nv].iter().copied().collect();
    let test: HashSet<&str> = labels[nv..nv + nt].iter().copied().collect();
    Ok((
        table.subset(
            |r| !val.contains(r.label.as_str()) && !test.contains(r.label.as_str()),
            "train",
        ),
        table.subset(|r| val.contains(r.label.as_str()), "val"),
        table.subset(|r| test.contains(r.label.as_str()), "test"),
    ))
}

/// Preprocessed target clips of uniform length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AudioCorpus {
    pub clips: Vec<AudioClip>,
    pub sources: Vec<PathBuf>,
    /// Files that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl AudioCorpus {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clip_len(&self) -> Option<usize> {
        self.clips.first().map(AudioClip::len)
    }

    /// Validates uniform length and sample rate.
    pub fn check(&self, clip_len: usize) -> Result<()> {
        for (i, c) in self.clips.iter().enumerate() {
            if c.len() != clip_len || c.sample_rate != DEFAULT_SAMPLE_RATE {
                return Err(Error::Config(format!(
                    "corpus clip {i} has {} samples at {} Hz, expected {clip_len} at {DEFAULT_SAMPLE_RATE} Hz",
                    c.len(),
                    c.sample_rate
                )));
            }
        }
        Ok(())
    }
}

/// Crops a uniformly random window of `clip_len` samples, zero-padding
/// shorter inputs. Returns the clip and the start offset.
pub fn random_crop<R: Rng + ?Sized>(
    samples: &[f64],
    clip_len: usize,
    rng: &mut R,
) -> (Vec<f64>, usize) {
    if samples.len() <= clip_len {
        let mut out = samples.to_vec();
        out.resize(clip_len, 0.0);
        return (out, 0);
    }
    let offset = rng.random_range(0..=samples.len() - clip_len);
    (samples[offset..offset + clip_len].to_vec(), offset)
}

/// Reads every `.wav` under `dir` (sorted by path), applying a random crop.
/// Unreadable files are skipped and recorded.
pub fn load_audio_corpus<R: Rng + ?Sized>(
    dir: impl AsRef<Path>,
    clip_len: usize,
    rng: &mut R,
) -> Result<AudioCorpus> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "audio corpus directory {} does not exist",
            dir.display()
        )));
    }
    let mut corpus = AudioCorpus::default();
    let files = walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .filter(|e| {
            e.path()
                .extension()
                .is_some_and(|x| x.eq_ignore_ascii_case("wav"))
        });
    for entry in files {
        let path = entry.path().to_path_buf();
        match read_clip(&path) {
            Ok(clip) => {
                let (samples, _) = random_crop(&clip.samples, clip_len, rng);
                corpus.clips.push(AudioClip::new(samples, clip.sample_rate));
                corpus.sources.push(path);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                corpus.skipped.push((path, e.to_string()));
            }
        }
    }
    if corpus.is_empty() {
        return Err(Error::Config(format!(
            "no readable clips under {} ({} skipped)",
            dir.display(),
            corpus.skipped.len()
        )));
    }
    Ok(corpus)
}

/// Writes clips as `clip-00000.wav`, ... under `dir`.
pub fn write_audio_corpus(corpus: &AudioCorpus, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(corpus.len());
    for (i, clip) in corpus.clips.iter().enumerate() {
        let p = dir.join(format!("clip-{i:05}.wav"));
        write_clip(clip, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Clustered unit vectors: `n_clusters` centers uniform on the sphere, each
/// member a Gaussian perturbation of its center, re-normalized. Labels are
/// `{prefix}{cluster:02}`.
pub fn synth_source_labeled<R: Rng + ?Sized>(
    prefix: &str,
    n_clusters: usize,
    per_cluster: usize,
    dim: usize,
    spread: f64,
    rng: &mut R,
) -> Result<FeatureTable> {
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::Domain(format!(
            "spread must be positive, got {spread}"
        )));
    }
    let centers = sample_unit_sphere(n_clusters.max(1), dim, rng)?;
    let noise = Normal::new(0.0, spread).expect("positive spread");
    let mut records = Vec::with_capacity(n_clusters * per_cluster);
    for (c, center) in centers.iter().take(n_clusters).enumerate() {
        let label = format!("{prefix}{c:02}");
        for j in 0..per_cluster {
            let mut v: Vec<f64> = center.iter().map(|x| x + noise.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            records.push(FeatureRecord {
                id: format!("{label}-{j:03}"),
                label: label.clone(),
                vector: v,
            });
        }
    }
    FeatureTable::new(
        records,
        format!("synthetic clusters: {n_clusters}x{per_cluster}, d={dim}, spread={spread}"),
        true,
    )
}

pub fn synth_source<R: Rng + ?Sized>(
    n_clusters: usize,
    per_cluster: usize,
    dim: usize,
    spread: f64,
    rng: &mut R,
) -> Result<FeatureTable> {
    synth_source_labeled("c", n_clusters, per_cluster, dim, spread, rng)
}

pub const SYNTH_PEAK: f64 = 0.9;

/// One clip: 2 to 5 sinusoids with log-uniform frequencies in [100, 4000] Hz,
/// each under a Gaussian envelope, plus low-level noise, peak-normalized.
pub fn synth_clip<R: Rng + ?Sized>(clip_len: usize, rng: &mut R) -> AudioClip {
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let noise = Normal::new(0.0, 0.01).expect("valid");
    let mut s = vec![0.0; clip_len];
    let partials = rng.random_range(2..=5);
    for _ in 0..partials {
        let f = (rng.random_range(100f64.ln()..4000f64.ln())).exp();
        let amp = rng.random_range(0.3..1.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let center = rng.random_range(0.1..0.9) * clip_len as f64;
        let width = rng.random_range(0.1..0.6) * clip_len as f64;
        for (t, v) in s.iter_mut().enumerate() {
            let env = (-((t as f64 - center) / width).powi(2)).exp();
            *v += amp * env * (std::f64::consts::TAU * f * t as f64 / sr + phase).sin();
        }
    }
    for v in &mut s {
        *v += noise.sample(rng);
    }
    let peak = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        s.iter_mut().for_each(|v| *v *= SYNTH_PEAK / peak);
    }
    AudioClip::new(s, DEFAULT_SAMPLE_RATE)
}

pub fn synth_audio<R: Rng + ?Sized>(n: usize, clip_len: usize, rng: &mut R) -> Result<AudioCorpus> {
    if n == 0 {
        return Err(Error::Arity(
            "synthetic corpus needs at least one clip".into(),
        ));
    }
    let clips: Vec<AudioClip> = (0..n).map(|_| synth_clip(clip_len, rng)).collect();
    let sources = (0..n)
        .map(|i| PathBuf::from(format!("synthetic:{i:05}")))
        .collect();
    Ok(AudioCorpus {
        clips,
        sources,
        skipped: Vec::new(),
    })
}

/// Sizes of the synthetic desk-scale experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskSpec {
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub spread: f64,
    pub val_per_cluster: usize,
    pub test_per_cluster: usize,
    pub clips: usize,
    pub clip_len: usize,
}

impl Default for DeskSpec {
    fn default() -> Self {
        Self {
            clusters: 8,
            per_cluster: 25,
            dim: 16,
            spread: 0.1,
            val_per_cluster: 5,
            test_per_cluster: 25,
            clips: 500,
            clip_len: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeskData {
    pub train: FeatureTable,
    pub validation: FeatureTable,
    pub test: FeatureTable,
    pub corpus: AudioCorpus,
}

/// Train, validation and test tables plus a target corpus, drawn in that
/// order from one stream. Validation (`v*`) and test (`t*`) clusters have
/// their own centers, so all three are label-disjoint.
pub fn synth_desk<R: Rng + ?Sized>(spec: &DeskSpec, rng: &mut R) -> Result<DeskData> {
    let train = synth_source_labeled(
        "c",
        spec.clusters,
        spec.per_cluster,
        spec.dim,
        spec.spread,
        rng,
    )?;
    let validation = synth_source_labeled(
        "v",
        spec.clusters,
        spec.val_per_cluster,
        spec.dim,
        spec.spread,
        rng,
    )?;
    let test = synth_source_labeled(
        "t",
        spec.clusters,
        spec.test_per_cluster,
        spec.dim,
        spec.spread,
        rng,
    )?;
    let corpus = synth_audio(spec.clips, spec.clip_len, rng)?;
    Ok(DeskData {
        train,
        validation,
        test,
        corpus,
    })
}

/// `k` distinct indices from `0..n`, in random order.
pub(crate) fn sample_indices<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::Sampling(format!(
            "cannot draw {k} distinct items from {n}"
        )));
    }
    Ok(index::sample(rng, n, k).into_vec())
}
