//! Listening-test generation, on-disk packages, package validation and
//! grading of participant responses.
//!
//! Package layout:
//!
//! ```text
//! <pkg>/participant/{A,B,C}.wav, 0.wav..7.wav, manifest.json, index.html, assets/
//! <pkg>/admin/key.json, admin/generation_log.json
//! ```
//!
//! The participant tree never holds the answer key or the identity of the
//! memorability clip; the intro clip is a copy stored as `assets/intro.wav`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_clip, write_clip, AudioClip};
use crate::datasets::{sample_indices, FeatureTable};
use crate::error::{Error, Result};
use crate::evaluation::Sonifier;
use crate::geometry::l2_separates;

pub const CHOICES: [&str; 3] = ["A", "B", "C"];
pub const N_QUERIES: usize = 8;
pub const UI_SCHEMA_VERSION: u32 = 1;
pub const INTRO_FILE: &str = "assets/intro.wav";
pub const INTRO_PLAYS: u32 = 3;
pub const TIME_LIMIT_SECONDS: u32 = 15 * 60;

/// All `(a, b, c)` with `a + b + c = 8`, each part nonnegative (45 of them).
pub fn compositions() -> Vec<[usize; 3]> {
    let mut v = Vec::with_capacity(45);
    for a in 0..=N_QUERIES {
        for b in 0..=N_QUERIES - a {
            v.push([a, b, N_QUERIES - a - b]);
        }
    }
    v
}

/// Administrator-only answer key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub package_id: String,
    /// Query index ("0".."7") to reference letter.
    pub answers: BTreeMap<String, String>,
    /// Reference letter played as the intro clip.
    pub memorability: String,
    pub model_id: String,
    pub seed: u64,
}

/// Administrator-side record of how a package was drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub package_id: String,
    pub model_id: String,
    pub seed: u64,
    pub attempts: u64,
    pub rejected_for_size: u64,
    pub rejected_for_separation: u64,
    /// Queries per reference, in A, B, C order.
    pub composition: [usize; 3],
    /// Source labels behind A, B, C.
    pub labels: [String; 3],
    pub reference_ids: [String; 3],
    /// Source record id of each query, in query order.
    pub query_ids: Vec<String>,
}

impl GenerationLog {
    pub fn rejection_rate(&self) -> f64 {
        (self.attempts - 1) as f64 / self.attempts as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestPackage {
    pub key: AnswerKey,
    pub log: GenerationLog,
    pub references: [AudioClip; 3],
    pub queries: Vec<AudioClip>,
}

impl TestPackage {
    pub fn intro_clip(&self) -> &AudioClip {
        let i = CHOICES
            .iter()
            .position(|c| *c == self.key.memorability)
            .expect("valid key");
        &self.references[i]
    }
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub package_id: String,
    pub model_id: String,
    pub seed: u64,
    /// Optional cap on rejection-loop attempts; `None` loops until a
    /// separable triple is found.
    pub max_attempts: Option<u64>,
}

/// Draws one test: rejection-sample a composition and three labels that L2
/// separates, then `count + 1` examples per label, the first of each being
/// its reference. Queries are shuffled into positions 0..7.
pub fn generate_test<S: Sonifier + ?Sized, R: Rng + ?Sized>(
    sonifier: &S,
    table: &FeatureTable,
    opts: &GenerateOptions,
    rng: &mut R,
) -> Result<TestPackage> {
    let by_label = table.indices_by_label();
    let comps = compositions();
    // the most lenient composition (3, 3, 2) needs labels with > 4 examples
    let min_needed = 1 + 3;
    if by_label.values().filter(|v| v.len() > min_needed).count() < 3 {
        return Err(Error::Generation(format!(
            "need at least 3 labels with more than {min_needed} examples, table has {}",
            by_label.values().filter(|v| v.len() > min_needed).count()
        )));
    }

    let (mut attempts, mut rejected_size, mut rejected_sep) = (0u64, 0u64, 0u64);
    let (comp, labels) = loop {
        if opts.max_attempts.is_some_and(|cap| attempts >= cap) {
            return Err(Error::Generation(format!(
                "no separable label triple after {attempts} attempts"
            )));
        }
        attempts += 1;
        let comp = *comps.choose(rng).expect("nonempty");
        let need = 1 + comp.iter().max().expect("three parts");
        let candidates: Vec<&str> = by_label
            .iter()
            .filter(|(_, v)| v.len() > need)
            .map(|(l, _)| *l)
            .collect();
        if candidates.len() < 3 {
            rejected_size += 1;
            continue;
        }
        let picked: Vec<&str> = candidates.choose_multiple(rng, 3).copied().collect();
        let cats: Vec<Vec<&[f64]>> = picked
            .iter()
            .map(|l| {
                by_label[l]
                    .iter()
                    .map(|&i| table.records[i].vector.as_slice())
                    .collect()
            })
            .collect();
        if l2_separates(&cats)? {
            break (comp, picked);
        }
        rejected_sep += 1;
    };

    let mut reference_rows = Vec::with_capacity(3);
    let mut queries: Vec<(usize, usize)> = Vec::with_capacity(N_QUERIES);
    for (k, label) in labels.iter().enumerate() {
        let members = &by_label[label];
        let picks = sample_indices(members.len(), comp[k] + 1, rng)?;
        reference_rows.push(members[picks[0]]);
        queries.extend(picks[1..].iter().map(|&p| (members[p], k)));
    }
    queries.shuffle(rng);
    let memorability = CHOICES[rng.random_range(0..3)].to_string();

    let rows: Vec<usize> = reference_rows
        .iter()
        .copied()
        .chain(queries.iter().map(|q| q.0))
        .collect();
    let inputs: Vec<&[f64]> = rows
        .iter()
        .map(|&i| table.records[i].vector.as_slice())
        .collect();
    let mut clips = sonifier.sonify(&inputs)?;
    let query_clips = clips.split_off(3);
    let references: [AudioClip; 3] = clips.try_into().expect("three references");

    let answers = queries
        .iter()
        .enumerate()
        .map(|(q, (_, k))| (q.to_string(), CHOICES[*k].to_string()))
        .collect();
    let id = |i: usize| table.records[i].id.clone();
    Ok(TestPackage {
        key: AnswerKey {
            package_id: opts.package_id.clone(),
            answers,
            memorability,
            model_id: opts.model_id.clone(),
            seed: opts.seed,
        },
        log: GenerationLog {
            package_id: opts.package_id.clone(),
            model_id: opts.model_id.clone(),
            seed: opts.seed,
            attempts,
            rejected_for_size: rejected_size,
            rejected_for_separation: rejected_sep,
            composition: comp,
            labels: [labels[0].into(), labels[1].into(), labels[2].into()],
            reference_ids: [
                id(reference_rows[0]),
                id(reference_rows[1]),
                id(reference_rows[2]),
            ],
            query_ids: queries.iter().map(|q| id(q.0)).collect(),
        },
        references,
        queries: query_clips,
    })
}

/// Re-checks L2 separation of a package's three labels on `table`.
pub fn recheck_separation(log: &GenerationLog, table: &FeatureTable) -> Result<bool> {
    let by_label = table.indices_by_label();
    let mut cats = Vec::with_capacity(3);
    for l in &log.labels {
        let idx = by_label
            .get(l.as_str())
            .ok_or_else(|| Error::Config(format!("label '{l}' is not in the table")))?;
        cats.push(
            idx.iter()
                .map(|&i| table.records[i].vector.as_slice())
                .collect::<Vec<_>>(),
        );
    }
    l2_separates(&cats)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UiClip {
    pub file: String,
    pub label: String,
    /// `reference` or `query`.
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UiIntro {
    pub file: String,
    pub label: String,
    pub plays: u32,
}

/// Participant-facing manifest read by the listening page. It never names
/// the answers or which reference the intro clip is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UiManifest {
    pub schema_version: u32,
    pub package_id: String,
    pub clips: Vec<UiClip>,
    pub intro: UiIntro,
    pub choices: Vec<String>,
    pub time_limit_seconds: u32,
}

impl UiManifest {
    pub fn for_package(package_id: &str) -> Self {
        let mut clips: Vec<UiClip> = CHOICES
            .iter()
            .map(|c| UiClip {
                file: format!("{c}.wav"),
                label: c.to_string(),
                kind: "reference".into(),
            })
            .collect();
        clips.extend((0..N_QUERIES).map(|q| UiClip {
            file: format!("{q}.wav"),
            label: q.to_string(),
            kind: "query".into(),
        }));
        Self {
            schema_version: UI_SCHEMA_VERSION,
            package_id: package_id.into(),
            clips,
            intro: UiIntro {
                file: INTRO_FILE.into(),
                label: "intro sound".into(),
                plays: INTRO_PLAYS,
            },
            choices: CHOICES.iter().map(|c| c.to_string()).collect(),
            time_limit_seconds: TIME_LIMIT_SECONDS,
        }
    }
}

const INDEX_HTML: &str = r#"<!doctype html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>Listening test</title>
<link rel="stylesheet" href="assets/style.css">
</head>
<body>
<main id="app" data-manifest="manifest.json">
<noscript>This test needs JavaScript. The clips are A.wav, B.wav, C.wav and 0.wav to 7.wav.</noscript>
</main>
<script src="assets/app.js"></script>
</body>
</html>
"#;

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn copy_tree(from: &Path, to: &Path) -> Result<()> {
    for entry in walkdir::WalkDir::new(from).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Config(format!("cannot read UI bundle: {e}")))?;
        let rel = entry.path().strip_prefix(from).expect("under root");
        let dest = to.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
        } else {
            fs::copy(entry.path(), &dest).map_err(|e| Error::io(&dest, e))?;
        }
    }
    Ok(())
}

/// Writes the package under `dir`. `ui_bundle`, when given, is a directory
/// copied into `participant/assets/` (the page loads `assets/app.js`).
pub fn write_package(
    pkg: &TestPackage,
    dir: impl AsRef<Path>,
    ui_bundle: Option<&Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    let part = dir.join("participant");
    let admin = dir.join("admin");
    let assets = part.join("assets");
    for d in [&part, &admin, &assets] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (c, clip) in CHOICES.iter().zip(&pkg.references) {
        write_clip(clip, part.join(format!("{c}.wav")))?;
    }
    for (q, clip) in pkg.queries.iter().enumerate() {
        write_clip(clip, part.join(format!("{q}.wav")))?;
    }
    write_clip(pkg.intro_clip(), part.join(INTRO_FILE))?;
    if let Some(bundle) = ui_bundle {
        copy_tree(bundle, &assets)?;
    }
    write_json(
        &UiManifest::for_package(&pkg.key.package_id),
        &part.join("manifest.json"),
    )?;
    let index = part.join("index.html");
    fs::write(&index, INDEX_HTML).map_err(|e| Error::io(&index, e))?;
    write_json(&pkg.key, &admin.join("key.json"))?;
    write_json(&pkg.log, &admin.join("generation_log.json"))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PackageCheck {
    pub violations: Vec<String>,
}

impl PackageCheck {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

const KEY_FIELDS: [&str; 4] = ["answers", "memorability", "memorability_choice", "key"];

/// Validates a package directory; every broken invariant is listed.
pub fn check_package(dir: impl AsRef<Path>) -> PackageCheck {
    let dir = dir.as_ref();
    let part = dir.join("participant");
    let admin = dir.join("admin");
    let mut v = Vec::new();

    // count rule
    let mut root_wavs = BTreeSet::new();
    match fs::read_dir(&part) {
        Ok(entries) => {
            for e in entries.flatten() {
                let name = e.file_name().to_string_lossy().into_owned();
                if name.to_ascii_lowercase().ends_with(".wav") {
                    root_wavs.insert(name);
                }
            }
        }
        Err(e) => v.push(format!("layout rule: cannot read {}: {e}", part.display())),
    }
    let expected: BTreeSet<String> = CHOICES
        .iter()
        .map(|c| format!("{c}.wav"))
        .chain((0..N_QUERIES).map(|q| format!("{q}.wav")))
        .collect();
    let n_ref = root_wavs
        .iter()
        .filter(|n| CHOICES.iter().any(|c| **n == format!("{c}.wav")))
        .count();
    let n_query = root_wavs.len() - n_ref;
    if n_ref != 3 || n_query != N_QUERIES || root_wavs != expected {
        v.push(format!(
            "count rule: expected 3 references and {N_QUERIES} queries (A-C.wav, 0-7.wav), found {n_ref} references and {n_query} queries"
        ));
    }

    // format rule
    let mut lengths = BTreeSet::new();
    let mut clips = BTreeMap::new();
    for name in root_wavs
        .iter()
        .cloned()
        .chain(std::iter::once(INTRO_FILE.to_string()))
    {
        let p = part.join(&name);
        match read_clip(&p) {
            Ok(c) => {
                lengths.insert(c.len());
                clips.insert(name, c);
            }
            Err(e) => v.push(format!("format rule: {name}: {e}")),
        }
    }
    if lengths.len() > 1 {
        v.push(format!(
            "format rule: clips have differing lengths {lengths:?}"
        ));
    }

    // blinding rule
    for entry in walkdir::WalkDir::new(&part).into_iter().flatten() {
        if !entry.file_type().is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().to_ascii_lowercase();
        if name.starts_with("key") || name.starts_with("generation_log") {
            v.push(format!(
                "blinding rule: {} is in the participant area",
                entry.path().display()
            ));
        }
    }
    let manifest = match fs::read_to_string(part.join("manifest.json")) {
        Ok(text) => match serde_json::from_str::<serde_json::Value>(&text) {
            Ok(raw) => {
                if let Some(obj) = raw.as_object() {
                    for f in KEY_FIELDS {
                        if obj.contains_key(f) {
                            v.push(format!("blinding rule: manifest carries '{f}'"));
                        }
                    }
                }
                match serde_json::from_value::<UiManifest>(raw) {
                    Ok(m) => Some(m),
                    Err(e) => {
                        v.push(format!("manifest rule: {e}"));
                        None
                    }
                }
            }
            Err(e) => {
                v.push(format!("manifest rule: manifest.json is not JSON: {e}"));
                None
            }
        },
        Err(e) => {
            v.push(format!("manifest rule: cannot read manifest.json: {e}"));
            None
        }
    };

    // key rule
    let key: Option<AnswerKey> = match fs::read_to_string(admin.join("key.json")) {
        Ok(text) => match serde_json::from_str(&text) {
            Ok(k) => Some(k),
            Err(e) => {
                v.push(format!("key rule: admin/key.json is malformed: {e}"));
                None
            }
        },
        Err(_) => {
            v.push("blinding rule: answer key missing from admin/key.json".into());
            None
        }
    };
    if let Some(k) = &key {
        let queries: BTreeSet<String> = (0..N_QUERIES).map(|q| q.to_string()).collect();
        let keyed: BTreeSet<String> = k.answers.keys().cloned().collect();
        if keyed != queries {
            v.push(format!(
                "key rule: key answers {keyed:?}, expected queries 0-7"
            ));
        }
        if k.answers
            .values()
            .chain(std::iter::once(&k.memorability))
            .any(|a| !CHOICES.contains(&a.as_str()))
        {
            v.push("key rule: key values must be A, B or C".into());
        }
        if let Some(m) = &manifest {
            if m.package_id != k.package_id {
                v.push(format!(
                    "manifest rule: manifest package '{}' differs from key '{}'",
                    m.package_id, k.package_id
                ));
            }
        }
        if let (Some(intro), Some(reference)) = (
            clips.get(INTRO_FILE),
            clips.get(&format!("{}.wav", k.memorability)),
        ) {
            if intro.samples != reference.samples {
                v.push(
                    "key rule: intro clip does not match the keyed memorability reference".into(),
                );
            }
        }
    }
    if let Some(m) = &manifest {
        let expected = UiManifest::for_package(&m.package_id);
        if m.clips != expected.clips || m.intro != expected.intro || m.choices != expected.choices {
            v.push(
                "manifest rule: clip list, intro or choices differ from the package layout".into(),
            );
        }
    }
    PackageCheck { violations: v }
}

/// One participant's returned form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub package_id: String,
    #[serde(default)]
    pub answers: BTreeMap<String, String>,
    #[serde(default)]
    pub memorability: String,
    pub participant_id: String,
    #[serde(default)]
    pub started_at: String,
    #[serde(default)]
    pub submitted_at: String,
    /// Submitted after the displayed time limit ran out.
    #[serde(default)]
    pub expired: bool,
}

impl ResponseRecord {
    /// Why the form cannot be graded, if it cannot.
    pub fn incompleteness(&self) -> Option<String> {
        let missing: Vec<String> = (0..N_QUERIES)
            .map(|q| q.to_string())
            .filter(|q| {
                self.answers
                    .get(q)
                    .is_none_or(|a| !CHOICES.contains(&a.as_str()))
            })
            .collect();
        if !missing.is_empty() {
            return Some(format!(
                "queries without a valid answer: {}",
                missing.join(",")
            ));
        }
        if !CHOICES.contains(&self.memorability.as_str()) {
            return Some("memorability question unanswered".into());
        }
        None
    }
}

pub fn load_response(path: impl AsRef<Path>) -> Result<ResponseRecord> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_key(path: impl AsRef<Path>) -> Result<AnswerKey> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantScore {
    pub participant_id: String,
    pub package_id: String,
    pub model_id: String,
    pub correct: usize,
    pub hsa: f64,
    pub hsm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub model_id: String,
    pub participants: usize,
    pub mean_hsa: f64,
    /// Range of correct answers out of 8.
    pub min_correct: usize,
    pub max_correct: usize,
    pub mean_hsm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub participant_id: String,
    pub package_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeReport {
    pub participants: Vec<ParticipantScore>,
    pub models: Vec<ModelScores>,
    pub excluded: Vec<Exclusion>,
}

/// HSA and HSM per participant and per model. Incomplete forms are excluded
/// and listed; a response to an unknown package is an error.
pub fn grade_responses(responses: &[ResponseRecord], keys: &[AnswerKey]) -> Result<GradeReport> {
    let by_id: BTreeMap<&str, &AnswerKey> =
        keys.iter().map(|k| (k.package_id.as_str(), k)).collect();
    let mut participants = Vec::new();
    let mut excluded = Vec::new();
    for r in responses {
        let key = by_id.get(r.package_id.as_str()).ok_or_else(|| {
            Error::Config(format!(
                "response from '{}' names unknown package '{}'",
                r.participant_id, r.package_id
            ))
        })?;
        if let Some(reason) = r.incompleteness() {
            excluded.push(Exclusion {
                participant_id: r.participant_id.clone(),
                package_id: r.package_id.clone(),
                reason,
            });
            continue;
        }
        let correct = key
            .answers
            .iter()
            .filter(|(q, a)| r.answers.get(*q) == Some(a))
            .count();
        participants.push(ParticipantScore {
            participant_id: r.participant_id.clone(),
            package_id: r.package_id.clone(),
            model_id: key.model_id.clone(),
            correct,
            hsa: correct as f64 / N_QUERIES as f64,
            hsm: if r.memorability == key.memorability {
                1.0
            } else {
                0.0
            },
        });
    }
    let mut grouped: BTreeMap<&str, Vec<&ParticipantScore>> = BTreeMap::new();
    for p in &participants {
        grouped.entry(p.model_id.as_str()).or_default().push(p);
    }
    let models = grouped
        .into_iter()
        .map(|(m, ps)| {
            let n = ps.len() as f64;
            ModelScores {
                model_id: m.to_string(),
                participants: ps.len(),
                mean_hsa: ps.iter().map(|p| p.correct).sum::<usize>() as f64
                    / (N_QUERIES as f64 * n),
                min_correct: ps.iter().map(|p| p.correct).min().unwrap_or(0),
                max_correct: ps.iter().map(|p| p.correct).max().unwrap_or(0),
                mean_hsm: ps.iter().map(|p| p.hsm).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(GradeReport {
        participants,
        models,
        excluded,
    })
}

/// Every `*.json` directly under `dir`, sorted.
pub fn json_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    v.sort();
    Ok(v)
}
