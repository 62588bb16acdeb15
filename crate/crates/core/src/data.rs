//! Sample manifests, clip-feature files, clip planning, and score normalization.
//!
//! Feature files (`.aqaf`) are little-endian: the magic `AQAF`, a version
//! byte `0x01`, `u32` step count T, `u32` feature dimension D, then T·D
//! `f32` values in row-major order. Each file holds one augmentation copy;
//! a manifest row names a stem and copy `k` lives at `<stem>_c<k>.aqaf`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;

pub const FEATURE_MAGIC: &[u8; 4] = b"AQAF";
pub const FEATURE_VERSION: u8 = 1;
const FEATURE_HEADER_LEN: usize = 4 + 1 + 4 + 4;

pub const MANIFEST_HEADER: [&str; 5] = ["sample_id", "action", "raw_score", "split", "feature_path"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionClass {
    Diving,
    Gymvault,
    Skiing,
    Snowboard,
    SyncDive3m,
    SyncDive10m,
    Trampoline,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRange {
    pub min: f64,
    pub max: f64,
}

impl ScoreRange {
    pub fn contains(&self, score: f64) -> bool {
        score >= self.min && score <= self.max
    }
}

impl ActionClass {
    pub const ALL: [ActionClass; 7] = [
        ActionClass::Diving,
        ActionClass::Gymvault,
        ActionClass::Skiing,
        ActionClass::Snowboard,
        ActionClass::SyncDive3m,
        ActionClass::SyncDive10m,
        ActionClass::Trampoline,
    ];

    /// The six short actions used in experiments; Trampoline is too long to pad.
    pub const EXPERIMENT: [ActionClass; 6] = [
        ActionClass::Diving,
        ActionClass::Gymvault,
        ActionClass::Skiing,
        ActionClass::Snowboard,
        ActionClass::SyncDive3m,
        ActionClass::SyncDive10m,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionClass::Diving => "Diving",
            ActionClass::Gymvault => "Gymvault",
            ActionClass::Skiing => "Skiing",
            ActionClass::Snowboard => "Snowboard",
            ActionClass::SyncDive3m => "SyncDive3m",
            ActionClass::SyncDive10m => "SyncDive10m",
            ActionClass::Trampoline => "Trampoline",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).unwrap()
    }

    /// Range of judge scores for this action.
    pub fn score_range(self) -> ScoreRange {
        let (min, max) = match self {
            ActionClass::Diving => (21.60, 102.60),
            ActionClass::Gymvault => (12.30, 16.87),
            ActionClass::Skiing => (8.0, 50.0),
            ActionClass::Snowboard => (8.0, 50.0),
            ActionClass::SyncDive3m => (46.20, 104.88),
            ActionClass::SyncDive10m => (49.80, 99.36),
            ActionClass::Trampoline => (6.72, 62.99),
        };
        ScoreRange { min, max }
    }

    /// Average raw sequence length in frames.
    pub fn avg_seq_len(self) -> usize {
        match self {
            ActionClass::Diving => 97,
            ActionClass::Gymvault => 87,
            ActionClass::Skiing => 132,
            ActionClass::Snowboard => 122,
            ActionClass::SyncDive3m => 156,
            ActionClass::SyncDive10m => 105,
            ActionClass::Trampoline => 634,
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|a| a.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for ActionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownAction(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("split must be `train` or `test`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub action: ActionClass,
    pub raw_score: f64,
    pub split: Split,
    /// Stem of the feature files; copy `k` lives at `<stem>_c<k>.aqaf`.
    pub feature_path: PathBuf,
}

impl SampleRecord {
    pub fn feature_file(&self, copy: usize) -> PathBuf {
        feature_file_path(&self.feature_path, copy)
    }
}

pub fn feature_file_path(stem: &Path, copy: usize) -> PathBuf {
    let mut name = stem.as_os_str().to_owned();
    name.push(format!("_c{copy}.aqaf"));
    PathBuf::from(name)
}

/// T clip-feature vectors of dimension D, one per LSTM step.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    values: Mat,
}

impl FeatureSequence {
    pub fn new(values: Mat) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFinite("feature sequence".into()));
        }
        Ok(Self { values })
    }

    pub fn steps(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn step(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    /// Mean over steps, length D.
    pub fn time_average(&self) -> Vec<f64> {
        let mut avg = vec![0.0; self.dim()];
        for t in 0..self.steps() {
            for (a, v) in avg.iter_mut().zip(self.step(t)) {
                *a += v;
            }
        }
        let n = self.steps() as f64;
        avg.iter_mut().for_each(|a| *a /= n);
        avg
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopyPlan {
    pub offset: usize,
    pub clip_starts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipPlan {
    pub copies: Vec<CopyPlan>,
    pub clip_len: usize,
    pub num_frames: usize,
}

impl ClipPlan {
    pub fn clips_per_copy(&self) -> usize {
        self.copies.first().map_or(0, |c| c.clip_starts.len())
    }
}

/// Number of zero frames prepended to reach `target` frames.
pub fn pad_length(raw_frames: usize, target: usize) -> Result<usize> {
    if raw_frames > target {
        return Err(Error::SampleTooLong {
            frames: raw_frames,
            target,
        });
    }
    Ok(target - raw_frames)
}

/// Clip windows for each temporally shifted copy. Copy `k` starts at frame `k`;
/// every copy gets the same clip count, the largest that fits at the last offset.
pub fn plan_clips(num_frames: usize, clip_len: usize, stride: usize, copies: usize) -> Result<ClipPlan> {
    if clip_len == 0 || stride == 0 || copies == 0 {
        return Err(Error::Argument(format!(
            "clip_len, stride and copies must be positive (got {clip_len}, {stride}, {copies})"
        )));
    }
    let max_offset = copies - 1;
    let needed = max_offset + clip_len;
    if needed > num_frames {
        return Err(Error::InsufficientFrames {
            num_frames,
            clip_len,
            max_offset,
        });
    }
    let clips = (num_frames - needed) / stride + 1;
    let copies = (0..copies)
        .map(|offset| CopyPlan {
            offset,
            clip_starts: (0..clips).map(|i| offset + i * stride).collect(),
        })
        .collect();
    Ok(ClipPlan {
        copies,
        clip_len,
        num_frames,
    })
}

/// Per-action population standard deviation of training scores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    stds: BTreeMap<ActionClass, f64>,
}

impl NormStats {
    pub fn from_map(stds: BTreeMap<ActionClass, f64>) -> Result<Self> {
        for (&action, &std) in &stds {
            if !(std > 0.0) || !std.is_finite() {
                return Err(Error::DegenerateAction {
                    action,
                    reason: format!("standard deviation {std}"),
                });
            }
        }
        Ok(Self { stds })
    }

    pub fn std(&self, action: ActionClass) -> Result<f64> {
        self.stds
            .get(&action)
            .copied()
            .ok_or_else(|| Error::UnknownAction(action.name().to_string()))
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionClass> + '_ {
        self.stds.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ActionClass, f64)> + '_ {
        self.stds.iter().map(|(&a, &s)| (a, s))
    }
}

/// Population (divide-by-N) standard deviation per action of the given records.
/// Callers pass the training pool only.
pub fn compute_norm_stats<'a, I>(train: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a SampleRecord>,
{
    let mut by_action: BTreeMap<ActionClass, Vec<f64>> = BTreeMap::new();
    for r in train {
        by_action.entry(r.action).or_default().push(r.raw_score);
    }
    let mut stds = BTreeMap::new();
    for (action, mut scores) in by_action {
        if scores.len() < 2 {
            return Err(Error::DegenerateAction {
                action,
                reason: format!("{} training sample(s), need at least 2", scores.len()),
            });
        }
        // Sorted summation keeps the result independent of record order.
        scores.sort_by(f64::total_cmp);
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let mut sq: Vec<f64> = scores.iter().map(|s| (s - mean).powi(2)).collect();
        sq.sort_by(f64::total_cmp);
        let std = (sq.iter().sum::<f64>() / n).sqrt();
        if !(std > 0.0) {
            return Err(Error::DegenerateAction {
                action,
                reason: "all training scores identical".into(),
            });
        }
        stds.insert(action, std);
    }
    Ok(NormStats { stds })
}

pub fn normalize_score(raw: f64, action: ActionClass, stats: &NormStats) -> Result<f64> {
    Ok(raw / stats.std(action)?)
}

pub fn denormalize_score(pred: f64, action: ActionClass, stats: &NormStats) -> Result<f64> {
    Ok(pred * stats.std(action)?)
}

/// Reads a manifest CSV. Relative feature stems resolve against the
/// manifest's directory. Score ranges are checked when `validate_ranges`.
pub fn load_manifest(path: &Path, validate_ranges: bool) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.iter().map(str::trim).ne(MANIFEST_HEADER.iter().copied()) {
        return Err(parse_err(
            1,
            format!("header must be `{}`", MANIFEST_HEADER.join(",")),
        ));
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != MANIFEST_HEADER.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", MANIFEST_HEADER.len(), row.len()),
            ));
        }
        let sample_id = row[0].trim().to_string();
        if sample_id.is_empty() {
            return Err(parse_err(line, "empty sample_id".into()));
        }
        let action: ActionClass = row[1]
            .trim()
            .parse()
            .map_err(|e: Error| parse_err(line, e.to_string()))?;
        let raw_score: f64 = row[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("invalid raw_score `{}`", &row[2])))?;
        if !raw_score.is_finite() {
            return Err(parse_err(line, format!("non-finite raw_score `{}`", &row[2])));
        }
        let split: Split = row[3].trim().parse().map_err(|e| parse_err(line, e))?;
        let stem = row[4].trim();
        if stem.is_empty() {
            return Err(parse_err(line, "empty feature_path".into()));
        }
        if !seen.insert(sample_id.clone()) {
            return Err(Error::DuplicateId(sample_id));
        }
        if validate_ranges {
            let range = action.score_range();
            if !range.contains(raw_score) {
                return Err(Error::ScoreOutOfRange {
                    id: sample_id,
                    action,
                    score: raw_score,
                    min: range.min,
                    max: range.max,
                });
            }
        }
        let stem = Path::new(stem);
        let feature_path = if stem.is_absolute() {
            stem.to_path_buf()
        } else {
            base.join(stem)
        };
        records.push(SampleRecord {
            sample_id,
            action,
            raw_score,
            split,
            feature_path,
        });
    }
    Ok(records)
}

/// Writes a manifest; `feature_path` values are written as given.
pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::format(path, e.to_string());
    writer.write_record(MANIFEST_HEADER).map_err(to_err)?;
    for r in records {
        writer
            .write_record([
                r.sample_id.as_str(),
                r.action.name(),
                &format_score(r.raw_score),
                r.split.as_str(),
                &r.feature_path.to_string_lossy(),
            ])
            .map_err(to_err)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Shortest representation that parses back to the same value.
fn format_score(v: f64) -> String {
    format!("{v:?}")
}

pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * seq.values.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(FEATURE_VERSION);
    out.extend_from_slice(&(seq.steps() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    for &v in seq.values.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses `.aqaf` bytes; `path` is only used in diagnostics.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureSequence> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::format(path, format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic, expected `AQAF`"));
    }
    if bytes[4] != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", bytes[4])));
    }
    let steps = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let body = &bytes[FEATURE_HEADER_LEN..];
    let expected = steps
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    if body.len() < expected {
        return Err(Error::format(
            path,
            format!("truncated body: {} bytes, expected {expected}", body.len()),
        ));
    }
    if body.len() > expected {
        return Err(Error::format(
            path,
            format!("{} trailing bytes", body.len() - expected),
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{}: entry {} (step {}, dim {})",
            path.display(),
            i,
            i / dim.max(1),
            i % dim.max(1)
        )));
    }
    FeatureSequence::new(Mat::from_vec(steps, dim, values)?)
}

pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    fs::write(path, encode_features(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

/// Loads copy `copy` of a sample and checks it against the configured (T, D).
pub fn load_features(record: &SampleRecord, copy: usize, steps: usize, dim: usize) -> Result<FeatureSequence> {
    let path = record.feature_file(copy);
    let seq = read_features(&path)?;
    if seq.steps() != steps || seq.dim() != dim {
        return Err(Error::DimensionMismatch {
            what: "feature file",
            expected: format!("T={steps}, D={dim}"),
            found: format!("T={}, D={} in {}", seq.steps(), seq.dim(), path.display()),
        });
    }
    Ok(seq)
}

/// A record together with its loaded augmentation copies.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: SampleRecord,
    pub copies: Vec<FeatureSequence>,
}

/// Loaded samples sharing one (T, D). Training samples carry every
/// augmentation copy; test samples carry copy 0 only.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
    steps: usize,
    dim: usize,
}

impl Dataset {
    pub fn load(records: &[SampleRecord], steps: usize, dim: usize, train_copies: usize) -> Result<Self> {
        if train_copies == 0 {
            return Err(Error::Argument("at least one augmentation copy required".into()));
        }
        let samples = records
            .iter()
            .map(|r| {
                let n = match r.split {
                    Split::Train => train_copies,
                    Split::Test => 1,
                };
                let copies = (0..n)
                    .map(|k| load_features(r, k, steps, dim))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Sample {
                    record: r.clone(),
                    copies,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, steps, dim })
    }

    pub fn from_samples(samples: Vec<Sample>, steps: usize, dim: usize) -> Result<Self> {
        for s in &samples {
            if s.copies.is_empty() {
                return Err(Error::Argument(format!("sample `{}` has no features", s.record.sample_id)));
            }
            for c in &s.copies {
                if c.steps() != steps || c.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        what: "dataset sample",
                        expected: format!("T={steps}, D={dim}"),
                        found: format!("T={}, D={} for `{}`", c.steps(), c.dim(), s.record.sample_id),
                    });
                }
            }
        }
        Ok(Self { samples, steps, dim })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn split(&self, action: ActionClass, split: Split) -> impl Iterator<Item = &Sample> + '_ {
        self.samples
            .iter()
            .filter(move |s| s.record.action == action && s.record.split == split)
    }

    pub fn actions(&self) -> Vec<ActionClass> {
        let mut a: Vec<_> = self.samples.iter().map(|s| s.record.action).collect();
        a.sort();
        a.dedup();
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: &str, action: ActionClass, score: f64) -> SampleRecord {
        SampleRecord {
            sample_id: id.into(),
            action,
            raw_score: score,
            split: Split::Train,
            feature_path: PathBuf::from(id),
        }
    }

    #[test]
    fn pad_examples() {
        assert_eq!(pad_length(97, 103).unwrap(), 6);
        assert_eq!(pad_length(103, 103).unwrap(), 0);
        assert!(matches!(
            pad_length(ActionClass::Trampoline.avg_seq_len(), 103),
            Err(Error::SampleTooLong { frames: 634, target: 103 })
        ));
    }

    #[test]
    fn plan_six_copies() {
        let plan = plan_clips(103, 16, 16, 6).unwrap();
        assert_eq!(plan.copies.len(), 6);
        assert!(plan.copies.iter().all(|c| c.clip_starts.len() == 6));
        assert_eq!(plan.copies[0].clip_starts, vec![0, 16, 32, 48, 64, 80]);
        assert_eq!(plan.copies[5].clip_starts, vec![5, 21, 37, 53, 69, 85]);
    }

    #[test]
    fn plan_single_clip() {
        let plan = plan_clips(16, 16, 16, 1).unwrap();
        assert_eq!(plan.copies.len(), 1);
        assert_eq!(plan.copies[0].clip_starts, vec![0]);
    }

    #[test]
    fn plan_insufficient() {
        assert!(matches!(
            plan_clips(20, 16, 16, 6),
            Err(Error::InsufficientFrames { .. })
        ));
        assert!(matches!(plan_clips(20, 0, 16, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn norm_stats_examples() {
        let recs = [
            record("a", ActionClass::Diving, 2.0),
            record("b", ActionClass::Diving, 4.0),
            record("c", ActionClass::Diving, 6.0),
        ];
        let s = compute_norm_stats(&recs).unwrap();
        assert!((s.std(ActionClass::Diving).unwrap() - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);

        let flat = [
            record("a", ActionClass::Diving, 5.0),
            record("b", ActionClass::Diving, 5.0),
            record("c", ActionClass::Diving, 5.0),
        ];
        assert!(matches!(
            compute_norm_stats(&flat),
            Err(Error::DegenerateAction { .. })
        ));

        let two = [
            record("a", ActionClass::Diving, 0.0),
            record("b", ActionClass::Diving, 2.0),
            record("c", ActionClass::Skiing, 0.0),
            record("d", ActionClass::Skiing, 2.0),
        ];
        let s = compute_norm_stats(&two).unwrap();
        assert_eq!(s.std(ActionClass::Diving).unwrap(), 1.0);
        assert_eq!(s.std(ActionClass::Skiing).unwrap(), 1.0);

        let single = [record("a", ActionClass::Diving, 1.0)];
        assert!(compute_norm_stats(&single).is_err());
    }

    #[test]
    fn normalize_examples() {
        let stats = NormStats::from_map([(ActionClass::Diving, 15.0)].into()).unwrap();
        assert_eq!(normalize_score(90.0, ActionClass::Diving, &stats).unwrap(), 6.0);
        assert_eq!(normalize_score(0.0, ActionClass::Diving, &stats).unwrap(), 0.0);
        assert_eq!(denormalize_score(6.0, ActionClass::Diving, &stats).unwrap(), 90.0);
        assert_eq!(denormalize_score(0.0, ActionClass::Diving, &stats).unwrap(), 0.0);
        assert!(matches!(
            normalize_score(1.0, ActionClass::Skiing, &stats),
            Err(Error::UnknownAction(_))
        ));
        assert!(denormalize_score(1.0, ActionClass::Skiing, &stats).is_err());
    }

    #[test]
    fn table_ranges() {
        let d = ActionClass::Diving.score_range();
        assert_eq!((d.min, d.max), (21.60, 102.60));
        for a in ActionClass::ALL {
            let r = a.score_range();
            assert!(r.min < r.max);
            assert_eq!(a.name().parse::<ActionClass>().unwrap(), a);
        }
        assert!("diving".parse::<ActionClass>().is_err());
    }

    #[test]
    fn feature_decode_rejections() {
        let seq = FeatureSequence::new(Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let good = encode_features(&seq);
        let p = Path::new("x.aqaf");
        assert_eq!(decode_features(&good, p).unwrap(), seq);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_features(&bad_magic, p), Err(Error::Format { .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(decode_features(&bad_version, p), Err(Error::Format { .. })));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_features(&trailing, p), Err(Error::Format { .. })));

        assert!(matches!(decode_features(&good[..good.len() - 1], p), Err(Error::Format { .. })));
        assert!(matches!(decode_features(&good[..7], p), Err(Error::Format { .. })));

        let mut nan = good.clone();
        nan[13..17].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_features(&nan, p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn feature_path_suffix() {
        let r = record("data/s1", ActionClass::Diving, 50.0);
        assert_eq!(r.feature_file(3), PathBuf::from("data/s1_c3.aqaf"));
    }

    proptest! {
        #[test]
        fn normalize_roundtrip(x in -1e4f64..1e4, std in 1e-2f64..1e3) {
            let stats = NormStats::from_map([(ActionClass::Skiing, std)].into()).unwrap();
            let n = normalize_score(x, ActionClass::Skiing, &stats).unwrap();
            let back = denormalize_score(n, ActionClass::Skiing, &stats).unwrap();
            prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0));
        }

        #[test]
        fn plan_windows_valid(num_frames in 1usize..300, clip_len in 1usize..40, stride in 1usize..40, copies in 1usize..10) {
            match plan_clips(num_frames, clip_len, stride, copies) {
                Ok(plan) => {
                    let n = plan.clips_per_copy();
                    prop_assert!(n >= 1);
                    for (k, c) in plan.copies.iter().enumerate() {
                        prop_assert_eq!(c.offset, k);
                        prop_assert_eq!(c.clip_starts.len(), n);
                        for (i, &s) in c.clip_starts.iter().enumerate() {
                            prop_assert!(s + clip_len <= num_frames);
                            if i > 0 {
                                let prev = c.clip_starts[i - 1];
                                prop_assert_eq!(s - prev, stride);
                                if stride >= clip_len {
                                    prop_assert!(prev + clip_len <= s);
                                }
                            }
                        }
                    }
                    // maximality: one more clip would overflow at the last offset
                    prop_assert!(copies - 1 + n * stride + clip_len > num_frames);
                }
                Err(Error::InsufficientFrames { .. }) => prop_assert!(copies - 1 + clip_len > num_frames),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn norm_stats_order_invariant(scores in proptest::collection::vec(0.0f64..100.0, 2..30), seed in any::<u64>()) {
            prop_assume!(scores.iter().any(|&s| s != scores[0]));
            let recs: Vec<_> = scores.iter().enumerate()
                .map(|(i, &s)| record(&format!("s{i}"), ActionClass::Gymvault, s))
                .collect();
            let mut shuffled = recs.clone();
            crate::numerics::Rng::new(seed).shuffle(&mut shuffled);
            prop_assert_eq!(compute_norm_stats(&recs).unwrap(), compute_norm_stats(&shuffled).unwrap());
        }

        #[test]
        fn feature_roundtrip(steps in 1usize..8, dim in 1usize..16, seed in any::<u64>()) {
            let mut rng = crate::numerics::Rng::new(seed);
            // f32-representable values survive exactly.
            let vals = (0..steps * dim).map(|_| rng.normal() as f32 as f64).collect();
            let seq = FeatureSequence::new(Mat::from_vec(steps, dim, vals).unwrap()).unwrap();
            let back = decode_features(&encode_features(&seq), Path::new("p")).unwrap();
            prop_assert_eq!(back, seq);
        }
    }
}
