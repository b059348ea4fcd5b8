//! Domain types, the EEGD epoch file format, and dataset manifests.
//!
//! EEGD layout (little-endian): magic `EEGD`, u16 version = 1, u16 channel
//! count, u32 sample count, u8 subject (1-based), u8 paradigm, u8 label,
//! one reserved zero byte, then `channels * samples` IEEE-754 binary32
//! values, channel-major. File size is therefore always
//! `16 + 4 * channels * samples`. Sample rate is manifest-level metadata.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

pub const EEGD_MAGIC: [u8; 4] = *b"EEGD";
pub const EEGD_VERSION: u16 = 1;
pub const EEGD_HEADER_LEN: u64 = 16;

/// Canonical acquisition geometry: 32 channels at 250 Hz, 3 s of imagery.
pub const CANONICAL_CHANNELS: usize = 32;
pub const CANONICAL_SAMPLES: usize = 750;
pub const CANONICAL_SAMPLE_RATE: f64 = 250.0;
pub const CANONICAL_SUBJECTS: u8 = 8;
pub const CANONICAL_TRIALS_PER_LABEL: usize = 50;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("subject index must be 1-based, got 0")]
    ZeroSubject,
    #[error("unknown paradigm code {0}")]
    BadParadigm(u8),
    #[error("unknown imagery label code {0}")]
    BadLabel(u8),
    #[error("non-finite sample value at channel {channel}, sample {sample}")]
    NonFinite { channel: usize, sample: usize },
    #[error("bad magic: expected EEGD")]
    BadMagic,
    #[error("unsupported EEGD version {0}")]
    UnsupportedVersion(u16),
    #[error("size mismatch: header promises {expected} bytes, file has {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("empty epoch geometry {channels}x{samples}")]
    EmptyGeometry { channels: usize, samples: usize },
    #[error("montage must have {expected} unique names, got {actual}")]
    BadMontage { expected: usize, actual: usize },
    #[error("manifest line {line}: {reason}")]
    ManifestParse { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// 1-based subject index.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct SubjectId(u8);

impl SubjectId {
    pub fn new(index: u8) -> Result<Self, DataError> {
        if index == 0 {
            return Err(DataError::ZeroSubject);
        }
        Ok(SubjectId(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    /// Zero-based training target.
    pub fn class_index(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0)
    }
}

/// Endogenous EEG paradigm under which a trial was recorded.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum Paradigm {
    Mi,
    Si,
    Vi,
}

impl Paradigm {
    pub const ALL: [Paradigm; 3] = [Paradigm::Mi, Paradigm::Si, Paradigm::Vi];

    pub fn code(self) -> u8 {
        match self {
            Paradigm::Mi => 0,
            Paradigm::Si => 1,
            Paradigm::Vi => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, DataError> {
        match code {
            0 => Ok(Paradigm::Mi),
            1 => Ok(Paradigm::Si),
            2 => Ok(Paradigm::Vi),
            other => Err(DataError::BadParadigm(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Mi => "MI",
            Paradigm::Si => "SI",
            Paradigm::Vi => "VI",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MI" => Some(Paradigm::Mi),
            "SI" => Some(Paradigm::Si),
            "VI" => Some(Paradigm::Vi),
            _ => None,
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The four imagery classes; the ordinal is the training target.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum ImageryLabel {
    Apple,
    Star,
    Clover,
    Snowman,
}

impl ImageryLabel {
    pub const ALL: [ImageryLabel; 4] = [
        ImageryLabel::Apple,
        ImageryLabel::Star,
        ImageryLabel::Clover,
        ImageryLabel::Snowman,
    ];
    pub const COUNT: usize = 4;

    pub fn ordinal(self) -> usize {
        match self {
            ImageryLabel::Apple => 0,
            ImageryLabel::Star => 1,
            ImageryLabel::Clover => 2,
            ImageryLabel::Snowman => 3,
        }
    }

    pub fn from_ordinal(code: u8) -> Result<Self, DataError> {
        match code {
            0 => Ok(ImageryLabel::Apple),
            1 => Ok(ImageryLabel::Star),
            2 => Ok(ImageryLabel::Clover),
            3 => Ok(ImageryLabel::Snowman),
            other => Err(DataError::BadLabel(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ImageryLabel::Apple => "apple",
            ImageryLabel::Star => "star",
            ImageryLabel::Clover => "clover",
            ImageryLabel::Snowman => "snowman",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "apple" => Some(ImageryLabel::Apple),
            "star" => Some(ImageryLabel::Star),
            "clover" => Some(ImageryLabel::Clover),
            "snowman" => Some(ImageryLabel::Snowman),
            _ => None,
        }
    }
}

impl fmt::Display for ImageryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One labeled imagery trial: a `[channels x samples]` amplitude matrix
/// (channel-major) plus acquisition metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Epoch {
    pub n_channels: usize,
    pub n_samples: usize,
    /// Channel-major samples: all of channel 0, then channel 1, ...
    pub data: Vec<f32>,
    pub sample_rate: f64,
    pub subject: SubjectId,
    pub paradigm: Paradigm,
    pub label: ImageryLabel,
    pub trial_id: u32,
}

impl Epoch {
    pub fn channel(&self, ch: usize) -> &[f32] {
        &self.data[ch * self.n_samples..(ch + 1) * self.n_samples]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f32] {
        &mut self.data[ch * self.n_samples..(ch + 1) * self.n_samples]
    }

    pub fn check_finite(&self) -> Result<(), DataError> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    channel: i / self.n_samples,
                    sample: i % self.n_samples,
                });
            }
        }
        Ok(())
    }
}

/// Ordered scalp electrode names (10/20 system).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Montage {
    pub channel_names: Vec<String>,
}

impl Montage {
    pub fn new(channel_names: Vec<String>) -> Result<Self, DataError> {
        let mut seen = std::collections::BTreeSet::new();
        let unique = channel_names.iter().all(|n| seen.insert(n.clone()));
        if channel_names.is_empty() || !unique {
            return Err(DataError::BadMontage {
                expected: channel_names.len().max(1),
                actual: seen.len(),
            });
        }
        Ok(Montage { channel_names })
    }

    /// The standard 32-channel layout used by the canonical protocol.
    pub fn standard_32() -> Montage {
        const NAMES: [&str; 32] = [
            "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "FC5", "FC1", "FC2", "FC6", "T7", "C3",
            "Cz", "C4", "T8", "TP9", "CP5", "CP1", "CP2", "CP6", "TP10", "P7", "P3", "Pz", "P4",
            "P8", "PO9", "O1", "Oz", "O2", "PO10",
        ];
        Montage {
            channel_names: NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.channel_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channel_names.is_empty()
    }
}

/// Write an epoch in EEGD format. Byte-deterministic for identical input.
pub fn write_epoch(epoch: &Epoch, path: &Path) -> Result<(), DataError> {
    if epoch.n_channels == 0 || epoch.n_samples == 0 {
        return Err(DataError::EmptyGeometry {
            channels: epoch.n_channels,
            samples: epoch.n_samples,
        });
    }
    debug_assert_eq!(epoch.data.len(), epoch.n_channels * epoch.n_samples);
    epoch.check_finite()?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(&EEGD_MAGIC)?;
        w.write_u16::<LittleEndian>(EEGD_VERSION)?;
        w.write_u16::<LittleEndian>(epoch.n_channels as u16)?;
        w.write_u32::<LittleEndian>(epoch.n_samples as u32)?;
        w.write_u8(epoch.subject.index())?;
        w.write_u8(epoch.paradigm.code())?;
        w.write_u8(epoch.label.ordinal() as u8)?;
        w.write_u8(0)?; // reserved
        for &v in &epoch.data {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.flush()
    })()
    .map_err(io_err(path))?;
    Ok(())
}

/// Read an EEGD epoch. The trial id is not stored in the file; callers that
/// track it (manifests) set it afterwards, others get 0.
pub fn read_epoch(path: &Path) -> Result<Epoch, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let actual_len = file.metadata().map_err(io_err(path))?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if magic != EEGD_MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = r.read_u16::<LittleEndian>().map_err(io_err(path))?;
    if version != EEGD_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let n_channels = r.read_u16::<LittleEndian>().map_err(io_err(path))? as usize;
    let n_samples = r.read_u32::<LittleEndian>().map_err(io_err(path))? as usize;
    if n_channels == 0 || n_samples == 0 {
        return Err(DataError::EmptyGeometry {
            channels: n_channels,
            samples: n_samples,
        });
    }
    let expected = EEGD_HEADER_LEN + 4 * (n_channels as u64) * (n_samples as u64);
    if actual_len != expected {
        return Err(DataError::SizeMismatch {
            expected,
            actual: actual_len,
        });
    }
    let subject = SubjectId::new(r.read_u8().map_err(io_err(path))?)?;
    let paradigm = Paradigm::from_code(r.read_u8().map_err(io_err(path))?)?;
    let label = ImageryLabel::from_ordinal(r.read_u8().map_err(io_err(path))?)?;
    let _reserved = r.read_u8().map_err(io_err(path))?;
    let mut data = vec![0f32; n_channels * n_samples];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(io_err(path))?;
    Ok(Epoch {
        n_channels,
        n_samples,
        data,
        sample_rate: CANONICAL_SAMPLE_RATE,
        subject,
        paradigm,
        label,
        trial_id: 0,
    })
}

/// One manifest line: an epoch file plus its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub subject: SubjectId,
    pub paradigm: Paradigm,
    pub label: ImageryLabel,
    pub trial_id: u32,
}

/// Line-delimited dataset index. Header lines are `#`-prefixed
/// `key: value` pairs (sample rate, montage, provenance); each record line
/// is tab-separated `path subject paradigm label trial_id`.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub montage: Montage,
    pub sample_rate: f64,
    pub provenance: String,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(montage: Montage, sample_rate: f64, provenance: String) -> Self {
        DatasetManifest {
            montage,
            sample_rate,
            provenance,
            records: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        (|| -> std::io::Result<()> {
            writeln!(w, "# eegd-manifest v1")?;
            writeln!(w, "# fs: {}", self.sample_rate)?;
            writeln!(w, "# montage: {}", self.montage.channel_names.join(","))?;
            for line in self.provenance.lines() {
                writeln!(w, "# provenance: {line}")?;
            }
            writeln!(w, "# columns: path\tsubject\tparadigm\tlabel\ttrial_id")?;
            for rec in &self.records {
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}",
                    rec.path.display(),
                    rec.subject.index(),
                    rec.paradigm.name(),
                    rec.label.name(),
                    rec.trial_id
                )?;
            }
            w.flush()
        })()
        .map_err(io_err(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = File::open(path).map_err(io_err(path))?;
        let reader = BufReader::new(file);
        let mut montage = Montage::standard_32();
        let mut sample_rate = CANONICAL_SAMPLE_RATE;
        let mut provenance = String::new();
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(header) = trimmed.strip_prefix('#') {
                let header = header.trim();
                if let Some(fs) = header.strip_prefix("fs:") {
                    sample_rate = fs.trim().parse().map_err(|_| DataError::ManifestParse {
                        line: line_no,
                        reason: format!("bad sample rate '{}'", fs.trim()),
                    })?;
                } else if let Some(names) = header.strip_prefix("montage:") {
                    montage = Montage::new(
                        names
                            .trim()
                            .split(',')
                            .map(|s| s.trim().to_string())
                            .collect(),
                    )?;
                } else if let Some(p) = header.strip_prefix("provenance:") {
                    if !provenance.is_empty() {
                        provenance.push('\n');
                    }
                    provenance.push_str(p.trim());
                }
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 5 {
                return Err(DataError::ManifestParse {
                    line: line_no,
                    reason: format!("expected 5 tab-separated fields, got {}", fields.len()),
                });
            }
            let parse_err = |reason: String| DataError::ManifestParse {
                line: line_no,
                reason,
            };
            let subject = SubjectId::new(
                fields[1]
                    .parse()
                    .map_err(|_| parse_err(format!("bad subject '{}'", fields[1])))?,
            )?;
            let paradigm = Paradigm::parse(fields[2])
                .ok_or_else(|| parse_err(format!("bad paradigm '{}'", fields[2])))?;
            let label = ImageryLabel::parse(fields[3])
                .ok_or_else(|| parse_err(format!("bad label '{}'", fields[3])))?;
            let trial_id = fields[4]
                .parse()
                .map_err(|_| parse_err(format!("bad trial id '{}'", fields[4])))?;
            records.push(ManifestRecord {
                path: PathBuf::from(fields[0]),
                subject,
                paradigm,
                label,
                trial_id,
            });
        }
        Ok(DatasetManifest {
            montage,
            sample_rate,
            provenance,
            records,
        })
    }

    /// Load every referenced epoch, resolving paths against `base_dir` and
    /// stamping manifest metadata (trial id, sample rate) onto each.
    pub fn load_epochs(&self, base_dir: &Path) -> Result<Vec<Epoch>, DataError> {
        self.records
            .iter()
            .map(|rec| {
                let mut epoch = read_epoch(&base_dir.join(&rec.path))?;
                epoch.trial_id = rec.trial_id;
                epoch.sample_rate = self.sample_rate;
                Ok(epoch)
            })
            .collect()
    }
}

/// Per-(subject, paradigm, label) trial-count audit of a manifest.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ValidationReport {
    pub total_records: usize,
    /// Count per (subject index, paradigm, label ordinal).
    pub cell_counts: BTreeMap<(u8, Paradigm, u8), usize>,
    pub missing_files: Vec<PathBuf>,
    pub unreadable_files: Vec<PathBuf>,
    /// (subject, paradigm, trial_id) triples seen more than once.
    pub duplicate_trials: Vec<(u8, Paradigm, u32)>,
    /// Cells whose count deviates from the expected trials-per-label.
    pub deviating_cells: Vec<(u8, Paradigm, u8, usize)>,
    pub expected_trials_per_label: usize,
    pub matches_canonical_protocol: bool,
}

/// Audit trial counts and file health against the canonical protocol
/// (8 subjects x 3 paradigms x 4 labels x 50 trials = 4800 epochs).
/// Report-only: deviations are listed, never fatal.
pub fn validate_dataset(
    manifest: &DatasetManifest,
    base_dir: &Path,
    expected_trials_per_label: usize,
) -> ValidationReport {
    let mut cell_counts: BTreeMap<(u8, Paradigm, u8), usize> = BTreeMap::new();
    let mut seen_trials: BTreeMap<(u8, Paradigm, u32), usize> = BTreeMap::new();
    let mut missing_files = Vec::new();
    let mut unreadable_files = Vec::new();

    for rec in &manifest.records {
        *cell_counts
            .entry((
                rec.subject.index(),
                rec.paradigm,
                rec.label.ordinal() as u8,
            ))
            .or_insert(0) += 1;
        *seen_trials
            .entry((rec.subject.index(), rec.paradigm, rec.trial_id))
            .or_insert(0) += 1;
        let full = base_dir.join(&rec.path);
        if !full.exists() {
            missing_files.push(rec.path.clone());
        } else if read_epoch(&full).is_err() {
            unreadable_files.push(rec.path.clone());
        }
    }

    let duplicate_trials: Vec<_> = seen_trials
        .iter()
        .filter(|(_, &count)| count > 1)
        .map(|(&key, _)| key)
        .collect();
    let deviating_cells: Vec<_> = cell_counts
        .iter()
        .filter(|(_, &count)| count != expected_trials_per_label)
        .map(|(&(s, p, l), &count)| (s, p, l, count))
        .collect();

    let total_records = manifest.records.len();
    let canonical_total = CANONICAL_SUBJECTS as usize * Paradigm::ALL.len() * ImageryLabel::COUNT
        * CANONICAL_TRIALS_PER_LABEL;
    let matches_canonical_protocol = expected_trials_per_label == CANONICAL_TRIALS_PER_LABEL
        && total_records == canonical_total
        && deviating_cells.is_empty()
        && duplicate_trials.is_empty()
        && missing_files.is_empty()
        && unreadable_files.is_empty()
        && cell_counts.len()
            == CANONICAL_SUBJECTS as usize * Paradigm::ALL.len() * ImageryLabel::COUNT;

    ValidationReport {
        total_records,
        cell_counts,
        missing_files,
        unreadable_files,
        duplicate_trials,
        deviating_cells,
        expected_trials_per_label,
        matches_canonical_protocol,
    }
}

impl ValidationReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("records: {}\n", self.total_records));
        out.push_str(&format!(
            "cells: {} (expected {} trials each)\n",
            self.cell_counts.len(),
            self.expected_trials_per_label
        ));
        if self.deviating_cells.is_empty() {
            out.push_str("trial counts: all cells at expected count\n");
        } else {
            for (s, p, l, count) in &self.deviating_cells {
                out.push_str(&format!(
                    "deviation: S{s} {p} label{l} has {count} trials\n"
                ));
            }
        }
        for path in &self.missing_files {
            out.push_str(&format!("missing: {}\n", path.display()));
        }
        for path in &self.unreadable_files {
            out.push_str(&format!("unreadable: {}\n", path.display()));
        }
        for (s, p, t) in &self.duplicate_trials {
            out.push_str(&format!("duplicate trial: S{s} {p} trial {t}\n"));
        }
        out.push_str(&format!(
            "canonical protocol: {}\n",
            if self.matches_canonical_protocol {
                "yes"
            } else {
                "no"
            }
        ));
        out
    }
}
