//! File formats and records shared by the command line and the browser
//! runner: importance maps, checkpoints, stimulus manifests, response logs,
//! reports, and the synthetic dataset.

mod binary;
mod responses;
mod synthetic;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use binary::{
    decode_checkpoint, decode_fmap, encode_checkpoint, encode_fmap, load_model, read_fmap, read_heatmap, read_image,
    save_model, write_fmap, write_gray_png, CHECKPOINT_VERSION,
};
pub use responses::{parse_response_log, read_response_log, write_response_log, Reject, ResponseLog, SessionHeader};
pub use synthetic::{
    generate_rater_pool, generate_synthetic, load_dataset, read_rater_dir, save_dataset, DatasetIndex, SampleRecord,
    SyntheticDataset, SyntheticSpec,
};

use crate::metrics::AlignmentReport;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },
    #[error("truncated file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

/// Writes a file, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| DataError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| DataError::Json {
        path: path.display().to_string(),
        source,
    })?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Animal,
    NonAnimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Response {
    Animal,
    NonAnimal,
    Timeout,
}

impl From<Category> for Response {
    fn from(c: Category) -> Self {
        match c {
            Category::Animal => Response::Animal,
            Category::NonAnimal => Response::NonAnimal,
        }
    }
}

/// One speeded decision. Models use their name as `participant_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResponse {
    pub participant_id: String,
    pub image_id: String,
    pub level: usize,
    pub response: Response,
    pub rt_ms: f64,
    pub fixation_ms: f64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: f64,
}

/// Fixation range of the rapid categorization protocol, in ms.
pub const FIXATION_RANGE_MS: (f64, f64) = (1100.0, 1600.0);

impl TrialResponse {
    /// Protocol invariants; `None` when the record is valid.
    pub fn violation(&self) -> Option<String> {
        if !self.rt_ms.is_finite() || self.rt_ms < 0.0 {
            return Some(format!("rt_ms {} must be finite and >= 0", self.rt_ms));
        }
        let (lo, hi) = FIXATION_RANGE_MS;
        if !(lo..=hi).contains(&self.fixation_ms) {
            return Some(format!("fixation_ms {} outside [{lo}, {hi}]", self.fixation_ms));
        }
        if !self.timestamp.is_finite() {
            return Some("timestamp is not finite".into());
        }
        if self.participant_id.is_empty() || self.image_id.is_empty() {
            return Some("empty participant or image id".into());
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevealLevel {
    pub index: usize,
    pub fraction: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusEntry {
    pub image_id: String,
    pub level: usize,
    pub category: Category,
    pub seed: u64,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusManifest {
    pub levels: Vec<RevealLevel>,
    pub entries: Vec<StimulusEntry>,
}

impl StimulusManifest {
    /// Checks level ordering and that each (image, level) appears once.
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.levels.iter().enumerate() {
            if l.index != i || !(l.fraction > 0.0 && l.fraction <= 1.0) || l.k == 0 {
                return Err(DataError::Malformed(format!("level {i} is invalid: {l:?}")));
            }
        }
        if self.levels.windows(2).any(|w| w[1].fraction <= w[0].fraction) {
            return Err(DataError::Malformed("level fractions must increase".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if e.level >= self.levels.len() {
                return Err(DataError::Malformed(format!(
                    "entry {} references level {}",
                    e.image_id, e.level
                )));
            }
            if !seen.insert((e.image_id.as_str(), e.level)) {
                return Err(DataError::Malformed(format!(
                    "duplicate entry ({}, {})",
                    e.image_id, e.level
                )));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        m.validate()?;
        Ok(m)
    }
}

/// Per-image scores followed by summary rows.
pub fn alignment_report_csv(r: &AlignmentReport) -> String {
    let mut s = String::from("image_id,rho,normalized\n");
    for (id, rho) in &r.per_image {
        let _ = writeln!(s, "{id},{rho},{}", rho / r.ceiling);
    }
    for id in &r.excluded_constant {
        let _ = writeln!(s, "{id},,");
    }
    s
}
