//! Dataset manifests.
//!
//! A manifest is a CSV file with the header
//! `path,span_start_frame,span_end_frame,split`. Paths are relative to the
//! manifest's directory. Spans are half-open `[start, end)` ranges of 10 ms
//! feature frames, both `-1` when the utterance has no keyword. `split` is one
//! of `train`, `val`, `test-positive`, `test-negative`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "test-positive")]
    TestPositive,
    #[serde(rename = "test-negative")]
    TestNegative,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestPositive => "test-positive",
            Split::TestNegative => "test-negative",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test-positive" => Ok(Split::TestPositive),
            "test-negative" => Ok(Split::TestNegative),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

/// Half-open keyword span `[start_frame, end_frame)` in feature frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSpan {
    pub start_frame: usize,
    pub end_frame: usize,
}

impl KeywordSpan {
    pub fn new(start_frame: usize, end_frame: usize) -> Result<Self> {
        if start_frame >= end_frame {
            return Err(Error::Data(format!(
                "keyword span must have start < end, got ({start_frame}, {end_frame})"
            )));
        }
        Ok(Self { start_frame, end_frame })
    }

    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_within(&self, total_frames: usize) -> Result<()> {
        if self.end_frame > total_frames {
            return Err(Error::Data(format!(
                "keyword span ends at frame {} but the utterance has {} frames",
                self.end_frame, total_frames
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Resolved path.
    pub path: PathBuf,
    pub span: Option<KeywordSpan>,
    pub split: Split,
}

impl ManifestEntry {
    /// Stable identifier: the path as written in the manifest.
    pub fn id(&self, root: &Path) -> String {
        self.path
            .strip_prefix(root)
            .unwrap_or(&self.path)
            .to_string_lossy()
            .into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    path: String,
    span_start_frame: i64,
    span_end_frame: i64,
    split: Split,
}

impl Manifest {
    /// Loads and validates a manifest; every referenced file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Manifest {
            line: 0,
            reason: e.to_string(),
        })?;
        let mut entries = Vec::new();
        for (i, rec) in reader.deserialize::<Record>().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Manifest {
                line,
                reason: e.to_string(),
            })?;
            let span = match (rec.span_start_frame, rec.span_end_frame) {
                (-1, -1) => None,
                (s, e) if s >= 0 && e >= 0 => Some(
                    KeywordSpan::new(s as usize, e as usize).map_err(|err| Error::Manifest {
                        line,
                        reason: err.to_string(),
                    })?,
                ),
                (s, e) => {
                    return Err(Error::Manifest {
                        line,
                        reason: format!("invalid span ({s}, {e}); use -1,-1 for no keyword"),
                    })
                }
            };
            let full = root.join(&rec.path);
            if !full.is_file() {
                return Err(Error::Manifest {
                    line,
                    reason: format!("audio file {} does not exist", full.display()),
                });
            }
            entries.push(ManifestEntry {
                path: full,
                span,
                split: rec.split,
            });
        }
        Ok(Self { root, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| Error::Data(e.to_string()))?;
        for e in &self.entries {
            let (s, t) = e
                .span
                .map_or((-1, -1), |sp| (sp.start_frame as i64, sp.end_frame as i64));
            writer
                .serialize(Record {
                    path: e.id(&self.root),
                    span_start_frame: s,
                    span_end_frame: t,
                    split: e.split,
                })
                .map_err(|e| Error::Data(e.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}
