//! Paragraph annotations, one JSON object per line:
//!
//! ```text
//! {"video_id": "v0", "paragraph_id": "p0", "sentences": [[2, 5, 9], [3, 7]], "gt_intervals": [[0.0, 4.5], [6.0, 9.0]]}
//! ```
//!
//! `gt_intervals` is optional. In training mode it is dropped while parsing;
//! in evaluation mode it is kept behind an accessor that counts every read.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moment_map::TimeInterval;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Ground-truth intervals are redacted at parse time.
    Training,
    Evaluation,
}

/// Shared counter of ground-truth reads.
#[derive(Debug, Clone, Default)]
pub struct AccessAudit(Arc<AtomicUsize>);

impl AccessAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reads(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }

    fn record(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }
}

/// Ground-truth intervals readable only through [`GroundTruth::intervals`].
#[derive(Debug, Clone)]
pub struct GroundTruth {
    intervals: Vec<TimeInterval>,
    audit: AccessAudit,
}

impl GroundTruth {
    pub fn new(intervals: Vec<TimeInterval>, audit: AccessAudit) -> Self {
        GroundTruth { intervals, audit }
    }

    pub fn intervals(&self) -> &[TimeInterval] {
        self.audit.record();
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ParagraphRecord {
    pub video_id: String,
    pub paragraph_id: String,
    pub sentences: Vec<Vec<usize>>,
    pub gt: Option<GroundTruth>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord<G> {
    video_id: String,
    paragraph_id: String,
    sentences: Vec<Vec<usize>>,
    #[serde(default = "none", skip_serializing_if = "Option::is_none")]
    gt_intervals: Option<G>,
}

fn none<G>() -> Option<G> {
    None
}

fn check_sentences(sentences: &[Vec<usize>]) -> std::result::Result<(), String> {
    if sentences.is_empty() {
        return Err("paragraph has no sentences".into());
    }
    if let Some(i) = sentences.iter().position(|s| s.is_empty()) {
        return Err(format!("sentence {i} is empty"));
    }
    Ok(())
}

/// Training mode skips the interval tokens without converting them.
fn convert_training(raw: RawRecord<serde::de::IgnoredAny>) -> std::result::Result<ParagraphRecord, String> {
    check_sentences(&raw.sentences)?;
    Ok(ParagraphRecord {
        video_id: raw.video_id,
        paragraph_id: raw.paragraph_id,
        sentences: raw.sentences,
        gt: None,
    })
}

fn convert(raw: RawRecord<Vec<[f64; 2]>>, audit: &AccessAudit) -> std::result::Result<ParagraphRecord, String> {
    check_sentences(&raw.sentences)?;
    let gt = match raw.gt_intervals {
        None => None,
        Some(spans) => {
            if spans.len() != raw.sentences.len() {
                return Err(format!(
                    "{} gt_intervals for {} sentences",
                    spans.len(),
                    raw.sentences.len()
                ));
            }
            let intervals = spans
                .iter()
                .map(|[s, e]| TimeInterval::new(*s, *e).map_err(|err| err.to_string()))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Some(GroundTruth::new(intervals, audit.clone()))
        }
    };
    Ok(ParagraphRecord {
        video_id: raw.video_id,
        paragraph_id: raw.paragraph_id,
        sentences: raw.sentences,
        gt,
    })
}

pub fn parse_annotations(text: &str, path: &Path, mode: LoadMode, audit: &AccessAudit) -> Result<Vec<ParagraphRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let record = match mode {
            LoadMode::Training => {
                let raw = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
                convert_training(raw)
            }
            LoadMode::Evaluation => {
                let raw = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
                convert(raw, audit)
            }
        };
        out.push(record.map_err(fail)?);
    }
    Ok(out)
}

pub fn read_annotations(path: &Path, mode: LoadMode, audit: &AccessAudit) -> Result<Vec<ParagraphRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path, mode, audit)
}

/// Writes records, including the given intervals where present.
pub fn write_annotations(path: &Path, records: &[(ParagraphRecord, Option<Vec<TimeInterval>>)]) -> Result<()> {
    let mut buf = Vec::new();
    for (rec, gt) in records {
        let raw = RawRecord::<Vec<[f64; 2]>> {
            video_id: rec.video_id.clone(),
            paragraph_id: rec.paragraph_id.clone(),
            sentences: rec.sentences.clone(),
            gt_intervals: gt.as_ref().map(|v| v.iter().map(|t| [t.start, t.end]).collect()),
        };
        serde_json::to_writer(&mut buf, &raw).map_err(|e| Error::invalid(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}
