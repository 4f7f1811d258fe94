//! Corpus directories.
//!
//! ```text
//! corpus/
//!   videos.jsonl        {"video_id", "duration", "features"} per line
//!   features/<id>.feat  K × d_v segment features
//!   annotations.jsonl   paragraph records
//!   vocab.txt           one token per line, id = line number
//!   embeddings.feat     n_v × d_s word embeddings
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::annotations::{read_annotations, write_annotations, AccessAudit, LoadMode, ParagraphRecord};
use super::features::{read_features, to_f32, to_f64, write_features};
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::model::PreparedVideo;
use crate::moment_map::TimeInterval;

pub const VIDEOS_FILE: &str = "videos.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const EMBEDDINGS_FILE: &str = "embeddings.feat";
pub const FEATURES_DIR: &str = "features";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoLine {
    video_id: String,
    duration: f64,
    features: String,
}

#[derive(Debug, Clone)]
pub struct VideoRecord {
    pub id: String,
    pub duration: f64,
    /// `K × d_v` segment features.
    pub segments: Array2<f64>,
}

impl VideoRecord {
    pub fn prepare(&self) -> Result<PreparedVideo> {
        PreparedVideo::new(self.id.clone(), self.duration, self.segments.clone())
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub videos: Vec<VideoRecord>,
    pub paragraphs: Vec<ParagraphRecord>,
}

impl Corpus {
    pub fn video_index(&self, id: &str) -> Option<usize> {
        self.videos.iter().position(|v| v.id == id)
    }

    pub fn feature_width(&self) -> usize {
        self.videos.first().map_or(0, |v| v.segments.ncols())
    }

    /// Checks cross-references, segment counts and token ids.
    pub fn validate(&self, k: Option<usize>) -> Result<()> {
        let n_v = self.vocab.len();
        let d_v = self.feature_width();
        for v in &self.videos {
            if v.segments.ncols() != d_v {
                return Err(Error::invalid(format!("video {} has feature width {}, expected {d_v}", v.id, v.segments.ncols())));
            }
            if let Some(k) = k {
                if v.segments.nrows() != k {
                    return Err(Error::invalid(format!("video {} has {} segments, expected {k}", v.id, v.segments.nrows())));
                }
            }
        }
        for p in &self.paragraphs {
            if self.video_index(&p.video_id).is_none() {
                return Err(Error::invalid(format!("paragraph {} references unknown video {}", p.paragraph_id, p.video_id)));
            }
            if let Some(bad) = p.sentences.iter().flatten().find(|&&t| t >= n_v) {
                return Err(Error::invalid(format!("paragraph {} uses token id {bad} ≥ {n_v}", p.paragraph_id)));
            }
        }
        Ok(())
    }
}

pub fn read_vocabulary(dir: &Path) -> Result<Vocabulary> {
    let path = dir.join(VOCAB_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let tokens = Vocabulary::parse_tokens(&text);
    let emb = to_f64(&read_features(&dir.join(EMBEDDINGS_FILE))?);
    Vocabulary::new(tokens, emb)
}

pub fn write_vocabulary(dir: &Path, vocab: &Vocabulary) -> Result<()> {
    let path = dir.join(VOCAB_FILE);
    fs::write(&path, vocab.to_text()).map_err(|e| Error::io(&path, e))?;
    write_features(&dir.join(EMBEDDINGS_FILE), &to_f32(vocab.embeddings()))
}

fn read_videos(dir: &Path) -> Result<Vec<VideoRecord>> {
    let path = dir.join(VIDEOS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| Error::Parse {
            path: path.clone(),
            line: i + 1,
            reason,
        };
        let raw: VideoLine = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        if !(raw.duration > 0.0) {
            return Err(fail(format!("duration {} must be positive", raw.duration)));
        }
        let segments = to_f64(&read_features(&dir.join(&raw.features))?);
        out.push(VideoRecord {
            id: raw.video_id,
            duration: raw.duration,
            segments,
        });
    }
    Ok(out)
}

pub fn load_corpus(dir: &Path, mode: LoadMode, audit: &AccessAudit) -> Result<Corpus> {
    let corpus = Corpus {
        vocab: read_vocabulary(dir)?,
        videos: read_videos(dir)?,
        paragraphs: read_annotations(&dir.join(ANNOTATIONS_FILE), mode, audit)?,
    };
    corpus.validate(None)?;
    Ok(corpus)
}

fn feature_path(id: &str) -> PathBuf {
    Path::new(FEATURES_DIR).join(format!("{id}.feat"))
}

/// Writes a corpus directory; `gt` holds per-paragraph intervals to record
/// alongside the annotations.
pub fn write_corpus(dir: &Path, corpus: &Corpus, gt: &[Option<Vec<TimeInterval>>]) -> Result<()> {
    if gt.len() != corpus.paragraphs.len() {
        return Err(Error::invalid("one ground-truth entry per paragraph required"));
    }
    let features = dir.join(FEATURES_DIR);
    fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    write_vocabulary(dir, &corpus.vocab)?;
    let mut lines = String::new();
    for v in &corpus.videos {
        let rel = feature_path(&v.id);
        write_features(&dir.join(&rel), &to_f32(&v.segments))?;
        let line = VideoLine {
            video_id: v.id.clone(),
            duration: v.duration,
            features: rel.to_string_lossy().into_owned(),
        };
        lines.push_str(&serde_json::to_string(&line).map_err(|e| Error::invalid(e.to_string()))?);
        lines.push('\n');
    }
    let path = dir.join(VIDEOS_FILE);
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    let records: Vec<_> = corpus.paragraphs.iter().cloned().zip(gt.iter().cloned()).collect();
    write_annotations(&dir.join(ANNOTATIONS_FILE), &records)
}
