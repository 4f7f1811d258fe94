//! Planted-signal corpora.
//!
//! The vocabulary is factorial: `slots` word positions with
//! [`WORDS_PER_SLOT`] interchangeable words each, so a sentence is one word
//! per slot and its masked words cannot be recovered from the other words.
//! Content embeddings are orthonormal when the width allows it.
//!
//! Every (video, sentence) pair gets a distinct word combination and a span
//! of segments. Spans within a paragraph are ordered and disjoint. Segment
//! `r` of an `L`-segment span carries `g·σ + e_t`, where `g` is the
//! signature gain, `σ` is the sentence's unit signature (normalised mean of
//! its word embeddings) and `e_t` embeds the word at position `⌊r·J/L⌋`. Segments outside every span
//! carry the embedding of a random content word. All segments get Gaussian
//! noise of standard deviation `1/snr`. Values are rounded to `f32` so the
//! on-disk corpus is identical to the generated one.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::annotations::{AccessAudit, GroundTruth, ParagraphRecord};
use super::corpus::{Corpus, VideoRecord};
use crate::encoders::{Vocabulary, MASK_TOKEN, PAD_TOKEN};
use crate::error::{Error, Result};
use crate::moment_map::{moment_to_interval, MomentIndex, TimeInterval};

pub const WORDS_PER_SLOT: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub videos: usize,
    pub segments: usize,
    pub sentences: usize,
    /// Width of both the segment features and the word embeddings.
    pub dim: usize,
    /// Words per sentence.
    pub slots: usize,
    pub snr: f64,
    /// Weight of the sentence signature inside its span.
    pub signature_gain: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            videos: 8,
            segments: 16,
            sentences: 3,
            dim: 32,
            slots: 4,
            snr: 10.0,
            signature_gain: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Inclusive range of span lengths.
    pub fn span_lengths(&self) -> (usize, usize) {
        let lo = self.segments.div_ceil(2 * self.sentences).max(1);
        let hi = (self.segments / self.sentences).saturating_sub(1).max(lo);
        (lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        if self.videos == 0 || self.segments == 0 || self.sentences == 0 || self.dim == 0 || self.slots == 0 {
            return Err(Error::invalid("synthetic spec sizes must be positive"));
        }
        if !(self.signature_gain >= 0.0) {
            return Err(Error::invalid(format!("signature gain {} must be non-negative", self.signature_gain)));
        }
        if !(self.snr > 0.0) {
            return Err(Error::invalid(format!("snr {} must be positive", self.snr)));
        }
        let (lo, _) = self.span_lengths();
        if lo * self.sentences > self.segments {
            return Err(Error::invalid(format!(
                "{} sentences cannot hold disjoint spans in {} segments",
                self.sentences, self.segments
            )));
        }
        let combos = (WORDS_PER_SLOT as f64).powi(self.slots as i32);
        if combos < (self.videos * self.sentences) as f64 {
            return Err(Error::invalid(format!(
                "{} slots give {combos} distinct sentences, {} needed",
                self.slots,
                self.videos * self.sentences
            )));
        }
        Ok(())
    }
}

/// One planted (video, sentence) alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSentence {
    pub video: usize,
    pub sentence: usize,
    pub span: MomentIndex,
    pub signature: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Per paragraph, the ground-truth intervals.
    pub intervals: Vec<Vec<TimeInterval>>,
    pub planted: Vec<PlantedSentence>,
}

impl SyntheticCorpus {
    /// Paragraph records with audited ground truth attached.
    pub fn with_ground_truth(&self, audit: &AccessAudit) -> Vec<ParagraphRecord> {
        self.corpus
            .paragraphs
            .iter()
            .zip(&self.intervals)
            .map(|(p, gt)| ParagraphRecord {
                gt: Some(GroundTruth::new(gt.clone(), audit.clone())),
                ..p.clone()
            })
            .collect()
    }
}

fn round32(x: f64) -> f64 {
    x as f32 as f64
}

fn normal_row(d: usize, rng: &mut impl Rng) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| StandardNormal.sample(rng))
}

/// Rows orthonormal where `n ≤ d` (Gram–Schmidt on Gaussian draws), unit
/// norm otherwise.
fn unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Array1<f64>> {
    let mut rows: Vec<Array1<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = normal_row(d, rng);
        if rows.len() < d {
            for u in &rows {
                let proj = v.dot(u);
                v.scaled_add(-proj, u);
            }
        }
        let norm = v.dot(&v).sqrt();
        rows.push(v / norm);
    }
    rows
}

fn token_name(slot: usize, word: usize) -> String {
    format!("s{slot}w{word}")
}

/// Token id of `word` in `slot`.
pub fn token_id(slot: usize, word: usize) -> usize {
    2 + slot * WORDS_PER_SLOT + word
}

/// `M` ordered, disjoint spans with lengths in `span_lengths()`.
fn place_spans(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<MomentIndex> {
    let (lo, hi) = spec.span_lengths();
    let m = spec.sentences;
    let k = spec.segments;
    let mut lengths: Vec<usize> = (0..m).map(|_| rng.random_range(lo..=hi)).collect();
    while lengths.iter().sum::<usize>() > k {
        let i = lengths.iter().enumerate().max_by_key(|(_, &l)| l).map(|(i, _)| i).expect("m ≥ 1");
        lengths[i] -= 1;
    }
    let free = k - lengths.iter().sum::<usize>();
    // split the free segments into m + 1 gaps
    let mut cuts: Vec<usize> = (0..m).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(m);
    let mut pos = 0;
    let mut prev_cut = 0;
    for (len, cut) in lengths.iter().zip(&cuts) {
        pos += cut - prev_cut;
        prev_cut = *cut;
        spans.push(MomentIndex {
            start: pos,
            end: pos + len - 1,
        });
        pos += len;
    }
    spans
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, j, k, m) = (spec.dim, spec.slots, spec.segments, spec.sentences);
    let n_content = j * WORDS_PER_SLOT;

    let mut tokens = vec![PAD_TOKEN.to_string(), MASK_TOKEN.to_string()];
    tokens.extend((0..j).flat_map(|s| (0..WORDS_PER_SLOT).map(move |w| token_name(s, w))));
    let unit = unit_rows(n_content + 1, d, &mut rng);
    let mut emb = Array2::zeros((n_content + 2, d));
    for (i, row) in unit.iter().enumerate() {
        emb.row_mut(i + 1).assign(&row.mapv(round32));
    }
    let vocab = Vocabulary::new(tokens, emb.clone())?;

    let total = (WORDS_PER_SLOT as u64).pow(j as u32);
    let needed = spec.videos * m;
    let mut combos: Vec<u64> = if total <= 1 << 20 {
        let mut all: Vec<u64> = (0..total).collect();
        all.shuffle(&mut rng);
        all.truncate(needed);
        all
    } else {
        let mut seen = std::collections::BTreeSet::new();
        let mut picked = Vec::with_capacity(needed);
        while picked.len() < needed {
            let c = rng.random_range(0..total);
            if seen.insert(c) {
                picked.push(c);
            }
        }
        picked
    };
    combos.reverse();

    let noise = 1.0 / spec.snr;
    let mut videos = Vec::with_capacity(spec.videos);
    let mut paragraphs = Vec::with_capacity(spec.videos);
    let mut intervals = Vec::with_capacity(spec.videos);
    let mut planted = Vec::with_capacity(needed);
    for v in 0..spec.videos {
        let id = format!("video{v:03}");
        let duration = round32(rng.random_range((k as f64)..(4.0 * k as f64)));
        let spans = place_spans(spec, &mut rng);
        let mut segments = Array2::zeros((k, d));
        let mut covered = vec![false; k];
        let mut sentences = Vec::with_capacity(m);
        let mut gt = Vec::with_capacity(m);
        for (si, span) in spans.iter().enumerate() {
            let mut code = combos.pop().expect("enough combinations");
            let ids: Vec<usize> = (0..j)
                .map(|slot| {
                    let w = (code % WORDS_PER_SLOT as u64) as usize;
                    code /= WORDS_PER_SLOT as u64;
                    token_id(slot, w)
                })
                .collect();
            let mut signature = Array1::zeros(d);
            for &t in &ids {
                signature += &emb.row(t);
            }
            let norm = signature.dot(&signature).sqrt();
            signature /= norm;
            let len = span.len();
            for r in 0..len {
                let word = ids[r * j / len];
                let row = &signature * spec.signature_gain + &emb.row(word);
                segments.row_mut(span.start + r).assign(&row);
                covered[span.start + r] = true;
            }
            gt.push(moment_to_interval(*span, k, duration)?);
            planted.push(PlantedSentence {
                video: v,
                sentence: si,
                span: *span,
                signature,
            });
            sentences.push(ids);
        }
        for (seg, &inside) in covered.iter().enumerate() {
            if !inside {
                let t = 2 + rng.random_range(0..n_content);
                segments.row_mut(seg).assign(&emb.row(t));
            }
        }
        segments.mapv_inplace(|x| round32(x + noise * Distribution::<f64>::sample(&StandardNormal, &mut rng)));
        paragraphs.push(ParagraphRecord {
            video_id: id.clone(),
            paragraph_id: format!("para{v:03}"),
            sentences,
            gt: None,
        });
        intervals.push(gt);
        videos.push(VideoRecord {
            id,
            duration,
            segments,
        });
    }
    Ok(SyntheticCorpus {
        corpus: Corpus {
            vocab,
            videos,
            paragraphs,
        },
        intervals,
        planted,
    })
}
