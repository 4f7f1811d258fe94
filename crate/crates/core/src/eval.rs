//! Inference (retrieve, then ground) and the corpus-level R@K IoU=m metric.
//!
//! A sentence sample is a hit when its paragraph's ground-truth video is
//! ranked within the top `K` and the interval predicted for that sentence
//! inside the ground-truth video has IoU strictly greater than `m` with the
//! annotated interval. Predictions made in other ranked videos are ignored.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{Model, PreparedVideo};
use crate::moment_map::{moment_to_interval, temporal_iou, MomentIndex, ScoreMap, TimeInterval};
use crate::retrieval::cosine_similarity_matrix;

/// Videos ranked for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRetrieval {
    pub query: String,
    pub ranking: Vec<(String, f64)>,
}

impl RankedRetrieval {
    /// 1-based rank of `video_id`, if present.
    pub fn rank_of(&self, video_id: &str) -> Option<usize> {
        self.ranking.iter().position(|(id, _)| id == video_id).map(|i| i + 1)
    }

    pub fn top(&self) -> Option<&str> {
        self.ranking.first().map(|(id, _)| id.as_str())
    }
}

/// Sorts `(id, score)` pairs by descending score, ties by ascending id.
pub fn rank_scores(mut scored: Vec<(String, f64)>) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    scored
}

/// Retrieval tokens of every corpus video, computed once.
#[derive(Debug, Clone)]
pub struct VideoIndex {
    pub ids: Vec<String>,
    /// One token per row.
    pub tokens: Array2<f64>,
}

impl VideoIndex {
    pub fn build(model: &Model, videos: &[PreparedVideo]) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::invalid("video corpus is empty"));
        }
        let d = model.config.d;
        let mut tokens = Array2::zeros((videos.len(), d));
        for (row, v) in videos.iter().enumerate() {
            tokens.row_mut(row).assign(&model.video_token(v)?.row(0));
        }
        Ok(VideoIndex {
            ids: videos.iter().map(|v| v.id.clone()).collect(),
            tokens,
        })
    }
}

/// Scores every indexed video against a paragraph by cosine similarity of
/// the retrieval tokens.
pub fn retrieve(model: &Model, index: &VideoIndex, query: &str, sentences: &[Vec<usize>]) -> Result<RankedRetrieval> {
    if index.ids.is_empty() {
        return Err(Error::invalid("video corpus is empty"));
    }
    let text = model.text_token(sentences)?;
    let sims = cosine_similarity_matrix(&text, &index.tokens)?;
    let scored = index.ids.iter().cloned().zip(sims.values().row(0).iter().copied()).collect();
    Ok(RankedRetrieval {
        query: query.to_string(),
        ranking: rank_scores(scored),
    })
}

/// Per-sentence predictions inside one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingPrediction {
    pub video_id: String,
    pub moments: Vec<MomentIndex>,
    pub intervals: Vec<TimeInterval>,
}

/// Converts the argmax cell of each map to a time interval.
pub fn predictions_from_maps(video: &PreparedVideo, maps: &[ScoreMap]) -> Result<GroundingPrediction> {
    let moments: Vec<MomentIndex> = maps.iter().map(ScoreMap::argmax).collect();
    let intervals = moments
        .iter()
        .map(|&m| moment_to_interval(m, video.k(), video.duration))
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundingPrediction {
        video_id: video.id.clone(),
        moments,
        intervals,
    })
}

pub fn ground(model: &Model, sentences: &[Vec<usize>], video: &PreparedVideo) -> Result<GroundingPrediction> {
    predictions_from_maps(video, &model.score_maps(sentences, video)?)
}

/// Grid of `K` cut-offs and IoU thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallSpec {
    pub ks: Vec<usize>,
    pub ious: Vec<f64>,
}

impl Default for RecallSpec {
    fn default() -> Self {
        RecallSpec {
            ks: vec![10, 100],
            ious: vec![0.3, 0.5, 0.7],
        }
    }
}

impl RecallSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.ks.iter().find(|&&k| k == 0) {
            return Err(Error::invalid(format!("K = {k} must be at least 1")));
        }
        if let Some(m) = self.ious.iter().find(|&&m| !(m > 0.0 && m <= 1.0)) {
            return Err(Error::invalid(format!("IoU threshold {m} outside (0, 1]")));
        }
        Ok(())
    }
}

/// One sentence of one query paragraph.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceSample {
    /// Video ids in ranked order.
    pub ranking: Vec<String>,
    pub gt_video: String,
    /// Prediction for this sentence inside `gt_video`.
    pub predicted: Option<TimeInterval>,
    pub gt: Option<TimeInterval>,
}

fn is_hit(sample: &SentenceSample, k: usize, m: f64) -> Result<bool> {
    let gt = sample
        .gt
        .as_ref()
        .ok_or_else(|| Error::invalid("sample has no ground-truth interval"))?;
    let Some(pos) = sample.ranking.iter().position(|id| *id == sample.gt_video) else {
        return Ok(false);
    };
    if pos >= k {
        return Ok(false);
    }
    let pred = sample
        .predicted
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("no prediction in ground-truth video {}", sample.gt_video)))?;
    Ok(temporal_iou(pred, gt)? > m)
}

/// Percentage of samples that are hits at cut-off `k` and threshold `m`.
pub fn recall_at_k_iou(samples: &[SentenceSample], k: usize, m: f64) -> Result<f64> {
    RecallSpec {
        ks: vec![k],
        ious: vec![m],
    }
    .validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let mut hits = 0usize;
    for s in samples {
        hits += is_hit(s, k, m)? as usize;
    }
    Ok(100.0 * hits as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallValue {
    pub k: usize,
    pub iou: f64,
    pub percent: f64,
}

pub fn recall_grid(samples: &[SentenceSample], spec: &RecallSpec) -> Result<Vec<RecallValue>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.ks.len() * spec.ious.len());
    for &k in &spec.ks {
        for &iou in &spec.ious {
            out.push(RecallValue {
                k,
                iou,
                percent: recall_at_k_iou(samples, k, iou)?,
            });
        }
    }
    Ok(out)
}

/// Everything computed by one evaluation pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rankings: Vec<RankedRetrieval>,
    /// Per paragraph, predictions inside its ground-truth video.
    pub predictions: Vec<GroundingPrediction>,
    pub samples: Vec<SentenceSample>,
    /// Fraction of paragraphs whose ground-truth video ranks first.
    pub retrieval_rank1: f64,
    pub recall: Vec<RecallValue>,
}

impl Evaluation {
    pub fn recall(&self, k: usize, iou: f64) -> Option<f64> {
        self.recall.iter().find(|v| v.k == k && v.iou == iou).map(|v| v.percent)
    }
}

/// Retrieves and grounds every paragraph of `corpus` against its videos.
/// Paragraphs must carry ground truth (evaluation-mode loading).
pub fn evaluate(model: &Model, corpus: &Corpus, spec: &RecallSpec) -> Result<Evaluation> {
    spec.validate()?;
    let videos = corpus.videos.iter().map(|v| v.prepare()).collect::<Result<Vec<_>>>()?;
    let index = VideoIndex::build(model, &videos)?;
    let mut rankings = Vec::with_capacity(corpus.paragraphs.len());
    let mut predictions = Vec::with_capacity(corpus.paragraphs.len());
    let mut samples = Vec::new();
    let mut top1 = 0usize;
    for p in &corpus.paragraphs {
        let vi = corpus
            .video_index(&p.video_id)
            .ok_or_else(|| Error::invalid(format!("paragraph {} references unknown video {}", p.paragraph_id, p.video_id)))?;
        let ranked = retrieve(model, &index, &p.paragraph_id, &p.sentences)?;
        if ranked.top() == Some(p.video_id.as_str()) {
            top1 += 1;
        }
        let pred = ground(model, &p.sentences, &videos[vi])?;
        let gt = p
            .gt
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("paragraph {} has no ground truth", p.paragraph_id)))?
            .intervals();
        if gt.len() != p.sentences.len() {
            return Err(Error::invalid(format!(
                "paragraph {} has {} intervals for {} sentences",
                p.paragraph_id,
                gt.len(),
                p.sentences.len()
            )));
        }
        let order: Vec<String> = ranked.ranking.iter().map(|(id, _)| id.clone()).collect();
        for (interval, gt) in pred.intervals.iter().zip(gt) {
            samples.push(SentenceSample {
                ranking: order.clone(),
                gt_video: p.video_id.clone(),
                predicted: Some(*interval),
                gt: Some(*gt),
            });
        }
        rankings.push(ranked);
        predictions.push(pred);
    }
    if rankings.is_empty() {
        return Err(Error::invalid("corpus has no paragraphs"));
    }
    let recall = recall_grid(&samples, spec)?;
    Ok(Evaluation {
        retrieval_rank1: top1 as f64 / rankings.len() as f64,
        rankings,
        predictions,
        samples,
        recall,
    })
}

/// Machine-readable metrics record for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub checkpoint_hash: String,
    pub grid: RecallSpec,
    pub values: Vec<RecallValue>,
    pub retrieval_rank1: Option<f64>,
}

impl MetricsReport {
    pub fn from_evaluation(dataset: &str, checkpoint_hash: &str, spec: &RecallSpec, eval: &Evaluation) -> Self {
        MetricsReport {
            dataset: dataset.to_string(),
            checkpoint_hash: checkpoint_hash.to_string(),
            grid: spec.clone(),
            values: eval.recall.clone(),
            retrieval_rank1: Some(eval.retrieval_rank1),
        }
    }

    /// Markdown table, one row per `K` and one column per IoU threshold.
    pub fn to_table(&self) -> String {
        let mut out = String::from("| R@K |");
        for m in &self.grid.ious {
            out.push_str(&format!(" IoU={m} |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.grid.ious.len()));
        out.push('\n');
        let mut ks: Vec<usize> = self.values.iter().map(|v| v.k).collect();
        ks.dedup();
        for k in ks {
            out.push_str(&format!("| R@{k} |"));
            for &m in &self.grid.ious {
                match self.values.iter().find(|v| v.k == k && v.iou == m) {
                    Some(v) => out.push_str(&format!(" {:.2} |", v.percent)),
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics.md";

/// A score map to render, named after its query and sentence.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub name: String,
    pub map: ScoreMap,
}

const CELL_PX: u32 = 12;

fn colour(v: f64) -> Rgb<u8> {
    // dark blue through teal to yellow
    const STOPS: [[f64; 3]; 4] = [[68.0, 1.0, 84.0], [49.0, 104.0, 142.0], [53.0, 183.0, 121.0], [253.0, 231.0, 37.0]];
    let t = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let c = |ch: usize| (STOPS[i][ch] + f * (STOPS[i + 1][ch] - STOPS[i][ch])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Renders a map with start index down the rows and end index across the
/// columns; invalid cells are grey.
pub fn render_heatmap(map: &ScoreMap) -> RgbImage {
    let k = map.k() as u32;
    let values = map.matrix();
    RgbImage::from_fn(k * CELL_PX, k * CELL_PX, |x, y| {
        let (i, j) = ((y / CELL_PX) as usize, (x / CELL_PX) as usize);
        if i > j {
            Rgb([128, 128, 128])
        } else {
            colour(values[[i, j]])
        }
    })
}

pub fn write_heatmap(path: &Path, map: &ScoreMap) -> Result<()> {
    render_heatmap(map)
        .save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Writes `metrics.json`, `metrics.md` and one PNG per heatmap into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path, heatmaps: &[Heatmap]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let json = dir.join(METRICS_JSON);
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    written.push(json);
    let table = dir.join(METRICS_TABLE);
    fs::write(&table, report.to_table()).map_err(|e| Error::io(&table, e))?;
    written.push(table);
    for h in heatmaps {
        let path = dir.join(format!("{}.png", h.name));
        write_heatmap(&path, &h.map)?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(s: f64, e: f64) -> TimeInterval {
        TimeInterval::new(s, e).unwrap()
    }

    fn sample(ranking: &[&str], gt_video: &str, pred: TimeInterval, gt: TimeInterval) -> SentenceSample {
        SentenceSample {
            ranking: ranking.iter().map(|s| s.to_string()).collect(),
            gt_video: gt_video.into(),
            predicted: Some(pred),
            gt: Some(gt),
        }
    }

    #[test]
    fn ranking_ties_go_to_smaller_id() {
        let ranked = rank_scores(vec![("b".into(), 0.5), ("a".into(), 0.5), ("c".into(), 0.9)]);
        let ids: Vec<_> = ranked.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn argmax_cell_to_interval() {
        let mut values = Array2::zeros((16, 16));
        values[[4, 7]] = 0.9;
        values[[2, 3]] = 0.4;
        let map = ScoreMap::from_matrix(values).unwrap();
        let video = PreparedVideo::new("v", 32.0, Array2::zeros((16, 3))).unwrap();
        let pred = predictions_from_maps(&video, &[map.clone(), map]).unwrap();
        assert_eq!(pred.moments.len(), 2);
        assert_eq!(pred.intervals[0], iv(8.0, 16.0));
    }

    #[test]
    fn recall_examples() {
        let exact = iv(0.0, 4.0);
        let all = vec![sample(&["v0", "v1"], "v0", exact, exact); 3];
        assert_eq!(recall_at_k_iou(&all, 1, 0.7).unwrap(), 100.0);

        let mut four = vec![sample(&["v0", "v1"], "v0", exact, exact); 4];
        four[3].predicted = Some(iv(10.0, 12.0));
        assert_eq!(recall_at_k_iou(&four, 1, 0.5).unwrap(), 75.0);

        let near = vec![sample(&["v0"], "v0", iv(0.0, 3.9), exact)];
        assert_eq!(recall_at_k_iou(&near, 1, 1.0).unwrap(), 0.0);
        // strict threshold: even an exact match does not exceed 1
        assert_eq!(recall_at_k_iou(&all, 1, 1.0).unwrap(), 0.0);

        let ranked_second = vec![sample(&["v1", "v0"], "v0", exact, exact)];
        assert_eq!(recall_at_k_iou(&ranked_second, 1, 0.5).unwrap(), 0.0);
        assert_eq!(recall_at_k_iou(&ranked_second, 2, 0.5).unwrap(), 100.0);
    }

    #[test]
    fn recall_errors() {
        let mut s = sample(&["v0"], "v0", iv(0.0, 1.0), iv(0.0, 1.0));
        s.gt = None;
        assert!(recall_at_k_iou(&[s], 1, 0.5).is_err());
        assert!(recall_at_k_iou(&[], 1, 0.5).is_err());
        let ok = sample(&["v0"], "v0", iv(0.0, 1.0), iv(0.0, 1.0));
        assert!(recall_at_k_iou(&[ok.clone()], 0, 0.5).is_err());
        assert!(recall_at_k_iou(&[ok], 1, 0.0).is_err());
    }

    #[test]
    fn table_layout() {
        let mut report = MetricsReport {
            dataset: "d".into(),
            checkpoint_hash: "h".into(),
            grid: RecallSpec::default(),
            values: vec![],
            retrieval_rank1: None,
        };
        assert_eq!(report.to_table().lines().count(), 2);
        for &k in &[10, 100] {
            for &iou in &[0.3, 0.5, 0.7] {
                report.values.push(RecallValue { k, iou, percent: 12.5 });
            }
        }
        let table = report.to_table();
        assert_eq!(table.lines().count(), 4);
        assert_eq!(table.matches("12.50").count(), 6);
    }

    #[test]
    fn heatmap_greys_invalid_cells() {
        let map = ScoreMap::from_matrix(Array2::from_elem((3, 3), 1.0)).unwrap();
        let img = render_heatmap(&map);
        assert_eq!(img.dimensions(), (3 * CELL_PX, 3 * CELL_PX));
        assert_eq!(*img.get_pixel(0, CELL_PX * 2), Rgb([128, 128, 128]));
        assert_eq!(*img.get_pixel(CELL_PX * 2, 0), Rgb([253, 231, 37]));
    }
}
