//! Python bindings: corpus generation, training, evaluation and the metric
//! helpers. Errors surface as `ValueError` for bad arguments and config, and
//! `OSError` for unreadable or malformed files.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vprg_core::checkpoint::{file_hash, load_checkpoint};
use vprg_core::data::annotations::{AccessAudit, LoadMode};
use vprg_core::data::config::{apply, load_config, parse_config};
use vprg_core::data::corpus::{load_corpus, write_corpus, Corpus};
use vprg_core::data::synthetic::{generate_synthetic_corpus, SyntheticSpec};
use vprg_core::eval::{evaluate, ground, recall_at_k_iou, RecallSpec, SentenceSample};
use vprg_core::model::Model as CoreModel;
use vprg_core::moment_map::{temporal_iou as core_iou, TimeInterval};
use vprg_core::trainer::train as core_train;
use vprg_core::Error;

fn py_err(e: Error) -> PyErr {
    if e.is_data_error() {
        PyOSError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn interval(t: (f64, f64)) -> PyResult<TimeInterval> {
    TimeInterval::new(t.0, t.1).map_err(py_err)
}

/// Writes a synthetic corpus with planted spans to `out`. Returns the number
/// of videos and paragraphs written.
#[pyfunction]
#[pyo3(signature = (out, videos=8, segments=16, sentences=3, dim=32, slots=4, snr=10.0, signature_gain=1.0, seed=7))]
#[allow(clippy::too_many_arguments)]
fn generate(
    out: PathBuf,
    videos: usize,
    segments: usize,
    sentences: usize,
    dim: usize,
    slots: usize,
    snr: f64,
    signature_gain: f64,
    seed: u64,
) -> PyResult<(usize, usize)> {
    let spec = SyntheticSpec {
        videos,
        segments,
        sentences,
        dim,
        slots,
        snr,
        signature_gain,
        seed,
    };
    let s = generate_synthetic_corpus(&spec).map_err(py_err)?;
    let gt: Vec<_> = s.intervals.iter().cloned().map(Some).collect();
    write_corpus(&out, &s.corpus, &gt).map_err(py_err)?;
    Ok((s.corpus.videos.len(), s.corpus.paragraphs.len()))
}

/// Trains on the corpus in `corpus`. `config` is a config file path, or
/// `None` for the defaults; `overrides` maps config keys to values and is
/// applied last. Returns per-epoch totals; checkpoints go to `out` if given.
#[pyfunction]
#[pyo3(signature = (corpus, out=None, config=None, overrides=None))]
fn train(corpus: PathBuf, out: Option<PathBuf>, config: Option<PathBuf>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<f64>> {
    let mut cfg = match config {
        Some(p) => load_config(&p),
        None => parse_config("", |k| std::env::var(k).ok()),
    }
    .map_err(py_err)?;
    if let Some(map) = overrides {
        for (k, v) in map.iter() {
            // Python spells booleans `True`/`False`
            let value = v.str()?.to_string().to_lowercase();
            apply(&mut cfg, &k.str()?.to_string(), &value).map_err(py_err)?;
        }
        cfg.validate().map_err(py_err)?;
    }
    let data = load_corpus(&corpus, LoadMode::Training, &AccessAudit::new()).map_err(py_err)?;
    data.validate(Some(cfg.model.k)).map_err(py_err)?;
    let outcome = core_train(&data, &cfg, out.as_deref()).map_err(py_err)?;
    Ok(outcome.epochs.iter().map(|e| e.total).collect())
}

fn restore(checkpoint: &Path, corpus: &Corpus) -> PyResult<CoreModel> {
    let ckpt = load_checkpoint(checkpoint).map_err(py_err)?;
    let model = ckpt.restore_model(corpus.vocab.clone()).map_err(py_err)?;
    corpus.validate(Some(model.k())).map_err(py_err)?;
    if corpus.feature_width() != model.d_v {
        return Err(PyValueError::new_err(format!(
            "corpus features are {} wide, checkpoint expects {}",
            corpus.feature_width(),
            model.d_v
        )));
    }
    Ok(model)
}

/// A trained model bound to an evaluation corpus.
#[pyclass]
struct Model {
    model: CoreModel,
    corpus: Corpus,
    checkpoint_hash: String,
}

#[pymethods]
impl Model {
    #[new]
    fn new(checkpoint: PathBuf, corpus: PathBuf) -> PyResult<Self> {
        let data = load_corpus(&corpus, LoadMode::Evaluation, &AccessAudit::new()).map_err(py_err)?;
        let model = restore(&checkpoint, &data)?;
        Ok(Model {
            model,
            corpus: data,
            checkpoint_hash: file_hash(&checkpoint).map_err(py_err)?,
        })
    }

    #[getter]
    fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    /// Returns `{"retrieval_rank1": float, "recall": {(k, iou): percent}}`.
    #[pyo3(signature = (ks=vec![10, 100], ious=vec![0.3, 0.5, 0.7]))]
    fn evaluate<'py>(&self, py: Python<'py>, ks: Vec<usize>, ious: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let spec = RecallSpec { ks, ious };
        let eval = evaluate(&self.model, &self.corpus, &spec).map_err(py_err)?;
        let recall = PyDict::new(py);
        for v in &eval.recall {
            recall.set_item((v.k, v.iou), v.percent)?;
        }
        let out = PyDict::new(py);
        out.set_item("retrieval_rank1", eval.retrieval_rank1)?;
        out.set_item("recall", recall)?;
        Ok(out)
    }

    /// Predicted `(start, end)` seconds for each sentence of a paragraph,
    /// grounded in its own video.
    fn ground(&self, paragraph: &str) -> PyResult<Vec<(f64, f64)>> {
        let p = self
            .corpus
            .paragraphs
            .iter()
            .find(|p| p.paragraph_id == paragraph)
            .ok_or_else(|| PyValueError::new_err(format!("no paragraph {paragraph}")))?;
        let vi = self
            .corpus
            .video_index(&p.video_id)
            .ok_or_else(|| PyValueError::new_err(format!("no video {}", p.video_id)))?;
        let video = self.corpus.videos[vi].prepare().map_err(py_err)?;
        let pred = ground(&self.model, &p.sentences, &video).map_err(py_err)?;
        Ok(pred.intervals.iter().map(|t| (t.start, t.end)).collect())
    }
}

/// Temporal IoU of two `(start, end)` intervals.
#[pyfunction]
fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> PyResult<f64> {
    core_iou(&interval(a)?, &interval(b)?).map_err(py_err)
}

/// R@k, IoU=m in percent. Each sample is
/// `(ranking, gt_video, predicted, gt)` with intervals as `(start, end)`.
#[pyfunction]
fn recall(samples: Vec<(Vec<String>, String, (f64, f64), (f64, f64))>, k: usize, m: f64) -> PyResult<f64> {
    let samples = samples
        .into_iter()
        .map(|(ranking, gt_video, pred, gt)| {
            Ok(SentenceSample {
                ranking,
                gt_video,
                predicted: Some(interval(pred)?),
                gt: Some(interval(gt)?),
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    recall_at_k_iou(&samples, k, m).map_err(py_err)
}

#[pymodule]
fn vprg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_iou, m)?)?;
    m.add_function(wrap_pyfunction!(recall, m)?)?;
    m.add_class::<Model>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
