//! Paragraph–video retrieval branch: class-token aggregation for both
//! modalities, batch cosine similarity, and the InfoNCE and triplet ranking
//! objectives that shape the coarse-grained joint space.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, TransformerEncoder};
use crate::params::{ParamId, ParamStore};

/// A learnable seed token prepended to a sequence and read back out after a
/// self-attention encoder.
#[derive(Debug, Clone)]
pub struct ClassTokenAggregator {
    pub seed: ParamId,
    pub encoder: TransformerEncoder,
    pub positional: bool,
}

impl ClassTokenAggregator {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        depth: usize,
        heads: usize,
        positional: bool,
        rng: &mut impl Rng,
    ) -> Self {
        ClassTokenAggregator {
            seed: store.add_normal(&format!("{name}.cls"), (1, d), 0.02, rng),
            encoder: TransformerEncoder::new(store, &format!("{name}.encoder"), d, depth, heads, rng),
            positional,
        }
    }

    /// A second aggregator with its own seed token that runs through this
    /// aggregator's encoder parameters.
    pub fn sharing_encoder(&self, store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Self {
        let d = store.peek(self.seed).ncols();
        ClassTokenAggregator {
            seed: store.add_normal(&format!("{name}.cls"), (1, d), 0.02, rng),
            encoder: self.encoder.clone(),
            positional: self.positional,
        }
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        store.peek(self.seed).ncols()
    }

    pub fn aggregate(&self, g: &mut Graph, store: &ParamStore, sequence: Var) -> Result<Var> {
        let (n, d) = g.shape(sequence);
        let width = self.width(store);
        if n == 0 {
            return Err(Error::invalid("cannot aggregate an empty sequence"));
        }
        if d != width {
            return Err(Error::invalid(format!("sequence width {d} does not match token width {width}")));
        }
        let seq = if self.positional {
            let pos = g.constant(sinusoidal_positions(n, d));
            g.add(sequence, pos)
        } else {
            sequence
        };
        let seed = g.param(store, self.seed);
        let joined = g.concat_rows(&[seed, seq]);
        let encoded = self.encoder.forward(g, store, joined);
        Ok(g.slice_rows(encoded, 0, 1))
    }

    /// Plain-value aggregation of an `N × d` sequence.
    pub fn aggregate_global(&self, store: &ParamStore, sequence: &Array2<f64>) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let x = g.constant(sequence.clone());
        let out = self.aggregate(&mut g, store, x)?;
        Ok(g.value(out).clone())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.seed];
        p.extend(self.encoder.params());
        p
    }
}

/// `B × B` cosine scores; rows index texts, columns index videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(-1.0 - 1e-9..=1.0 + 1e-9).contains(*v)) {
            return Err(Error::invalid(format!("similarity {v} outside [-1, 1]")));
        }
        Ok(SimilarityMatrix { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.nrows()
    }

    /// Column index of the best-scoring video for each text row (first on ties).
    pub fn row_argmax(&self) -> Vec<usize> {
        self.values
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Learnable scale plus fixed margin and InfoNCE weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHyper {
    pub margin: f64,
    pub nce_weight: f64,
    pub initial_scale: f64,
}

impl Default for RetrievalHyper {
    fn default() -> Self {
        RetrievalHyper {
            margin: 0.2,
            nce_weight: 0.04,
            initial_scale: 10.0,
        }
    }
}

impl RetrievalHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(Error::invalid(format!("margin must lie in (0, 1), got {}", self.margin)));
        }
        if !(self.nce_weight >= 0.0) {
            return Err(Error::invalid(format!("InfoNCE weight must be ≥ 0, got {}", self.nce_weight)));
        }
        if !(self.initial_scale > 0.0) {
            return Err(Error::invalid("scale must be positive"));
        }
        Ok(())
    }
}

/// Learnable positive temperature stored as `log λ`.
#[derive(Debug, Clone, Copy)]
pub struct LearnableScale {
    pub log_scale: ParamId,
}

impl LearnableScale {
    pub fn new(store: &mut ParamStore, name: &str, initial: f64) -> Self {
        LearnableScale {
            log_scale: store.add(name, Array2::from_elem((1, 1), initial.ln())),
        }
    }

    pub fn var(&self, g: &mut Graph, store: &ParamStore) -> Var {
        let theta = g.param(store, self.log_scale);
        g.exp(theta)
    }

    pub fn value(&self, store: &ParamStore) -> f64 {
        store.peek(self.log_scale)[[0, 0]].exp()
    }
}

/// Cosine similarity of every text row against every video row.
pub fn cosine_similarity(g: &mut Graph, text: Var, video: Var) -> Var {
    let t = g.normalize_rows(text);
    let v = g.normalize_rows(video);
    g.matmul_nt(t, v)
}

fn check_nonzero_rows(x: &Array2<f64>, what: &str) -> Result<()> {
    for (i, row) in x.rows().into_iter().enumerate() {
        if row.dot(&row).sqrt() < 1e-12 {
            return Err(Error::NumericDegenerate(format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

pub fn cosine_similarity_matrix(text: &Array2<f64>, video: &Array2<f64>) -> Result<SimilarityMatrix> {
    if text.ncols() != video.ncols() {
        return Err(Error::invalid("text and video widths differ"));
    }
    check_nonzero_rows(text, "text")?;
    check_nonzero_rows(video, "video")?;
    let mut g = Graph::new();
    let t = g.constant(text.clone());
    let v = g.constant(video.clone());
    let s = cosine_similarity(&mut g, t, v);
    SimilarityMatrix::new(g.value(s).clone())
}

fn scale_matrix(g: &mut Graph, s: Var, scale: Var) -> Var {
    let b = g.shape(s).0;
    let ones = g.constant(Array2::ones((b, 1)));
    let col = g.matmul(ones, scale);
    g.mul_col(s, col)
}

/// Symmetric InfoNCE over a square similarity matrix with scale `λ` (`1 × 1`).
pub fn infonce_loss(g: &mut Graph, s: Var, scale: Var) -> Var {
    let b = g.shape(s).0;
    let scaled = scale_matrix(g, s, scale);
    let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();

    let t2v = g.log_softmax_rows(scaled);
    let t2v = g.gather_elems(t2v, &diag);
    let t2v = g.mean(t2v);

    let transposed = g.transpose(scaled);
    let v2t = g.log_softmax_rows(transposed);
    let v2t = g.gather_elems(v2t, &diag);
    let v2t = g.mean(v2t);

    let total = g.add(t2v, v2t);
    g.scale(total, -1.0)
}

/// Index of the hardest in-batch negative for every anchor, for both
/// directions: `(text→video, video→text)`.
pub fn hardest_negatives(s: &Array2<f64>) -> (Vec<usize>, Vec<usize>) {
    let b = s.nrows();
    let pick = |score: &dyn Fn(usize) -> f64, anchor: usize| {
        (0..b)
            .filter(|&z| z != anchor)
            .fold((usize::MAX, f64::NEG_INFINITY), |best, z| {
                let v = score(z);
                if v > best.1 {
                    (z, v)
                } else {
                    best
                }
            })
            .0
    };
    let t2v = (0..b).map(|a| pick(&|z| s[[a, z]], a)).collect();
    let v2t = (0..b).map(|a| pick(&|z| s[[z, a]], a)).collect();
    (t2v, v2t)
}

/// Hinge triplet loss against the hardest in-batch negative in each direction.
pub fn triplet_loss(g: &mut Graph, s: Var, margin: f64) -> Var {
    let b = g.shape(s).0;
    if b < 2 {
        return g.scalar_constant(0.0);
    }
    let (neg_t2v, neg_v2t) = hardest_negatives(g.value(s));
    let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let pos = g.gather_elems(s, &diag);

    let direction = |g: &mut Graph, at: Vec<(usize, usize)>| {
        let neg = g.gather_elems(s, &at);
        let gap = g.sub(neg, pos);
        let gap = g.shift(gap, margin);
        let hinge = g.relu(gap);
        g.mean(hinge)
    };
    let t2v = direction(g, neg_t2v.iter().enumerate().map(|(a, &z)| (a, z)).collect());
    let v2t = direction(g, neg_v2t.iter().enumerate().map(|(a, &z)| (z, a)).collect());
    g.add(t2v, v2t)
}

/// Triplet and InfoNCE components of a contrastive objective.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveLoss {
    pub triplet: Var,
    pub infonce: Var,
    pub total: Var,
}

/// `L = L_trip + β·L_nce`.
pub fn contrastive_loss(g: &mut Graph, s: Var, scale: Var, margin: f64, nce_weight: f64) -> ContrastiveLoss {
    let triplet = triplet_loss(g, s, margin);
    let infonce = infonce_loss(g, s, scale);
    let weighted = g.scale(infonce, nce_weight);
    let total = g.add(triplet, weighted);
    ContrastiveLoss { triplet, infonce, total }
}

pub fn infonce_value(s: &SimilarityMatrix, scale: f64) -> f64 {
    let mut g = Graph::new();
    let sv = g.constant(s.values().clone());
    let l = g.scalar_constant(scale);
    let loss = infonce_loss(&mut g, sv, l);
    g.scalar(loss)
}

pub fn triplet_value(s: &SimilarityMatrix, margin: f64) -> f64 {
    let mut g = Graph::new();
    let sv = g.constant(s.values().clone());
    let loss = triplet_loss(&mut g, sv, margin);
    g.scalar(loss)
}

/// Plain-value `L_cmr` with its parts: `(total, triplet, infonce)`.
pub fn cmr_loss(s: &SimilarityMatrix, scale: f64, hyper: &RetrievalHyper) -> (f64, f64, f64) {
    let triplet = triplet_value(s, hyper.margin);
    let infonce = infonce_value(s, scale);
    (triplet + hyper.nce_weight * infonce, triplet, infonce)
}

/// VPCMR: two unshared class-token encoders and a learnable scale.
#[derive(Debug, Clone)]
pub struct RetrievalBranch {
    pub video: ClassTokenAggregator,
    pub text: ClassTokenAggregator,
    pub scale: LearnableScale,
    pub hyper: RetrievalHyper,
}

impl RetrievalBranch {
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        depth: usize,
        heads: usize,
        hyper: RetrievalHyper,
        rng: &mut impl Rng,
    ) -> Self {
        RetrievalBranch {
            video: ClassTokenAggregator::new(store, "retrieval.video", d, depth, heads, true, rng),
            text: ClassTokenAggregator::new(store, "retrieval.text", d, depth, heads, true, rng),
            scale: LearnableScale::new(store, "retrieval.log_scale", hyper.initial_scale),
            hyper,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.video.params();
        p.extend(self.text.params());
        p.push(self.scale.log_scale);
        p
    }
}
