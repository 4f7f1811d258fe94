//! The full model: encoders, retrieval branch and the three grounding
//! branches sharing one parameter store, with a batch forward pass that
//! produces the five training losses and plain-value inference helpers.

use ndarray::{s, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{mask_sentence_with, MaskedSentence, SentenceEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::grounding_global::{cmff_fuse, global_loss, grrm_mse, CmffWeights, GroundingGlobal, GrrmPairs};
use crate::grounding_local::{
    candidate_nll, rank_loss, select_top_q, word_weights, GroundingLocal, RewardOrder, RewardSchedule,
};
use crate::grounding_temporal::{bce_alignment_loss, pseudo_label_from_map, GroundingTemporal};
use crate::moment_map::{build_feature_map, valid_mask, MomentIndex, ScoreMap};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::retrieval::{contrastive_loss, cosine_similarity, RetrievalBranch, RetrievalHyper};

/// Architecture and loss hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Segments per video, and the side of every moment map.
    pub k: usize,
    /// Shared hidden width.
    pub d: usize,
    pub heads: usize,
    /// Depth of the class-token encoders.
    pub depth: usize,
    pub q: usize,
    pub margin: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub initial_scale: f64,
    pub cmff_weights: Vec<f64>,
    pub theta_min: f64,
    pub theta_max: f64,
    /// Reconstruction weight of unmasked word positions.
    pub unmasked_weight: f64,
    pub reward_order: RewardOrder,
    pub grrm_pairs: GrrmPairs,
    pub grrm_symmetric: bool,
    /// Include the bidirectional synchronization loss.
    pub time_loss: bool,
    /// Train the synchronization prediction layers towards the detached main
    /// score maps so their pseudo-labels track the model.
    pub sync_distillation: bool,
    pub positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 16,
            d: 64,
            heads: 4,
            depth: 2,
            q: 3,
            margin: 0.2,
            beta1: 0.04,
            beta2: 0.04,
            initial_scale: 10.0,
            cmff_weights: vec![0.4, 0.3, 0.3],
            theta_min: 0.5,
            theta_max: 1.0,
            unmasked_weight: 0.1,
            reward_order: RewardOrder::Reconstruction,
            grrm_pairs: GrrmPairs::All,
            grrm_symmetric: false,
            time_loss: true,
            sync_distillation: true,
            positional: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 || self.heads == 0 || self.depth == 0 || self.q == 0 {
            return Err(Error::Config("k, d, heads, depth and q must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!("d = {} is not divisible by heads = {}", self.d, self.heads)));
        }
        if self.q > self.k * (self.k + 1) / 2 {
            return Err(Error::Config(format!("q = {} exceeds the number of moments for k = {}", self.q, self.k)));
        }
        if self.cmff_weights.len() != self.q {
            return Err(Error::Config(format!(
                "{} CMFF weights for q = {}",
                self.cmff_weights.len(),
                self.q
            )));
        }
        CmffWeights::new(self.cmff_weights.clone()).map_err(|e| Error::Config(e.to_string()))?;
        self.retrieval_hyper().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.beta2 < 0.0 {
            return Err(Error::Config("beta2 must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.theta_min) || self.theta_max <= self.theta_min || self.theta_max > 1.0 {
            return Err(Error::Config(format!(
                "invalid soft-label thresholds ({}, {})",
                self.theta_min, self.theta_max
            )));
        }
        if !(self.unmasked_weight >= 0.0) {
            return Err(Error::Config("unmasked_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn retrieval_hyper(&self) -> RetrievalHyper {
        RetrievalHyper {
            margin: self.margin,
            nce_weight: self.beta1,
            initial_scale: self.initial_scale,
        }
    }
}

/// A video's segment features with its precomputed moment feature map.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub id: String,
    pub duration: f64,
    /// `K × d_v`.
    pub segments: Array2<f64>,
    /// `(K·K) × d_v`.
    pub moment_map: Array2<f64>,
}

impl PreparedVideo {
    pub fn new(id: impl Into<String>, duration: f64, segments: Array2<f64>) -> Result<Self> {
        if !(duration > 0.0) {
            return Err(Error::invalid(format!("video duration {duration} must be positive")));
        }
        let moment_map = build_feature_map(segments.view())?.into_values();
        Ok(PreparedVideo {
            id: id.into(),
            duration,
            segments,
            moment_map,
        })
    }

    pub fn k(&self) -> usize {
        self.segments.nrows()
    }
}

/// One training pair: a video and the token ids of its paragraph.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub video: &'a PreparedVideo,
    pub sentences: &'a [Vec<usize>],
}

/// The five loss components, in the order they are logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub cmr: T,
    pub local: T,
    pub global: T,
    pub time: T,
    pub mse: T,
}

pub const LOSS_NAMES: [&str; 5] = ["cmr", "local", "global", "time", "mse"];

impl<T: Copy> LossParts<T> {
    pub fn to_array(&self) -> [T; 5] {
        [self.cmr, self.local, self.global, self.time, self.mse]
    }

    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> LossParts<U> {
        LossParts {
            cmr: f(self.cmr),
            local: f(self.local),
            global: f(self.global),
            time: f(self.time),
            mse: f(self.mse),
        }
    }
}

/// All model components over one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub d_v: usize,
    pub store: ParamStore,
    pub sentence_encoder: SentenceEncoder,
    pub video_input: Linear,
    pub text_input: Linear,
    pub retrieval: RetrievalBranch,
    pub local: GroundingLocal,
    pub global: GroundingGlobal,
    pub temporal: GroundingTemporal,
    rewards: RewardSchedule,
    cmff: CmffWeights,
}

/// Per-sentence intermediate values of one paragraph.
struct SentenceTrace {
    summary: Var,
    refined: Var,
    scores: Var,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, d_v: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if d_v == 0 {
            return Err(Error::invalid("video feature width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let d_s = vocab.width();
        let sentence_encoder = SentenceEncoder::new(&mut store, &vocab, &mut rng);
        let video_input = Linear::new(&mut store, "video.input", d_v, d, &mut rng);
        let text_input = Linear::new(&mut store, "text.input", d_s, d, &mut rng);
        let retrieval = RetrievalBranch::new(&mut store, d, config.depth, config.heads, config.retrieval_hyper(), &mut rng);
        let local = GroundingLocal::new(&mut store, d_s, d_v, d, vocab.len(), config.heads, &mut rng);
        let cmff = CmffWeights::new(config.cmff_weights.clone())?;
        let global = GroundingGlobal::new(&mut store, &retrieval.video, cmff.clone(), config.initial_scale, &mut rng);
        let temporal = GroundingTemporal::new(&mut store, d, config.theta_min, config.theta_max, &mut rng);
        let rewards = RewardSchedule::new(config.q)?;
        Ok(Model {
            config,
            vocab,
            d_v,
            store,
            sentence_encoder,
            video_input,
            text_input,
            retrieval,
            local,
            global,
            temporal,
            rewards,
            cmff,
        })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    /// Parameters read at inference time for retrieval.
    pub fn retrieval_params(&self) -> Vec<ParamId> {
        let mut p = self.sentence_encoder.params();
        p.extend(self.video_input.params());
        p.extend(self.text_input.params());
        p.extend(self.retrieval.params());
        p
    }

    /// Parameters owned by the grounding-global and grounding-temporal
    /// branches; none of them may be read at inference time.
    pub fn training_only_params(&self) -> Vec<ParamId> {
        let mut p = self.global.own_params();
        p.extend(self.temporal.params());
        p
    }

    fn check_video(&self, video: &PreparedVideo) -> Result<()> {
        if video.k() != self.config.k || video.segments.ncols() != self.d_v {
            return Err(Error::invalid(format!(
                "video {} has {}×{} segments, model expects {}×{}",
                video.id,
                video.k(),
                video.segments.ncols(),
                self.config.k,
                self.d_v
            )));
        }
        Ok(())
    }

    fn check_paragraph(&self, sentences: &[Vec<usize>]) -> Result<()> {
        if sentences.is_empty() {
            return Err(Error::invalid("a paragraph needs at least one sentence"));
        }
        if sentences.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid("empty sentence in paragraph"));
        }
        Ok(())
    }

    fn video_token_var(&self, g: &mut Graph, video: &PreparedVideo) -> Result<Var> {
        let x = g.constant(video.segments.clone());
        let x = self.video_input.forward(g, &self.store, x);
        self.retrieval.video.aggregate(g, &self.store, x)
    }

    fn text_token_var(&self, g: &mut Graph, summaries: &[Var]) -> Result<Var> {
        let x = g.concat_rows(summaries);
        let x = self.text_input.forward(g, &self.store, x);
        self.retrieval.text.aggregate(g, &self.store, x)
    }

    fn sentence_trace(&self, g: &mut Graph, ids: &[usize], map: Var, mask: Var) -> Result<SentenceTrace> {
        let enc = self
            .sentence_encoder
            .encode_tokens(g, &self.store, &self.vocab, &MaskedSentence::unmasked(ids))?;
        let refined = self.local.refined_map(g, &self.store, enc.summary, map, mask, self.config.k)?;
        let scores = self.local.prediction.predict(g, &self.store, refined, mask);
        Ok(SentenceTrace {
            summary: enc.summary,
            refined,
            scores,
        })
    }

    /// Forward pass over a batch of paired samples, returning the five loss
    /// components on the tape. Word masks are drawn from `rng`.
    pub fn batch_losses(&self, g: &mut Graph, batch: &[Sample<'_>], rng: &mut impl Rng) -> Result<LossParts<Var>> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let k = self.config.k;
        let q = self.config.q;
        let mask = g.constant(valid_mask(k));
        let mut text_tokens = Vec::with_capacity(batch.len());
        let mut video_tokens = Vec::with_capacity(batch.len());
        let mut fused_tokens = Vec::with_capacity(batch.len());
        let mut local_terms = Vec::with_capacity(batch.len());
        let mut time_terms = Vec::with_capacity(batch.len());

        for sample in batch {
            self.check_video(sample.video)?;
            self.check_paragraph(sample.sentences)?;
            let video_token = self.video_token_var(g, sample.video)?;
            let map = g.constant(sample.video.moment_map.clone());

            let mut traces = Vec::with_capacity(sample.sentences.len());
            let mut nll_terms = Vec::new();
            let mut rank_scores = Vec::new();
            let mut sentence_feats = Vec::new();
            for ids in sample.sentences {
                let trace = self.sentence_trace(g, ids, map, mask)?;
                let masked = mask_sentence_with(ids, rng);
                let menc = self.sentence_encoder.encode_tokens(g, &self.store, &self.vocab, &masked)?;
                let weights = word_weights(ids.len(), &masked.mask_positions, self.config.unmasked_weight);

                let current = ScoreMap::from_column(g.value(trace.scores), k)?;
                let top = select_top_q(&current, q)?;
                let mut nll = Vec::with_capacity(q);
                for (cell, _) in &top {
                    let span = g.constant(sample.video.segments.slice(s![cell.start..=cell.end, ..]).to_owned());
                    let logits = self.local.reconstructor.logits(g, &self.store, menc.per_word, span)?;
                    let log_probs = g.log_softmax_rows(logits);
                    nll.push(candidate_nll(g, log_probs, ids, &weights)?);
                }
                let mut order: Vec<usize> = (0..q).collect();
                if self.config.reward_order == RewardOrder::Reconstruction {
                    order.sort_by(|&a, &b| g.scalar(nll[a]).total_cmp(&g.scalar(nll[b])));
                }
                let ranked: Vec<(usize, usize)> = order.iter().map(|&i| (top[i].0.cell(k), 0)).collect();
                rank_scores.push(g.gather_elems(trace.scores, &ranked));
                let nll_sum = g.add_all(&nll);
                nll_terms.push(g.scale(nll_sum, 1.0 / q as f64));

                let cells: Vec<usize> = top.iter().map(|(c, _)| c.cell(k)).collect();
                let top_feats = g.gather_rows(trace.refined, &cells);
                sentence_feats.push(cmff_fuse(g, top_feats, &self.cmff)?);
                traces.push(trace);
            }

            let m = sample.sentences.len() as f64;
            let rec = g.add_all(&nll_terms);
            let rec = g.scale(rec, 1.0 / m);
            let rank = rank_loss(g, &rank_scores, &self.rewards)?;
            local_terms.push(g.add(rec, rank));

            let summaries: Vec<Var> = traces.iter().map(|t| t.summary).collect();
            text_tokens.push(self.text_token_var(g, &summaries)?);

            let feats = g.concat_rows(&sentence_feats);
            let grounded = self.global.grounded_token(g, &self.store, feats)?;
            fused_tokens.push(self.global.fusion.fuse(g, &self.store, video_token, grounded)?);
            video_tokens.push(video_token);

            if self.config.time_loss {
                time_terms.push(self.paragraph_time_loss(g, &traces, mask)?);
            }
        }

        let t = g.concat_rows(&text_tokens);
        let v = g.concat_rows(&video_tokens);
        let f = g.concat_rows(&fused_tokens);
        let s_r = cosine_similarity(g, t, v);
        let s_g = cosine_similarity(g, t, f);
        let scale_r = self.retrieval.scale.var(g, &self.store);
        let scale_g = self.global.scale.var(g, &self.store);
        let cmr = contrastive_loss(g, s_r, scale_r, self.config.margin, self.config.beta1).total;
        let global = global_loss(g, s_g, scale_g, self.config.margin, self.config.beta2).total;
        let mse = grrm_mse(g, s_r, s_g, self.config.grrm_pairs, self.config.grrm_symmetric)?;

        let b = batch.len() as f64;
        let local = g.add_all(&local_terms);
        let local = g.scale(local, 1.0 / b);
        let time = if time_terms.is_empty() {
            g.scalar_constant(0.0)
        } else {
            let sum = g.add_all(&time_terms);
            g.scale(sum, 1.0 / b)
        };
        Ok(LossParts {
            cmr,
            local,
            global,
            time,
            mse,
        })
    }

    fn paragraph_time_loss(&self, g: &mut Graph, traces: &[SentenceTrace], mask: Var) -> Result<Var> {
        let k = self.config.k;
        let refined: Vec<Var> = traces.iter().map(|t| t.refined).collect();
        let forward = self.temporal.forward.sync_maps(g, &self.store, &refined, mask);
        let reverse = self.temporal.reverse.sync_maps(g, &self.store, &refined, mask);
        let mut terms = Vec::with_capacity(traces.len() * 4);
        for (m, trace) in traces.iter().enumerate() {
            for branch_map in [forward[m], reverse[m]] {
                let label = pseudo_label_from_map(
                    &ScoreMap::from_column(g.value(branch_map), k)?,
                    self.temporal.theta_min,
                    self.temporal.theta_max,
                )?;
                let target = g.constant(label.to_column());
                terms.push(bce_alignment_loss(g, trace.scores, target, mask)?);
                if self.config.sync_distillation {
                    let teacher = g.detach(trace.scores);
                    terms.push(bce_alignment_loss(g, branch_map, teacher, mask)?);
                }
            }
        }
        Ok(g.add_all(&terms))
    }

    /// Retrieval class token of a video (`1 × d`).
    pub fn video_token(&self, video: &PreparedVideo) -> Result<Array2<f64>> {
        self.check_video(video)?;
        let mut g = Graph::new();
        let v = self.video_token_var(&mut g, video)?;
        Ok(g.value(v).clone())
    }

    /// Retrieval class token of a paragraph (`1 × d`).
    pub fn text_token(&self, sentences: &[Vec<usize>]) -> Result<Array2<f64>> {
        self.check_paragraph(sentences)?;
        let mut g = Graph::new();
        let mut summaries = Vec::with_capacity(sentences.len());
        for ids in sentences {
            let enc = self
                .sentence_encoder
                .encode_tokens(&mut g, &self.store, &self.vocab, &MaskedSentence::unmasked(ids))?;
            summaries.push(enc.summary);
        }
        let t = self.text_token_var(&mut g, &summaries)?;
        Ok(g.value(t).clone())
    }

    /// Main score maps `P_m` of every sentence against one video.
    pub fn score_maps(&self, sentences: &[Vec<usize>], video: &PreparedVideo) -> Result<Vec<ScoreMap>> {
        self.check_video(video)?;
        self.check_paragraph(sentences)?;
        let mut g = Graph::new();
        let mask = g.constant(valid_mask(self.config.k));
        let map = g.constant(video.moment_map.clone());
        sentences
            .iter()
            .map(|ids| {
                let trace = self.sentence_trace(&mut g, ids, map, mask)?;
                ScoreMap::from_column(g.value(trace.scores), self.config.k)
            })
            .collect()
    }

    /// Forward and reverse synchronization maps, for inspection.
    pub fn sync_maps(&self, sentences: &[Vec<usize>], video: &PreparedVideo) -> Result<(Vec<ScoreMap>, Vec<ScoreMap>)> {
        self.check_video(video)?;
        self.check_paragraph(sentences)?;
        let k = self.config.k;
        let mut g = Graph::new();
        let mask = g.constant(valid_mask(k));
        let map = g.constant(video.moment_map.clone());
        let mut refined = Vec::with_capacity(sentences.len());
        for ids in sentences {
            refined.push(self.sentence_trace(&mut g, ids, map, mask)?.refined);
        }
        let fwd = self.temporal.forward.sync_maps(&mut g, &self.store, &refined, mask);
        let rev = self.temporal.reverse.sync_maps(&mut g, &self.store, &refined, mask);
        let to_maps = |g: &Graph, vars: Vec<Var>| -> Result<Vec<ScoreMap>> {
            vars.into_iter().map(|v| ScoreMap::from_column(g.value(v), k)).collect()
        };
        Ok((to_maps(&g, fwd)?, to_maps(&g, rev)?))
    }

    /// Reconstruction distributions for a masked sentence over a span.
    pub fn reconstruct(&self, masked: &MaskedSentence, video: &PreparedVideo, span: MomentIndex) -> Result<Array2<f64>> {
        self.check_video(video)?;
        span.validate(self.config.k)?;
        let enc = self.sentence_encoder.encode_masked(&self.store, &self.vocab, masked)?;
        let rows = video.segments.slice(s![span.start..=span.end, ..]).to_owned();
        self.local.reconstructor.reconstruct_masked(&self.store, &enc.per_word, &rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{MASK_TOKEN, PAD_TOKEN};

    fn tiny_model(config: ModelConfig) -> (Model, Vec<PreparedVideo>, Vec<Vec<Vec<usize>>>) {
        let n_v = 10;
        let d_s = 6;
        let mut tokens = vec![PAD_TOKEN.to_string(), MASK_TOKEN.to_string()];
        tokens.extend((2..n_v).map(|i| format!("w{i}")));
        let emb = Array2::from_shape_fn((n_v, d_s), |(r, c)| if r == 0 { 0.0 } else { ((r * 5 + c * 3) % 7) as f64 * 0.2 - 0.6 });
        let vocab = Vocabulary::new(tokens, emb).unwrap();
        let k = config.k;
        let model = Model::new(config, vocab, 5, 3).unwrap();
        let videos = (0..3)
            .map(|v| {
                let seg = Array2::from_shape_fn((k, 5), |(r, c)| ((r * 3 + c * 7 + v * 11) % 9) as f64 * 0.25 - 1.0);
                PreparedVideo::new(format!("v{v}"), 2.0 * k as f64, seg).unwrap()
            })
            .collect();
        let paragraphs = (0..3)
            .map(|p| vec![vec![2 + p, 3, 4], vec![5 + p, 6, 7, 8]])
            .collect();
        (model, videos, paragraphs)
    }

    fn small() -> ModelConfig {
        ModelConfig {
            k: 6,
            d: 8,
            heads: 2,
            depth: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn batch_losses_are_finite_and_non_negative() {
        let (model, videos, paragraphs) = tiny_model(small());
        let batch: Vec<Sample> = videos
            .iter()
            .zip(&paragraphs)
            .map(|(v, p)| Sample { video: v, sentences: p })
            .collect();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let parts = model.batch_losses(&mut g, &batch, &mut rng).unwrap();
        for (name, v) in LOSS_NAMES.iter().zip(parts.to_array()) {
            let x = g.scalar(v);
            assert!(x.is_finite() && x >= 0.0, "{name} = {x}");
        }
        let total = g.add_all(&parts.to_array());
        let grads = g.backward(total);
        assert!(!grads.param_grads().is_empty());
    }

    #[test]
    fn time_loss_switch_zeroes_component() {
        let (model, videos, paragraphs) = tiny_model(ModelConfig {
            time_loss: false,
            ..small()
        });
        let batch = [Sample {
            video: &videos[0],
            sentences: &paragraphs[0],
        }];
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let parts = model.batch_losses(&mut g, &batch, &mut rng).unwrap();
        assert_eq!(g.scalar(parts.time), 0.0);
    }

    #[test]
    fn inference_helpers_shapes() {
        let (model, videos, paragraphs) = tiny_model(small());
        assert_eq!(model.video_token(&videos[0]).unwrap().dim(), (1, 8));
        assert_eq!(model.text_token(&paragraphs[0]).unwrap().dim(), (1, 8));
        let maps = model.score_maps(&paragraphs[0], &videos[0]).unwrap();
        assert_eq!(maps.len(), 2);
        for map in &maps {
            for (_, v) in map.valid_cells() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
        let (f, r) = model.sync_maps(&paragraphs[1], &videos[1]).unwrap();
        assert_eq!((f.len(), r.len()), (2, 2));
    }

    #[test]
    fn retrieval_reads_no_training_only_parameters() {
        let (model, videos, paragraphs) = tiny_model(small());
        model.store.reset_read_counts();
        model.video_token(&videos[0]).unwrap();
        model.text_token(&paragraphs[0]).unwrap();
        model.score_maps(&paragraphs[0], &videos[0]).unwrap();
        for id in model.training_only_params() {
            assert_eq!(model.store.read_count(id), 0, "{}", model.store.name(id));
        }
    }

    #[test]
    fn mismatched_video_is_rejected() {
        let (model, _, paragraphs) = tiny_model(small());
        let wrong = PreparedVideo::new("x", 10.0, Array2::zeros((4, 5))).unwrap();
        assert!(model.score_maps(&paragraphs[0], &wrong).is_err());
        assert!(ModelConfig { d: 7, ..small() }.validate().is_err());
    }
}
