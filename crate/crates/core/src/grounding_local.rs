//! Local-dimension grounding: sentence–moment fusion over the 2-D map,
//! temporal adjacent refinement, score-map prediction, top-Q selection and
//! masked-word reconstruction with its reconstruction and rank losses.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::moment_map::{MomentIndex, ScoreMap};
use crate::nn::{relative_position_features, Conv3x3, Linear, TransformerLayer, RELATIVE_POSITION_WIDTH};
use crate::params::{ParamId, ParamStore};

/// Projections `W_s`, `W_v` of the Hadamard fusion.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub sentence: ParamId,
    pub moment: ParamId,
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, name: &str, d_s: usize, d_v: usize, d: usize, rng: &mut impl Rng) -> Self {
        FusionParams {
            sentence: store.add_weight(&format!("{name}.w_s"), (d_s, d), rng),
            moment: store.add_weight(&format!("{name}.w_v"), (d_v, d), rng),
        }
    }

    /// `F̃(i,j,:) = (W_s h) ⊙ (W_v F(i,j,:))` on valid cells, zero elsewhere.
    /// `sentence` is `1 × d_s`, `map` is `(K·K) × d_v`, `mask` is `(K·K) × 1`.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, sentence: Var, map: Var, mask: Var) -> Result<Var> {
        let ws = g.param(store, self.sentence);
        let wv = g.param(store, self.moment);
        if g.shape(sentence).1 != g.shape(ws).0 || g.shape(map).1 != g.shape(wv).0 || g.shape(sentence).0 != 1 {
            return Err(Error::invalid(format!(
                "fusion widths do not match: sentence {:?}, map {:?}",
                g.shape(sentence),
                g.shape(map)
            )));
        }
        let hs = g.matmul(sentence, ws);
        let fv = g.matmul(map, wv);
        let fused = g.mul_row(fv, hs);
        Ok(g.mul_col(fused, mask))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.sentence, self.moment]
    }
}

/// Four 3×3 convolutions over the moment map with ReLU between layers; the
/// invalid region is re-zeroed after every layer.
#[derive(Debug, Clone)]
pub struct TanStack {
    pub layers: Vec<Conv3x3>,
}

pub const TAN_DEPTH: usize = 4;

impl TanStack {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        TanStack {
            layers: (0..TAN_DEPTH)
                .map(|l| Conv3x3::new(store, &format!("{name}.conv{l}"), d, d, rng))
                .collect(),
        }
    }

    pub fn refine(&self, g: &mut Graph, store: &ParamStore, x: Var, k: usize, mask: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, conv) in self.layers.iter().enumerate() {
            h = conv.forward(g, store, h, k);
            if l != last {
                h = g.relu(h);
            }
            h = g.mul_col(h, mask);
        }
        h
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|c| c.params()).collect()
    }
}

/// Fully connected `d → 1` followed by a sigmoid, masked to valid cells.
#[derive(Debug, Clone)]
pub struct PredictionLayer {
    pub linear: Linear,
}

/// Initial probability of every cell. Starting near 0.5 would let the
/// suppression `1 - Σ P` clamp to zero after two sentences.
pub const PREDICTION_PRIOR: f64 = 0.01;

impl PredictionLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let linear = Linear::new(store, name, d, 1, rng);
        let bias = (PREDICTION_PRIOR / (1.0 - PREDICTION_PRIOR)).ln();
        store
            .set(linear.bias, Array2::from_elem((1, 1), bias))
            .expect("bias is 1 × 1");
        PredictionLayer { linear }
    }

    /// `(K·K) × 1` scores.
    pub fn predict(&self, g: &mut Graph, store: &ParamStore, features: Var, mask: Var) -> Var {
        let logits = self.linear.forward(g, store, features);
        let p = g.sigmoid(logits);
        g.mul_col(p, mask)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.linear.params()
    }
}

/// The `q` highest-scoring valid cells in descending order; equal scores
/// keep lexicographic `(start, end)` order.
pub fn select_top_q(map: &ScoreMap, q: usize) -> Result<Vec<(MomentIndex, f64)>> {
    let k = map.k();
    let valid = k * (k + 1) / 2;
    if q == 0 || q > valid {
        return Err(Error::invalid(format!("cannot select {q} moments from {valid} valid cells")));
    }
    let mut cells: Vec<(MomentIndex, f64)> = map.valid_cells().collect();
    // stable sort keeps the lexicographic enumeration order among ties
    cells.sort_by(|a, b| b.1.total_cmp(&a.1));
    cells.truncate(q);
    Ok(cells)
}

/// Rewards `1, 1 − 1/(Q−1), …, 0` for `Q` ranked candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSchedule {
    rewards: Vec<f64>,
}

impl RewardSchedule {
    pub fn new(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::invalid("reward schedule needs Q ≥ 1"));
        }
        if q == 1 {
            return Ok(RewardSchedule { rewards: vec![1.0] });
        }
        let step = 1.0 / (q - 1) as f64;
        Ok(RewardSchedule {
            rewards: (0..q).map(|i| 1.0 - i as f64 * step).collect(),
        })
    }

    pub fn from_values(rewards: Vec<f64>) -> Self {
        RewardSchedule { rewards }
    }

    pub fn values(&self) -> &[f64] {
        &self.rewards
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Transformer encoder over the span's segment rows and a cross-attending
/// decoder over the masked sentence's per-word states, followed by a
/// vocabulary projection. Both sides carry relative-position features so
/// word order can be aligned with the order of segments in the span.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    pub span_in: Linear,
    pub span_pos: Linear,
    pub encoder: TransformerLayer,
    pub word_in: Linear,
    pub word_pos: Linear,
    pub decoder: TransformerLayer,
    pub output: Linear,
}

impl Reconstructor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_s: usize,
        d_v: usize,
        d: usize,
        n_v: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Reconstructor {
            span_in: Linear::new(store, &format!("{name}.span_in"), d_v, d, rng),
            span_pos: Linear::new(store, &format!("{name}.span_pos"), RELATIVE_POSITION_WIDTH, d, rng),
            encoder: TransformerLayer::new(store, &format!("{name}.encoder"), d, heads, false, rng),
            word_in: Linear::new(store, &format!("{name}.word_in"), d_s, d, rng),
            word_pos: Linear::new(store, &format!("{name}.word_pos"), RELATIVE_POSITION_WIDTH, d, rng),
            decoder: TransformerLayer::new(store, &format!("{name}.decoder"), d, heads, true, rng),
            output: Linear::new(store, &format!("{name}.output"), d, n_v, rng),
        }
    }

    /// `J × n_v` vocabulary logits for every word slot.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, masked_states: Var, span: Var) -> Result<Var> {
        let l = g.shape(span).0;
        if l == 0 {
            return Err(Error::invalid("empty moment span"));
        }
        let j = g.shape(masked_states).0;
        let x = self.span_in.forward(g, store, span);
        let pos = g.constant(relative_position_features(l));
        let pos = self.span_pos.forward(g, store, pos);
        let x = g.add(x, pos);
        let memory = self.encoder.forward(g, store, x, None);

        let wpos = g.constant(relative_position_features(j));
        let wpos = self.word_pos.forward(g, store, wpos);
        let words = self.word_in.forward(g, store, masked_states);
        let q = g.add(words, wpos);
        let decoded = self.decoder.forward(g, store, q, Some(memory));
        Ok(self.output.forward(g, store, decoded))
    }

    /// Plain-value distributions `e_{j}` (rows sum to one).
    pub fn reconstruct_masked(&self, store: &ParamStore, masked_states: &Array2<f64>, span: &Array2<f64>) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let states = g.constant(masked_states.clone());
        let span = g.constant(span.clone());
        let logits = self.logits(&mut g, store, states, span)?;
        let p = g.softmax_rows(logits);
        Ok(g.value(p).clone())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.span_in.params();
        p.extend(self.span_pos.params());
        p.extend(self.encoder.params());
        p.extend(self.word_in.params());
        p.extend(self.word_pos.params());
        p.extend(self.decoder.params());
        p.extend(self.output.params());
        p
    }
}

/// Per-position weights: `1` on masked words, `unmasked_weight` elsewhere.
pub fn word_weights(len: usize, mask_positions: &[usize], unmasked_weight: f64) -> Vec<f64> {
    (0..len)
        .map(|j| if mask_positions.contains(&j) { 1.0 } else { unmasked_weight })
        .collect()
}

/// Weighted negative log-likelihood of one candidate's reconstruction,
/// `−Σ_j w_j log p(target_j)`, from a `J × n_v` log-probability matrix.
pub fn candidate_nll(g: &mut Graph, log_probs: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
    let (j, n_v) = g.shape(log_probs);
    if targets.len() != j || weights.len() != j {
        return Err(Error::invalid(format!(
            "{} targets / {} weights for {j} word slots",
            targets.len(),
            weights.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= n_v) {
        return Err(Error::invalid(format!("target id {bad} outside vocabulary of {n_v}")));
    }
    let at: Vec<(usize, usize)> = targets.iter().enumerate().map(|(pos, &t)| (pos, t)).collect();
    let picked = g.gather_elems(log_probs, &at);
    let w = g.constant(Array2::from_shape_vec((j, 1), weights.to_vec()).expect("column"));
    let weighted = g.mul(picked, w);
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0))
}

/// `L_rec = (1/M) Σ_m (1/Q) Σ_q nll_{m,q}` from per-candidate NLL scalars.
pub fn average_over_sentences(g: &mut Graph, per_sentence: &[Vec<Var>]) -> Var {
    let m = per_sentence.len().max(1) as f64;
    let sentence_means: Vec<Var> = per_sentence
        .iter()
        .map(|cands| {
            let s = g.add_all(cands);
            g.scale(s, 1.0 / cands.len().max(1) as f64)
        })
        .collect();
    let total = g.add_all(&sentence_means);
    g.scale(total, 1.0 / m)
}

/// Reconstruction loss over distributions `dists[m][q]` (each `J × n_v`).
pub fn reconstruction_loss(
    g: &mut Graph,
    dists: &[Vec<Var>],
    targets: &[Vec<usize>],
    weights: &[Vec<f64>],
) -> Result<Var> {
    if dists.len() != targets.len() || dists.len() != weights.len() {
        return Err(Error::invalid("sentence counts differ between distributions and targets"));
    }
    let mut per_sentence = Vec::with_capacity(dists.len());
    for ((cands, tgt), w) in dists.iter().zip(targets).zip(weights) {
        let mut nll = Vec::with_capacity(cands.len());
        for &d in cands {
            let lp = g.log(d);
            nll.push(candidate_nll(g, lp, tgt, w)?);
        }
        per_sentence.push(nll);
    }
    Ok(average_over_sentences(g, &per_sentence))
}

pub fn reconstruction_loss_value(dists: &[Vec<Array2<f64>>], targets: &[Vec<usize>], weights: &[Vec<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Vec<Var>> = dists
        .iter()
        .map(|c| c.iter().map(|d| g.constant(d.clone())).collect())
        .collect();
    let loss = reconstruction_loss(&mut g, &vars, targets, weights)?;
    Ok(g.scalar(loss))
}

/// Rank loss: `−(1/M) Σ_m (1/Q) Σ_q R^q log softmax(p_m)_q`, where each entry
/// of `scores` is a `Q × 1` column listed in reward order.
pub fn rank_loss(g: &mut Graph, scores: &[Var], rewards: &RewardSchedule) -> Result<Var> {
    let q = rewards.len();
    let reward_row = Array2::from_shape_vec((1, q), rewards.values().to_vec()).expect("row");
    let mut terms = Vec::with_capacity(scores.len());
    for &s in scores {
        if g.shape(s) != (q, 1) {
            return Err(Error::invalid(format!("expected {q} scores, got {:?}", g.shape(s))));
        }
        let row = g.transpose(s);
        let lsm = g.log_softmax_rows(row);
        let r = g.constant(reward_row.clone());
        let weighted = g.mul(lsm, r);
        let total = g.sum(weighted);
        terms.push(g.scale(total, -1.0 / q as f64));
    }
    let sum = g.add_all(&terms);
    Ok(g.scale(sum, 1.0 / scores.len().max(1) as f64))
}

pub fn rank_loss_value(scores: &[Vec<f64>], rewards: &RewardSchedule) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = scores
        .iter()
        .map(|s| g.constant(Array2::from_shape_vec((s.len(), 1), s.clone()).expect("column")))
        .collect();
    let loss = rank_loss(&mut g, &vars, rewards)?;
    Ok(g.scalar(loss))
}

/// `L_local = L_rec + L_rank`.
pub fn local_loss(reconstruction: f64, rank: f64) -> f64 {
    reconstruction + rank
}

/// How the Q selected candidates are ordered before rewards are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardOrder {
    /// Lowest reconstruction loss receives the top reward.
    Reconstruction,
    /// Highest predicted score receives the top reward.
    Score,
}

/// VTC-LD components.
#[derive(Debug, Clone)]
pub struct GroundingLocal {
    pub fusion: FusionParams,
    pub tan: TanStack,
    pub prediction: PredictionLayer,
    pub reconstructor: Reconstructor,
}

impl GroundingLocal {
    pub fn new(store: &mut ParamStore, d_s: usize, d_v: usize, d: usize, n_v: usize, heads: usize, rng: &mut impl Rng) -> Self {
        GroundingLocal {
            fusion: FusionParams::new(store, "local.fusion", d_s, d_v, d, rng),
            tan: TanStack::new(store, "local.tan", d, rng),
            prediction: PredictionLayer::new(store, "local.pl", d, rng),
            reconstructor: Reconstructor::new(store, "local.reconstructor", d_s, d_v, d, n_v, heads, rng),
        }
    }

    /// Fused, refined map `F̄_m` for one sentence.
    pub fn refined_map(&self, g: &mut Graph, store: &ParamStore, sentence: Var, map: Var, mask: Var, k: usize) -> Result<Var> {
        let fused = self.fusion.fuse(g, store, sentence, map, mask)?;
        Ok(self.tan.refine(g, store, fused, k, mask))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fusion.params();
        p.extend(self.tan.params());
        p.extend(self.prediction.params());
        p.extend(self.reconstructor.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment_map::valid_mask;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(start: usize, end: usize) -> MomentIndex {
        MomentIndex { start, end }
    }

    #[test]
    fn fusion_examples() {
        let mut store = ParamStore::new();
        let fusion = FusionParams {
            sentence: store.add("ws", array![[1.0]]),
            moment: store.add("wv", array![[3.0]]),
        };
        let mut g = Graph::new();
        let h = g.constant(array![[2.0]]);
        let map = g.constant(Array2::ones((4, 1)));
        let mask = g.constant(valid_mask(2));
        let out = fusion.fuse(&mut g, &store, h, map, mask).unwrap();
        assert_eq!(g.value(out), &array![[6.0], [6.0], [0.0], [6.0]]);

        let zero = g.constant(array![[0.0]]);
        let out = fusion.fuse(&mut g, &store, zero, map, mask).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));

        let wide = g.constant(array![[1.0, 2.0]]);
        assert!(fusion.fuse(&mut g, &store, wide, map, mask).is_err());
    }

    #[test]
    fn fusion_with_unit_sentence_projection_is_projected_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let fusion = FusionParams::new(&mut store, "f", 2, 3, 3, &mut rng);
        store.set(fusion.sentence, array![[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]).unwrap();
        let fmap = Array2::from_shape_fn((9, 3), |(r, c)| (r + c) as f64);
        let mut g = Graph::new();
        let h = g.constant(array![[1.0, 5.0]]);
        let map = g.constant(fmap.clone());
        let mask = g.constant(valid_mask(3));
        let out = fusion.fuse(&mut g, &store, h, map, mask).unwrap();
        let expected = fmap.dot(store.peek(fusion.moment)) * &valid_mask(3);
        assert_eq!(g.value(out), &expected);
    }

    #[test]
    fn tan_shape_zero_and_locality() {
        let k = 12;
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let tan = TanStack::new(&mut store, "tan", d, &mut rng);
        let run = |x: Array2<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x);
            let mask = g.constant(valid_mask(k));
            let y = tan.refine(&mut g, &store, xv, k, mask);
            g.value(y).clone()
        };
        let zero = run(Array2::zeros((k * k, d)));
        assert_eq!(zero.dim(), (k * k, d));
        assert!(zero.iter().all(|&v| v == 0.0));

        let base = Array2::from_shape_fn((k * k, d), |(r, c)| ((r * 7 + c) % 11) as f64 * 0.1) * &valid_mask(k);
        let mut poked = base.clone();
        let (pi, pj) = (2, 9);
        poked.row_mut(pi * k + pj).mapv_inplace(|v| v + 1.0);
        let a = run(base);
        let b = run(poked);
        for cell in 0..k * k {
            let (i, j) = (cell / k, cell % k);
            let cheb = i.abs_diff(pi).max(j.abs_diff(pj));
            if cheb > TAN_DEPTH {
                assert_eq!(a.row(cell), b.row(cell), "cell ({i},{j}) outside receptive field changed");
            }
        }
        assert_ne!(a, b);
    }

    #[test]
    fn prediction_examples() {
        let mut store = ParamStore::new();
        let pl = PredictionLayer {
            linear: Linear {
                weight: store.add("w", Array2::zeros((2, 1))),
                bias: store.add("b", Array2::zeros((1, 1))),
            },
        };
        let mut g = Graph::new();
        let f = g.constant(Array2::zeros((9, 2)));
        let mask = g.constant(valid_mask(3));
        let p = pl.predict(&mut g, &store, f, mask);
        let map = ScoreMap::from_column(g.value(p), 3).unwrap();
        for (_, v) in map.valid_cells() {
            assert_eq!(v, 0.5);
        }
        assert_eq!(g.value(p)[[3, 0]], 0.0);

        store.set(pl.linear.bias, array![[40.0]]).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Array2::zeros((9, 2)));
        let mask = g.constant(valid_mask(3));
        let p = pl.predict(&mut g, &store, f, mask);
        assert!(g.value(p)[[0, 0]] > 1.0 - 1e-12);
    }

    #[test]
    fn top_q_examples() {
        let mut raw = Array2::from_elem((3, 3), 0.1);
        raw[[0, 1]] = 0.9;
        raw[[1, 2]] = 0.8;
        raw[[0, 0]] = 0.7;
        let map = ScoreMap::from_matrix(raw).unwrap();
        let top: Vec<_> = select_top_q(&map, 3).unwrap().into_iter().map(|(c, _)| c).collect();
        assert_eq!(top, vec![m(0, 1), m(1, 2), m(0, 0)]);

        let flat = ScoreMap::from_matrix(Array2::from_elem((2, 2), 0.4)).unwrap();
        let top: Vec<_> = select_top_q(&flat, 2).unwrap().into_iter().map(|(c, _)| c).collect();
        assert_eq!(top, vec![m(0, 0), m(0, 1)]);

        assert!(select_top_q(&ScoreMap::zeros(1), 2).is_err());
    }

    #[test]
    fn reward_schedule_values() {
        assert_eq!(RewardSchedule::new(3).unwrap().values(), &[1.0, 0.5, 0.0]);
        assert_eq!(RewardSchedule::new(5).unwrap().values(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(RewardSchedule::new(0).is_err());
    }

    #[test]
    fn reconstruction_loss_examples() {
        let one_hot = array![[0.0, 0.0, 1.0, 0.0]];
        assert_eq!(reconstruction_loss_value(&[vec![one_hot]], &[vec![2]], &[vec![1.0]]).unwrap(), 0.0);

        let uniform = Array2::from_elem((1, 4), 0.25);
        let v = reconstruction_loss_value(&[vec![uniform]], &[vec![3]], &[vec![1.0]]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);

        let two = Array2::from_elem((2, 4), 0.25);
        let v = reconstruction_loss_value(&[vec![two.clone()]], &[vec![1, 2]], &[vec![1.0, 1.0]]).unwrap();
        assert!((v - 2.0 * 4f64.ln()).abs() < 1e-12);

        assert!(reconstruction_loss_value(&[vec![two]], &[vec![1, 4]], &[vec![1.0, 1.0]]).is_err());
    }

    #[test]
    fn rank_loss_examples() {
        let rewards = RewardSchedule::new(3).unwrap();
        let v = rank_loss_value(&[vec![0.9, 0.8, 0.7]], &rewards).unwrap();
        assert!((v - 0.5177).abs() < 1e-3);
        let v = rank_loss_value(&[vec![0.6, 0.6, 0.6]], &rewards).unwrap();
        assert!((v - 1.5 * 3f64.ln() / 3.0).abs() < 1e-12);
        let zero = RewardSchedule::from_values(vec![0.0; 3]);
        assert_eq!(rank_loss_value(&[vec![0.9, 0.1, 0.3]], &zero).unwrap(), 0.0);
    }

    #[test]
    fn local_loss_examples() {
        assert_eq!(local_loss(0.0, 0.0), 0.0);
        assert!((local_loss(1.3863, 0.5177) - 1.9040).abs() < 1e-12);
        assert_eq!(local_loss(0.3, 0.7), local_loss(0.7, 0.3));
    }

    #[test]
    fn reconstructor_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let rec = Reconstructor::new(&mut store, "rec", 6, 8, 8, 13, 2, &mut rng);
        let states = Array2::from_shape_fn((5, 6), |(r, c)| ((r + 2 * c) % 5) as f64 * 0.3);
        let span = Array2::from_shape_fn((3, 8), |(r, c)| ((r * c) % 4) as f64 * 0.2);
        let dist = rec.reconstruct_masked(&store, &states, &span).unwrap();
        assert_eq!(dist.dim(), (5, 13));
        for row in dist.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert!(rec.reconstruct_masked(&store, &states, &Array2::zeros((0, 8))).is_err());
    }
}
