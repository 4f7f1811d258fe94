//! Global-dimension grounding: weighted fusion of the top-Q moment features,
//! a grounded video class token aggregated through the shared video encoder,
//! fusion with the retrieval class token, and the losses that feed grounding
//! evidence back into retrieval.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::retrieval::{contrastive_loss, ClassTokenAggregator, ContrastiveLoss, LearnableScale};

/// Fixed non-negative weights over the ranked top-Q features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmffWeights {
    weights: Vec<f64>,
}

impl Default for CmffWeights {
    fn default() -> Self {
        CmffWeights {
            weights: vec![0.4, 0.3, 0.3],
        }
    }
}

impl CmffWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(format!("CMFF weights must be non-negative: {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("CMFF weights sum to {total}, expected 1")));
        }
        Ok(CmffWeights { weights })
    }

    pub fn values(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn row(&self) -> Array2<f64> {
        Array2::from_shape_vec((1, self.weights.len()), self.weights.clone()).expect("row")
    }
}

/// `Σ_q w_q f^q` for a `Q × d` stack of features, as a `1 × d` row.
pub fn cmff_fuse(g: &mut Graph, top_feats: Var, weights: &CmffWeights) -> Result<Var> {
    let q = g.shape(top_feats).0;
    if q != weights.len() {
        return Err(Error::invalid(format!("{q} features for {} CMFF weights", weights.len())));
    }
    let w = g.constant(weights.row());
    Ok(g.matmul(w, top_feats))
}

pub fn cmff_fuse_value(top_feats: &Array2<f64>, weights: &CmffWeights) -> Result<Array1<f64>> {
    if top_feats.nrows() != weights.len() {
        return Err(Error::invalid(format!(
            "{} features for {} CMFF weights",
            top_feats.nrows(),
            weights.len()
        )));
    }
    Ok(weights.row().dot(top_feats).row(0).to_owned())
}

/// `W_f [a; b] + b_f`: the 1×1 convolution over two stacked tokens.
#[derive(Debug, Clone)]
pub struct TokenFusion {
    pub linear: Linear,
}

impl TokenFusion {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        TokenFusion {
            linear: Linear::new(store, name, 2 * d, d, rng),
        }
    }

    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, retrieval_token: Var, grounded_token: Var) -> Result<Var> {
        let (a, b) = (g.shape(retrieval_token), g.shape(grounded_token));
        if a != b || a.1 * 2 != store.peek(self.linear.weight).nrows() {
            return Err(Error::invalid(format!("cannot fuse tokens of shapes {a:?} and {b:?}")));
        }
        let joined = g.concat_cols(&[retrieval_token, grounded_token]);
        Ok(self.linear.forward(g, store, joined))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.linear.params()
    }
}

/// Which entries of the similarity matrices the GRRM coupling covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrrmPairs {
    #[default]
    All,
    Positive,
}

/// `mean((S^r − sg(S^g))²)` over the selected entries. With `symmetric` the
/// gradient also reaches `S^g`.
pub fn grrm_mse(g: &mut Graph, s_r: Var, s_g: Var, pairs: GrrmPairs, symmetric: bool) -> Result<Var> {
    let (a, b) = (g.shape(s_r), g.shape(s_g));
    if a != b || a.0 != a.1 {
        return Err(Error::invalid(format!("GRRM needs equal square matrices, got {a:?} and {b:?}")));
    }
    let target = if symmetric { s_g } else { g.detach(s_g) };
    let diff = g.sub(s_r, target);
    let sq = g.mul(diff, diff);
    Ok(match pairs {
        GrrmPairs::All => g.mean(sq),
        GrrmPairs::Positive => {
            let diag: Vec<(usize, usize)> = (0..a.0).map(|i| (i, i)).collect();
            let d = g.gather_elems(sq, &diag);
            g.mean(d)
        }
    })
}

pub fn grrm_mse_value(s_r: &Array2<f64>, s_g: &Array2<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let r = g.constant(s_r.clone());
    let t = g.constant(s_g.clone());
    let loss = grrm_mse(&mut g, r, t, GrrmPairs::All, false)?;
    Ok(g.scalar(loss))
}

/// `L_global = L^g_trip + β2·L^g_nce` on the grounded similarity matrix.
pub fn global_loss(g: &mut Graph, s_g: Var, scale: Var, margin: f64, beta2: f64) -> ContrastiveLoss {
    contrastive_loss(g, s_g, scale, margin, beta2)
}

/// VTFA-GD components: the encoder-sharing aggregator, the token fusion and
/// this branch's own InfoNCE scale.
#[derive(Debug, Clone)]
pub struct GroundingGlobal {
    pub aggregator: ClassTokenAggregator,
    pub fusion: TokenFusion,
    pub scale: LearnableScale,
    pub weights: CmffWeights,
}

impl GroundingGlobal {
    pub fn new(
        store: &mut ParamStore,
        video_aggregator: &ClassTokenAggregator,
        weights: CmffWeights,
        initial_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let d = video_aggregator.width(store);
        GroundingGlobal {
            aggregator: video_aggregator.sharing_encoder(store, "global.grounded", rng),
            fusion: TokenFusion::new(store, "global.fusion", d, rng),
            scale: LearnableScale::new(store, "global.log_scale", initial_scale),
            weights,
        }
    }

    /// Grounded class token over the `M × d` sentence-level visual features.
    pub fn grounded_token(&self, g: &mut Graph, store: &ParamStore, sentence_feats: Var) -> Result<Var> {
        self.aggregator.aggregate(g, store, sentence_feats)
    }

    /// Parameters owned by this branch alone (the shared encoder belongs to
    /// the retrieval branch).
    pub fn own_params(&self) -> Vec<ParamId> {
        let mut p = vec![self.aggregator.seed];
        p.extend(self.fusion.params());
        p.push(self.scale.log_scale);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cmff_examples() {
        let w = CmffWeights::default();
        let v = array![[0.5, -1.0], [0.5, -1.0], [0.5, -1.0]];
        let out = cmff_fuse_value(&v, &w).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-12 && (out[1] + 1.0).abs() < 1e-12);

        let basis = Array2::eye(3);
        let out = cmff_fuse_value(&basis, &w).unwrap();
        assert_eq!(out.to_vec(), vec![0.4, 0.3, 0.3]);

        let top = CmffWeights::new(vec![1.0, 0.0, 0.0]).unwrap();
        let feats = array![[1.5, 2.5], [9.0, 9.0], [7.0, 7.0]];
        assert_eq!(cmff_fuse_value(&feats, &top).unwrap().to_vec(), vec![1.5, 2.5]);

        assert!(cmff_fuse_value(&array![[1.0], [2.0]], &w).is_err());
        assert!(CmffWeights::new(vec![0.5, 0.6]).is_err());
        assert!(CmffWeights::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn token_fusion_examples() {
        let mut store = ParamStore::new();
        let d = 3;
        let fusion = TokenFusion {
            linear: Linear {
                weight: store.add("w", Array2::zeros((2 * d, d))),
                bias: store.add("b", Array2::zeros((1, d))),
            },
        };
        let mut proj = Array2::zeros((2 * d, d));
        for i in 0..d {
            proj[[i, i]] = 1.0;
        }
        store.set(fusion.linear.weight, proj.clone()).unwrap();
        let mut g = Graph::new();
        let u = g.constant(array![[1.0, 2.0, 3.0]]);
        let v = g.constant(array![[-4.0, 0.5, 8.0]]);
        let out = fusion.fuse(&mut g, &store, u, v).unwrap();
        assert_eq!(g.value(out), &array![[1.0, 2.0, 3.0]]);

        for i in 0..d {
            proj[[d + i, i]] = 1.0;
        }
        store.set(fusion.linear.weight, proj).unwrap();
        let mut g = Graph::new();
        let u = g.constant(array![[1.0, 2.0, 3.0]]);
        let v = g.constant(array![[-4.0, 0.5, 8.0]]);
        let out = fusion.fuse(&mut g, &store, u, v).unwrap();
        assert_eq!(g.value(out), &array![[-3.0, 2.5, 11.0]]);

        let z = g.constant(Array2::zeros((1, d)));
        let out = fusion.fuse(&mut g, &store, z, z).unwrap();
        assert!(g.value(out).iter().all(|&x| x == 0.0));

        let wide = g.constant(Array2::zeros((1, d + 1)));
        assert!(fusion.fuse(&mut g, &store, u, wide).is_err());
    }

    #[test]
    fn grrm_examples() {
        let id = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(grrm_mse_value(&id, &id).unwrap(), 0.0);
        let sg = array![[1.0, -1.0], [-1.0, 1.0]];
        assert_eq!(grrm_mse_value(&id, &sg).unwrap(), 0.5);
        let shifted = id.mapv(|v| v + 0.3);
        assert!((grrm_mse_value(&shifted, &id).unwrap() - 0.09).abs() < 1e-12);
        assert!(grrm_mse_value(&id, &Array2::zeros((3, 3))).is_err());
    }

    #[test]
    fn grrm_gradient_stops_at_grounded_matrix() {
        let mut g = Graph::new();
        let r = g.input(array![[0.2, 0.1], [0.4, 0.9]]);
        let t = g.input(array![[0.7, -0.3], [0.0, 0.5]]);
        let loss = grrm_mse(&mut g, r, t, GrrmPairs::All, false).unwrap();
        let grads = g.backward(loss);
        assert!(grads.get_or_zeros(&g, t).iter().all(|&v| v == 0.0));
        assert!(grads.get_or_zeros(&g, r).iter().any(|&v| v != 0.0));

        let mut g = Graph::new();
        let r = g.input(array![[0.2, 0.1], [0.4, 0.9]]);
        let t = g.input(array![[0.7, -0.3], [0.0, 0.5]]);
        let loss = grrm_mse(&mut g, r, t, GrrmPairs::All, true).unwrap();
        let grads = g.backward(loss);
        assert!(grads.get_or_zeros(&g, t).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn grrm_positive_pairs_uses_diagonal() {
        let mut g = Graph::new();
        let r = g.constant(array![[1.0, 5.0], [5.0, 0.0]]);
        let t = g.constant(array![[0.0, 0.0], [0.0, 0.0]]);
        let loss = grrm_mse(&mut g, r, t, GrrmPairs::Positive, false).unwrap();
        assert_eq!(g.scalar(loss), 0.5);
    }

    #[test]
    fn global_loss_nce_weight_zero_is_triplet_only() {
        let mut g = Graph::new();
        let s = g.constant(array![[0.5, 0.6], [0.3, 0.7]]);
        let scale = g.scalar_constant(10.0);
        let parts = global_loss(&mut g, s, scale, 0.2, 0.0);
        assert_eq!(g.scalar(parts.total), g.scalar(parts.triplet));

        let single = g.constant(array![[0.4]]);
        let parts = global_loss(&mut g, single, scale, 0.2, 0.04);
        assert!(g.scalar(parts.infonce).abs() < 1e-12);
    }

    #[test]
    fn grounded_aggregator_shares_video_encoder_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let e1 = ClassTokenAggregator::new(&mut store, "e1", 8, 1, 2, true, &mut rng);
        let e2 = ClassTokenAggregator::new(&mut store, "e2", 8, 1, 2, true, &mut rng);
        let global = GroundingGlobal::new(&mut store, &e1, CmffWeights::default(), 10.0, &mut rng);
        let feats = Array2::from_shape_fn((3, 8), |(r, c)| ((r * 3 + c) % 7) as f64 * 0.2 - 0.5);
        let base = global.aggregator.aggregate_global(&store, &feats).unwrap();

        let mut tweaked = store.clone();
        let e2_weight = e2.encoder.params()[0];
        tweaked.value_mut(e2_weight).mapv_inplace(|v| v + 0.5);
        assert_eq!(global.aggregator.aggregate_global(&tweaked, &feats).unwrap(), base);

        let e1_weight = e1.encoder.params()[0];
        tweaked.value_mut(e1_weight).mapv_inplace(|v| v + 0.5);
        assert_ne!(global.aggregator.aggregate_global(&tweaked, &feats).unwrap(), base);
        assert!(!global.own_params().contains(&e1_weight));
    }
}
