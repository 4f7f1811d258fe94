//! Bidirectional temporal synchronization: forward and reverse suppression
//! recursions over a paragraph's refined maps, argmax pseudo-labels and the
//! binary cross-entropy that aligns the main score maps with them.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::grounding_local::PredictionLayer;
use crate::moment_map::{soft_label_map, valid_mask, ScoreMap};
use crate::params::{ParamId, ParamStore};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Reverse,
}

/// One synchronization direction with its own prediction layer.
#[derive(Debug, Clone)]
pub struct SyncBranch {
    pub direction: Direction,
    pub prediction: PredictionLayer,
}

impl SyncBranch {
    pub fn new(store: &mut ParamStore, direction: Direction, d: usize, rng: &mut impl Rng) -> Self {
        let name = match direction {
            Direction::Forward => "temporal.pl_forward",
            Direction::Reverse => "temporal.pl_reverse",
        };
        SyncBranch {
            direction,
            prediction: PredictionLayer::new(store, name, d, rng),
        }
    }

    /// Score maps (`(K·K) × 1` each) listed in sentence order. The forward
    /// branch suppresses each map by the clamped complement of the sum of
    /// earlier sentences' maps; the reverse branch uses later sentences.
    pub fn sync_maps(&self, g: &mut Graph, store: &ParamStore, refined: &[Var], mask: Var) -> Vec<Var> {
        let m = refined.len();
        let order: Vec<usize> = match self.direction {
            Direction::Forward => (0..m).collect(),
            Direction::Reverse => (0..m).rev().collect(),
        };
        let mut maps: Vec<Option<Var>> = vec![None; m];
        let mut running: Option<Var> = None;
        for idx in order {
            let input = match running {
                None => refined[idx],
                Some(sum) => {
                    let keep = g.rsub_scalar(1.0, sum);
                    let keep = g.clamp(keep, 0.0, 1.0);
                    g.mul_col(refined[idx], keep)
                }
            };
            let p = self.prediction.predict(g, store, input, mask);
            running = Some(match running {
                None => p,
                Some(sum) => g.add(sum, p),
            });
            maps[idx] = Some(p);
        }
        maps.into_iter().map(|p| p.expect("every sentence visited")).collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.prediction.params()
    }
}

fn plain_maps(
    branch: &SyncBranch,
    direction: Direction,
    store: &ParamStore,
    refined: &[Array2<f64>],
    k: usize,
) -> Result<Vec<ScoreMap>> {
    let branch = SyncBranch {
        direction,
        prediction: branch.prediction.clone(),
    };
    if refined.is_empty() {
        return Err(Error::invalid("a paragraph needs at least one sentence"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = refined.iter().map(|f| g.constant(f.clone())).collect();
    let mask = g.constant(valid_mask(k));
    branch
        .sync_maps(&mut g, store, &vars, mask)
        .into_iter()
        .map(|p| ScoreMap::from_column(g.value(p), k))
        .collect()
}

pub fn forward_sync_maps(branch: &SyncBranch, store: &ParamStore, refined: &[Array2<f64>], k: usize) -> Result<Vec<ScoreMap>> {
    plain_maps(branch, Direction::Forward, store, refined, k)
}

pub fn reverse_sync_maps(branch: &SyncBranch, store: &ParamStore, refined: &[Array2<f64>], k: usize) -> Result<Vec<ScoreMap>> {
    plain_maps(branch, Direction::Reverse, store, refined, k)
}

/// Soft-label map centred on the map's argmax cell.
pub fn pseudo_label_from_map(p: &ScoreMap, theta_min: f64, theta_max: f64) -> Result<ScoreMap> {
    soft_label_map(p.argmax(), p.k(), theta_min, theta_max)
}

/// `−Σ_C [t·log p + (1−t)·log(1−p)]` with `p` clipped to `[ε, 1−ε]`; `p` and
/// `target` are `(K·K) × 1`, `mask` selects the valid cells.
pub fn bce_alignment_loss(g: &mut Graph, p: Var, target: Var, mask: Var) -> Result<Var> {
    let (a, b) = (g.shape(p), g.shape(target));
    if a != b || a.1 != 1 {
        return Err(Error::invalid(format!("BCE shapes differ: {a:?} vs {b:?}")));
    }
    let clipped = g.clamp(p, BCE_EPS, 1.0 - BCE_EPS);
    let log_p = g.log(clipped);
    let one_minus = g.rsub_scalar(1.0, clipped);
    let log_q = g.log(one_minus);
    let not_target = g.rsub_scalar(1.0, target);
    let pos = g.mul(target, log_p);
    let neg = g.mul(not_target, log_q);
    let cells = g.add(pos, neg);
    let cells = g.mul_col(cells, mask);
    let total = g.sum(cells);
    Ok(g.scale(total, -1.0))
}

pub fn bce_alignment_value(p: &ScoreMap, gt: &ScoreMap) -> Result<f64> {
    if p.k() != gt.k() {
        return Err(Error::invalid(format!("map sizes differ: {} vs {}", p.k(), gt.k())));
    }
    let mut g = Graph::new();
    let pv = g.constant(p.to_column());
    let tv = g.constant(gt.to_column());
    let mask = g.constant(valid_mask(p.k()));
    let loss = bce_alignment_loss(&mut g, pv, tv, mask)?;
    Ok(g.scalar(loss))
}

/// `L_time = L^f + L^r`.
pub fn time_loss(forward: f64, reverse: f64) -> f64 {
    forward + reverse
}

/// BTSE-TD components.
#[derive(Debug, Clone)]
pub struct GroundingTemporal {
    pub forward: SyncBranch,
    pub reverse: SyncBranch,
    pub theta_min: f64,
    pub theta_max: f64,
}

impl GroundingTemporal {
    pub fn new(store: &mut ParamStore, d: usize, theta_min: f64, theta_max: f64, rng: &mut impl Rng) -> Self {
        GroundingTemporal {
            forward: SyncBranch::new(store, Direction::Forward, d, rng),
            reverse: SyncBranch::new(store, Direction::Reverse, d, rng),
            theta_min,
            theta_max,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.forward.params();
        p.extend(self.reverse.params());
        p
    }
}
