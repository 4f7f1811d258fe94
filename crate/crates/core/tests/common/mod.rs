//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vprg_core::autograd::{Graph, Var};
use vprg_core::data::synthetic::{generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec};
use vprg_core::eval::SentenceSample;
use vprg_core::model::ModelConfig;
use vprg_core::moment_map::TimeInterval;
use vprg_core::trainer::TrainConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// IoU by case analysis on the relative position of the two intervals.
pub fn iou_oracle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (a, b) = if a.0 <= b.0 { (a, b) } else { (b, a) };
    if b.0 >= a.1 {
        return 0.0;
    }
    if b.1 <= a.1 {
        // b nested in a
        return (b.1 - b.0) / (a.1 - a.0);
    }
    (a.1 - b.0) / (b.1 - a.0)
}

/// Soft labels by enumerating every cell and intersecting integer intervals.
pub fn soft_label_oracle(target: (usize, usize), k: usize, theta_min: f64, theta_max: f64) -> Array2<f64> {
    let mut out = Array2::zeros((k, k));
    let (ts, te) = (target.0, target.1 + 1);
    for i in 0..k {
        for j in i..k {
            let (cs, ce) = (i, j + 1);
            let mut inter = 0usize;
            let mut union = 0usize;
            for t in 0..k {
                let in_c = t >= cs && t < ce;
                let in_t = t >= ts && t < te;
                inter += (in_c && in_t) as usize;
                union += (in_c || in_t) as usize;
            }
            let iou = inter as f64 / union as f64;
            out[[i, j]] = ((iou - theta_min) / (theta_max - theta_min)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Nested-loop R@K IoU>m, in percent.
pub fn recall_oracle(samples: &[SentenceSample], k: usize, m: f64) -> f64 {
    let mut hits = 0usize;
    for s in samples {
        let mut in_top = false;
        for (rank, id) in s.ranking.iter().enumerate() {
            if rank < k && *id == s.gt_video {
                in_top = true;
            }
        }
        if !in_top {
            continue;
        }
        let p = s.predicted.expect("prediction");
        let g = s.gt.expect("ground truth");
        if iou_oracle((p.start, p.end), (g.start, g.end)) > m {
            hits += 1;
        }
    }
    100.0 * hits as f64 / samples.len() as f64
}

/// A random evaluation corpus: `videos` ids, one paragraph per video with up
/// to `max_sentences` sentences, random rankings, and intervals on an
/// integer grid so IoU often lands exactly on a threshold.
pub fn random_samples(rng: &mut impl Rng, videos: usize, max_sentences: usize) -> Vec<SentenceSample> {
    let ids: Vec<String> = (0..videos).map(|v| format!("v{v}")).collect();
    let mut out = Vec::new();
    let interval = |rng: &mut dyn rand::RngCore| {
        let s = rng.random_range(0..10) as f64;
        let e = s + rng.random_range(1..6) as f64;
        TimeInterval::new(s, e).unwrap()
    };
    for v in 0..videos {
        let mut ranking = ids.clone();
        use rand::seq::SliceRandom;
        ranking.shuffle(rng);
        for _ in 0..rng.random_range(1..=max_sentences) {
            out.push(SentenceSample {
                ranking: ranking.clone(),
                gt_video: ids[v].clone(),
                predicted: Some(interval(rng)),
                gt: Some(interval(rng)),
            });
        }
    }
    out
}

/// Max relative error between reverse-mode and central finite-difference
/// gradients of `f` at `x`. Entries where both are below `floor` are skipped.
pub fn grad_check(x: &Array2<f64>, f: &dyn Fn(&mut Graph, Var) -> Var) -> f64 {
    let eval = |x: &Array2<f64>| {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = f(&mut g, v);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v);
    let analytic = g.backward(out).get_or_zeros(&g, v);
    let eps = 1e-6;
    let floor = 1e-7;
    let mut worst: f64 = 0.0;
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let mut plus = x.clone();
        plus[[r, c]] += eps;
        let mut minus = x.clone();
        minus[[r, c]] -= eps;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let a = analytic[[r, c]];
        if a.abs() < floor && numeric.abs() < floor {
            continue;
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()));
    }
    worst
}

pub fn uniform_weights(q: usize) -> Vec<f64> {
    vec![1.0 / q as f64; q]
}

/// The planted corpus used for the end-to-end overfit check.
pub fn planted_corpus() -> SyntheticCorpus {
    generate_synthetic_corpus(&SyntheticSpec::default()).expect("default spec is valid")
}

/// Training setup for the overfit check.
pub fn overfit_config(time_loss: bool) -> TrainConfig {
    let q = 16;
    TrainConfig {
        epochs: 200,
        base_lr: 3e-3,
        decay_every: 20,
        batch_size: 4,
        seed: 0,
        model: ModelConfig {
            q,
            cmff_weights: uniform_weights(q),
            unmasked_weight: 1.0,
            time_loss,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Toy dimensions for gradient checks.
pub fn toy_spec() -> SyntheticSpec {
    SyntheticSpec {
        videos: 4,
        segments: 8,
        sentences: 2,
        dim: 8,
        slots: 3,
        seed: 3,
        ..SyntheticSpec::default()
    }
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        k: 8,
        d: 8,
        heads: 2,
        depth: 1,
        q: 3,
        ..ModelConfig::default()
    }
}
