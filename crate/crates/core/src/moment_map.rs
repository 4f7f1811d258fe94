//! Geometry of 2-D candidate-moment maps.
//!
//! A video is cut into `K` uniform segments; a candidate moment is any span
//! `(start, end)` with `start ≤ end`. Maps over all spans are stored densely
//! as `K × K` (scores) or `(K·K) × d` (features, row `start·K + end`), with
//! the lower triangle held at zero.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Candidate span over segment indices, both inclusive and 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MomentIndex {
    pub start: usize,
    pub end: usize,
}

impl MomentIndex {
    pub fn new(start: usize, end: usize, k: usize) -> Result<Self> {
        let m = MomentIndex { start, end };
        m.validate(k)?;
        Ok(m)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.start > self.end || self.end >= k {
            return Err(Error::invalid(format!(
                "moment ({}, {}) is not valid for K = {k}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row of this moment in a flattened `(K·K) × d` map.
    pub fn cell(&self, k: usize) -> usize {
        self.start * k + self.end
    }

    pub fn from_cell(cell: usize, k: usize) -> Self {
        MomentIndex {
            start: cell / k,
            end: cell % k,
        }
    }

    /// IoU of the segment-unit intervals `[start, end + 1)`.
    pub fn iou(&self, other: &MomentIndex) -> f64 {
        let inter_lo = self.start.max(other.start);
        let inter_hi = (self.end + 1).min(other.end + 1);
        let inter = inter_hi.saturating_sub(inter_lo) as f64;
        let union = (self.len() + other.len()) as f64 - inter;
        inter / union
    }
}

/// Real-time interval in seconds, closed-open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeInterval {
    pub start: f64,
    pub end: f64,
}

impl TimeInterval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        let t = TimeInterval { start, end };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start.is_finite() && self.end.is_finite()) || self.start < 0.0 || self.start >= self.end {
            return Err(Error::invalid(format!(
                "degenerate interval [{}, {}]",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// All `K(K+1)/2` spans in lexicographic `(start, end)` order.
pub fn enumerate_moments(k: usize) -> Result<Vec<MomentIndex>> {
    if k == 0 {
        return Err(Error::invalid("segment count must be at least 1"));
    }
    Ok((0..k)
        .flat_map(|start| (start..k).map(move |end| MomentIndex { start, end }))
        .collect())
}

/// Maps a span to `[start·L, (end + 1)·L)` with `L = duration / K`.
pub fn moment_to_interval(m: MomentIndex, k: usize, duration: f64) -> Result<TimeInterval> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::invalid(format!("duration must be positive, got {duration}")));
    }
    m.validate(k)?;
    let seg = duration / k as f64;
    Ok(TimeInterval {
        start: m.start as f64 * seg,
        end: (m.end + 1) as f64 * seg,
    })
}

/// Intersection over union of two intervals; touching intervals score 0.
pub fn temporal_iou(a: &TimeInterval, b: &TimeInterval) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Elementwise maximum over segment rows `start..=end`.
pub fn aggregate_moment_features(segments: ArrayView2<'_, f64>, m: MomentIndex) -> Result<Array1<f64>> {
    if segments.nrows() == 0 || segments.ncols() == 0 {
        return Err(Error::invalid("segment matrix is empty"));
    }
    m.validate(segments.nrows())?;
    let span = segments.slice(ndarray::s![m.start..=m.end, ..]);
    Ok(span.fold_axis(Axis(0), f64::NEG_INFINITY, |&acc, &v| acc.max(v)))
}

/// Dense `K × K` score map; the lower triangle is held at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    k: usize,
    values: Array2<f64>,
}

impl ScoreMap {
    pub fn zeros(k: usize) -> Self {
        ScoreMap {
            k,
            values: Array2::zeros((k, k)),
        }
    }

    /// Builds a map from a `K × K` matrix, zeroing the invalid region and
    /// rejecting valid entries outside `[0, 1]`.
    pub fn from_matrix(values: Array2<f64>) -> Result<Self> {
        let (rows, cols) = values.dim();
        if rows != cols || rows == 0 {
            return Err(Error::invalid(format!("score map must be square and non-empty, got {rows}×{cols}")));
        }
        let mut map = ScoreMap { k: rows, values };
        for i in 0..rows {
            for j in 0..cols {
                if i > j {
                    map.values[[i, j]] = 0.0;
                } else {
                    let v = map.values[[i, j]];
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::invalid(format!("score {v} at ({i}, {j}) outside [0, 1]")));
                    }
                }
            }
        }
        Ok(map)
    }

    /// Builds a map from the flattened `(K·K) × 1` column produced by the
    /// prediction layers.
    pub fn from_column(column: &Array2<f64>, k: usize) -> Result<Self> {
        if column.dim() != (k * k, 1) {
            return Err(Error::invalid(format!(
                "expected a {}×1 column, got {:?}",
                k * k,
                column.dim()
            )));
        }
        let matrix = column.clone().into_shape_with_order((k, k)).expect("row-major reshape");
        Self::from_matrix(matrix)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, m: MomentIndex) -> f64 {
        self.values[[m.start, m.end]]
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.values
    }

    /// `(K·K) × 1` column in cell order.
    pub fn to_column(&self) -> Array2<f64> {
        self.values.clone().into_shape_with_order((self.k * self.k, 1)).expect("row-major reshape")
    }

    pub fn valid_cells(&self) -> impl Iterator<Item = (MomentIndex, f64)> + '_ {
        let k = self.k;
        (0..k).flat_map(move |i| (i..k).map(move |j| (MomentIndex { start: i, end: j }, self.values[[i, j]])))
    }

    /// Highest-scoring valid cell; ties go to the lexicographically first.
    pub fn argmax(&self) -> MomentIndex {
        let mut best = (MomentIndex { start: 0, end: 0 }, f64::NEG_INFINITY);
        for (m, v) in self.valid_cells() {
            if v > best.1 {
                best = (m, v);
            }
        }
        best.0
    }

    pub fn sum(&self) -> f64 {
        self.valid_cells().map(|(_, v)| v).sum()
    }
}

/// `1` on valid cells, `0` elsewhere, as a `(K·K) × 1` column.
pub fn valid_mask(k: usize) -> Array2<f64> {
    Array2::from_shape_fn((k * k, 1), |(cell, _)| if cell / k <= cell % k { 1.0 } else { 0.0 })
}

/// Max-pooled feature for every span, `(K·K) × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentFeatureMap {
    k: usize,
    values: Array2<f64>,
}

impl MomentFeatureMap {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn slot(&self, i: usize, j: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(i * self.k + j)
    }
}

pub fn build_feature_map(segments: ArrayView2<'_, f64>) -> Result<MomentFeatureMap> {
    let k = segments.nrows();
    if k == 0 || segments.ncols() == 0 {
        return Err(Error::invalid("segment matrix is empty"));
    }
    let d = segments.ncols();
    let mut values = Array2::zeros((k * k, d));
    for i in 0..k {
        // running max extends the span one segment at a time
        let mut acc = segments.row(i).to_owned();
        for j in i..k {
            if j > i {
                acc.zip_mut_with(&segments.row(j), |a, &b| *a = a.max(b));
            }
            values.row_mut(i * k + j).assign(&acc);
        }
    }
    Ok(MomentFeatureMap { k, values })
}

/// IoU with `target` rescaled linearly from `[θ_min, θ_max]` to `[0, 1]`.
pub fn soft_label_map(target: MomentIndex, k: usize, theta_min: f64, theta_max: f64) -> Result<ScoreMap> {
    if !(0.0..=1.0).contains(&theta_min) || !(0.0..=1.0).contains(&theta_max) || theta_min >= theta_max {
        return Err(Error::invalid(format!(
            "soft-label thresholds must satisfy 0 ≤ θ_min < θ_max ≤ 1, got ({theta_min}, {theta_max})"
        )));
    }
    target.validate(k)?;
    let mut values = Array2::zeros((k, k));
    for i in 0..k {
        for j in i..k {
            let iou = MomentIndex { start: i, end: j }.iou(&target);
            values[[i, j]] = ((iou - theta_min) / (theta_max - theta_min)).clamp(0.0, 1.0);
        }
    }
    Ok(ScoreMap { k, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn m(start: usize, end: usize) -> MomentIndex {
        MomentIndex { start, end }
    }

    fn iv(a: f64, b: f64) -> TimeInterval {
        TimeInterval::new(a, b).unwrap()
    }

    #[test]
    fn enumerate_small_cases() {
        assert_eq!(enumerate_moments(1).unwrap(), vec![m(0, 0)]);
        assert_eq!(
            enumerate_moments(3).unwrap(),
            vec![m(0, 0), m(0, 1), m(0, 2), m(1, 1), m(1, 2), m(2, 2)]
        );
        assert!(enumerate_moments(0).is_err());
    }

    #[test]
    fn enumerate_count_matches_double_loop() {
        for k in 1..=64 {
            let mut count = 0;
            for i in 0..k {
                for j in 0..k {
                    if i <= j {
                        count += 1;
                    }
                }
            }
            assert_eq!(enumerate_moments(k).unwrap().len(), count);
        }
        assert_eq!(enumerate_moments(32).unwrap().len(), 528);
    }

    #[test]
    fn interval_conversion() {
        assert_eq!(moment_to_interval(m(0, 15), 16, 32.0).unwrap(), iv(0.0, 32.0));
        assert_eq!(moment_to_interval(m(0, 0), 16, 32.0).unwrap(), iv(0.0, 2.0));
        assert_eq!(moment_to_interval(m(4, 7), 16, 32.0).unwrap(), iv(8.0, 16.0));
        assert!(moment_to_interval(m(4, 16), 16, 32.0).is_err());
        assert!(moment_to_interval(m(5, 4), 16, 32.0).is_err());
        assert!(moment_to_interval(m(0, 1), 16, 0.0).is_err());
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou(&iv(0.0, 10.0), &iv(0.0, 10.0)).unwrap(), 1.0);
        assert_eq!(temporal_iou(&iv(0.0, 5.0), &iv(5.0, 10.0)).unwrap(), 0.0);
        assert!((temporal_iou(&iv(0.0, 4.0), &iv(2.0, 6.0)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let bad = TimeInterval { start: 3.0, end: 3.0 };
        assert!(temporal_iou(&bad, &iv(0.0, 1.0)).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let seg = array![[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]];
        assert_eq!(aggregate_moment_features(seg.view(), m(0, 2)).unwrap(), array![3.0, 2.0]);
        assert_eq!(aggregate_moment_features(seg.view(), m(1, 1)).unwrap(), array![0.0, 2.0]);
        assert!(aggregate_moment_features(Array2::<f64>::zeros((0, 2)).view(), m(0, 0)).is_err());
    }

    #[test]
    fn feature_map_examples() {
        let single = array![[0.5, -1.0, 2.0]];
        let fm = build_feature_map(single.view()).unwrap();
        assert_eq!(fm.values(), &single);

        let seg = array![[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]];
        let fm = build_feature_map(seg.view()).unwrap();
        let populated = fm.values().rows().into_iter().filter(|r| r.iter().any(|&v| v != 0.0)).count();
        assert_eq!(populated, 6);
        for i in 0..3 {
            for j in 0..i {
                assert!(fm.slot(i, j).iter().all(|&v| v == 0.0));
            }
        }

        let mono = Array2::from_shape_fn((5, 3), |(r, _)| r as f64);
        let fm = build_feature_map(mono.view()).unwrap();
        for i in 0..5 {
            for j in i..5 {
                assert!(fm.slot(i, j).iter().all(|&v| v == j as f64));
            }
        }
    }

    #[test]
    fn soft_label_examples() {
        let map = soft_label_map(m(1, 2), 4, 0.5, 1.0).unwrap();
        assert_eq!(map.get(m(1, 2)), 1.0);
        assert_eq!(map.get(m(0, 3)), 0.0);
        assert!((map.get(m(1, 3)) - 1.0 / 3.0).abs() < 1e-12);
        assert!(soft_label_map(m(1, 2), 4, 0.7, 0.7).is_err());
        assert!(soft_label_map(m(1, 4), 4, 0.5, 1.0).is_err());
    }

    #[test]
    fn score_map_argmax_breaks_ties_lexicographically() {
        let map = ScoreMap::from_matrix(Array2::from_elem((3, 3), 0.5)).unwrap();
        assert_eq!(map.argmax(), m(0, 0));
        // invalid cells were zeroed on construction
        assert_eq!(map.matrix()[[2, 0]], 0.0);
        assert!(ScoreMap::from_matrix(array![[1.5]]).is_err());
    }

    #[test]
    fn invalid_region_contributes_nothing() {
        let mut raw = Array2::from_elem((4, 4), 0.25);
        raw[[3, 0]] = 0.9;
        let map = ScoreMap::from_matrix(raw).unwrap();
        assert_eq!(map.sum(), 0.25 * 10.0);
        assert_ne!(map.argmax(), m(3, 0));
    }

    /// Overlap measured on a fine grid, independent of interval arithmetic.
    fn discretized_iou(a: &TimeInterval, b: &TimeInterval) -> f64 {
        let steps = 200_000;
        let lo = a.start.min(b.start);
        let hi = a.end.max(b.end);
        let dt = (hi - lo) / steps as f64;
        let (mut inter, mut union) = (0usize, 0usize);
        for s in 0..steps {
            let t = lo + (s as f64 + 0.5) * dt;
            let ina = t >= a.start && t < a.end;
            let inb = t >= b.start && t < b.end;
            inter += (ina && inb) as usize;
            union += (ina || inb) as usize;
        }
        inter as f64 / union as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn iou_symmetric_bounded(a0 in 0.0f64..50.0, la in 0.1f64..20.0, b0 in 0.0f64..50.0, lb in 0.1f64..20.0) {
            let a = iv(a0, a0 + la);
            let b = iv(b0, b0 + lb);
            let ab = temporal_iou(&a, &b).unwrap();
            let ba = temporal_iou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - discretized_iou(&a, &b)).abs() < 1e-3);
            prop_assert_eq!(ab == 1.0, a == b);
        }

        #[test]
        fn aggregation_is_monotone_in_span(
            rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 2..8),
            a in 0usize..8, b in 0usize..8, grow_lo in 0usize..3, grow_hi in 0usize..3,
        ) {
            let k = rows.len();
            let seg = Array2::from_shape_fn((k, 3), |(r, c)| rows[r][c]);
            let (a, b) = (a % k, b % k);
            let inner = m(a.min(b), a.max(b));
            let outer = m(inner.start.saturating_sub(grow_lo), (inner.end + grow_hi).min(k - 1));
            let small = aggregate_moment_features(seg.view(), inner).unwrap();
            let big = aggregate_moment_features(seg.view(), outer).unwrap();
            prop_assert!(small.iter().zip(big.iter()).all(|(s, b)| s <= b));
        }

        #[test]
        fn soft_label_peaks_only_at_target(k in 1usize..12, a in 0usize..12, b in 0usize..12, lo in 0.0f64..0.9) {
            let (a, b) = (a % k, b % k);
            let target = m(a.min(b), a.max(b));
            let map = soft_label_map(target, k, lo, 1.0).unwrap();
            for (cell, v) in map.valid_cells() {
                prop_assert_eq!(v == 1.0, cell == target);
            }
        }
    }
}
