//! Training-corpus tooling: windowing snapshot streams into fixed-length
//! segments, normalization, parameter sampling, and dataset builds.

pub mod manifest;

pub use manifest::{build_dataset, BuildOptions, DatasetManifest, ShardEntry, Split};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::book::{LobLevel, LobSnapshot, SNAPSHOT_DEPTH};
use crate::sim::{PgpsParams, PARAM_BOUNDS};

/// Features per time step: 10 levels x (bid price, bid volume, ask
/// price, ask volume).
pub const SEGMENT_FEATURES: usize = 4 * SNAPSHOT_DEPTH;

/// Default window length in steps.
pub const DEFAULT_TAU: usize = 100;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("segment expects {expected} values, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("cannot fit a normalizer on an empty training set")]
    EmptyTrainingSet,
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot stream error: {0}")]
    Stream(#[from] crate::book::stream::StreamError),
    #[error("simulation error: {0}")]
    Sim(#[from] crate::sim::SimError),
    #[error("bad manifest: {0}")]
    Manifest(String),
}

/// A `tau x 40` window of flattened snapshots, row-major with column
/// order `pb1, vb1, pa1, va1, ..., pb10, vb10, pa10, va10` per row.
///
/// `source` is build bookkeeping (parameter-tuple or shard index, window
/// offset) and does not participate in equality.
#[derive(Clone, Debug)]
pub struct Segment {
    tau: usize,
    values: Vec<f64>,
    pub source: (u32, u32),
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.tau == other.tau && self.values == other.values
    }
}

impl Segment {
    pub fn from_values(tau: usize, values: Vec<f64>) -> Result<Self, DataError> {
        if values.len() != tau * SEGMENT_FEATURES {
            return Err(DataError::BadLength {
                expected: tau * SEGMENT_FEATURES,
                got: values.len(),
            });
        }
        Ok(Segment {
            tau,
            values,
            source: (0, 0),
        })
    }

    pub fn from_snapshots(snapshots: &[LobSnapshot]) -> Result<Self, DataError> {
        let tau = snapshots.len();
        let mut values = Vec::with_capacity(tau * SEGMENT_FEATURES);
        for s in snapshots {
            if s.depth() != SNAPSHOT_DEPTH {
                return Err(DataError::Invalid(format!(
                    "snapshot depth {} != {SNAPSHOT_DEPTH}",
                    s.depth()
                )));
            }
            values.extend(s.features().iter().map(|&v| v as f64));
        }
        Segment::from_values(tau, values)
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn get(&self, step: usize, feature: usize) -> f64 {
        self.values[step * SEGMENT_FEATURES + feature]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Reassembles snapshots (values rounded to integers) for stream
    /// persistence; `time0` numbers the rows consecutively.
    pub fn to_snapshots(&self, time0: u32) -> Vec<LobSnapshot> {
        (0..self.tau)
            .map(|t| {
                let levels = (0..SNAPSHOT_DEPTH)
                    .map(|l| LobLevel {
                        bid_price: self.get(t, 4 * l).round() as i64,
                        bid_volume: self.get(t, 4 * l + 1).round() as i64,
                        ask_price: self.get(t, 4 * l + 2).round() as i64,
                        ask_volume: self.get(t, 4 * l + 3).round() as i64,
                    })
                    .collect();
                LobSnapshot {
                    time: time0 + t as u32,
                    levels,
                }
            })
            .collect()
    }

    /// Mid-price series `(pa1 + pb1) / 2` of this window, in the
    /// segment's current units.
    pub fn mid_prices(&self) -> Vec<f64> {
        (0..self.tau)
            .map(|t| (self.get(t, 0) + self.get(t, 2)) / 2.0)
            .collect()
    }
}

/// True for the 20 price columns of the 40-feature layout.
pub fn is_price_feature(feature: usize) -> bool {
    feature % 2 == 0
}

/// Two global affine maps, one shared by all price columns and one by
/// all volume columns. A shared monotone map cannot reorder price
/// levels, so normalized segments keep their precedence structure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub price_center: f64,
    pub price_scale: f64,
    pub volume_center: f64,
    pub volume_scale: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            price_center: 0.0,
            price_scale: 1.0,
            volume_center: 0.0,
            volume_scale: 1.0,
        }
    }
}

impl NormStats {
    /// Global mean/std per feature class over a training set. A
    /// zero-variance class gets scale 1 with a warning instead of
    /// dividing by zero.
    pub fn fit(training: &[Segment]) -> Result<Self, DataError> {
        if training.is_empty() {
            return Err(DataError::EmptyTrainingSet);
        }
        let mut sums = [0.0f64; 2];
        let mut sq_sums = [0.0f64; 2];
        let mut counts = [0u64; 2];
        for seg in training {
            for (i, &v) in seg.as_slice().iter().enumerate() {
                let class = usize::from(!is_price_feature(i % SEGMENT_FEATURES));
                sums[class] += v;
                sq_sums[class] += v * v;
                counts[class] += 1;
            }
        }
        let mut center = [0.0f64; 2];
        let mut scale = [1.0f64; 2];
        for class in 0..2 {
            let n = counts[class] as f64;
            center[class] = sums[class] / n;
            let var = (sq_sums[class] / n - center[class] * center[class]).max(0.0);
            let std = var.sqrt();
            if std > 0.0 {
                scale[class] = std;
            } else {
                log::warn!(
                    "{} features have zero variance; scale forced to 1",
                    if class == 0 { "price" } else { "volume" }
                );
            }
        }
        Ok(NormStats {
            price_center: center[0],
            price_scale: scale[0],
            volume_center: center[1],
            volume_scale: scale[1],
        })
    }

    pub fn normalize_price(&self, p: f64) -> f64 {
        (p - self.price_center) / self.price_scale
    }

    pub fn apply(&self, segment: &Segment) -> Segment {
        let values = segment
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if is_price_feature(i % SEGMENT_FEATURES) {
                    (v - self.price_center) / self.price_scale
                } else {
                    (v - self.volume_center) / self.volume_scale
                }
            })
            .collect();
        Segment {
            tau: segment.tau,
            values,
            source: segment.source,
        }
    }

    pub fn invert(&self, segment: &Segment) -> Segment {
        let values = segment
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if is_price_feature(i % SEGMENT_FEATURES) {
                    v * self.price_scale + self.price_center
                } else {
                    v * self.volume_scale + self.volume_center
                }
            })
            .collect();
        Segment {
            tau: segment.tau,
            values,
            source: segment.source,
        }
    }
}

/// Cuts a series into consecutive windows of `tau` steps advanced by
/// `stride`; a trailing remainder shorter than `tau` is dropped.
pub fn segment_series(snapshots: &[LobSnapshot], tau: usize, stride: usize) -> Vec<Segment> {
    assert!(tau > 0 && stride > 0, "tau and stride must be positive");
    let mut out = Vec::new();
    let mut start = 0;
    while start + tau <= snapshots.len() {
        out.push(
            Segment::from_snapshots(&snapshots[start..start + tau])
                .expect("window has uniform depth"),
        );
        start += stride;
    }
    out
}

/// Samples parameter tuples independently, uniform per coordinate within
/// the sampling box.
pub fn sample_param_tuples(n: usize, seed: u64) -> Vec<PgpsParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut w = [0.0; 6];
            for (i, &(lo, hi)) in PARAM_BOUNDS.iter().enumerate() {
                w[i] = rng.gen_range(lo..hi);
            }
            PgpsParams::from_vector(w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, SimConfig};

    fn toy_series(len: usize) -> Vec<LobSnapshot> {
        let params = PgpsParams {
            lambda0: 80.0,
            c_lambda: 8.0,
            delta_s: 0.002,
            alpha: 0.1,
            mu: 0.02,
            delta: 0.02,
        };
        let config = SimConfig {
            horizon: len as u32,
            warmup: 10,
            seed: 21,
            ..SimConfig::default()
        };
        simulate(&params, &config).unwrap()
    }

    #[test]
    fn segmentation_counts() {
        let series = toy_series(250);
        assert_eq!(segment_series(&series, 100, 100).len(), 2);
        assert_eq!(segment_series(&series[..99], 100, 100).len(), 0);
        assert_eq!(segment_series(&series[..200], 100, 100).len(), 2);
    }

    #[test]
    fn normalizer_round_trips() {
        let series = toy_series(200);
        let segs = segment_series(&series, 100, 100);
        let stats = NormStats::fit(&segs).unwrap();
        for seg in &segs {
            let back = stats.invert(&stats.apply(seg));
            for (a, b) in seg.as_slice().iter().zip(back.as_slice()) {
                let rel = (a - b).abs() / a.abs().max(1.0);
                assert!(rel < 1e-9, "round trip {a} -> {b}");
            }
        }
    }

    #[test]
    fn normalized_moments_are_standardized() {
        let series = toy_series(600);
        let segs = segment_series(&series, 100, 100);
        let stats = NormStats::fit(&segs).unwrap();
        // recompute moments after the transform, per feature class
        let mut sums = [0.0f64; 2];
        let mut sqs = [0.0f64; 2];
        let mut n = [0u64; 2];
        for seg in &segs {
            let normed = stats.apply(seg);
            for (i, &v) in normed.as_slice().iter().enumerate() {
                let class = usize::from(!is_price_feature(i % SEGMENT_FEATURES));
                sums[class] += v;
                sqs[class] += v * v;
                n[class] += 1;
            }
        }
        for class in 0..2 {
            let mean = sums[class] / n[class] as f64;
            let var = sqs[class] / n[class] as f64 - mean * mean;
            assert!(mean.abs() < 1e-9, "class {class} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "class {class} var {var}");
        }
    }

    #[test]
    fn constant_volume_corpus_gets_unit_scale() {
        // constant volumes: zero variance must not blow up
        let levels: Vec<LobLevel> = (0..10)
            .map(|i| LobLevel {
                bid_price: 9_999 - i,
                bid_volume: 100,
                ask_price: 10_001 + i,
                ask_volume: 100,
            })
            .collect();
        let snaps: Vec<LobSnapshot> = (0..100)
            .map(|t| LobSnapshot {
                time: t,
                levels: levels.clone(),
            })
            .collect();
        let segs = segment_series(&snaps, 100, 100);
        let stats = NormStats::fit(&segs).unwrap();
        assert_eq!(stats.volume_scale, 1.0);
        let normed = stats.apply(&segs[0]);
        assert!(normed.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sampling_respects_bounds_and_seed() {
        let a = sample_param_tuples(500, 3);
        let b = sample_param_tuples(500, 3);
        assert_eq!(a.len(), 500);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_vector(), y.to_vector());
        }
        for p in &a {
            p.validate().unwrap();
        }
    }

    #[test]
    fn sampled_coordinate_means_match_uniform_moments() {
        // mean of U(lo, hi) is the midpoint, sd is (hi-lo)/sqrt(12)
        let n = 10_000;
        let tuples = sample_param_tuples(n, 4);
        for (i, &(lo, hi)) in PARAM_BOUNDS.iter().enumerate() {
            let mean: f64 = tuples.iter().map(|p| p.to_vector()[i]).sum::<f64>() / n as f64;
            let mid = 0.5 * (lo + hi);
            let se = (hi - lo) / (12.0f64).sqrt() / (n as f64).sqrt();
            assert!(
                (mean - mid).abs() < 3.0 * se,
                "coordinate {i}: mean {mean} vs midpoint {mid} (3se = {})",
                3.0 * se
            );
        }
    }

    #[test]
    fn segment_snapshot_round_trip() {
        let series = toy_series(100);
        let seg = &segment_series(&series, 100, 100)[0];
        let back = seg.to_snapshots(1);
        let again = Segment::from_snapshots(&back).unwrap();
        assert_eq!(seg.as_slice(), again.as_slice());
    }
}
