//! Dataset builds: simulate sampled parameter tuples, window the
//! resulting streams, split train/test, fit the normalizer on the
//! training split only, and persist shards plus a manifest.
//!
//! Shards are LOBS1 snapshot streams holding whole segments
//! back-to-back; the manifest records shard paths, segment counts,
//! checksums, and the normalizer. Raw integers are stored and
//! normalization is applied at load time, so one corpus serves several
//! normalization experiments.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{sample_param_tuples, segment_series, DataError, NormStats, Segment};
use crate::book::stream::{read_lobs1, write_lobs1};
use crate::sim::{simulate, PgpsParams, SimConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShardEntry {
    pub path: String,
    pub split: Split,
    pub segments: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_param_tuples: usize,
    pub steps: u32,
    pub tau: usize,
    pub segments_per_tuple: usize,
    pub split_fraction: f64,
    pub seed: u64,
    /// Snapshot padding rule the generator used for unoccupied levels.
    pub padding: String,
    pub norm: NormStats,
    pub shards: Vec<ShardEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";
const SPLIT_STREAM: u64 = 0x5_114D;
const PADDING_RULE: &str = "extend-last-price-one-tick-per-level, volume 0";

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub n_tuples: usize,
    pub steps: u32,
    pub split: f64,
    pub seed: u64,
    pub tau: usize,
    pub warmup: u32,
    /// Maximum segments per shard file.
    pub shard_segments: usize,
    /// Resampling attempts when a tuple's simulation fails.
    pub max_retries: u32,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            n_tuples: 2000,
            steps: 50_000,
            split: 0.8,
            seed: 0,
            tau: super::DEFAULT_TAU,
            warmup: 100,
            shard_segments: 100_000,
            max_retries: 3,
        }
    }
}

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        let text = toml::to_string(self).map_err(|e| DataError::Manifest(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        toml::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))
    }

    pub fn segment_count(&self, split: Split) -> usize {
        self.shards
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.segments)
            .sum()
    }

    /// Loads every segment of one split, verifying shard checksums.
    /// Segments come back in shard order tagged with their position.
    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<Segment>, DataError> {
        let mut out = Vec::with_capacity(self.segment_count(split));
        for (shard_idx, entry) in self.shards.iter().enumerate() {
            if entry.split != split {
                continue;
            }
            let path = dir.join(&entry.path);
            let bytes = std::fs::read(&path)?;
            let digest = sha256_hex(&bytes);
            if digest != entry.sha256 {
                return Err(DataError::Manifest(format!(
                    "checksum mismatch for {}: manifest {} vs file {digest}",
                    entry.path, entry.sha256
                )));
            }
            let stream = read_lobs1(&path)?;
            if stream.snapshots.len() != entry.segments * self.tau {
                return Err(DataError::Manifest(format!(
                    "{} holds {} snapshots, expected {} segments of {}",
                    entry.path,
                    stream.snapshots.len(),
                    entry.segments,
                    self.tau
                )));
            }
            for w in 0..entry.segments {
                let rows = &stream.snapshots[w * self.tau..(w + 1) * self.tau];
                let mut seg = Segment::from_snapshots(rows)?;
                seg.source = (shard_idx as u32, w as u32);
                out.push(seg);
            }
        }
        Ok(out)
    }
}

/// Builds a corpus under `out_dir`. Deterministic in the options.
pub fn build_dataset(opts: &BuildOptions, out_dir: &Path) -> Result<DatasetManifest, DataError> {
    if opts.n_tuples == 0 || opts.steps == 0 {
        return Err(DataError::Invalid("need at least one tuple and step".into()));
    }
    if !(0.0..=1.0).contains(&opts.split) {
        return Err(DataError::Invalid(format!(
            "split fraction {} outside [0, 1]",
            opts.split
        )));
    }
    if (opts.steps as usize) < opts.tau {
        return Err(DataError::Invalid(format!(
            "steps {} shorter than one window of {}",
            opts.steps, opts.tau
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let tuples = sample_param_tuples(opts.n_tuples, opts.seed);
    let per_tuple: Vec<Result<Vec<Segment>, DataError>> = tuples
        .par_iter()
        .enumerate()
        .map(|(i, params)|

 build_tuple(opts, i as u32, *params))
        .collect();

    let mut segments: Vec<Segment> = Vec::new();
    for result in per_tuple {
        segments.extend(result?);
    }
    let segments_per_tuple = segments.len() / opts.n_tuples;

    // Deterministic shuffled split at segment level.
    let mut order: Vec<usize> = (0..segments.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ SPLIT_STREAM);
    for i in (1..order.len()).rev() {
        let j = split_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let train_count = ((segments.len() as f64) * opts.split).round() as usize;
    let (train_idx, test_idx) = order.split_at(train_count);

    let train: Vec<Segment> = train_idx.iter().map(|&i| segments[i].clone()).collect();
    let test: Vec<Segment> = test_idx.iter().map(|&i| segments[i].clone()).collect();
    let norm = NormStats::fit(&train)?;

    let mut shards = Vec::new();
    write_shards(out_dir, "train", Split::Train, &train, opts, &mut shards)?;
    write_shards(out_dir, "test", Split::Test, &test, opts, &mut shards)?;

    let manifest = DatasetManifest {
        n_param_tuples: opts.n_tuples,
        steps: opts.steps,
        tau: opts.tau,
        segments_per_tuple,
        split_fraction: opts.split,
        seed: opts.seed,
        padding: PADDING_RULE.into(),
        norm,
        shards,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

fn build_tuple(
    opts: &BuildOptions,
    index: u32,
    mut params: PgpsParams,
) -> Result<Vec<Segment>, DataError> {
    let mut attempt = 0;
    loop {
        let config = SimConfig {
            horizon: opts.steps,
            warmup: opts.warmup,
            seed: tuple_seed(opts.seed, index, attempt),
            ..SimConfig::default()
        };
        match simulate(&params, &config) {
            Ok(snapshots) => {
                let mut segs = segment_series(&snapshots, opts.tau, opts.tau);
                for (w, seg) in segs.iter_mut().enumerate() {
                    seg.source = (index, (w * opts.tau) as u32);
                }
                return Ok(segs);
            }
            Err(err) => {
                attempt += 1;
                if attempt > opts.max_retries {
                    return Err(err.into());
                }
                log::warn!("tuple {index} failed ({err}); resampling (attempt {attempt})");
                let mut retry_rng =
                    ChaCha8Rng::seed_from_u64(opts.seed ^ (u64::from(index) << 20) ^ attempt as u64);
                params = sample_one(&mut retry_rng);
            }
        }
    }
}

fn sample_one(rng: &mut ChaCha8Rng) -> PgpsParams {
    let mut w = [0.0; 6];
    for (i, &(lo, hi)) in crate::sim::PARAM_BOUNDS.iter().enumerate() {
        w[i] = rng.gen_range(lo..hi);
    }
    PgpsParams::from_vector(w)
}

fn tuple_seed(base: u64, tuple: u32, attempt: u32) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(u64::from(tuple) << 8)
        .wrapping_add(u64::from(attempt))
}

fn write_shards(
    dir: &Path,
    prefix: &str,
    split: Split,
    segments: &[Segment],
    opts: &BuildOptions,
    shards: &mut Vec<ShardEntry>,
) -> Result<(), DataError> {
    for (shard_no, chunk) in segments.chunks(opts.shard_segments.max(1)).enumerate() {
        let name = format!("{prefix}_{shard_no:04}.lobs");
        let path = dir.join(&name);
        let mut rows = Vec::with_capacity(chunk.len() * opts.tau);
        for seg in chunk {
            rows.extend(seg.to_snapshots(1));
        }
        write_lobs1(&path, &rows, 1)?;
        let bytes = std::fs::read(&path)?;
        shards.push(ShardEntry {
            path: name,
            split,
            segments: chunk.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(())
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn desk_options(dir_seed: u64) -> BuildOptions {
        BuildOptions {
            n_tuples: 4,
            steps: 500,
            split: 0.8,
            seed: dir_seed,
            warmup: 20,
            ..BuildOptions::default()
        }
    }

    #[test]
    fn desk_scale_build_counts_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(&desk_options(5), dir.path()).unwrap();
        // 4 tuples x 5 windows = 20 segments, 16/4 split
        assert_eq!(manifest.segments_per_tuple, 5);
        assert_eq!(manifest.segment_count(Split::Train), 16);
        assert_eq!(manifest.segment_count(Split::Test), 4);
        let train = manifest.load_split(dir.path(), Split::Train).unwrap();
        let test = manifest.load_split(dir.path(), Split::Test).unwrap();
        assert_eq!(train.len(), 16);
        assert_eq!(test.len(), 4);
    }

    #[test]
    fn rebuild_reproduces_checksums() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = build_dataset(&desk_options(6), dir_a.path()).unwrap();
        let b = build_dataset(&desk_options(6), dir_b.path()).unwrap();
        let sums_a: Vec<&str> = a.shards.iter().map(|s| s.sha256.as_str()).collect();
        let sums_b: Vec<&str> = b.shards.iter().map(|s| s.sha256.as_str()).collect();
        assert_eq!(sums_a, sums_b);
        // manifest files byte-identical as well
        assert_eq!(
            std::fs::read(dir_a.path().join(MANIFEST_FILE)).unwrap(),
            std::fs::read(dir_b.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn splits_are_disjoint_by_content_hash() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(&desk_options(7), dir.path()).unwrap();
        let hash_set = |segs: Vec<Segment>| -> HashSet<String> {
            segs.iter()
                .map(|s| {
                    let bytes: Vec<u8> = s
                        .as_slice()
                        .iter()
                        .flat_map(|v| v.to_le_bytes())
                        .collect();
                    sha256_hex(&bytes)
                })
                .collect()
        };
        let train = hash_set(manifest.load_split(dir.path(), Split::Train).unwrap());
        let test = hash_set(manifest.load_split(dir.path(), Split::Test).unwrap());
        assert_eq!(train.len(), 16);
        assert_eq!(test.len(), 4);
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn normalizer_depends_only_on_training_split() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(&desk_options(8), dir.path()).unwrap();
        let train = manifest.load_split(dir.path(), Split::Train).unwrap();
        let refit = NormStats::fit(&train).unwrap();
        assert_eq!(manifest.norm, refit);
    }

    #[test]
    fn stored_segments_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let opts = desk_options(9);
        let manifest = build_dataset(&opts, dir.path()).unwrap();
        // Rebuild in memory with the same seeds and compare values.
        let tuples = sample_param_tuples(opts.n_tuples, opts.seed);
        let mut rebuilt = Vec::new();
        for (i, params) in tuples.iter().enumerate() {
            let config = SimConfig {
                horizon: opts.steps,
                warmup: opts.warmup,
                seed: tuple_seed(opts.seed, i as u32, 0),
                ..SimConfig::default()
            };
            rebuilt.extend(segment_series(
                &simulate(params, &config).unwrap(),
                opts.tau,
                opts.tau,
            ));
        }
        let mut loaded = manifest.load_split(dir.path(), Split::Train).unwrap();
        loaded.extend(manifest.load_split(dir.path(), Split::Test).unwrap());
        let key = |s: &Segment| -> Vec<u8> {
            s.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
        };
        let mut rebuilt_keys: Vec<Vec<u8>> = rebuilt.iter().map(key).collect();
        let mut loaded_keys: Vec<Vec<u8>> = loaded.iter().map(key).collect();
        rebuilt_keys.sort();
        loaded_keys.sort();
        assert_eq!(rebuilt_keys, loaded_keys);
    }
}
