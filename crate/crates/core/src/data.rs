//! Datasets, file sharding and batch order.
//!
//! The synthetic generator produces `n_classes` families of sequences.
//! Class `k` has a mean trajectory `δ·d_{k,t}` where each `d_{k,t}` is a
//! seeded random unit vector; samples add unit-variance Gaussian noise.
//! With `δ = 0` the classes are indistinguishable.
//!
//! Files use the wire tensor layout behind a small header; see
//! `docs/data-format.md`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::nn::{Batch, Tensor};
use crate::proto::{self, WirePrecision};
use crate::Rank;

pub const FILE_MAGIC: [u8; 4] = *b"GHDS";
pub const FILE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("{workers} workers but only {files} files; reduce the worker count to at most {files}")]
    TooManyWorkers { workers: usize, files: usize },
    #[error("empty shard")]
    EmptyShard,
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("bad data file {path}: {reason}")]
    BadFile { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_files: usize,
    pub samples_per_file: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub delta: f64,
}

impl DatasetSpec {
    /// Desk-scale stand-in for the benchmark: 10 files × 500 samples of
    /// 10-step, 5-feature sequences in 3 classes.
    pub fn desk_scale(delta: f64, seed: u64) -> Self {
        Self {
            n_files: 10,
            samples_per_file: 500,
            seq_len: 10,
            input_dim: 5,
            n_classes: 3,
            seed,
            delta,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_files == 0 || self.samples_per_file == 0 || self.seq_len == 0 || self.input_dim == 0 {
            return Err(DataError::Spec("all counts must be at least 1".into()));
        }
        if self.n_classes < 2 {
            return Err(DataError::Spec("at least two classes are required".into()));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(DataError::Spec(format!("delta must be finite and non-negative, got {}", self.delta)));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.seq_len * self.input_dim
    }

    pub fn total_samples(&self) -> usize {
        self.n_files * self.samples_per_file
    }

    /// Index of the held-out file, generated the same way as training files.
    pub fn heldout_index(&self) -> usize {
        self.n_files
    }
}

/// Flattened samples with labels, held in memory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Samples {
    pub width: usize,
    pub n_classes: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn extend(&mut self, other: &Samples) {
        if self.is_empty() {
            self.width = other.width;
            self.n_classes = other.n_classes;
        }
        self.inputs.extend_from_slice(&other.inputs);
        self.labels.extend_from_slice(&other.labels);
    }

    /// Gathers the given sample indices into a [`Batch`].
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(&self.inputs[i * self.width..(i + 1) * self.width]);
            labels.push(self.labels[i]);
        }
        Batch::new(self.width, inputs, labels, self.n_classes).expect("samples are well formed")
    }

    pub fn all(&self) -> Batch {
        Batch::new(self.width, self.inputs.clone(), self.labels.clone(), self.n_classes)
            .expect("samples are well formed")
    }
}

/// Worker rank → ordered file indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardAssignment {
    pub files: BTreeMap<Rank, Vec<usize>>,
}

impl ShardAssignment {
    pub fn files_for(&self, rank: Rank) -> &[usize] {
        self.files.get(&rank).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Splits `0..n_files` into contiguous blocks in rank order; the first
/// `n_files mod W` workers get one extra file.
pub fn shard_files(n_files: usize, worker_ranks: &[Rank]) -> Result<ShardAssignment, DataError> {
    let w = worker_ranks.len();
    if w == 0 {
        return Err(DataError::Spec("no workers to shard across".into()));
    }
    if n_files < w {
        return Err(DataError::TooManyWorkers {
            workers: w,
            files: n_files,
        });
    }
    let mut ranks = worker_ranks.to_vec();
    ranks.sort_unstable();
    ranks.dedup();
    if ranks.len() != w {
        return Err(DataError::Spec("duplicate worker rank".into()));
    }
    let (base, extra) = (n_files / w, n_files % w);
    let mut files = BTreeMap::new();
    let mut next = 0;
    for (i, &r) in ranks.iter().enumerate() {
        let n = base + usize::from(i < extra);
        files.insert(r, (next..next + n).collect());
        next += n;
    }
    Ok(ShardAssignment { files })
}

/// Batches of sample indices for one epoch over a shard of `n_samples`.
/// The permutation depends only on `(epoch_seed, epoch)`; the last batch
/// may be short.
pub fn epoch_batches(
    n_samples: usize,
    batch_size: usize,
    epoch_seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::BatchSize);
    }
    if n_samples == 0 {
        return Err(DataError::EmptyShard);
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Shuffle seed used by a given worker.
pub fn worker_epoch_seed(shuffle_seed: u64, rank: Rank) -> u64 {
    shuffle_seed ^ (u64::from(rank)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn class_means(spec: &DatasetSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.input_dim;
    let mut means = Vec::with_capacity(spec.n_classes * spec.seq_len * d);
    for _ in 0..spec.n_classes * spec.seq_len {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        means.extend(v.iter().map(|x| spec.delta * x / norm));
    }
    means
}

/// Generates file `index` of the dataset. Values are rounded to `f32` so
/// the in-memory copy equals what the file stores.
pub fn generate_file(spec: &DatasetSpec, index: usize) -> Samples {
    let means = class_means(spec);
    let width = spec.width();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let mut labels: Vec<usize> = (0..spec.samples_per_file).map(|i| i % spec.n_classes).collect();
    labels.shuffle(&mut rng);
    let mut inputs = Vec::with_capacity(labels.len() * width);
    for &k in &labels {
        let mean = &means[k * width..(k + 1) * width];
        for m in mean {
            let noise: f64 = StandardNormal.sample(&mut rng);
            inputs.push(WirePrecision::F32.quantize(m + noise));
        }
    }
    Samples {
        width,
        n_classes: spec.n_classes,
        inputs,
        labels,
    }
}

pub fn generate_synthetic(spec: &DatasetSpec) -> Result<Vec<Samples>, DataError> {
    spec.validate()?;
    Ok((0..spec.n_files).map(|i| generate_file(spec, i)).collect())
}

pub fn generate_heldout(spec: &DatasetSpec) -> Samples {
    generate_file(spec, spec.heldout_index())
}

pub fn file_name(index: usize) -> String {
    format!("part-{index:05}.ghd")
}

pub const HELDOUT_FILE: &str = "heldout.ghd";

/// Serialises one file: header, spec echo, file index, then a tensor block
/// holding inputs `[n, seq_len, dim]` and labels `[n]` (as f32).
pub fn encode_file(spec: &DatasetSpec, index: usize, samples: &Samples) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&FILE_MAGIC);
    out.extend_from_slice(&FILE_VERSION.to_le_bytes());
    for v in [spec.n_files, spec.samples_per_file, spec.seq_len, spec.input_dim, spec.n_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&spec.seed.to_le_bytes());
    out.extend_from_slice(&spec.delta.to_le_bytes());
    out.extend_from_slice(&(index as u32).to_le_bytes());
    let n = samples.len();
    let inputs = Tensor::new(vec![n, spec.seq_len, spec.input_dim], samples.inputs.clone())
        .expect("input tensor matches spec");
    let labels = Tensor::new(vec![n], samples.labels.iter().map(|&l| l as f64).collect())
        .expect("label tensor matches spec");
    // reuse the wire tensor block encoding via a throwaway WEIGHTS frame
    let frame = proto::encode(
        &proto::Message::Weights(crate::nn::WeightSet::new(vec![inputs, labels], 0)),
        WirePrecision::F32,
    );
    out.extend_from_slice(&frame[proto::HEADER_LEN + 8..]);
    out
}

pub fn decode_file(bytes: &[u8], path: &Path) -> Result<(DatasetSpec, usize, Samples), DataError> {
    let bad = |reason: String| DataError::BadFile {
        path: path.to_path_buf(),
        reason,
    };
    const FIXED: usize = 4 + 2 + 5 * 4 + 8 + 8 + 4;
    if bytes.len() < FIXED {
        return Err(bad("file shorter than its header".into()));
    }
    if bytes[0..4] != FILE_MAGIC {
        return Err(bad("bad magic".into()));
    }
    if u16::from_le_bytes([bytes[4], bytes[5]]) != FILE_VERSION {
        return Err(bad("unsupported file version".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let spec = DatasetSpec {
        n_files: u32_at(6),
        samples_per_file: u32_at(10),
        seq_len: u32_at(14),
        input_dim: u32_at(18),
        n_classes: u32_at(22),
        seed: u64::from_le_bytes(bytes[26..34].try_into().unwrap()),
        delta: f64::from_le_bytes(bytes[34..42].try_into().unwrap()),
    };
    spec.validate().map_err(|e| bad(e.to_string()))?;
    let index = u32_at(42);
    // wrap the tensor block in a WEIGHTS frame and let the codec parse it
    let block = &bytes[FIXED..];
    let mut frame = Vec::with_capacity(proto::HEADER_LEN + 8 + block.len());
    frame.extend_from_slice(&proto::MAGIC);
    frame.extend_from_slice(&WirePrecision::F32.format_version().to_le_bytes());
    frame.push(proto::TYPE_WEIGHTS);
    frame.extend_from_slice(&((8 + block.len()) as u64).to_le_bytes());
    frame.extend_from_slice(&0u64.to_le_bytes());
    frame.extend_from_slice(block);
    let proto::Message::Weights(ws) = proto::decode(&frame).map_err(|e| bad(e.to_string()))? else {
        unreachable!("frame was built as WEIGHTS")
    };
    let [inputs, labels]: [Tensor; 2] = ws
        .tensors
        .try_into()
        .map_err(|_| bad("expected exactly two tensors".into()))?;
    let n = labels.len();
    if inputs.shape() != [n, spec.seq_len, spec.input_dim] {
        return Err(bad(format!("input tensor shape {:?} disagrees with header", inputs.shape())));
    }
    let labels = labels
        .data()
        .iter()
        .map(|&l| {
            if l >= 0.0 && l.fract() == 0.0 && (l as usize) < spec.n_classes {
                Ok(l as usize)
            } else {
                Err(bad(format!("label {l} out of range")))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let samples = Samples {
        width: spec.width(),
        n_classes: spec.n_classes,
        inputs: inputs.into_parts().1,
        labels,
    };
    Ok((spec, index, samples))
}

/// Writes every training file plus the held-out file into `dir`.
pub fn write_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    spec.validate()?;
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for i in 0..spec.n_files {
        let p = dir.join(file_name(i));
        fs::write(&p, encode_file(spec, i, &generate_file(spec, i)))?;
        paths.push(p);
    }
    let p = dir.join(HELDOUT_FILE);
    fs::write(&p, encode_file(spec, spec.heldout_index(), &generate_heldout(spec)))?;
    paths.push(p);
    Ok(paths)
}

pub fn read_file(path: &Path) -> Result<(DatasetSpec, usize, Samples), DataError> {
    decode_file(&fs::read(path)?, path)
}

/// A dataset loaded from disk: training files in index order plus the held-out set.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub files: Vec<Samples>,
    pub heldout: Samples,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self, DataError> {
        Ok(Self {
            spec: spec.clone(),
            files: generate_synthetic(spec)?,
            heldout: generate_heldout(spec),
        })
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let (spec, _, heldout) = read_file(&dir.join(HELDOUT_FILE))?;
        let mut files = Vec::with_capacity(spec.n_files);
        for i in 0..spec.n_files {
            let path = dir.join(file_name(i));
            let (s, idx, samples) = read_file(&path)?;
            if s != spec || idx != i {
                return Err(DataError::BadFile {
                    path,
                    reason: "header disagrees with the held-out file".into(),
                });
            }
            files.push(samples);
        }
        Ok(Self { spec, files, heldout })
    }

    pub fn shard(&self, file_indices: &[usize]) -> Samples {
        let mut out = Samples::default();
        for &i in file_indices {
            out.extend(&self.files[i]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sizes(a: &ShardAssignment) -> Vec<usize> {
        a.files.values().map(Vec::len).collect()
    }

    #[test]
    fn shard_examples() {
        let ranks: Vec<Rank> = (1..=10).collect();
        assert_eq!(sizes(&shard_files(100, &ranks).unwrap()), vec![10; 10]);
        assert_eq!(shard_files(5, &[1]).unwrap().files_for(1), &[0, 1, 2, 3, 4]);
        assert_eq!(sizes(&shard_files(7, &[1, 2, 3]).unwrap()), vec![3, 2, 2]);
        assert!(matches!(
            shard_files(2, &[1, 2, 3]),
            Err(DataError::TooManyWorkers { .. })
        ));
    }

    #[test]
    fn benchmark_file_batches() {
        let b = epoch_batches(9500, 100, 1, 0, true).unwrap();
        assert_eq!(b.len(), 95);
        assert!(b.iter().all(|x| x.len() == 100));
        let one = epoch_batches(30, 100, 1, 0, false).unwrap();
        assert_eq!(one, vec![(0..30).collect::<Vec<_>>()]);
        let short = epoch_batches(250, 100, 1, 0, false).unwrap();
        assert_eq!(short.iter().map(Vec::len).collect::<Vec<_>>(), vec![100, 100, 50]);
        assert!(matches!(epoch_batches(0, 10, 0, 0, true), Err(DataError::EmptyShard)));
        assert!(matches!(epoch_batches(5, 0, 0, 0, true), Err(DataError::BatchSize)));
    }

    #[test]
    fn epochs_reshuffle_reproducibly() {
        let a0 = epoch_batches(50, 7, 9, 0, true).unwrap();
        let a1 = epoch_batches(50, 7, 9, 1, true).unwrap();
        assert_ne!(a0, a1);
        assert_eq!(a0, epoch_batches(50, 7, 9, 0, true).unwrap());
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let spec = DatasetSpec {
            n_files: 3,
            samples_per_file: 101,
            seq_len: 4,
            input_dim: 2,
            n_classes: 3,
            seed: 5,
            delta: 2.0,
        };
        for i in 0..3 {
            let f = generate_file(&spec, i);
            assert_eq!(encode_file(&spec, i, &f), encode_file(&spec, i, &generate_file(&spec, i)));
            let mut counts = [0usize; 3];
            for &l in &f.labels {
                counts[l] += 1;
            }
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
        assert_ne!(generate_file(&spec, 0), generate_file(&spec, 1));
    }

    #[test]
    fn zero_delta_classes_share_a_distribution() {
        let spec = DatasetSpec {
            delta: 0.0,
            ..DatasetSpec::desk_scale(0.0, 3)
        };
        assert!(class_means(&spec).iter().all(|&m| m == 0.0));
    }

    #[test]
    fn file_round_trip_and_rejection() {
        let spec = DatasetSpec {
            n_files: 2,
            samples_per_file: 9,
            seq_len: 3,
            input_dim: 2,
            n_classes: 3,
            seed: 1,
            delta: 1.5,
        };
        let f = generate_file(&spec, 1);
        let bytes = encode_file(&spec, 1, &f);
        let (s, idx, back) = decode_file(&bytes, Path::new("x")).unwrap();
        assert_eq!((s, idx), (spec.clone(), 1));
        assert_eq!(back, f);
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(decode_file(&bad, Path::new("x")).is_err());
        assert!(decode_file(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_files: 3,
            samples_per_file: 12,
            ..DatasetSpec::desk_scale(1.0, 2)
        };
        write_dataset(&spec, dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        let generated = Dataset::generate(&spec).unwrap();
        assert_eq!(loaded.files, generated.files);
        assert_eq!(loaded.heldout, generated.heldout);
    }

    proptest! {
        #[test]
        fn sharding_is_a_balanced_partition(n_files in 1usize..200, w in 1usize..50) {
            prop_assume!(n_files >= w);
            let ranks: Vec<Rank> = (1..=w as Rank).collect();
            let a = shard_files(n_files, &ranks).unwrap();
            let all: Vec<usize> = a.files.values().flatten().copied().collect();
            prop_assert_eq!(all, (0..n_files).collect::<Vec<_>>());
            let s = sizes(&a);
            prop_assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
        }

        #[test]
        fn epoch_batches_cover_shard_once(n in 1usize..500, b in 1usize..64, seed in any::<u64>(), epoch in 0u64..5) {
            let batches = epoch_batches(n, b, seed, epoch, true).unwrap();
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
