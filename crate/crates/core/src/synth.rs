//! Seeded synthetic surgical workflows.
//!
//! Each phase owns a unit-norm centroid. Confusable phase pairs get
//! centroids at a prescribed cosine. A sequence visits the phases in order
//! (some may be skipped), with jittered durations; features are the
//! current centroid plus isotropic Gaussian noise, and around every phase
//! boundary the centroid is linearly interpolated over a ramp whose
//! midpoint is where the label switches.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusablePair {
    pub a: usize,
    pub b: usize,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSpec {
    /// Feature dimension `D`.
    pub dim: usize,
    /// Mean duration of each phase in frames; its length is `C`.
    pub mean_durations: Vec<f64>,
    /// Relative duration jitter: durations are uniform in `mean * (1 +- jitter)`.
    pub duration_jitter: f64,
    /// Probability that a phase is skipped in a sequence.
    pub skip_probs: Vec<f64>,
    pub centroid_seed: u64,
    /// Per-dimension standard deviation of the feature noise.
    pub sigma: f64,
    pub confusable_pairs: Vec<ConfusablePair>,
    /// Frames of centroid interpolation around each boundary. Odd values
    /// are rounded down.
    pub ramp: usize,
}

impl WorkflowSpec {
    /// Seven phases in 32 dimensions; phase 3 is rare (~3% of frames),
    /// phases 1/2 and 4/5 are confusable.
    pub fn default_benchmark() -> Self {
        Self {
            dim: 32,
            mean_durations: vec![60.0, 150.0, 110.0, 18.0, 90.0, 110.0, 62.0],
            duration_jitter: 0.3,
            skip_probs: vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1],
            centroid_seed: 7,
            sigma: 0.35,
            confusable_pairs: vec![
                ConfusablePair { a: 1, b: 2, cosine: 0.9 },
                ConfusablePair { a: 4, b: 5, cosine: 0.9 },
            ],
            ramp: 8,
        }
    }

    pub fn num_phases(&self) -> usize {
        self.mean_durations.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_phases();
        if c < 2 {
            return Err(Error::Config("a workflow needs at least 2 phases".into()));
        }
        if self.dim < c {
            return Err(Error::Config(format!("feature dimension {} cannot hold {c} orthonormal centroids", self.dim)));
        }
        if self.mean_durations.iter().any(|d| !d.is_finite() || *d < 1.0) {
            return Err(Error::Config("mean durations must be at least 1 frame".into()));
        }
        if !(0.0..1.0).contains(&self.duration_jitter) {
            return Err(Error::Config("duration jitter must lie in [0, 1)".into()));
        }
        if self.skip_probs.len() != c {
            return Err(Error::Config(format!("{} skip probabilities for {c} phases", self.skip_probs.len())));
        }
        if self.skip_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("skip probabilities must lie in [0, 1]".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config("sigma must be non-negative".into()));
        }
        let mut used = vec![false; c];
        for pair in &self.confusable_pairs {
            if pair.a >= c || pair.b >= c || pair.a == pair.b {
                return Err(Error::Config(format!("invalid confusable pair ({}, {})", pair.a, pair.b)));
            }
            if !(pair.cosine.is_finite() && pair.cosine.abs() <= 1.0) {
                return Err(Error::Config(format!(
                    "confusable pair ({}, {}) requests cosine {} outside [-1, 1]",
                    pair.a, pair.b, pair.cosine
                )));
            }
            for p in [pair.a, pair.b] {
                if std::mem::replace(&mut used[p], true) {
                    return Err(Error::Config(format!("phase {p} appears in more than one confusable pair")));
                }
            }
        }
        Ok(())
    }

    /// Unit-norm phase centroids, row `c` for phase `c`.
    pub fn centroids(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.centroid_seed);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(self.num_phases());
        while basis.len() < self.num_phases() {
            let mut v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
            // Two Gram-Schmidt passes for numerical orthogonality.
            for _ in 0..2 {
                for b in &basis {
                    let proj = numerics::dot(&v, b);
                    numerics::axpy(&mut v, -proj, b);
                }
            }
            let n = numerics::norm(&v);
            if n > 1e-6 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let mut centroids = basis.clone();
        for pair in &self.confusable_pairs {
            let sin = (1.0 - pair.cosine * pair.cosine).max(0.0).sqrt();
            let mut v: Vec<f64> = basis[pair.a].iter().map(|x| pair.cosine * x).collect();
            numerics::axpy(&mut v, sin, &basis[pair.b]);
            let n = numerics::norm(&v);
            centroids[pair.b] = v.into_iter().map(|x| x / n).collect();
        }
        Ok(centroids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub id: String,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.features.len() != self.labels.len() {
            return Err(contract(format!(
                "sequence {}: {} features but {} labels",
                self.id,
                self.features.len(),
                self.labels.len()
            )));
        }
        let dim = self.dim();
        if self.features.iter().any(|f| f.len() != dim) {
            return Err(contract(format!("sequence {}: ragged features", self.id)));
        }
        if self.features.iter().flatten().any(|x| !x.is_finite()) {
            return Err(contract(format!("sequence {}: non-finite feature", self.id)));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(contract(format!("sequence {}: label {l} out of range 0..{classes}", self.id)));
        }
        Ok(())
    }
}

/// Phase visited by a segment and its length in frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub phase: usize,
    pub len: usize,
}

fn sample_segments(spec: &WorkflowSpec, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let mut segments = Vec::with_capacity(spec.num_phases());
    for (phase, (&mean, &skip)) in spec.mean_durations.iter().zip(&spec.skip_probs).enumerate() {
        let skipped = rng.random::<f64>() < skip;
        let jitter = rng.random_range(-1.0..=1.0) * spec.duration_jitter;
        if !skipped {
            let len = (mean * (1.0 + jitter)).round().max(1.0) as usize;
            segments.push(Segment { phase, len });
        }
    }
    if segments.is_empty() {
        segments.push(Segment { phase: 0, len: spec.mean_durations[0].round().max(1.0) as usize });
    }
    segments
}

/// Per-frame centroid mixing: `(phase_from, phase_to, alpha)` with the
/// centroid `(1 - alpha) c_from + alpha c_to`.
fn centroid_schedule(segments: &[Segment], ramp: usize) -> Vec<(usize, usize, f64)> {
    let total: usize = segments.iter().map(|s| s.len).sum();
    let mut schedule = Vec::with_capacity(total);
    for s in segments {
        schedule.extend(std::iter::repeat((s.phase, s.phase, 0.0)).take(s.len));
    }
    let mut boundary = 0;
    for pair in segments.windows(2) {
        boundary += pair[0].len;
        let half = (ramp / 2).min(pair[0].len / 2).min(pair[1].len / 2);
        let width = 2 * half;
        for i in 0..width {
            let alpha = (i as f64 + 0.5) / width as f64;
            schedule[boundary - half + i] = (pair[0].phase, pair[1].phase, alpha);
        }
    }
    schedule
}

fn generate_one(spec: &WorkflowSpec, centroids: &[Vec<f64>], seed: u64, index: usize) -> LabeledSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let segments = sample_segments(spec, &mut rng);
    let labels: Vec<usize> = segments.iter().flat_map(|s| std::iter::repeat(s.phase).take(s.len)).collect();
    let features = centroid_schedule(&segments, spec.ramp)
        .into_iter()
        .map(|(from, to, alpha)| {
            (0..spec.dim)
                .map(|d| {
                    let noise: f64 = rng.sample(StandardNormal);
                    let centre = if alpha == 0.0 {
                        centroids[from][d]
                    } else {
                        (1.0 - alpha) * centroids[from][d] + alpha * centroids[to][d]
                    };
                    centre + spec.sigma * noise
                })
                .collect()
        })
        .collect();
    LabeledSequence { id: format!("seq_{index:03}"), features, labels }
}

/// Generates `n_sequences` sequences, fully determined by `(spec, seed)`.
/// Each sequence draws from its own stream, so the parallel fan-out
/// reproduces serial generation exactly.
pub fn generate(spec: &WorkflowSpec, n_sequences: usize, seed: u64) -> Result<Vec<LabeledSequence>> {
    if n_sequences == 0 {
        return Err(Error::Config("n_sequences must be at least 1".into()));
    }
    let centroids = spec.centroids()?;
    Ok((0..n_sequences).into_par_iter().map(|i| generate_one(spec, &centroids, seed, i)).collect())
}

/// Sequence-level split; `round(n * train_fraction)` sequences (at least
/// one on each side) go to training.
pub fn split(
    sequences: &[LabeledSequence],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSequence>, Vec<LabeledSequence>)> {
    if sequences.len() < 2 {
        return Err(Error::Config("splitting needs at least 2 sequences".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n = sequences.len();
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5_711);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let (train_idx, test_idx) = order.split_at(n_train);
    let mut train_idx = train_idx.to_vec();
    let mut test_idx = test_idx.to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        train_idx.into_iter().map(|i| sequences[i].clone()).collect(),
        test_idx.into_iter().map(|i| sequences[i].clone()).collect(),
    ))
}

/// JSON sidecar written next to the sequence CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: Option<WorkflowSpec>,
    pub seed: Option<u64>,
    pub classes: usize,
    pub dim: usize,
    pub files: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one CSV row per frame: `sequence_id,t,label,f0..f{D-1}`.
pub fn write_csv(seq: &LabeledSequence, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sequence_id".to_string(), "t".into(), "label".into()];
    header.extend((0..seq.dim()).map(|d| format!("f{d}")));
    w.write_record(&header)?;
    for (t, (f, label)) in seq.features.iter().zip(&seq.labels).enumerate() {
        let mut row = vec![seq.id.clone(), t.to_string(), label.to_string()];
        row.extend(f.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every sequence in a CSV file. Rows of one sequence must have
/// consecutive `t`; several sequences may share a file.
pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<LabeledSequence>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.len() < 4 || &headers[0] != "sequence_id" || &headers[1] != "t" || &headers[2] != "label" {
        return Err(contract(format!("{}: expected header sequence_id,t,label,f0,...", path.display())));
    }
    let mut order: Vec<String> = Vec::new();
    let mut seqs: HashMap<String, (LabeledSequence, u64)> = HashMap::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let bad = |what: &str| contract(format!("{}:{}: bad {what}", path.display(), line + 2));
        let id = record[0].to_string();
        let t: u64 = record[1].parse().map_err(|_| bad("t"))?;
        let label: usize = record[2].parse().map_err(|_| bad("label"))?;
        let feature = record
            .iter()
            .skip(3)
            .map(|x| x.parse::<f64>().map_err(|_| bad("feature value")))
            .collect::<Result<Vec<f64>>>()?;
        match seqs.get_mut(&id) {
            Some((seq, last_t)) => {
                if t != *last_t + 1 {
                    return Err(contract(format!("{}: sequence {id} jumps from t={last_t} to t={t}", path.display())));
                }
                *last_t = t;
                seq.features.push(feature);
                seq.labels.push(label);
            }
            None => {
                order.push(id.clone());
                let seq = LabeledSequence { id: id.clone(), features: vec![feature], labels: vec![label] };
                seqs.insert(id, (seq, t));
            }
        }
    }
    Ok(order.into_iter().map(|id| seqs.remove(&id).expect("recorded id").0).collect())
}

/// Writes one CSV per sequence plus the manifest; returns the CSV paths.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    sequences: &[LabeledSequence],
    classes: usize,
    spec: Option<&WorkflowSpec>,
    seed: Option<u64>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let name = format!("{}.csv", seq.id);
        write_csv(seq, dir.join(&name))?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        spec: spec.cloned(),
        seed,
        classes,
        dim: sequences.first().map_or(0, LabeledSequence::dim),
        files: files.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(files.into_iter().map(|f| dir.join(f)).collect())
}

/// Loads a dataset directory. With a manifest the listed files are read in
/// order; without one every `*.csv` is read in file-name order and the
/// class count is inferred from the largest label.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(Vec<LabeledSequence>, DatasetManifest)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let (files, manifest) = if manifest_path.exists() {
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        (manifest.files.clone(), Some(manifest))
    } else {
        let mut names: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".csv"))
            .collect();
        names.sort();
        (names, None)
    };
    let mut sequences = Vec::new();
    for f in &files {
        sequences.extend(read_csv(dir.join(f))?);
    }
    if sequences.is_empty() {
        return Err(contract(format!("no sequences found in {}", dir.display())));
    }
    let dim = sequences[0].dim();
    let manifest = match manifest {
        Some(m) => m,
        None => {
            let max_label = sequences.iter().flat_map(|s| s.labels.iter()).copied().max().unwrap_or(0);
            DatasetManifest { spec: None, seed: None, classes: (max_label + 1).max(2), dim, files }
        }
    };
    for s in &sequences {
        s.validate(manifest.classes)?;
        if s.dim() != manifest.dim {
            return Err(contract(format!("sequence {} has dimension {}, expected {}", s.id, s.dim(), manifest.dim)));
        }
    }
    Ok((sequences, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> WorkflowSpec {
        WorkflowSpec {
            dim: 8,
            mean_durations: vec![20.0, 5.0, 30.0, 12.0],
            duration_jitter: 0.2,
            skip_probs: vec![0.0, 0.5, 0.0, 0.0],
            centroid_seed: 3,
            sigma: 0.2,
            confusable_pairs: vec![ConfusablePair { a: 0, b: 2, cosine: 0.9 }],
            ramp: 4,
        }
    }

    #[test]
    fn noiseless_rampless_frames_equal_centroids() {
        let spec = WorkflowSpec { sigma: 0.0, ramp: 0, ..small_spec() };
        let centroids = spec.centroids().unwrap();
        for seq in generate(&spec, 5, 1).unwrap() {
            for (f, &l) in seq.features.iter().zip(&seq.labels) {
                assert_eq!(f, &centroids[l]);
            }
            // piecewise constant with change points at label changes
            for i in 1..seq.len() {
                assert_eq!(seq.features[i] == seq.features[i - 1], seq.labels[i] == seq.labels[i - 1]);
            }
        }
    }

    #[test]
    fn generation_replays_bitwise() {
        let spec = small_spec();
        assert_eq!(generate(&spec, 6, 99).unwrap(), generate(&spec, 6, 99).unwrap());
        assert_ne!(generate(&spec, 6, 99).unwrap(), generate(&spec, 6, 100).unwrap());
    }

    #[test]
    fn parallel_generation_matches_serial() {
        let spec = small_spec();
        let centroids = spec.centroids().unwrap();
        let serial: Vec<_> = (0..6).map(|i| generate_one(&spec, &centroids, 5, i)).collect();
        assert_eq!(serial, generate(&spec, 6, 5).unwrap());
    }

    #[test]
    fn frame_share_of_long_phase() {
        let spec = WorkflowSpec {
            dim: 4,
            mean_durations: vec![100.0, 10.0],
            duration_jitter: 0.3,
            skip_probs: vec![0.0, 0.0],
            centroid_seed: 0,
            sigma: 0.1,
            confusable_pairs: vec![],
            ramp: 0,
        };
        let seqs = generate(&spec, 20, 2024).unwrap();
        let total: usize = seqs.iter().map(LabeledSequence::len).sum();
        let zeros: usize = seqs.iter().flat_map(|s| &s.labels).filter(|&&l| l == 0).count();
        let share = zeros as f64 / total as f64;
        assert!((share - 0.91).abs() <= 0.05, "share {share}");
    }

    #[test]
    fn confusable_centroids_hit_requested_cosine() {
        let spec = WorkflowSpec::default_benchmark();
        let c = spec.centroids().unwrap();
        for pair in &spec.confusable_pairs {
            let cos = numerics::cosine(&c[pair.a], &c[pair.b]).unwrap();
            assert!((cos - pair.cosine).abs() < 1e-6);
        }
        for v in &c {
            assert!((numerics::norm(v) - 1.0).abs() < 1e-12);
        }
        // unpaired phases stay orthogonal
        assert!(numerics::cosine(&c[0], &c[3]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn infeasible_geometry_is_a_config_error() {
        let mut spec = small_spec();
        spec.confusable_pairs[0].cosine = 1.2;
        assert!(matches!(generate(&spec, 1, 0), Err(Error::Config(_))));
        let spec = WorkflowSpec { dim: 3, ..small_spec() };
        assert!(matches!(generate(&spec, 1, 0), Err(Error::Config(_))));
        assert!(matches!(generate(&small_spec(), 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn labels_follow_phase_order() {
        let spec = small_spec();
        for seq in generate(&spec, 30, 8).unwrap() {
            assert!(!seq.is_empty());
            for w in seq.labels.windows(2) {
                assert!(w[1] >= w[0], "phase order must be increasing");
            }
            assert!(seq.labels.contains(&0) && seq.labels.contains(&3));
        }
    }

    #[test]
    fn ramp_labels_switch_at_midpoint() {
        let segments = [Segment { phase: 0, len: 10 }, Segment { phase: 1, len: 10 }];
        let sched = centroid_schedule(&segments, 8);
        assert_eq!(sched[5], (0, 0, 0.0));
        assert_eq!(sched[6], (0, 1, 0.0625));
        assert_eq!(sched[9].2, 7.0 / 16.0);
        assert_eq!(sched[10].2, 9.0 / 16.0);
        assert_eq!(sched[13], (0, 1, 0.9375));
        assert_eq!(sched[14], (1, 1, 0.0));
    }

    #[test]
    fn default_benchmark_shape() {
        let spec = WorkflowSpec::default_benchmark();
        let seqs = generate(&spec, 20, 0).unwrap();
        let total: usize = seqs.iter().map(LabeledSequence::len).sum();
        let rare: usize = seqs.iter().flat_map(|s| &s.labels).filter(|&&l| l == 3).count();
        let share = rare as f64 / total as f64;
        assert!((0.02..0.04).contains(&share), "rare share {share}");
        for s in &seqs {
            assert!((400..=800).contains(&s.len()), "length {}", s.len());
        }
    }

    #[test]
    fn split_examples() {
        let seqs = generate(&small_spec(), 10, 1).unwrap();
        let (train, test) = split(&seqs, 0.7, 4).unwrap();
        assert_eq!((train.len(), test.len()), (7, 3));
        for s in &test {
            assert!(train.iter().all(|t| t.id != s.id));
        }
        assert_eq!(split(&seqs, 0.7, 4).unwrap(), (train, test));
        assert!(split(&seqs[..1], 0.5, 0).is_err());
        assert!(split(&seqs, 1.0, 0).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let seqs = generate(&spec, 3, 11).unwrap();
        write_dataset(dir.path(), &seqs, spec.num_phases(), Some(&spec), Some(11)).unwrap();
        let (back, manifest) = read_dataset(dir.path()).unwrap();
        assert_eq!(back, seqs);
        assert_eq!(manifest.classes, 4);
        assert_eq!(manifest.spec.as_ref(), Some(&spec));
    }

    #[test]
    fn csv_rejects_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        fs::write(&path, "sequence_id,t,label,f0\na,0,0,1.0\na,2,0,1.0\n").unwrap();
        assert!(read_csv(&path).is_err());
    }
}
