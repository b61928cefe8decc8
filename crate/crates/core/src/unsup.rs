//! Pseudo-label pretraining: embed untranscribed audio, cluster the frames with
//! k-means, and train a fresh model to predict the clusters from masked input.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::am::{train_frame_ce, AcousticModel, ArchConfig, FrameExample, InputMask, RefModel, TrainConfig, TrainReport};
use crate::corpus::{FeatureMatrix, Manifest, UntranscribedUtterance};
use crate::error::{Error, Result};

pub const CENTROID_MAGIC: &[u8; 8] = b"WSKM0001";

/// Points per parallel chunk; fixed so reductions do not depend on thread count.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansModel {
    k: usize,
    dims: usize,
    /// k × dims, row-major.
    centroids: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansFit {
    pub model: KmeansModel,
    /// Mean squared distance after each assignment step; non-increasing.
    pub distortion_history: Vec<f64>,
    pub converged: bool,
    pub seed: u64,
}

impl KmeansFit {
    pub fn distortion(&self) -> f64 {
        *self.distortion_history.last().expect("fit records at least one step")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KmeansModel {
    pub fn new(k: usize, dims: usize, centroids: Vec<f64>) -> Result<Self> {
        if k == 0 || dims == 0 || centroids.len() != k * dims {
            return Err(Error::Invalid("centroid matrix shape mismatch".into()));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::Invalid("non-finite centroid".into()));
        }
        Ok(KmeansModel { k, dims, centroids })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dims..(j + 1) * self.dims]
    }

    /// Nearest centroid and its squared distance; ties go to the lowest id.
    pub fn nearest(&self, point: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.k {
            let d = sq_dist(point, self.centroid(j));
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.centroids.len());
        out.extend_from_slice(CENTROID_MAGIC);
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        for &c in &self.centroids {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != CENTROID_MAGIC {
            return Err(Error::format("magic", "not a WSKM0001 centroid file"));
        }
        if bytes.len() < 16 {
            return Err(Error::format("header", "truncated"));
        }
        let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dims = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let payload = &bytes[16..];
        if payload.len() != 4 * k * dims {
            return Err(Error::format("centroids", format!("expected {} values", k * dims)));
        }
        let centroids = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        KmeansModel::new(k, dims, centroids)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        KmeansModel::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Nearest-centroid id for every row of `points` (N × dims).
pub fn assign(model: &KmeansModel, points: &[f64]) -> Vec<usize> {
    points
        .par_chunks(model.dims * CHUNK)
        .flat_map_iter(|chunk| chunk.chunks_exact(model.dims).map(|p| model.nearest(p).0))
        .collect()
}

fn assign_with_distance(model: &KmeansModel, points: &[f64]) -> (Vec<usize>, Vec<f64>) {
    points
        .par_chunks(model.dims * CHUNK)
        .flat_map_iter(|chunk| chunk.chunks_exact(model.dims).map(|p| model.nearest(p)))
        .unzip()
}

fn kmeans_pp(points: &[f64], n: usize, dims: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let row = |i: usize| &points[i * dims..(i + 1) * dims];
    let mut centroids = Vec::with_capacity(k * dims);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dims])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let mut pick = n - 1;
        if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            // Rounding can run r past the last positive weight.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap();
            }
        }
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops changing
/// or `max_iters` updates have run. An emptied cluster is moved onto the point farthest
/// from its centroid (lowest index on ties).
pub fn kmeans_fit(points: &[f64], dims: usize, k: usize, max_iters: usize, seed: u64) -> Result<KmeansFit> {
    if dims == 0 || !points.len().is_multiple_of(dims) {
        return Err(Error::Invalid("point matrix shape mismatch".into()));
    }
    let n = points.len() / dims;
    if k == 0 || n < k {
        return Err(Error::Invalid(format!("k-means needs 1 ≤ k ≤ N (k = {k}, N = {n})")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite point".into()));
    }
    let distinct: HashSet<Vec<u64>> = points.chunks_exact(dims).map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
    if distinct.len() < k {
        return Err(Error::Invalid(format!("k = {k} exceeds the {} distinct points", distinct.len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = KmeansModel {
        k,
        dims,
        centroids: kmeans_pp(points, n, dims, k, &mut rng),
    };
    let (mut labels, mut dist) = assign_with_distance(&model, points);
    let mut history = vec![dist.iter().sum::<f64>() / n as f64];
    let mut converged = false;
    for _ in 0..max_iters {
        update_centroids(&mut model, points, &labels, &mut dist);
        let (next_labels, next_dist) = assign_with_distance(&model, points);
        let distortion = next_dist.iter().sum::<f64>() / n as f64;
        let prev = *history.last().unwrap();
        debug_assert!(
            distortion <= prev * (1.0 + 1e-12) + 1e-300,
            "distortion rose from {prev} to {distortion}"
        );
        history.push(distortion);
        let unchanged = next_labels == labels;
        labels = next_labels;
        dist = next_dist;
        if unchanged {
            converged = true;
            break;
        }
    }
    Ok(KmeansFit {
        model,
        distortion_history: history,
        converged,
        seed,
    })
}

fn update_centroids(model: &mut KmeansModel, points: &[f64], labels: &[usize], dist: &mut [f64]) {
    let (k, dims) = (model.k, model.dims);
    let partial: Vec<(Vec<f64>, Vec<usize>)> = points
        .par_chunks(dims * CHUNK)
        .zip(labels.par_chunks(CHUNK))
        .map(|(pts, labs)| {
            let mut sums = vec![0.0; k * dims];
            let mut counts = vec![0usize; k];
            for (p, &l) in pts.chunks_exact(dims).zip(labs) {
                counts[l] += 1;
                for (s, v) in sums[l * dims..(l + 1) * dims].iter_mut().zip(p) {
                    *s += v;
                }
            }
            (sums, counts)
        })
        .collect();
    let mut sums = vec![0.0; k * dims];
    let mut counts = vec![0usize; k];
    for (s, c) in &partial {
        for (a, b) in sums.iter_mut().zip(s) {
            *a += b;
        }
        for (a, b) in counts.iter_mut().zip(c) {
            *a += b;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            for d in 0..dims {
                model.centroids[j * dims + d] = sums[j * dims + d] / counts[j] as f64;
            }
        } else {
            let (far, _) = dist
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
            model.centroids[j * dims..(j + 1) * dims].copy_from_slice(&points[far * dims..(far + 1) * dims]);
            dist[far] = 0.0;
        }
    }
}

/// Per-utterance frame targets, in utterance order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterTargets {
    entries: Vec<TargetEntry>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetEntry {
    pub id: String,
    pub targets: Vec<usize>,
}

impl ClusterTargets {
    pub fn new(entries: Vec<TargetEntry>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Duplicate {
                    kind: "utterance",
                    name: e.id.clone(),
                });
            }
        }
        Ok(ClusterTargets { entries, index })
    }

    pub fn entries(&self) -> &[TargetEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&[usize]> {
        self.index.get(id).map(|&i| self.entries[i].targets.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::format(format!("line {}", i + 1), e.to_string()))
            })
            .collect::<Result<Vec<TargetEntry>>>()?;
        ClusterTargets::new(entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        ClusterTargets::parse_jsonl(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// What the clustering step sees for each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterInput {
    /// Hidden activations of the previous model.
    #[default]
    Embedding,
    /// The acoustic features themselves (ablation).
    RawFeatures,
}

fn frame_vectors<M: AcousticModel>(
    model: Option<&M>,
    input: ClusterInput,
    features: &FeatureMatrix,
) -> Result<(usize, Vec<f64>)> {
    match (input, model) {
        (ClusterInput::Embedding, Some(m)) => {
            let e = m.embed(features)?;
            Ok((e.dims(), e.values().to_vec()))
        }
        (ClusterInput::Embedding, None) => Err(Error::Invalid("embedding clustering needs a model".into())),
        (ClusterInput::RawFeatures, _) => Ok((
            features.dims(),
            features.values().iter().map(|&v| v as f64).collect(),
        )),
    }
}

/// Frame vectors of every utterance, keeping every `stride`-th frame.
pub fn collect_points<M: AcousticModel>(
    model: Option<&M>,
    input: ClusterInput,
    utterances: &[UntranscribedUtterance],
    stride: usize,
) -> Result<(usize, Vec<f64>)> {
    let stride = stride.max(1);
    let per: Vec<(usize, Vec<f64>)> = utterances
        .par_iter()
        .map(|u| frame_vectors(model, input, &u.features).map_err(|e| Error::utterance(&u.id, e)))
        .collect::<Result<_>>()?;
    let dims = per.first().map_or(0, |p| p.0);
    let mut points = Vec::new();
    let mut global = 0usize;
    for (_, values) in &per {
        for row in values.chunks_exact(dims) {
            if global.is_multiple_of(stride) {
                points.extend_from_slice(row);
            }
            global += 1;
        }
    }
    Ok((dims, points))
}

/// Cluster id of every frame of every utterance.
pub fn generate_targets<M: AcousticModel>(
    model: Option<&M>,
    input: ClusterInput,
    utterances: &[UntranscribedUtterance],
    kmeans: &KmeansModel,
) -> Result<ClusterTargets> {
    let entries = utterances
        .par_iter()
        .map(|u| {
            let (dims, values) = frame_vectors(model, input, &u.features).map_err(|e| Error::utterance(&u.id, e))?;
            if dims != kmeans.dims() {
                return Err(Error::utterance(&u.id, "frame vector width differs from centroid width"));
            }
            Ok(TargetEntry {
                id: u.id.clone(),
                targets: assign(kmeans, &values),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ClusterTargets::new(entries)
}

/// Loads the manifest's audio and labels it; unreadable features name the utterance.
pub fn generate_targets_for_manifest<M: AcousticModel>(
    model: Option<&M>,
    input: ClusterInput,
    manifest: &Manifest,
    kmeans: &KmeansModel,
) -> Result<ClusterTargets> {
    generate_targets(model, input, &manifest.load_untranscribed()?, kmeans)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnsupConfig {
    pub k: usize,
    pub kmeans_iters: usize,
    /// Keep every n-th frame when fitting k-means.
    pub stride: usize,
    pub cluster_input: ClusterInput,
    /// Continue from the previous model's hidden layer instead of a fresh one (ablation).
    pub continue_training: bool,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for UnsupConfig {
    fn default() -> Self {
        UnsupConfig {
            k: 16,
            kmeans_iters: 50,
            stride: 1,
            cluster_input: ClusterInput::Embedding,
            continue_training: false,
            arch: ArchConfig::default(),
            train: TrainConfig {
                input_mask: Some(InputMask::default()),
                ..TrainConfig::default()
            },
            seed: 11,
        }
    }
}

fn frame_examples(utterances: &[UntranscribedUtterance], targets: &ClusterTargets) -> Result<Vec<FrameExample>> {
    utterances
        .iter()
        .map(|u| {
            let t = targets
                .get(&u.id)
                .ok_or_else(|| Error::utterance(&u.id, "no cluster targets"))?;
            Ok(FrameExample {
                id: u.id.clone(),
                features: u.features.clone(),
                targets: t.to_vec(),
            })
        })
        .collect()
}

/// Trains a model with a k-way head on the cluster targets with masked inputs.
/// `init` supplies the hidden layer when continuing; otherwise the model is fresh.
pub fn pretrain(
    init: Option<&RefModel>,
    utterances: &[UntranscribedUtterance],
    targets: &ClusterTargets,
    k: usize,
    config: &UnsupConfig,
    seed: u64,
) -> Result<(RefModel, TrainReport)> {
    let dims = utterances
        .first()
        .ok_or_else(|| Error::Invalid("pretraining set is empty".into()))?
        .features
        .dims();
    let mut model = match init {
        Some(m) => m.swap_head(k, seed)?,
        None => RefModel::new(config.arch, dims, k, seed)?,
    };
    let data = frame_examples(utterances, targets)?;
    let report = train_frame_ce(&mut model, &data, &config.train)?;
    Ok((model, report))
}

/// Mean per-frame cross-entropy of the model's cluster predictions.
pub fn cluster_ce(model: &RefModel, utterances: &[UntranscribedUtterance], targets: &ClusterTargets) -> Result<f64> {
    let data = frame_examples(utterances, targets)?;
    let per: Vec<(f64, usize)> = data
        .par_iter()
        .map(|ex| {
            let g = model.posteriors(&ex.features)?;
            Ok((ex.targets.iter().enumerate().map(|(t, &y)| -g.get(t, y)).sum(), ex.targets.len()))
        })
        .collect::<Result<_>>()?;
    let (loss, frames) = per.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(loss / frames.max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct UnsupIteration {
    pub model: RefModel,
    pub kmeans: KmeansFit,
    pub targets: ClusterTargets,
    pub report: TrainReport,
}

/// One round: embed with `prev`, cluster, label every frame, pretrain.
pub fn unsup_iteration(
    prev: Option<&RefModel>,
    utterances: &[UntranscribedUtterance],
    config: &UnsupConfig,
    iteration: usize,
) -> Result<UnsupIteration> {
    let seed = config.seed.wrapping_add(1000 * iteration as u64);
    let (dims, points) = collect_points(prev, config.cluster_input, utterances, config.stride)?;
    let kmeans = kmeans_fit(&points, dims, config.k, config.kmeans_iters, seed)?;
    log::info!(
        "unsup iteration {iteration}: k-means distortion {:.4} after {} steps",
        kmeans.distortion(),
        kmeans.distortion_history.len() - 1
    );
    let targets = generate_targets(prev, config.cluster_input, utterances, &kmeans.model)?;
    let init = if config.continue_training { prev } else { None };
    let (model, report) = pretrain(init, utterances, &targets, config.k, config, seed + 1)?;
    Ok(UnsupIteration {
        model,
        kmeans,
        targets,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = [1.0, 2.0, 3.0, 6.0, 5.0, 1.0];
        let fit = kmeans_fit(&pts, 2, 1, 10, 0).unwrap();
        assert!((fit.model.centroid(0)[0] - 3.0).abs() < 1e-12);
        assert!((fit.model.centroid(0)[1] - 3.0).abs() < 1e-12);
        // Mean squared distance: ((4+1) + (0+9) + (4+4)) / 3.
        assert!((fit.distortion() - 22.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_point_per_cluster() {
        let pts = [0.0, 0.0, 5.0, 5.0, -3.0, 2.0];
        let fit = kmeans_fit(&pts, 2, 3, 10, 4).unwrap();
        assert_eq!(fit.distortion(), 0.0);
        let mut ids = assign(&fit.model, &pts);
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn too_few_points() {
        assert!(kmeans_fit(&[1.0, 1.0], 1, 3, 5, 0).is_err());
        assert!(kmeans_fit(&[1.0, 1.0, 1.0], 1, 2, 5, 0).is_err());
    }

    #[test]
    fn ties_go_to_lower_id() {
        let m = KmeansModel::new(2, 1, vec![-1.0, 1.0]).unwrap();
        assert_eq!(assign(&m, &[0.0, 1.0, -1.0]), vec![0, 1, 0]);
    }

    #[test]
    fn blobs_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for i in 0..200 {
            let c = if i % 2 == 0 { -4.0 } else { 4.0 };
            for _ in 0..2 {
                let z: f64 = StandardNormal.sample(&mut rng);
                pts.push(c + z);
            }
            truth.push(i % 2);
        }
        let fit = kmeans_fit(&pts, 2, 2, 100, 1).unwrap();
        assert!(fit.converged);
        let ids = assign(&fit.model, &pts);
        let flip = ids[0] != truth[0];
        for (i, (&a, &t)) in ids.iter().zip(&truth).enumerate() {
            // Midpoint projection along the blob axis.
            let proj = (pts[2 * i] + pts[2 * i + 1]) / 2f64.sqrt();
            if proj.abs() > 3.0 {
                assert_eq!(a != t, flip);
            }
        }
    }

    #[test]
    fn centroid_file_round_trip() {
        let m = KmeansModel::new(2, 3, vec![0.5, 1.0, -2.0, 3.25, 0.0, 1e-3]).unwrap();
        let back = KmeansModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), m.to_bytes());
        assert!(KmeansModel::from_bytes(b"WSAM0001\0\0\0\0").is_err());
    }

    #[test]
    fn targets_jsonl_round_trip() {
        let t = ClusterTargets::new(vec![
            TargetEntry {
                id: "a".into(),
                targets: vec![0, 3, 3],
            },
            TargetEntry {
                id: "b".into(),
                targets: vec![1],
            },
        ])
        .unwrap();
        let text = t.to_jsonl().unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"id":"a","targets":[0,3,3]}"#);
        assert_eq!(ClusterTargets::parse_jsonl(&text).unwrap(), t);
    }
}
