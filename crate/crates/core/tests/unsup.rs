mod common;

use asrkit::am::{AcousticModel, ArchConfig, RefModel};
use asrkit::corpus::{synthesize_corpus, FeatureMatrix, SynthSpec, UntranscribedUtterance};
use asrkit::unsup::{
    assign, cluster_ce, generate_targets, kmeans_fit, unsup_iteration, ClusterInput, ClusterTargets, KmeansModel,
    UnsupConfig,
};
use common::*;
use proptest::prelude::*;

fn blobs(seed: u64, n: usize, dims: usize, centers: &[f64], sigma: f64) -> (Vec<f64>, Vec<usize>) {
    let mut r = rng(seed);
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % centers.len();
        labels.push(c);
        for _ in 0..dims {
            pts.push(centers[c] + sigma * normal(&mut r));
        }
    }
    (pts, labels)
}

#[test]
fn single_cluster_is_the_mean() {
    let (pts, _) = blobs(1, 97, 3, &[0.3, -2.0], 1.0);
    let fit = kmeans_fit(&pts, 3, 1, 20, 5).unwrap();
    for d in 0..3 {
        let mean = pts.iter().skip(d).step_by(3).sum::<f64>() / 97.0;
        assert!((fit.model.centroid(0)[d] - mean).abs() < 1e-12);
    }
    let var: f64 = pts
        .chunks(3)
        .map(|p| p.iter().zip(fit.model.centroid(0)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / 97.0;
    assert!((fit.distortion() - var).abs() < 1e-9);
}

#[test]
fn distinct_points_as_centroids() {
    let pts = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0];
    let fit = kmeans_fit(&pts, 2, 4, 10, 3).unwrap();
    assert!(fit.distortion().abs() < 1e-15);
    let mut ids = assign(&fit.model, &pts);
    ids.sort();
    assert_eq!(ids, vec![0, 1, 2, 3]);
    assert!(kmeans_fit(&pts, 2, 5, 10, 3).is_err());
    assert!(kmeans_fit(&[1.0, 1.0, 1.0, 1.0], 2, 2, 10, 3).is_err());
}

#[test]
fn separated_blobs_are_recovered() {
    let (pts, labels) = blobs(2, 400, 2, &[-4.0, 4.0], 0.7);
    let fit = kmeans_fit(&pts, 2, 2, 50, 9).unwrap();
    let ids = assign(&fit.model, &pts);
    let flip = ids[0] != labels[0];
    let mut checked = 0;
    for (i, p) in pts.chunks(2).enumerate() {
        // Distance to the bisector x + y = 0 between the blob centres.
        if (p[0] + p[1]).abs() / 2f64.sqrt() > 3.0 * 0.7 {
            assert_eq!(ids[i] != labels[i], flip, "point {i}");
            checked += 1;
        }
    }
    assert!(checked > 350);
}

#[test]
fn distortion_never_increases_and_fit_is_deterministic() {
    for seed in 0..20 {
        let (pts, _) = blobs(seed, 300, 4, &[-1.0, 0.0, 1.5, 3.0], 1.0);
        let a = kmeans_fit(&pts, 4, 6, 40, seed).unwrap();
        for w in a.distortion_history.windows(2) {
            assert!(w[1] <= w[0], "seed {seed}: {:?}", a.distortion_history);
        }
        let b = kmeans_fit(&pts, 4, 6, 40, seed).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.distortion_history, b.distortion_history);
        // Reassignment at the fixpoint is stable.
        if a.converged {
            let ids = assign(&a.model, &pts);
            let again = assign(&a.model, &pts);
            assert_eq!(ids, again);
        }
    }
}

#[test]
fn ties_go_to_the_lower_id() {
    let m = KmeansModel::new(2, 1, vec![-1.0, 1.0]).unwrap();
    assert_eq!(m.nearest(&[0.0]).0, 0);
    assert_eq!(m.nearest(&[1.0]).0, 1);
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path().join("c.wskm")).unwrap();
    assert_eq!(KmeansModel::load(dir.path().join("c.wskm")).unwrap(), m);
}

fn tiny_corpus() -> Vec<UntranscribedUtterance> {
    let spec = SynthSpec {
        n_supervised: 4,
        n_untranscribed: 30,
        n_test: 2,
        n_text: 20,
        ..SynthSpec::default()
    };
    synthesize_corpus(&spec).unwrap().untranscribed
}

#[test]
fn targets_align_with_frames() {
    let utts = tiny_corpus();
    let model = RefModel::new(ArchConfig::default(), utts[0].features.dims(), 5, 1).unwrap();
    let (dims, pts) = asrkit::unsup::collect_points(Some(&model), ClusterInput::Embedding, &utts, 1).unwrap();
    assert_eq!(dims, model.embed_dim());
    let km = kmeans_fit(&pts, dims, 8, 20, 2).unwrap();
    let t = generate_targets(Some(&model), ClusterInput::Embedding, &utts, &km.model).unwrap();
    assert_eq!(t.len(), utts.len());
    for u in &utts {
        let ids = t.get(&u.id).unwrap();
        assert_eq!(ids.len(), u.features.frames());
        assert!(ids.iter().all(|&k| k < 8));
    }
    let again = generate_targets(Some(&model), ClusterInput::Embedding, &utts, &km.model).unwrap();
    assert_eq!(t, again);
    assert_eq!(ClusterTargets::parse_jsonl(&t.to_jsonl().unwrap()).unwrap(), t);

    let constant = UntranscribedUtterance {
        id: "flat".into(),
        features: FeatureMatrix::new(7, utts[0].features.dims(), vec![0.5; 7 * utts[0].features.dims()]).unwrap(),
        domain: "A".into(),
    };
    let ct = generate_targets(Some(&model), ClusterInput::Embedding, &[constant], &km.model).unwrap();
    let ids = ct.get("flat").unwrap();
    assert!(ids.iter().all(|&k| k == ids[0]));
}

#[test]
fn pretraining_beats_the_untrained_model_and_iterations_are_reproducible() {
    let utts = tiny_corpus();
    let (train, held) = utts.split_at(24);
    let cfg = UnsupConfig {
        k: 8,
        train: asrkit::am::TrainConfig {
            epochs: 6,
            ..UnsupConfig::default().train
        },
        ..UnsupConfig::default()
    };
    let boot = RefModel::new(cfg.arch, train[0].features.dims(), 5, 3).unwrap();
    let it = unsup_iteration(Some(&boot), train, &cfg, 1).unwrap();
    assert_eq!(it.kmeans.model.k(), 8);
    let held_targets = generate_targets(Some(&boot), ClusterInput::Embedding, held, &it.kmeans.model).unwrap();
    let untrained = RefModel::new(cfg.arch, train[0].features.dims(), 8, 99).unwrap();
    let trained_ce = cluster_ce(&it.model, held, &held_targets).unwrap();
    let untrained_ce = cluster_ce(&untrained, held, &held_targets).unwrap();
    assert!(trained_ce < untrained_ce, "{trained_ce} vs {untrained_ce}");
    let again = unsup_iteration(Some(&boot), train, &cfg, 1).unwrap();
    assert_eq!(again.model, it.model);
    assert_eq!(again.targets, it.targets);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn assignment_is_nearest_centroid(seed in 0u64..5000, k in 1usize..6) {
        let (pts, _) = blobs(seed, 40, 3, &[-2.0, 0.5, 2.5], 1.0);
        let fit = kmeans_fit(&pts, 3, k, 15, seed).unwrap();
        let ids = assign(&fit.model, &pts);
        for (p, &j) in pts.chunks(3).zip(&ids) {
            let d = |c: &[f64]| p.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let dj = d(fit.model.centroid(j));
            for i in 0..k {
                prop_assert!(dj <= d(fit.model.centroid(i)) + 1e-12);
            }
        }
        for w in fit.distortion_history.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }
}
