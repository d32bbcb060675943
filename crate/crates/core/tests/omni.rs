//! Pseudo-labelling and stage plumbing with injected segmenters.

use voco::omni::{
    generate_pseudo_labels, merge_supervised, stage1, stage2, OmniConfig, OmniError, Prediction, PseudoLabeledSample, Segmenter,
};
use voco::trainer::TrainerConfig;
use voco::volume::{generate_phantom, Dataset, PhantomSpec, Split, VolumeError};
use voco::{Precision, Region, Volume};

/// Recovers organ classes of a noiseless phantom from voxel intensity.
struct IntensityOracle {
    specs: Vec<PhantomSpec>,
}

impl Segmenter for IntensityOracle {
    fn predict(&self, v: &Volume) -> voco::omni::Result<Prediction> {
        let spec = self.specs.iter().find(|s| s.region == v.region()).expect("region covered");
        let labels = v
            .data()
            .iter()
            .map(|&x| spec.organs.iter().find(|o| (o.intensity as f32 - x).abs() < 1e-6).map_or(0, |o| o.class_id))
            .collect();
        Ok(Prediction { labels, confidence: 1.0 })
    }
}

/// Fixed confidence per volume index, all-background labels.
struct Scripted(Vec<f64>);

impl Segmenter for Scripted {
    fn predict(&self, v: &Volume) -> voco::omni::Result<Prediction> {
        let i = (v.data()[0] * 1000.0).round() as usize;
        Ok(Prediction { labels: vec![0; v.voxel_count()], confidence: self.0[i] })
    }
}

fn noiseless(region: Region) -> PhantomSpec {
    PhantomSpec { noise_sigma: 0.0, ..PhantomSpec::standard(region, [32, 32, 16], 8) }
}

#[test]
fn oracle_pseudo_labels_match_ground_truth() {
    let specs: Vec<PhantomSpec> = Region::ALL.iter().map(|&r| noiseless(r)).collect();
    let mut truth = Vec::new();
    let mut unlabeled = Dataset::new();
    for (i, spec) in specs.iter().enumerate() {
        for j in 0..2 {
            let v = generate_phantom(spec, j).unwrap();
            truth.push(v.labels().unwrap().to_vec());
            unlabeled.push(format!("u{i}{j}"), v, false, Split::Train);
        }
    }
    assert!(unlabeled.volumes().all(|v| v.labels().is_none()));
    let out = generate_pseudo_labels(&IntensityOracle { specs }, &unlabeled, 0.8).unwrap();
    assert_eq!(out.len(), truth.len());
    for (s, t) in out.iter().zip(&truth) {
        assert!(s.accepted);
        assert_eq!(&s.labels, t);
    }
}

fn scripted_set(n: usize) -> Dataset {
    let mut d = Dataset::new();
    for i in 0..n {
        let mut data = vec![0.0f32; 8 * 8 * 8];
        data[0] = i as f32 / 1000.0;
        d.push(format!("v{i}"), Volume::new([8, 8, 8], [1.0; 3], data, Region::Head, None).unwrap(), false, Split::Train);
    }
    d
}

#[test]
fn acceptance_shrinks_as_the_threshold_rises() {
    let conf: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).fract()).collect();
    let seg = Scripted(conf.clone());
    let set = scripted_set(conf.len());
    let accepted = |t: f64| -> Vec<String> {
        generate_pseudo_labels(&seg, &set, t).unwrap().into_iter().filter(|s| s.accepted).map(|s| s.id).collect()
    };
    assert_eq!(accepted(0.0).len(), conf.len());
    let mut prev = accepted(0.0);
    for k in 1..=20 {
        let cur = accepted(k as f64 / 20.0);
        assert!(cur.iter().all(|id| prev.contains(id)), "threshold {k}/20 accepted a new sample");
        prev = cur;
    }
    let expected_at_one = conf.iter().filter(|&&c| c >= 1.0).count();
    assert_eq!(accepted(1.0).len(), expected_at_one);
    for s in generate_pseudo_labels(&seg, &set, 0.5).unwrap() {
        assert_eq!(s.accepted, s.confidence >= 0.5);
    }
}

#[test]
fn real_labels_take_precedence_over_pseudo_labels() {
    let spec = PhantomSpec::standard(Region::Chest, [16, 16, 8], 2);
    let v = generate_phantom(&spec, 0).unwrap();
    let mut labeled = Dataset::new();
    labeled.push("shared", v.clone(), true, Split::Train);
    let mut unlabeled = Dataset::new();
    unlabeled.push("shared", v.clone(), false, Split::Train);
    unlabeled.push("other", generate_phantom(&spec, 1).unwrap(), false, Split::Train);
    let fake = |id: &str| PseudoLabeledSample { id: id.into(), confidence: 1.0, accepted: true, labels: vec![5; v.voxel_count()] };
    let sup = merge_supervised(&labeled, &[fake("shared"), fake("other")], &unlabeled).unwrap();
    assert_eq!(sup.len(), 2);
    assert_eq!(sup[0].labels(), v.labels());
    assert!(sup[1].labels().unwrap().iter().all(|&l| l == 5));
}

fn tiny() -> (TrainerConfig, OmniConfig) {
    let t = TrainerConfig {
        grid_shape: [2, 2],
        cell_size: [8, 8, 8],
        batch_volumes: 2,
        feature_dim: 8,
        precision: Precision::F64,
        ..TrainerConfig::default()
    };
    (t, OmniConfig { seg_crop: [16, 16, 8], cycles: 2, ..OmniConfig::default() })
}

#[test]
fn training_stages_never_see_evaluation_volumes() {
    let (t, o) = tiny();
    let spec = PhantomSpec::standard(Region::Abdomen, [16, 16, 8], 1);
    let mut labeled = Dataset::new();
    labeled.push("a", generate_phantom(&spec, 0).unwrap(), true, Split::Train);
    labeled.push("a", generate_phantom(&spec, 0).unwrap(), true, Split::Eval);
    let r = stage1::<f64>(&labeled, &Dataset::new(), &t, &o, |_| {});
    assert!(matches!(r, Err(OmniError::Volume(VolumeError::EvalLeak(id))) if id == "a"));
}

#[test]
fn stages_are_deterministic() {
    let (t, o) = tiny();
    let spec = PhantomSpec::standard(Region::Head, [16, 16, 8], 3);
    let mut labeled = Dataset::new();
    let mut unlabeled = Dataset::new();
    for i in 0..2 {
        labeled.push(format!("l{i}"), generate_phantom(&spec, i).unwrap(), true, Split::Train);
        unlabeled.push(format!("u{i}"), generate_phantom(&spec, 10 + i).unwrap(), false, Split::Train);
    }
    let run = || {
        let mut log = Vec::new();
        let m = stage1::<f64>(&labeled, &unlabeled, &t, &o, |r| log.push(r.clone())).unwrap();
        (m, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let pseudo = generate_pseudo_labels(&a, &unlabeled, 0.0).unwrap();
    let c = stage2(a.clone(), &labeled, &pseudo, &unlabeled, &t, &o, |_| {}).unwrap();
    let d = stage2(a, &labeled, &pseudo, &unlabeled, &t, &o, |_| {}).unwrap();
    assert_eq!(c, d);
}
