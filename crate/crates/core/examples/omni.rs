//! Two-stage omni-supervised run: labeled + unlabeled training, pseudo
//! labels above a confidence threshold, then retraining on both.
//!
//! Run: `cargo run --release --example omni`

use voco::omni::{accepted, dice, generate_pseudo_labels, stage1, stage2, OmniConfig};
use voco::trainer::TrainerConfig;
use voco::volume::{generate_phantom, Dataset, Split};
use voco::{PhantomSpec, Region};

fn main() {
    let spec = PhantomSpec::standard(Region::Abdomen, [32, 32, 32], 3);
    let mut labeled = Dataset::new();
    let mut unlabeled = Dataset::new();
    for i in 0..4 {
        labeled.push(format!("l{i}"), generate_phantom(&spec, i).unwrap(), true, Split::Train);
        unlabeled.push(format!("u{i}"), generate_phantom(&spec, 100 + i).unwrap(), false, Split::Train);
    }
    let truth: Vec<Vec<u16>> = (0..4).map(|i| generate_phantom(&spec, 100 + i).unwrap().labels().unwrap().to_vec()).collect();

    let tcfg = TrainerConfig { grid_shape: [2, 2], cell_size: [16, 16, 16], batch_volumes: 2, feature_dim: 32, ..TrainerConfig::default() };
    let ocfg = OmniConfig { seg_crop: [32, 32, 32], cycles: 150, seg_learning_rate: 0.5, threshold: 0.5, ..OmniConfig::default() };

    let s1 = stage1::<f32>(&labeled, &unlabeled, &tcfg, &ocfg, |_| {}).unwrap();
    let pseudo = generate_pseudo_labels(&s1, &unlabeled, ocfg.threshold).unwrap();
    for (p, t) in pseudo.iter().zip(&truth) {
        println!(
            "{}: confidence {:.3}, accepted {}, dice vs truth {:.3}",
            p.id,
            p.confidence,
            p.accepted,
            dice(&p.labels, t, ocfg.classes)
        );
    }
    let kept: Vec<_> = accepted(&pseudo).cloned().collect();
    let s2 = stage2(s1, &labeled, &kept, &unlabeled, &tcfg, &ocfg, |_| {}).unwrap();
    let v = unlabeled.entries()[0].volume.clone();
    let pred = s2.predict(&v).unwrap();
    println!("stage 2 on u0: confidence {:.3}, dice {:.3}", pred.confidence, dice(&pred.labels, &truth[0], ocfg.classes));
}
