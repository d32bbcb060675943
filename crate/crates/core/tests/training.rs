//! Trainer behaviour across steps: resume, EMA trajectory, routing and
//! checkpoint compatibility.

use std::sync::Arc;

use voco::losses::Route;
use voco::model::ModelError;
use voco::trainer::{load_model, BalancedSampler, Trainer, TrainerConfig, TrainerError};
use voco::volume::{generate_phantom, PhantomSpec};
use voco::{Precision, Region, Volume};

fn cfg() -> TrainerConfig {
    TrainerConfig {
        grid_shape: [2, 2],
        cell_size: [8, 8, 8],
        batch_volumes: 4,
        feature_dim: 8,
        precision: Precision::F64,
        seed: 21,
        ..TrainerConfig::default()
    }
}

fn volumes() -> Vec<Arc<Volume>> {
    let mut out = Vec::new();
    for region in [Region::Abdomen, Region::Chest] {
        let spec = PhantomSpec::standard(region, [16, 16, 12], 4);
        out.extend((0..3).map(|i| Arc::new(generate_phantom(&spec, i).unwrap())));
    }
    out
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let mut straight = Trainer::<f64>::new(cfg(), volumes()).unwrap();
    let mut interrupted = Trainer::<f64>::new(cfg(), volumes()).unwrap();
    for _ in 0..3 {
        straight.step().unwrap();
        interrupted.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    interrupted.save_checkpoint(&path).unwrap();
    drop(interrupted);
    let mut resumed = Trainer::<f64>::resume(cfg(), volumes(), &path).unwrap();
    for _ in 0..10 {
        let a = straight.step().unwrap();
        let b = resumed.step().unwrap();
        assert_eq!((a.step, a.losses, a.top1), (b.step, b.losses, b.top1));
    }
    assert_eq!(straight.model(), resumed.model());
}

#[test]
fn teacher_follows_the_ema_closed_form() {
    let c = cfg();
    let mut t = Trainer::<f64>::new(c.clone(), volumes()).unwrap();
    let flat = |ps: Vec<&voco::Tensor<f64>>| ps.iter().flat_map(|p| p.data().to_vec()).collect::<Vec<f64>>();
    let theta0 = flat(t.model().teacher.projector().params());
    let mut students = Vec::new();
    for _ in 0..5 {
        t.step().unwrap();
        students.push(flat(t.model().student.params()));
    }
    let rho = c.rho;
    let big_t = students.len() as i32;
    let teacher = flat(t.model().teacher.projector().params());
    for i in 0..teacher.len() {
        // θ_T = ρ^T θ_0 + Σ_t (1-ρ) ρ^(T-t) θ_s(t), t = 1..T
        let mut want = rho.powi(big_t) * theta0[i];
        for (step, s) in students.iter().enumerate() {
            want += (1.0 - rho) * rho.powi(big_t - 1 - step as i32) * s[i];
        }
        assert!((teacher[i] - want).abs() <= 1e-12 * (1.0 + want.abs()), "coordinate {i}: {} vs {want}", teacher[i]);
    }
    assert_eq!(t.model().teacher.version(), 5);
}

#[test]
fn random_crops_go_to_the_student_and_base_crops_to_the_teacher() {
    let mut t = Trainer::<f64>::new(cfg(), volumes()).unwrap();
    let mut trace = Vec::new();
    t.step_traced(&mut trace).unwrap();
    assert_eq!(&trace[..2], &[Route::RandomStudent, Route::BaseTeacher]);
    // two volumes per region in a batch of four: (a, b) and (b, a) per region
    let inter = &trace[2..];
    assert_eq!(inter.len(), 16);
    for chunk in inter.chunks(4) {
        assert_eq!(chunk, &[Route::InterRandomStudent, Route::InterBaseStudent, Route::InterRandomTeacher, Route::InterBaseTeacher]);
    }
}

#[test]
fn sampler_balances_skewed_regions() {
    let mut regions = vec![Region::Abdomen; 100];
    regions.extend([Region::Chest; 10]);
    regions.extend([Region::Head; 10]);
    let s = BalancedSampler::new(&regions, 3).unwrap();
    let mut counts = [0usize; 3];
    for i in 0..3000 {
        counts[Region::ALL.iter().position(|&r| r == regions[s.draw(i)]).unwrap()] += 1;
    }
    assert_eq!(counts, [1000, 1000, 1000]);
}

#[test]
fn incompatible_checkpoints_are_rejected() {
    let t = Trainer::<f64>::new(cfg(), volumes()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    t.save_checkpoint(&path).unwrap();

    let wider = TrainerConfig { feature_dim: 16, ..cfg() };
    assert!(matches!(
        Trainer::<f64>::resume(wider.clone(), volumes(), &path),
        Err(TrainerError::Model(ModelError::IncompatibleCheckpoint(_)))
    ));
    assert!(matches!(load_model::<f64>(&path, &wider), Err(TrainerError::Model(ModelError::IncompatibleCheckpoint(_)))));

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(Trainer::<f64>::resume(cfg(), volumes(), &cut), Err(TrainerError::Model(ModelError::IncompatibleCheckpoint(_)))));
}

#[test]
fn empty_dataset_is_an_error() {
    assert!(matches!(Trainer::<f64>::new(cfg(), Vec::new()), Err(TrainerError::EmptyDataset)));
}
