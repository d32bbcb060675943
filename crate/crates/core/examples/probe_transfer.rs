//! Paired scratch versus pre-trained probe on the phantom segmentation
//! task.
//!
//! Run: `cargo run --release --example probe_transfer`

use std::sync::Arc;

use voco::eval::{probe_transfer, ProbeConfig, ProbeTask};
use voco::trainer::{Trainer, TrainerConfig};
use voco::volume::generate_phantom;
use voco::{PhantomSpec, Region};

fn main() {
    let volumes: Vec<_> = (0..12)
        .map(|i| {
            let spec = PhantomSpec::standard(Region::ALL[i % 3], [64, 64, 64], 11);
            Arc::new(generate_phantom(&spec, (i / 3) as u64).unwrap())
        })
        .collect();
    let cfg = TrainerConfig::default();
    let mut trainer = Trainer::<f32>::new(cfg.clone(), volumes).unwrap();
    trainer.run(50, |_| Ok(())).unwrap();

    let probe = ProbeConfig {
        task: ProbeTask::PhantomSeg,
        steps: 150,
        seeds: vec![0],
        labeled: 6,
        eval_volumes: 3,
        full_network: true,
        ..ProbeConfig::default()
    };
    let report = probe_transfer(Some(trainer.model()), cfg.feature_dim, &probe).unwrap();
    print!("{}", report.to_text());
}
