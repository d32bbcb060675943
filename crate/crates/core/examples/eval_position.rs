//! Position top-1 of an untrained model against its chance band, then
//! after a short pre-training run.
//!
//! Run: `cargo run --release --example eval_position`

use std::sync::Arc;

use voco::eval::{eval_position, EvalConfig};
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
    let ecfg = EvalConfig { crops: 200, ..EvalConfig::default() };
    let mut trainer = Trainer::<f32>::new(TrainerConfig::default(), volumes.clone()).unwrap();

    let before = eval_position(trainer.model(), &volumes, &ecfg).unwrap();
    let (lo, hi) = before.chance_band();
    println!("untrained top-1 {:.3}, chance band [{lo:.3}, {hi:.3}]", before.top1);

    trainer.run(100, |_| Ok(())).unwrap();
    let after = eval_position(trainer.model(), &volumes, &ecfg).unwrap();
    println!("after 100 steps:\n{}", after.to_text());
}
