//! Short pre-training run on a small phantom set, with a checkpoint and a
//! resumed continuation.
//!
//! Run: `cargo run --release --example pretrain`

use std::sync::Arc;

use voco::trainer::{Trainer, TrainerConfig};
use voco::volume::generate_phantom;
use voco::{PhantomSpec, Region};

fn main() {
    let volumes: Vec<_> = (0..12)
        .map(|i| {
            let spec = PhantomSpec::standard(Region::ALL[i % 3], [32, 32, 32], 11);
            Arc::new(generate_phantom(&spec, (i / 3) as u64).unwrap())
        })
        .collect();
    let cfg = TrainerConfig { grid_shape: [2, 2], cell_size: [16, 16, 16], batch_volumes: 6, feature_dim: 32, ..TrainerConfig::default() };
    let mut trainer = Trainer::<f32>::new(cfg.clone(), volumes.clone()).unwrap();
    trainer
        .run(40, |r| {
            if r.step % 10 == 0 {
                let l = &r.losses;
                println!("step {:3}  pred {:.4}  reg {:.4}  inter {:.4}  top1 {:.2}", r.step, l.l_pred, l.l_reg, l.l_inter, r.top1);
            }
            Ok(())
        })
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("step40.ckpt");
    trainer.save_checkpoint(&ckpt).unwrap();
    let mut resumed = Trainer::<f32>::resume(cfg, volumes, &ckpt).unwrap();
    let a = trainer.step().unwrap();
    let b = resumed.step().unwrap();
    println!("next step after resume identical: {}", a.losses == b.losses);
}
