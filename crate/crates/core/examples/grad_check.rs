//! Finite-difference check of the prediction and regularisation losses
//! through cosine similarities of a small feature matrix.
//!
//! Run: `cargo run --release --example grad_check`

use rand::Rng;
use voco::autodiff::{grad_check, Tape, Tensor};
use voco::losses::{loss_pred, loss_reg, similarity_rows};

fn main() {
    let mut rng = voco::rng::stream(5, 0);
    let x: Vec<f64> = (0..5 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = [0.1, 0.4, 0.0, 0.5];
    // Row 0 is the random crop, rows 1..5 the base crops.
    let f = |tape: &mut Tape<f64>, flat| {
        let k = tape.slice(flat, 0, vec![6])?;
        let q = tape.slice(flat, 6, vec![4, 6])?;
        let s = similarity_rows(tape, k, q).expect("shapes line up");
        let s = tape.relu(s);
        let pred = loss_pred(tape, s, &labels).expect("label length matches");
        let reg = loss_reg(tape, q).expect("four base crops");
        tape.add(pred, reg)
    };
    let report = grad_check(f, &Tensor::vector(x.clone()), 1e-6, 1e-6).unwrap();
    println!("parameters: {}", x.len());
    println!("max relative error: {:.2e} at index {}", report.max_rel_error, report.worst_index);
    println!("passed: {}", report.passed);
}
