//! Overlap-proportion labels for a crop against a 4×4 grid of base crops.
//!
//! Run: `cargo run --example position_labels`

use voco::crop::{build_base_grid, position_labels, sample_random_crop, CropBox};

fn main() {
    let grid = build_base_grid([40, 40, 1], (4, 4), [10, 10, 1]).unwrap();
    let crop = CropBox::new([6, 5, 0], [10, 10, 1]);
    let y = position_labels(&crop, &grid).unwrap();
    println!("crop at {:?}:", crop.origin);
    for row in y.values.chunks(4) {
        println!("  {}", row.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "));
    }

    let mut rng = voco::rng::stream(1, 0);
    for _ in 0..3 {
        let k = sample_random_crop(&grid, &mut rng);
        let y = position_labels(&k, &grid).unwrap();
        println!("random crop {:?}: dominant cell {}, sum {:.3}", k.origin, y.dominant(), y.sum());
    }
}
