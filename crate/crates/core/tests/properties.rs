//! Property tests for geometry, losses, the tape, EMA, storage and sampling.

use proptest::prelude::*;
use voco::autodiff::{Tape, Tensor};
use voco::crop::{build_base_grid, position_labels, top1_hit, CropBox};
use voco::losses::{loss_pred_value, loss_reg_value};
use voco::model::ema_update;
use voco::trainer::BalancedSampler;
use voco::volume::{read_volume, write_volume, PhantomSpec};
use voco::{Region, Volume};

fn grid_and_crop() -> impl Strategy<Value = ((usize, usize), [usize; 3], [usize; 2])> {
    (1usize..5, 1usize..5, 1usize..10, 1usize..10, 1usize..6).prop_flat_map(|(rows, cols, cx, cy, cz)| {
        let span = (0..=(cols - 1) * cx, 0..=(rows - 1) * cy);
        (Just((rows, cols)), Just([cx, cy, cz]), span.prop_map(|(x, y)| [x, y]))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn labels_sum_to_one_with_exact_support(((rows, cols), cell, off) in grid_and_crop()) {
        let dims = [cols * cell[0], rows * cell[1], cell[2]];
        let g = build_base_grid(dims, (rows, cols), cell).unwrap();
        let k = CropBox::new([off[0], off[1], 0], cell);
        let y = position_labels(&k, &g).unwrap();
        prop_assert!((y.sum() - 1.0).abs() < 1e-9);
        for (v, q) in y.values.iter().zip(g.cells()) {
            prop_assert_eq!(*v > 0.0, k.intersection_voxels(q) > 0);
            prop_assert!((0.0..=1.0).contains(v));
        }
        prop_assert!(y.values.iter().filter(|&&v| v > 0.0).count() <= 4);
    }

    #[test]
    fn shifting_by_one_pitch_shifts_labels(((rows, cols), cell, off) in grid_and_crop()) {
        let dims = [cols * cell[0], rows * cell[1], cell[2]];
        let g = build_base_grid(dims, (rows, cols), cell).unwrap();
        let y = position_labels(&CropBox::new([off[0], off[1], 0], cell), &g).unwrap();
        if off[0] + cell[0] <= (cols - 1) * cell[0] {
            let right = position_labels(&CropBox::new([off[0] + cell[0], off[1], 0], cell), &g).unwrap();
            for r in 0..rows {
                for c in 0..cols {
                    let want = if c == 0 { 0.0 } else { y.values[g.cell_index(r, c - 1)] };
                    prop_assert_eq!(right.values[g.cell_index(r, c)], want);
                }
            }
        }
        if off[1] + cell[1] <= (rows - 1) * cell[1] {
            let down = position_labels(&CropBox::new([off[0], off[1] + cell[1], 0], cell), &g).unwrap();
            for r in 0..rows {
                for c in 0..cols {
                    let want = if r == 0 { 0.0 } else { y.values[g.cell_index(r - 1, c)] };
                    prop_assert_eq!(down.values[g.cell_index(r, c)], want);
                }
            }
        }
    }

    #[test]
    fn pred_loss_vanishes_only_on_the_labels(
        y in prop::collection::vec(0.0f64..1.0, 1..20),
        i in any::<prop::sample::Index>(),
        delta in 1e-3f64..0.5,
    ) {
        prop_assert_eq!(loss_pred_value(&y, &y).unwrap(), 0.0);
        let i = i.index(y.len());
        let mut s = y.clone();
        s[i] += delta;
        let l1 = loss_pred_value(&s, &y).unwrap();
        prop_assert!(l1 > 0.0);
        s[i] += delta;
        prop_assert!(loss_pred_value(&s, &y).unwrap() > l1, "strictly increasing in d");
    }

    #[test]
    fn pred_loss_is_permutation_invariant(
        pairs in prop::collection::vec((-1.0f64..1.0, 0.0f64..1.0), 2..16),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let (s, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut voco::rng::stream(seed, 0));
        let (s2, y2): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
        let a = loss_pred_value(&s, &y).unwrap();
        let b = loss_pred_value(&s2, &y2).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn negative_labels_pull_similarity_to_zero(s in 0.01f64..1.0, t in 0.0f64..1.0) {
        let closer = s * t;
        let y = [0.0];
        prop_assert!(loss_pred_value(&[closer], &y).unwrap() <= loss_pred_value(&[s], &y).unwrap());
        prop_assert!(loss_pred_value(&[-closer], &y).unwrap() <= loss_pred_value(&[-s], &y).unwrap());
    }

    #[test]
    fn reg_loss_ignores_order_and_scale(
        qs in prop::collection::vec(prop::collection::vec(0.1f64..1.0, 4), 2..6),
        scales in prop::collection::vec(0.1f64..10.0, 6),
    ) {
        let base = loss_reg_value(&qs).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&base));
        let mut rev = qs.clone();
        rev.reverse();
        prop_assert!((loss_reg_value(&rev).unwrap() - base).abs() < 1e-12);
        let scaled: Vec<Vec<f64>> = qs.iter().zip(&scales).map(|(q, a)| q.iter().map(|v| v * a).collect()).collect();
        prop_assert!((loss_reg_value(&scaled).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn ema_contracts_each_coordinate(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..32),
        rho in 0.0f64..0.999,
    ) {
        let (mut t, s): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let before = t.clone();
        ema_update(&mut t, &s, rho).unwrap();
        for i in 0..t.len() {
            let want = rho * (before[i] - s[i]).abs();
            prop_assert!(((t[i] - s[i]).abs() - want).abs() <= 1e-12 * (1.0 + before[i].abs() + s[i].abs()));
        }
    }

    #[test]
    fn gradients_are_linear(
        x in prop::collection::vec(0.1f64..2.0, 1..12),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let grad = |ca: f64, cb: f64| {
            let mut tape = Tape::<f64>::new();
            let v = tape.param(Tensor::vector(x.clone()));
            let sq = tape.mul(v, v).unwrap();
            let f = tape.sum(sq);
            let lg = tape.log(v).unwrap();
            let g = tape.sum(lg);
            let fa = tape.scale(f, ca);
            let gb = tape.scale(g, cb);
            let h = tape.add(fa, gb).unwrap();
            tape.backward(h).unwrap().get_or_zeros(v, x.len())
        };
        let (gf, gg, gh) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..x.len() {
            let want = a * gf[i] + b * gg[i];
            prop_assert!((gh[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn zero_rate_dropout_is_the_identity(x in prop::collection::vec(-2.0f64..2.0, 1..16), seed in any::<u64>()) {
        let mut tape = Tape::<f64>::new();
        let v = tape.param(Tensor::vector(x.clone()));
        let d = tape.dropout(v, 0.0, &mut voco::rng::stream(seed, 0)).unwrap();
        prop_assert_eq!(tape.value(d).data(), &x[..]);
        let loss = tape.sum(d);
        let g = tape.backward(loss).unwrap().get_or_zeros(v, x.len());
        prop_assert!(g.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn tie_tolerant_top1(labels in prop::collection::vec(0.0f64..1.0, 1..16), pick in any::<prop::sample::Index>()) {
        let i = pick.index(labels.len());
        let mut scores = vec![0.0; labels.len()];
        scores[i] = 1.0;
        let best = labels.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(top1_hit(&scores, &labels), labels[i] == best);
    }

    #[test]
    fn sampler_windows_stay_balanced(
        sizes in prop::collection::vec(1usize..20, 1..4),
        seed in any::<u64>(),
        m in 1u64..20,
        start in 0u64..200,
    ) {
        let regions: Vec<Region> = sizes.iter().enumerate().flat_map(|(r, &n)| std::iter::repeat_n(Region::ALL[r], n)).collect();
        let s = BalancedSampler::new(&regions, seed).unwrap();
        let r = sizes.len() as u64;
        let mut counts = vec![0u64; sizes.len()];
        for i in start..start + r * m {
            let idx = s.draw(i);
            counts[Region::ALL.iter().position(|&x| x == regions[idx]).unwrap()] += 1;
        }
        prop_assert!(counts.iter().all(|&c| c.abs_diff(m) <= 1), "{counts:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn volumes_round_trip_bit_exactly(
        dims in (1usize..=64, 1usize..=64, 1usize..=64),
        labeled in any::<bool>(),
        seed in any::<u64>(),
    ) {
        use rand::Rng as _;
        let dims = [dims.0, dims.1, dims.2];
        let n = dims.iter().product::<usize>();
        let mut rng = voco::rng::stream(seed, 0);
        let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.gen::<u32>() & 0x3f7f_ffff)).collect();
        let labels = labeled.then(|| (0..n).map(|_| rng.gen_range(0..17u16)).collect());
        let v = Volume::new(dims, [0.5, 1.0, 2.5], data, Region::Chest, labels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        write_volume(&v, &path).unwrap();
        prop_assert_eq!(read_volume(&path).unwrap(), v);
    }

    #[test]
    fn phantoms_keep_the_relative_layout(seed in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
        for region in Region::ALL {
            let spec = PhantomSpec::standard(region, [64, 64, 64], seed);
            let (ca, cb) = (spec.jittered_centers(a), spec.jittered_centers(b));
            for i in 0..ca.len() {
                for j in 0..ca.len() {
                    for ax in 0..3 {
                        let sa = (ca[i][ax] - ca[j][ax]).signum();
                        let sb = (cb[i][ax] - cb[j][ax]).signum();
                        prop_assert_eq!(sa, sb);
                    }
                }
            }
        }
    }
}
