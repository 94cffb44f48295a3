use std::f64::consts::PI;

use dtr_harness::data::{gen_dataset, gen_raw, Dataset, GAUSS8_RADIUS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn gauss8_modes_sit_on_the_circle() {
    let x = gen_raw(Dataset::Gauss8, 20_000, &mut ChaCha8Rng::seed_from_u64(3));
    let mut sums = [[0.0f64; 2]; 8];
    let mut counts = [0usize; 8];
    for row in x.outer_iter() {
        let angle = row[1].atan2(row[0]).rem_euclid(2.0 * PI);
        let k = ((angle / (2.0 * PI / 8.0)).round() as usize) % 8;
        sums[k][0] += row[0];
        sums[k][1] += row[1];
        counts[k] += 1;
    }
    for k in 0..8 {
        assert!(counts[k] > 2000);
        let cx = sums[k][0] / counts[k] as f64;
        let cy = sums[k][1] / counts[k] as f64;
        assert!((cx.hypot(cy) - GAUSS8_RADIUS).abs() < 0.05, "mode {k}");
    }
}

#[test]
fn large_gauss8_is_centred() {
    let n = 100_000;
    let x = gen_dataset(Dataset::Gauss8, n, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    for col in x.columns() {
        assert!(col.mean().unwrap().abs() < 4.0 / (n as f64).sqrt());
    }
}
