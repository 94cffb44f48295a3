use dtr_core::masks::{
    dtr_offsets, expected_shared_channels, overlap_matrix, parse_csv, shared_channels, to_csv_string,
    MaskSpec,
};
use proptest::prelude::*;

fn dtr_params() -> impl Strategy<Value = (usize, usize, f64, f64)> {
    (1usize..=64, 1usize..=64, 0.25f64..6.0, 0.05f64..=1.0)
        .prop_filter("at least one active channel", |&(_, c, _, b)| (b * c as f64).floor() >= 1.0)
}

proptest! {
    #[test]
    fn dtr_rows_are_contiguous_windows((t, c, alpha, beta) in dtr_params()) {
        let bank = MaskSpec::dtr(t, c, alpha, beta).build().unwrap();
        let active = (beta * c as f64).floor() as usize;
        let offsets = bank.window_offsets().unwrap();
        prop_assert_eq!(offsets[0], 0);
        prop_assert_eq!(offsets[t - 1], if t > 1 { c - active } else { 0 });
        for (i, row) in bank.rows().enumerate() {
            prop_assert_eq!(row.iter().filter(|&&b| b == 1).count(), active);
            let first = row.iter().position(|&b| b == 1).unwrap();
            prop_assert_eq!(first, offsets[i]);
            prop_assert!(row[first..first + active].iter().all(|&b| b == 1));
            if i > 0 {
                prop_assert!(offsets[i] >= offsets[i - 1]);
            }
        }
    }

    #[test]
    fn affinity_decays_with_distance((t, c, alpha, beta) in dtr_params()) {
        let bank = MaskSpec::dtr(t, c, alpha, beta).build().unwrap();
        let overlap = overlap_matrix(&bank);
        for i in 0..t {
            for j in i + 1..t {
                prop_assert!(overlap[i][j] <= overlap[i][j - 1]);
            }
            for j in (0..i).rev() {
                prop_assert!(overlap[i][j] <= overlap[i][j + 1]);
            }
        }
    }

    #[test]
    fn steeper_shift_keeps_more_rows_at_zero(t in 2usize..=64, c in 2usize..=64, alpha in 1.0f64..8.0, beta in 0.05f64..1.0) {
        let active = (beta * c as f64).floor() as usize;
        prop_assume!(active >= 1);
        let count = |a: f64| dtr_offsets(t, c, active, a).into_iter().filter(|&o| o == 0).count();
        prop_assert!(count(alpha) >= count(1.0));
    }

    #[test]
    fn random_rows_have_fixed_size(t in 1usize..=40, c in 1usize..=64, beta in 0.05f64..=1.0, seed in any::<u64>()) {
        let active = (beta * c as f64).floor() as usize;
        prop_assume!(active >= 1);
        let bank = MaskSpec::random(t, c, beta, seed).build().unwrap();
        for row in bank.rows() {
            prop_assert_eq!(row.iter().filter(|&&b| b == 1).count(), active);
        }
        prop_assert_eq!(&bank, &MaskSpec::random(t, c, beta, seed).build().unwrap());
    }

    #[test]
    fn csv_round_trip((t, c, alpha, beta) in dtr_params(), seed in any::<u64>(), random in any::<bool>()) {
        let spec = if random { MaskSpec::random(t, c, beta, seed) } else { MaskSpec::dtr(t, c, alpha, beta) };
        let bank = spec.build().unwrap();
        prop_assert_eq!(parse_csv(&to_csv_string(&bank)).unwrap(), bank);
    }
}

#[test]
fn hypergeometric_mean_is_square_over_width() {
    for c in 1..=64usize {
        for active in 1..=c {
            let want = (active * active) as f64 / c as f64;
            let got = expected_shared_channels(c, active).unwrap();
            assert!((got - want).abs() <= 1e-12, "C={c} Cb={active}: {got} vs {want}");
        }
    }
}

#[test]
fn random_overlap_matches_expectation() {
    let (c, beta) = (8, 0.5);
    let expected = expected_shared_channels(c, 4).unwrap();
    assert_eq!(expected, 2.0);
    // Hypergeometric variance n K (N - K) (N - n) / (N^2 (N - 1)).
    let var = 4.0 * 4.0 * 4.0 * 4.0 / (64.0 * 7.0);
    for seed in [1u64, 2, 3] {
        let bank = MaskSpec::random(2000, c, beta, seed).build().unwrap();
        let mut total = 0u64;
        let mut pairs = 0u64;
        for i in 0..2000 {
            for j in i + 1..2000 {
                total += shared_channels(&bank, i, j).unwrap() as u64;
                pairs += 1;
            }
        }
        assert!(pairs >= 100_000);
        let mean = total as f64 / pairs as f64;
        let se = (var / pairs as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * se, "seed {seed}: {mean}");
    }
}
