//! Routing mask banks.
//!
//! A [`MaskBank`] holds one binary row of length `C` per denoising task. Row
//! `i` (0-based) belongs to timestep `t = i + 1`. Every row activates exactly
//! `C_beta = floor(beta * C)` channels.
//!
//! Three strategies are provided:
//!
//! - `full`: every channel active for every task (routing disabled).
//! - `random`: each row independently activates a uniformly random subset.
//! - `dtr`: each row activates a contiguous window of `C_beta` channels whose
//!   offset slides from `0` to `C - C_beta` as `round((C - C_beta) * x^alpha)`
//!   with `x` linearly spaced on `[0, 1]` over the `T` rows.

mod io;

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub use io::{
    mask_pgm_string, overlap_pgm_string, parse_csv, read_csv, to_csv_string, write_csv,
    write_mask_pgm, write_overlap_pgm,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Full,
    Random,
    Dtr,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::Random => "random",
            Strategy::Dtr => "dtr",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Strategy::Full),
            "random" => Ok(Strategy::Random),
            "dtr" => Ok(Strategy::Dtr),
            other => Err(Error::invalid(
                "mask strategy",
                format!("unknown strategy {other:?} (expected full, random or dtr)"),
            )),
        }
    }
}

/// Parameters of a mask bank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub strategy: Strategy,
    /// Number of denoising tasks (timesteps), `T`.
    pub tasks: usize,
    /// Channel count, `C`.
    pub channels: usize,
    /// Window-shift exponent. Only read by the `dtr` strategy.
    pub alpha: f64,
    /// Activation ratio in `(0, 1]`.
    pub beta: f64,
    /// PRNG seed. Only read by the `random` strategy.
    pub seed: u64,
}

impl MaskSpec {
    pub fn dtr(tasks: usize, channels: usize, alpha: f64, beta: f64) -> Self {
        MaskSpec {
            strategy: Strategy::Dtr,
            tasks,
            channels,
            alpha,
            beta,
            seed: 0,
        }
    }

    pub fn random(tasks: usize, channels: usize, beta: f64, seed: u64) -> Self {
        MaskSpec {
            strategy: Strategy::Random,
            tasks,
            channels,
            alpha: 1.0,
            beta,
            seed,
        }
    }

    pub fn full(tasks: usize, channels: usize) -> Self {
        MaskSpec {
            strategy: Strategy::Full,
            tasks,
            channels,
            alpha: 1.0,
            beta: 1.0,
            seed: 0,
        }
    }

    /// Window size `floor(beta * C)`; `C` for the full strategy.
    pub fn active_channels(&self) -> usize {
        match self.strategy {
            Strategy::Full => self.channels,
            _ => (self.beta * self.channels as f64).floor() as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks < 1 {
            return Err(Error::invalid("mask spec", "T must be at least 1"));
        }
        if self.channels < 1 {
            return Err(Error::invalid("mask spec", "C must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid(
                "mask spec",
                format!("beta must lie in (0, 1], got {}", self.beta),
            ));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(
                "mask spec",
                format!("alpha must be a positive finite number, got {}", self.alpha),
            ));
        }
        if self.strategy == Strategy::Full && self.beta != 1.0 {
            return Err(Error::invalid(
                "mask spec",
                format!("the full strategy requires beta = 1, got {}", self.beta),
            ));
        }
        if self.active_channels() < 1 {
            return Err(Error::invalid(
                "mask spec",
                format!(
                    "C_beta = floor(beta * C) = floor({} * {}) must be at least 1",
                    self.beta, self.channels
                ),
            ));
        }
        Ok(())
    }

    /// Builds the bank described by this spec.
    pub fn build(&self) -> Result<MaskBank> {
        match self.strategy {
            Strategy::Full => {
                self.validate()?;
                make_full_mask(self.tasks, self.channels)
            }
            Strategy::Random => make_random_mask(self),
            Strategy::Dtr => make_dtr_mask(self),
        }
    }
}

/// Immutable `T x C` binary routing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBank {
    spec: MaskSpec,
    bits: Vec<u8>,
}

impl MaskBank {
    fn from_rows(spec: MaskSpec, bits: Vec<u8>) -> Self {
        debug_assert_eq!(bits.len(), spec.tasks * spec.channels);
        MaskBank { spec, bits }
    }

    pub fn spec(&self) -> &MaskSpec {
        &self.spec
    }

    pub fn tasks(&self) -> usize {
        self.spec.tasks
    }

    pub fn channels(&self) -> usize {
        self.spec.channels
    }

    pub fn active_channels(&self) -> usize {
        self.spec.active_channels()
    }

    /// Row `i` (0-based), i.e. the mask of timestep `i + 1`.
    pub fn row(&self, i: usize) -> &[u8] {
        let c = self.spec.channels;
        &self.bits[i * c..(i + 1) * c]
    }

    /// Mask used at timestep `t` (1-based). Errors when `t` is outside `1..=T`.
    pub fn row_for_timestep(&self, t: usize) -> Result<&[u8]> {
        if t < 1 || t > self.spec.tasks {
            return Err(Error::OutOfRange {
                what: "timestep",
                index: t,
                lo: 1,
                hi: self.spec.tasks,
            });
        }
        Ok(self.row(t - 1))
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.bits.chunks(self.spec.channels)
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b == 1)
    }

    /// Start of the single active run of every row, if every row is one
    /// contiguous run of ones.
    pub fn window_offsets(&self) -> Option<Vec<usize>> {
        self.rows()
            .map(|row| {
                let start = row.iter().position(|&b| b == 1)?;
                let len = row[start..].iter().take_while(|&&b| b == 1).count();
                row[start + len..]
                    .iter()
                    .all(|&b| b == 0)
                    .then_some(start)
            })
            .collect()
    }

    fn check_row(&self, i: usize) -> Result<()> {
        if i >= self.spec.tasks {
            return Err(Error::OutOfRange {
                what: "mask row",
                index: i,
                lo: 0,
                hi: self.spec.tasks - 1,
            });
        }
        Ok(())
    }
}

/// Offsets of the sliding window for each row of a DTR bank.
///
/// `x_i = i / (T - 1)` (with `x_0 = 0` when `T = 1`), rounded half away from
/// zero.
pub fn dtr_offsets(tasks: usize, channels: usize, active: usize, alpha: f64) -> Vec<usize> {
    let free = (channels - active) as f64;
    (0..tasks)
        .map(|i| {
            let x = if tasks > 1 {
                i as f64 / (tasks - 1) as f64
            } else {
                0.0
            };
            (free * x.powf(alpha)).round() as usize
        })
        .collect()
}

pub fn make_dtr_mask(spec: &MaskSpec) -> Result<MaskBank> {
    if spec.strategy != Strategy::Dtr {
        return Err(Error::invalid(
            "mask spec",
            format!("make_dtr_mask called with strategy {}", spec.strategy),
        ));
    }
    spec.validate()?;
    let (t, c, active) = (spec.tasks, spec.channels, spec.active_channels());
    let mut bits = vec![0u8; t * c];
    for (i, offset) in dtr_offsets(t, c, active, spec.alpha).into_iter().enumerate() {
        bits[i * c + offset..i * c + offset + active].fill(1);
    }
    Ok(MaskBank::from_rows(*spec, bits))
}

pub fn make_random_mask(spec: &MaskSpec) -> Result<MaskBank> {
    if spec.strategy != Strategy::Random {
        return Err(Error::invalid(
            "mask spec",
            format!("make_random_mask called with strategy {}", spec.strategy),
        ));
    }
    spec.validate()?;
    let (t, c, active) = (spec.tasks, spec.channels, spec.active_channels());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut bits = vec![0u8; t * c];
    for row in bits.chunks_mut(c) {
        for ch in index::sample(&mut rng, c, active) {
            row[ch] = 1;
        }
    }
    Ok(MaskBank::from_rows(*spec, bits))
}

pub fn make_full_mask(tasks: usize, channels: usize) -> Result<MaskBank> {
    let spec = MaskSpec::full(tasks, channels);
    spec.validate()?;
    Ok(MaskBank::from_rows(spec, vec![1; tasks * channels]))
}

/// Number of channels active in both row `i` and row `j`.
pub fn shared_channels(bank: &MaskBank, i: usize, j: usize) -> Result<usize> {
    bank.check_row(i)?;
    bank.check_row(j)?;
    Ok(bank
        .row(i)
        .iter()
        .zip(bank.row(j))
        .filter(|(&a, &b)| a == 1 && b == 1)
        .count())
}

/// `T x T` matrix of [`shared_channels`] for every pair of rows.
pub fn overlap_matrix(bank: &MaskBank) -> Vec<Vec<usize>> {
    let t = bank.tasks();
    let mut out = vec![vec![0usize; t]; t];
    for i in 0..t {
        for j in i..t {
            let shared = bank
                .row(i)
                .iter()
                .zip(bank.row(j))
                .filter(|(&a, &b)| a == 1 && b == 1)
                .count();
            out[i][j] = shared;
            out[j][i] = shared;
        }
    }
    out
}

fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc *= BigUint::from(n - i);
        acc /= BigUint::from(i + 1);
    }
    acc
}

/// Expected overlap of two independent uniformly random `C_beta`-subsets of
/// `C` channels: the mean of the hypergeometric distribution, summed term by
/// term in exact rational arithmetic.
pub fn expected_shared_channels(channels: usize, active: usize) -> Result<f64> {
    if active < 1 || active > channels {
        return Err(Error::invalid(
            "channel counts",
            format!("need 1 <= C_beta <= C, got C_beta = {active}, C = {channels}"),
        ));
    }
    let total = binomial(channels, active);
    let numerator = (0..=active).fold(BigUint::zero(), |acc, k| {
        acc + BigUint::from(k) * binomial(active, k) * binomial(channels - active, active - k)
    });
    let ratio = BigRational::new(numerator.into(), total.into());
    Ok(ratio
        .to_f64()
        .expect("hypergeometric mean is a finite rational"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn active_sets(bank: &MaskBank) -> Vec<Vec<usize>> {
        bank.rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, &b)| b == 1)
                    .map(|(c, _)| c + 1)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn dtr_linear_shift_table() {
        let bank = make_dtr_mask(&MaskSpec::dtr(4, 5, 1.0, 0.6)).unwrap();
        assert_eq!(bank.window_offsets().unwrap(), vec![0, 1, 1, 2]);
        assert_eq!(
            active_sets(&bank),
            vec![vec![1, 2, 3], vec![2, 3, 4], vec![2, 3, 4], vec![3, 4, 5]]
        );
    }

    #[test]
    fn dtr_alpha_four_table() {
        let bank = make_dtr_mask(&MaskSpec::dtr(4, 5, 4.0, 0.6)).unwrap();
        assert_eq!(bank.window_offsets().unwrap(), vec![0, 0, 0, 2]);
        assert_eq!(
            active_sets(&bank),
            vec![vec![1, 2, 3], vec![1, 2, 3], vec![1, 2, 3], vec![3, 4, 5]]
        );
    }

    #[test]
    fn dtr_beta_one_is_full() {
        for alpha in [0.5, 1.0, 3.0] {
            let dtr = make_dtr_mask(&MaskSpec::dtr(7, 6, alpha, 1.0)).unwrap();
            assert!(dtr.is_all_ones());
            assert_eq!(dtr.bits, make_full_mask(7, 6).unwrap().bits);
        }
    }

    #[test]
    fn single_task_has_zero_offset() {
        let bank = make_dtr_mask(&MaskSpec::dtr(1, 10, 2.0, 0.5)).unwrap();
        assert_eq!(bank.window_offsets().unwrap(), vec![0]);
    }

    #[test]
    fn validation_names_the_bound() {
        let err = MaskSpec::dtr(4, 5, 1.0, 1.5).validate().unwrap_err();
        assert!(err.to_string().contains("beta"));
        let err = MaskSpec::dtr(4, 5, 0.0, 0.5).validate().unwrap_err();
        assert!(err.to_string().contains("alpha"));
        let err = MaskSpec::dtr(4, 3, 1.0, 0.2).validate().unwrap_err();
        assert!(err.to_string().contains("C_beta"));
        let err = MaskSpec::dtr(0, 3, 1.0, 0.5).validate().unwrap_err();
        assert!(err.to_string().contains("T must"));
        assert!(make_random_mask(&MaskSpec::dtr(4, 5, 1.0, 0.6)).is_err());
    }

    #[test]
    fn random_rows_have_fixed_cardinality_and_are_seeded() {
        let spec = MaskSpec::random(3, 4, 0.5, 11);
        let a = make_random_mask(&spec).unwrap();
        for row in a.rows() {
            assert_eq!(row.iter().filter(|&&b| b == 1).count(), 2);
        }
        assert_eq!(a, make_random_mask(&spec).unwrap());
        let other = make_random_mask(&MaskSpec::random(50, 16, 0.5, 12)).unwrap();
        let again = make_random_mask(&MaskSpec::random(50, 16, 0.5, 11)).unwrap();
        assert_ne!(other.bits, again.bits);
    }

    #[test]
    fn full_mask_cases() {
        assert_eq!(make_full_mask(1, 1).unwrap().row(0), &[1]);
        let bank = make_full_mask(3, 2).unwrap();
        assert!(bank.rows().all(|r| r == [1, 1]));
        assert!(make_full_mask(0, 2).is_err());
    }

    #[test]
    fn shared_channel_cases() {
        let bank = make_dtr_mask(&MaskSpec::dtr(4, 5, 1.0, 0.6)).unwrap();
        assert_eq!(shared_channels(&bank, 2, 2).unwrap(), 3);
        assert_eq!(shared_channels(&bank, 0, 3).unwrap(), 1);
        assert!(shared_channels(&bank, 0, 4).is_err());
        let full = make_full_mask(5, 7).unwrap();
        assert_eq!(shared_channels(&full, 0, 4).unwrap(), 7);
    }

    #[test]
    fn dtr_overlap_row_zero() {
        let bank = make_dtr_mask(&MaskSpec::dtr(4, 5, 1.0, 0.6)).unwrap();
        let m = overlap_matrix(&bank);
        assert_eq!(m[0], vec![3, 2, 2, 1]);
        let full = overlap_matrix(&make_full_mask(3, 4).unwrap());
        assert!(full.iter().flatten().all(|&v| v == 4));
    }

    #[test]
    fn expected_shared_examples() {
        assert_eq!(expected_shared_channels(10, 5).unwrap(), 2.5);
        assert_eq!(expected_shared_channels(4, 1).unwrap(), 0.25);
        assert_eq!(expected_shared_channels(9, 9).unwrap(), 9.0);
        assert!(expected_shared_channels(4, 5).is_err());
        assert!(expected_shared_channels(4, 0).is_err());
    }

    #[test]
    fn row_for_timestep_is_one_based() {
        let bank = make_dtr_mask(&MaskSpec::dtr(4, 5, 1.0, 0.6)).unwrap();
        assert_eq!(bank.row_for_timestep(1).unwrap(), bank.row(0));
        assert_eq!(bank.row_for_timestep(4).unwrap(), bank.row(3));
        assert!(bank.row_for_timestep(0).is_err());
        assert!(bank.row_for_timestep(5).is_err());
    }
}
