//! Text formats for mask banks.
//!
//! CSV: the first line carries the spec fields in the order
//! `T,C,strategy,alpha,beta,seed`, followed by `T` lines of `C`
//! comma-separated `0`/`1` digits. PGM: plain (`P2`) greymap, one image row
//! per timestep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{overlap_matrix, MaskBank, MaskSpec, Strategy};
use crate::{Error, Result};

pub fn to_csv_string(bank: &MaskBank) -> String {
    let s = bank.spec();
    let mut out = format!(
        "{},{},{},{},{},{}\n",
        s.tasks, s.channels, s.strategy, s.alpha, s.beta, s.seed
    );
    for row in bank.rows() {
        let line: Vec<&str> = row.iter().map(|&b| if b == 1 { "1" } else { "0" }).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(bank: &MaskBank, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_csv_string(bank))?;
    Ok(())
}

fn field<T: std::str::FromStr>(value: &str, name: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::format("mask csv", format!("cannot parse {name} from {value:?}")))
}

pub fn parse_csv(text: &str) -> Result<MaskBank> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::format("mask csv", "empty file"))?;
    let parts: Vec<&str> = header.split(',').collect();
    if parts.len() != 6 {
        return Err(Error::format(
            "mask csv",
            format!("header must have 6 fields T,C,strategy,alpha,beta,seed, got {header:?}"),
        ));
    }
    let spec = MaskSpec {
        tasks: field(parts[0], "T")?,
        channels: field(parts[1], "C")?,
        strategy: parts[2].trim().parse::<Strategy>()?,
        alpha: field(parts[3], "alpha")?,
        beta: field(parts[4], "beta")?,
        seed: field(parts[5], "seed")?,
    };
    spec.validate()?;
    let mut bits = Vec::with_capacity(spec.tasks * spec.channels);
    let mut n_rows = 0;
    for (i, line) in lines.enumerate() {
        let before = bits.len();
        for cell in line.split(',') {
            match cell.trim() {
                "0" => bits.push(0),
                "1" => bits.push(1),
                other => {
                    return Err(Error::format(
                        "mask csv",
                        format!("row {i}: expected 0 or 1, got {other:?}"),
                    ))
                }
            }
        }
        if bits.len() - before != spec.channels {
            return Err(Error::format(
                "mask csv",
                format!(
                    "row {i} has {} entries, expected {}",
                    bits.len() - before,
                    spec.channels
                ),
            ));
        }
        n_rows += 1;
    }
    if n_rows != spec.tasks {
        return Err(Error::format(
            "mask csv",
            format!("found {n_rows} rows, header declares T = {}", spec.tasks),
        ));
    }
    Ok(MaskBank::from_rows(spec, bits))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<MaskBank> {
    parse_csv(&fs::read_to_string(path)?)
}

fn pgm(width: usize, height: usize, maxval: usize, values: impl Iterator<Item = Vec<usize>>) -> String {
    let mut out = format!("P2\n{width} {height}\n{maxval}\n");
    for row in values {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn mask_pgm_string(bank: &MaskBank) -> String {
    pgm(
        bank.channels(),
        bank.tasks(),
        1,
        bank.rows().map(|r| r.iter().map(|&b| b as usize).collect()),
    )
}

/// Overlap matrix image; grey levels are shared-channel counts with
/// `maxval = C_beta`.
pub fn overlap_pgm_string(bank: &MaskBank) -> String {
    let t = bank.tasks();
    pgm(t, t, bank.active_channels(), overlap_matrix(bank).into_iter())
}

pub fn write_mask_pgm(bank: &MaskBank, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, mask_pgm_string(bank))?;
    Ok(())
}

pub fn write_overlap_pgm(bank: &MaskBank, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, overlap_pgm_string(bank))?;
    Ok(())
}
