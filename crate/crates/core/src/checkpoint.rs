//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DTRCKPT1"
//! u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, f64 values
//! ```
//!
//! Parameters are stored under `params.<name>`, EMA weights under
//! `ema.<name>`. Metadata rides along as small tensors: `meta.step` (rank 0),
//! `meta.mask` (`[strategy, T, C, alpha, beta, seed_hi, seed_lo]`) and
//! `meta.model` (`[data_dim, width, n_blocks, block, routing, temb_dim]`).

use std::fs;
use std::path::Path;

use crate::denoiser::{BlockKind, DenoiserConfig, RoutingVariant};
use crate::masks::{MaskSpec, Strategy};
use crate::params::{ParamSet, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DTRCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub ema: ParamSet,
    pub step: u64,
    pub mask: MaskSpec,
    pub model: DenoiserConfig,
}

fn strategy_code(s: Strategy) -> f64 {
    match s {
        Strategy::Full => 0.0,
        Strategy::Random => 1.0,
        Strategy::Dtr => 2.0,
    }
}

fn meta(name: &str, values: Vec<f64>) -> Tensor {
    Tensor {
        name: name.to_string(),
        shape: if values.len() == 1 && name == "meta.step" {
            vec![]
        } else {
            vec![values.len()]
        },
        data: values,
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.mask;
        let c = &self.model;
        let mut tensors: Vec<Tensor> = Vec::new();
        for (prefix, set) in [("params", &self.params), ("ema", &self.ema)] {
            for t in set.tensors() {
                tensors.push(Tensor {
                    name: format!("{prefix}.{}", t.name),
                    ..t.clone()
                });
            }
        }
        tensors.push(meta("meta.step", vec![self.step as f64]));
        tensors.push(meta(
            "meta.mask",
            vec![
                strategy_code(m.strategy),
                m.tasks as f64,
                m.channels as f64,
                m.alpha,
                m.beta,
                (m.seed >> 32) as f64,
                (m.seed & 0xffff_ffff) as f64,
            ],
        ));
        tensors.push(meta(
            "meta.model",
            vec![
                c.data_dim as f64,
                c.width as f64,
                c.n_blocks as f64,
                match c.block {
                    BlockKind::Adm => 0.0,
                    BlockKind::Dit => 1.0,
                },
                match c.routing {
                    RoutingVariant::None => 0.0,
                    RoutingVariant::AdmStyle => 1.0,
                    RoutingVariant::DitStyle => 2.0,
                },
                c.temb_dim as f64,
            ],
        ));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::invalid("checkpoint", format!("tensor name too long: {}", t.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic bytes"));
        }
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        let mut ema = ParamSet::new();
        let (mut step, mut mask, mut model) = (None, None, None);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = r
                .take(len * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<_>>();
            if let Some(rest) = name.strip_prefix("params.") {
                params.push(Tensor { name: rest.to_string(), shape, data });
            } else if let Some(rest) = name.strip_prefix("ema.") {
                ema.push(Tensor { name: rest.to_string(), shape, data });
            } else {
                match name.as_str() {
                    "meta.step" => step = data.first().map(|&v| v as u64),
                    "meta.mask" => mask = Some(decode_mask(&data)?),
                    "meta.model" => model = Some(decode_model(&data)?),
                    other => {
                        return Err(Error::format("checkpoint", format!("unexpected tensor {other:?}")))
                    }
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes after last tensor"));
        }
        if !params.same_layout(&ema) {
            return Err(Error::format("checkpoint", "params and ema tensors differ"));
        }
        Ok(Checkpoint {
            params,
            ema,
            step: step.ok_or_else(|| Error::format("checkpoint", "missing meta.step"))?,
            mask: mask.ok_or_else(|| Error::format("checkpoint", "missing meta.mask"))?,
            model: model.ok_or_else(|| Error::format("checkpoint", "missing meta.model"))?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn decode_mask(v: &[f64]) -> Result<MaskSpec> {
    if v.len() != 7 {
        return Err(Error::format("checkpoint", "meta.mask must have 7 entries"));
    }
    let strategy = match v[0] as u8 {
        0 => Strategy::Full,
        1 => Strategy::Random,
        2 => Strategy::Dtr,
        _ => return Err(Error::format("checkpoint", "unknown mask strategy code")),
    };
    Ok(MaskSpec {
        strategy,
        tasks: v[1] as usize,
        channels: v[2] as usize,
        alpha: v[3],
        beta: v[4],
        seed: ((v[5] as u64) << 32) | v[6] as u64,
    })
}

fn decode_model(v: &[f64]) -> Result<DenoiserConfig> {
    if v.len() != 6 {
        return Err(Error::format("checkpoint", "meta.model must have 6 entries"));
    }
    let block = match v[3] as u8 {
        0 => BlockKind::Adm,
        1 => BlockKind::Dit,
        _ => return Err(Error::format("checkpoint", "unknown block code")),
    };
    let routing = match v[4] as u8 {
        0 => RoutingVariant::None,
        1 => RoutingVariant::AdmStyle,
        2 => RoutingVariant::DitStyle,
        _ => return Err(Error::format("checkpoint", "unknown routing code")),
    };
    Ok(DenoiserConfig {
        data_dim: v[0] as usize,
        width: v[1] as usize,
        n_blocks: v[2] as usize,
        block,
        routing,
        temb_dim: v[5] as usize,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::build_denoiser;

    fn sample() -> Checkpoint {
        let model = DenoiserConfig::routed(2, 4, 1, BlockKind::Dit);
        let params = build_denoiser(model, 3).unwrap().into_params();
        let mut ema = params.clone();
        ema.scale(0.5);
        Checkpoint {
            params,
            ema,
            step: 12345,
            mask: MaskSpec::random(10, 4, 0.5, u64::MAX - 7),
            model,
        }
    }

    #[test]
    fn round_trip() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
    }

    #[test]
    fn header_fields() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes().unwrap();
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(count, 2 * ckpt.params.tensors().len() + 3);
        let name_len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[14..14 + name_len], b"params.input.w");
        assert_eq!(bytes[14 + name_len], 2);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
