//! The `MABVIT01` checkpoint container.
//!
//! Layout (integers are u64 little-endian):
//!
//! ```text
//! magic "MABVIT01" | config length | config text (UTF-8 key=value lines)
//! | per tensor, in name order: name length | name | rank | dims | f64 payload
//! ```
//!
//! The config text holds the model keys plus, when present, the input
//! normalization as `norm_mean` / `norm_std` comma-separated lists.

use std::fs;
use std::path::Path;

use mabvit_tensor::Tensor;

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::model::{build_model, param_shapes, parse_kv, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"MABVIT01";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub normalization: Option<ChannelStats>,
    pub params: ModelParams,
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn config_text(config: &ModelConfig, norm: Option<&ChannelStats>) -> String {
    let mut s = config.to_kv();
    if let Some(n) = norm {
        s.push_str(&format!("norm_mean={}\nnorm_std={}\n", join(&n.mean), join(&n.std)));
    }
    s
}

fn parse_config(text: &str) -> Result<(ModelConfig, Option<ChannelStats>)> {
    let mut map = parse_kv(text)?;
    let list = |v: Option<String>| -> Result<Option<Vec<f64>>> {
        v.map(|s| {
            s.split(',')
                .map(|x| x.parse().map_err(|_| Error::config(format!("bad number {x:?}"))))
                .collect()
        })
        .transpose()
    };
    let mean = list(map.remove("norm_mean"))?;
    let std = list(map.remove("norm_std"))?;
    let norm = match (mean, std) {
        (Some(mean), Some(std)) if mean.len() == std.len() => Some(ChannelStats { mean, std }),
        (None, None) => None,
        _ => return Err(Error::config("norm_mean and norm_std must both be present with equal length")),
    };
    let model_text: String = map.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    Ok((ModelConfig::from_kv(&model_text)?, norm))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let text = config_text(&self.config, self.normalization.as_ref());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (name, t) in self.params.named() {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, expected MABVIT01"));
        }
        let len = r.len("config length")?;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len, "config record")?)
            .map_err(|e| Error::format(at as u64, format!("config record is not UTF-8: {e}")))?;
        let (config, normalization) = parse_config(text).map_err(|e| Error::format(at as u64, e.to_string()))?;
        let expected = param_shapes(&config);
        let mut tensors = Vec::with_capacity(expected.len());
        for (want_name, want_shape) in &expected {
            let at = r.pos;
            if r.pos == bytes.len() {
                return Err(Error::format(at as u64, format!("missing tensor {want_name}")));
            }
            let n = r.len("name length")?;
            let name = r.take(n, "tensor name")?;
            if name != want_name.as_bytes() {
                return Err(Error::format(
                    at as u64,
                    format!("expected tensor {want_name}, found {:?}", String::from_utf8_lossy(name)),
                ));
            }
            let rank = r.len("rank")?;
            if rank != want_shape.len() {
                return Err(Error::format(at as u64, format!("tensor {want_name}: rank {rank}, expected {}", want_shape.len())));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len("dimension")?);
            }
            if &shape != want_shape {
                return Err(Error::format(
                    at as u64,
                    format!("tensor {want_name}: shape {shape:?}, expected {want_shape:?}"),
                ));
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 8, "tensor payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::param(data, &shape)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after last tensor"));
        }
        let params = build_model(&config, 0)?.with_tensors(&tensors)?;
        Ok(Checkpoint {
            config,
            normalization,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated while reading {what} at byte {}", self.pos),
            )),
        }
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len().max(1 << 20))
            .ok_or_else(|| Error::format(at as u64, format!("{what} {v} is implausible")))
    }
}
