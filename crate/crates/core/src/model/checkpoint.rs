//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `NATC`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` rank, `u64` dims,
//! `u8` dtype tag and the row-major payload; finally the CRC32 of all
//! payload bytes. Besides the parameters the file carries the encoder
//! config, freeze flags, step counter and Adam moments so that a load
//! restores the store exactly.

use std::fs;
use std::path::Path;

use super::{tensor_specs, EncoderConfig, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NATC";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U64: u8 = 1;

const META_CONFIG: &str = "meta.config";
const META_FROZEN: &str = "meta.frozen";
const META_STEP: &str = "meta.step";

enum Payload {
    F32(Vec<f32>),
    U64(Vec<u64>),
}

struct Record {
    name: String,
    shape: Vec<usize>,
    payload: Payload,
}

fn records(p: &ParamStore<f32>) -> Vec<Record> {
    let c = &p.config;
    let mut out = vec![
        Record {
            name: META_CONFIG.into(),
            shape: vec![7],
            payload: Payload::U64(vec![
                c.d_model as u64,
                c.n_layers as u64,
                c.n_heads as u64,
                c.d_ff as u64,
                c.max_positions as u64,
                c.vocab_size as u64,
                c.dropout.to_bits(),
            ]),
        },
        Record {
            name: META_FROZEN.into(),
            shape: vec![p.tensors.len()],
            payload: Payload::U64(p.tensors.iter().map(|t| t.frozen as u64).collect()),
        },
        Record {
            name: META_STEP.into(),
            shape: vec![1],
            payload: Payload::U64(vec![p.step]),
        },
    ];
    for t in &p.tensors {
        out.push(Record {
            name: t.name.clone(),
            shape: t.shape.clone(),
            payload: Payload::F32(t.data.clone()),
        });
    }
    for (prefix, moments) in [("adam.m.", &p.adam_m), ("adam.v.", &p.adam_v)] {
        for (t, m) in p.tensors.iter().zip(moments) {
            out.push(Record {
                name: format!("{prefix}{}", t.name),
                shape: t.shape.clone(),
                payload: Payload::F32(m.clone()),
            });
        }
    }
    out
}

pub fn save_checkpoint(params: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let recs = records(params);
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    let mut crc = crc32fast::Hasher::new();
    for r in &recs {
        buf.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.name.as_bytes());
        buf.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &dim in &r.shape {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        let start = buf.len() + 1;
        match &r.payload {
            Payload::F32(v) => {
                buf.push(DTYPE_F32);
                v.iter()
                    .for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
            }
            Payload::U64(v) => {
                buf.push(DTYPE_U64);
                v.iter()
                    .for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
            }
        }
        crc.update(&buf[start..]);
    }
    buf.extend_from_slice(&crc.finalize().to_le_bytes());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
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
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated file: needed {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            std::str::from_utf8(CHECKPOINT_MAGIC).unwrap()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut crc = crc32fast::Hasher::new();
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        let n = n.ok_or_else(|| Error::Checkpoint(format!("tensor {name} shape overflows")))?;
        let tag = r.take(1)?[0];
        let width = match tag {
            DTYPE_F32 => 4,
            DTYPE_U64 => 8,
            t => {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: unknown dtype tag {t}"
                )))
            }
        };
        let size = n
            .checked_mul(width)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
        let raw = r.take(size)?;
        crc.update(raw);
        let payload = if tag == DTYPE_F32 {
            Payload::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            Payload::U64(
                raw.chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        };
        out.push(Record {
            name,
            shape,
            payload,
        });
    }
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let actual = crc.finalize();
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    Ok(out)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let recs = parse(&bytes)?;
    let mut by_name = std::collections::HashMap::new();
    for r in recs {
        let name = r.name.clone();
        if by_name.insert(name.clone(), r).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    let mut take_u64 = |name: &str| match by_name.remove(name) {
        Some(Record {
            payload: Payload::U64(v),
            ..
        }) => Ok(v),
        _ => Err(Error::Checkpoint(format!("missing or mistyped {name}"))),
    };
    let meta = take_u64(META_CONFIG)?;
    let frozen = take_u64(META_FROZEN)?;
    let step = take_u64(META_STEP)?;
    if meta.len() != 7 || step.len() != 1 {
        return Err(Error::Checkpoint("malformed metadata".into()));
    }
    let config = EncoderConfig {
        d_model: meta[0] as usize,
        n_layers: meta[1] as usize,
        n_heads: meta[2] as usize,
        d_ff: meta[3] as usize,
        max_positions: meta[4] as usize,
        vocab_size: meta[5] as usize,
        dropout: f64::from_bits(meta[6]),
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored config invalid: {e}")))?;
    let specs = tensor_specs(&config);
    if frozen.len() != specs.len() {
        return Err(Error::Shape(format!(
            "{} freeze flags for {} tensors",
            frozen.len(),
            specs.len()
        )));
    }
    let mut take_f32 = |name: &str, shape: &[usize]| match by_name.remove(name) {
        Some(Record {
            shape: s,
            payload: Payload::F32(v),
            ..
        }) => {
            if s != shape {
                Err(Error::Shape(format!(
                    "tensor {name} has shape {s:?}, config implies {shape:?}"
                )))
            } else {
                Ok(v)
            }
        }
        _ => Err(Error::Checkpoint(format!(
            "missing or mistyped tensor {name}"
        ))),
    };
    let mut tensors = Vec::with_capacity(specs.len());
    let (mut adam_m, mut adam_v) = (Vec::new(), Vec::new());
    for ((name, shape), &fz) in specs.into_iter().zip(&frozen) {
        let data = take_f32(&name, &shape)?;
        adam_m.push(take_f32(&format!("adam.m.{name}"), &shape)?);
        adam_v.push(take_f32(&format!("adam.v.{name}"), &shape)?);
        tensors.push(Tensor {
            name,
            shape,
            data,
            frozen: fz != 0,
        });
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(ParamStore {
        config,
        tensors,
        adam_m,
        adam_v,
        step: step[0],
    })
}

impl ParamStore<f32> {
    /// Errors with [`Error::Shape`] unless the store was built for `cfg`
    /// (dropout excluded: it does not affect parameter shapes).
    pub fn expect_config(&self, cfg: &EncoderConfig) -> Result<()> {
        let mut mine = self.config;
        mine.dropout = cfg.dropout;
        if mine != *cfg {
            return Err(Error::Shape(format!(
                "checkpoint config {:?} does not match {cfg:?}",
                self.config
            )));
        }
        Ok(())
    }
}
