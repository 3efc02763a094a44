//! Checkpoint file: magic `HNCK1\0`, a u32 record count, then records of
//! (u32 name length, name, dtype byte, u32 rank, u32 dims, payload), all
//! little-endian.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{AdamConfig, AdamState, GradMap, TrainState};
use crate::arch::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"HNCK1\0";

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;
const DTYPE_F64: u8 = 2;
const DTYPE_U64: u8 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    /// Resolved run configuration as `key = value` text.
    pub config: String,
}

enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

struct Record {
    name: String,
    dims: Vec<usize>,
    payload: Payload,
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut out, records.len())?;
    for r in records {
        push_u32(&mut out, r.name.len())?;
        out.extend_from_slice(r.name.as_bytes());
        let code = match r.payload {
            Payload::F32(_) => DTYPE_F32,
            Payload::U8(_) => DTYPE_U8,
            Payload::F64(_) => DTYPE_F64,
            Payload::U64(_) => DTYPE_U64,
        };
        out.push(code);
        push_u32(&mut out, r.dims.len())?;
        for &d in &r.dims {
            push_u32(&mut out, d)?;
        }
        match &r.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < 6 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut r = Reader { bytes, at: 6 };
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let code = r.take(1)?[0];
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("record {name}: dims overflow")))?;
        let width = match code {
            DTYPE_F32 => 4,
            DTYPE_U8 => 1,
            DTYPE_F64 | DTYPE_U64 => 8,
            other => return Err(Error::Format(format!("record {name}: unknown dtype code {other}"))),
        };
        let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::Format(format!("record {name} too large")))?)?;
        let payload = match code {
            DTYPE_F32 => Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
            DTYPE_U8 => Payload::U8(raw.to_vec()),
            DTYPE_F64 => Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
            _ => Payload::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8"))).collect()),
        };
        out.push(Record { name, dims, payload });
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint records", bytes.len() - r.at)));
    }
    Ok(out)
}

fn tensor_record(prefix: &str, name: &str, t: &Tensor<f32>) -> Record {
    Record { name: format!("{prefix}/{name}"), dims: t.shape().to_vec(), payload: Payload::F32(t.data().to_vec()) }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let mut recs = Vec::new();
        for (k, t) in &s.store.params {
            recs.push(tensor_record("param", k, t));
        }
        for (k, t) in &s.ema {
            recs.push(tensor_record("ema", k, t));
        }
        for (k, t) in &s.store.buffers {
            recs.push(tensor_record("buffer", k, t));
        }
        for (prefix, map) in [("adam_m", &s.adam.m), ("adam_v", &s.adam.v)] {
            for (k, v) in map {
                recs.push(Record { name: format!("{prefix}/{k}"), dims: vec![v.len()], payload: Payload::F32(v.clone()) });
            }
        }
        let AdamConfig { beta1, beta2, eps } = s.adam.config;
        recs.push(Record { name: "meta/adam_config".into(), dims: vec![3], payload: Payload::F64(vec![beta1, beta2, eps]) });
        recs.push(Record { name: "meta/adam_step".into(), dims: vec![1], payload: Payload::U64(vec![s.adam.t]) });
        recs.push(Record { name: "meta/iteration".into(), dims: vec![1], payload: Payload::U64(vec![s.iteration]) });
        let cfg = self.config.as_bytes().to_vec();
        recs.push(Record { name: "meta/config".into(), dims: vec![cfg.len()], payload: Payload::U8(cfg) });
        encode(&recs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut params = IndexMap::new();
        let mut ema = IndexMap::new();
        let mut buffers = IndexMap::new();
        let mut m = GradMap::new();
        let mut v = GradMap::new();
        let (mut adam_config, mut adam_step, mut iteration, mut config) = (None, None, None, None);
        for rec in decode(bytes)? {
            let (prefix, key) = rec.name.split_once('/').ok_or_else(|| Error::Format(format!("record name {} has no prefix", rec.name)))?;
            let dup = || Error::Format(format!("duplicate record {}", rec.name));
            let wrong = || Error::Format(format!("record {} has unexpected type or shape", rec.name));
            match (prefix, rec.payload) {
                ("param" | "ema" | "buffer", Payload::F32(data)) => {
                    let map = match prefix {
                        "param" => &mut params,
                        "ema" => &mut ema,
                        _ => &mut buffers,
                    };
                    let t = Tensor::new(&rec.dims, data).map_err(|_| wrong())?;
                    if map.insert(key.to_string(), t).is_some() {
                        return Err(dup());
                    }
                }
                ("adam_m" | "adam_v", Payload::F32(data)) => {
                    let map = if prefix == "adam_m" { &mut m } else { &mut v };
                    if map.insert(key.to_string(), data).is_some() {
                        return Err(dup());
                    }
                }
                ("meta", Payload::F64(x)) if key == "adam_config" && x.len() == 3 => {
                    adam_config = Some(AdamConfig { beta1: x[0], beta2: x[1], eps: x[2] });
                }
                ("meta", Payload::U64(x)) if key == "adam_step" && x.len() == 1 => adam_step = Some(x[0]),
                ("meta", Payload::U64(x)) if key == "iteration" && x.len() == 1 => iteration = Some(x[0]),
                ("meta", Payload::U8(x)) if key == "config" => {
                    config = Some(String::from_utf8(x).map_err(|_| Error::Format("config text is not UTF-8".into()))?);
                }
                _ => return Err(wrong()),
            }
        }
        let missing = |what: &str| Error::Format(format!("checkpoint lacks {what}"));
        for name in params.keys() {
            let n = params[name].numel();
            let ok = ema.get(name).is_some_and(|t: &Tensor<f32>| t.shape() == params[name].shape())
                && m.get(name).is_some_and(|x| x.len() == n)
                && v.get(name).is_some_and(|x| x.len() == n);
            if !ok {
                return Err(missing(&format!("matching ema/adam records for {name}")));
            }
        }
        if ema.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Format("ema/adam records for unknown parameters".into()));
        }
        let state = TrainState {
            store: ParamStore { params, buffers },
            ema,
            adam: AdamState {
                m,
                v,
                t: adam_step.ok_or_else(|| missing("meta/adam_step"))?,
                config: adam_config.ok_or_else(|| missing("meta/adam_config"))?,
            },
            iteration: iteration.ok_or_else(|| missing("meta/iteration"))?,
        };
        Ok(Checkpoint { state, config: config.ok_or_else(|| missing("meta/config"))? })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
