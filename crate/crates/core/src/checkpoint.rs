//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "EQILCKPT"
//! version   u32
//! config    u32 length + UTF-8 `key = value` text
//! hash      32 bytes SHA-256 of the config text
//! step      u64
//! blocks    u32 count, then per block:
//!           u32 name length + name, u32 rank, u64 dims[rank], f32 data
//! ```
//!
//! Blocks are `param/<name>`, `adam.m/<name>`, `adam.v/<name>`, and for the
//! autodecoder `latents/codes`, `latents/m`, `latents/v`, `latents/steps`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::config::{parse_full, KeyValues};
use crate::error::{Error, Result};
use crate::optim::LatentTable;
use crate::trainer::{training_strategy, TrainState};

pub const MAGIC: &[u8; 8] = b"EQILCKPT";
pub const VERSION: u32 = 1;

fn config_text(state: &TrainState) -> String {
    let mut kv = KeyValues::default();
    state.model.config().write_kv(&mut kv);
    state.config.write_kv(&mut kv);
    kv.to_text()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, name: &str, a: &ArrayD<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, a.ndim() as u32);
    for &d in a.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let text = config_text(state);
    let mut blocks: Vec<(String, ArrayD<f32>)> = Vec::new();
    for (i, p) in state.model.params.iter().enumerate() {
        blocks.push((format!("param/{}", p.name), p.value.clone()));
        blocks.push((format!("adam.m/{}", p.name), state.adam.m[i].clone()));
        blocks.push((format!("adam.v/{}", p.name), state.adam.v[i].clone()));
    }
    if let Some(t) = &state.latents {
        blocks.push(("latents/codes".into(), t.codes.clone()));
        blocks.push(("latents/m".into(), t.m.clone()));
        blocks.push(("latents/v".into(), t.v.clone()));
        let steps =
            ArrayD::from_shape_vec(IxDyn(&[t.steps.len()]), t.steps.iter().map(|&s| s as f32).collect()).expect("1-D");
        blocks.push(("latents/steps".into(), steps));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&Sha256::digest(text.as_bytes()));
    out.extend_from_slice(&state.step.to_le_bytes());
    put_u32(&mut out, blocks.len() as u32);
    for (name, a) in &blocks {
        put_block(&mut out, name, a);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn block(&mut self) -> Result<(String, ArrayD<f32>)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let dims = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let a = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok((name, a))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let text = r.string()?;
    let hash = r.take(32)?;
    if Sha256::digest(text.as_bytes()).as_slice() != hash {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut blocks = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, a) = r.block()?;
        blocks.insert(name, a);
    }

    let kv = KeyValues::parse(&text)?;
    let (model_cfg, train_cfg) = parse_full(&kv, None)?;
    let strategy = training_strategy(&train_cfg.strategy)?;
    let mut state = strategy.init(&model_cfg, &train_cfg)?;
    let names: Vec<(String, Vec<usize>)> = state
        .model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for (i, (name, shape)) in names.iter().enumerate() {
        state.model.params.iter_mut().nth(i).unwrap().value = take(&mut blocks, format!("param/{name}"), shape)?;
        state.adam.m[i] = take(&mut blocks, format!("adam.m/{name}"), shape)?;
        state.adam.v[i] = take(&mut blocks, format!("adam.v/{name}"), shape)?;
    }
    state.model.params.apply_masks();
    state.adam.step = step;
    state.step = step;
    if let Some(codes) = blocks.remove("latents/codes") {
        let shape = codes.shape().to_vec();
        let m = take(&mut blocks, "latents/m".into(), &shape)?;
        let v = take(&mut blocks, "latents/v".into(), &shape)?;
        let steps = take(&mut blocks, "latents/steps".into(), &shape[..1])?;
        let mut t = LatentTable::new(codes);
        t.m = m;
        t.v = v;
        t.steps = steps.iter().map(|&s| s as u64).collect();
        state.latents = Some(t);
    }
    if let Some(extra) = blocks.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected block {extra}")));
    }
    Ok(state)
}

fn take(blocks: &mut HashMap<String, ArrayD<f32>>, name: String, like: &[usize]) -> Result<ArrayD<f32>> {
    let a = blocks
        .remove(&name)
        .ok_or_else(|| Error::Checkpoint(format!("missing block {name}")))?;
    if a.shape() != like {
        return Err(Error::Checkpoint(format!(
            "block {name} has shape {:?}, expected {like:?}",
            a.shape()
        )));
    }
    Ok(a)
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(state))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
