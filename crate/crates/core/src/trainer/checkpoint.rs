use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Result, TrainError};
use crate::model::BnStats;
use crate::nn::{ParamStore, RunningStats, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VBRANCH\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters, batch-norm statistics and the hash of the config that produced them.
///
/// Layout, little-endian: magic, format version, hash, free-form metadata,
/// global step, then each tensor as name, rank, dims, values, then each
/// batch-norm layer as channel count, means, variances.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Typically the serialized run config.
    pub meta: String,
    pub global_step: u64,
    pub params: ParamStore,
    pub bn: BnStats,
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    xs.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated file: {e}")))?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}

/// Length prefix bounded so corrupt files fail instead of allocating wildly.
fn get_len(r: &mut impl Read, limit: u64, what: &str) -> Result<usize> {
    let n = get_u64(r)?;
    if n > limit {
        return Err(bad(format!("{what} length {n} exceeds {limit}")));
    }
    Ok(n as usize)
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_len(r, 1 << 24, "string")?;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated file: {e}")))?;
    String::from_utf8(b).map_err(|_| bad("string is not UTF-8"))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| Ok(f64::from_le_bytes(get(r)?))).collect()
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(&mut w, CHECKPOINT_VERSION)?;
        put_str(&mut w, &self.config_hash)?;
        put_str(&mut w, &self.meta)?;
        put_u64(&mut w, self.global_step)?;
        put_u64(&mut w, self.params.len() as u64)?;
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            put_str(&mut w, name)?;
            put_u64(&mut w, t.shape().len() as u64)?;
            for &d in t.shape() {
                put_u64(&mut w, d as u64)?;
            }
            put_f64s(&mut w, t.data())?;
        }
        put_u64(&mut w, self.bn.layers.len() as u64)?;
        for l in &self.bn.layers {
            put_u64(&mut w, l.mean.len() as u64)?;
            put_f64s(&mut w, &l.mean)?;
            put_f64s(&mut w, &l.var)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        if &get::<8>(&mut r)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = get_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let config_hash = get_str(&mut r)?;
        let meta = get_str(&mut r)?;
        let global_step = get_u64(&mut r)?;
        let mut params = ParamStore::new();
        for _ in 0..get_len(&mut r, 1 << 20, "tensor count")? {
            let name = get_str(&mut r)?;
            let rank = get_len(&mut r, 8, "rank")?;
            let shape = (0..rank).map(|_| get_len(&mut r, 1 << 32, "dimension")).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|n| *n <= 1 << 30);
            let numel = numel.ok_or_else(|| bad(format!("tensor `{name}` is too large")))?;
            let t = Tensor::new(shape, get_f64s(&mut r, numel)?)?;
            params.register(name, t)?;
        }
        let mut layers = Vec::new();
        for _ in 0..get_len(&mut r, 1 << 20, "layer count")? {
            let c = get_len(&mut r, 1 << 24, "channels")?;
            layers.push(RunningStats { mean: get_f64s(&mut r, c)?, var: get_f64s(&mut r, c)? });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after checkpoint"));
        }
        Ok(Self { config_hash, meta, global_step, params, bn: BnStats { layers } })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    /// Loads a checkpoint, rejecting it when `expected_hash` is given and differs.
    pub fn load(path: impl AsRef<Path>, expected_hash: Option<&str>) -> Result<Self> {
        let ck = Self::read_from(BufReader::new(File::open(path)?))?;
        if let Some(h) = expected_hash {
            if ck.config_hash != h {
                return Err(bad(format!("config hash mismatch: file has {}, expected {h}", ck.config_hash)));
            }
        }
        Ok(ck)
    }

    /// Checks that names, order and shapes agree with `layout`.
    pub fn check_layout(&self, layout: &ParamStore, bn: &BnStats) -> Result<()> {
        if self.params.names() != layout.names() {
            return Err(bad("parameter names differ from the network"));
        }
        for (name, (a, b)) in layout.names().iter().zip(self.params.tensors().iter().zip(layout.tensors())) {
            if a.shape() != b.shape() {
                return Err(bad(format!("`{name}` has shape {:?}, network expects {:?}", a.shape(), b.shape())));
            }
        }
        let chans = |s: &BnStats| s.layers.iter().map(|l| l.mean.len()).collect::<Vec<_>>();
        if chans(&self.bn) != chans(bn) {
            return Err(bad("batch-norm layers differ from the network"));
        }
        Ok(())
    }
}
