//! Binary checkpoint container.
//!
//! ```text
//! magic     8 bytes  "MVBIGAN\0"
//! version   u32
//! config    u64 length + UTF-8 `key = value` text
//! records   u32 count, then per record:
//!             name  u32 length + UTF-8
//!             dtype u8 (0 = f32)
//!             shape u32 rank + u64 per dimension
//!             data  little-endian f32
//! checksum  SHA-256 of everything above
//! ```
//!
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::step::AdamState;
use crate::error::{Error, Result};
use crate::kv;
use crate::netdef::{ModelBundle, RunningStats};

pub const MAGIC: &[u8; 8] = b"MVBIGAN\0";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const CHECKSUM_LEN: usize = 32;

/// Complete training state at an epoch boundary.
///
/// Every random draw of epoch `e` comes from streams keyed by
/// `(config.seed, e)`, so the seed and epoch counter are the RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ModelBundle<f32>,
    pub optimizer: AdamState<f32>,
    pub epoch: usize,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn str32(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn record(&mut self, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
        self.str32(name);
        self.u8(DTYPE_F32);
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        for x in data {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("record runs past the end at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("non-UTF-8 text".into()))
    }
}

struct Record {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Serializes a checkpoint to bytes.
pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    let mut meta = ck.config.to_kv();
    meta.push(("checkpoint.epoch".into(), ck.epoch.to_string()));
    meta.push(("checkpoint.rng_seed".into(), ck.config.seed.to_string()));
    meta.push(("checkpoint.rng_stream".into(), ck.epoch.to_string()));
    meta.push(("checkpoint.adam_step".into(), ck.optimizer.step.to_string()));
    let text = kv::render(&meta);
    w.u64(text.len() as u64);
    w.0.extend_from_slice(text.as_bytes());

    let params = ck.model.params();
    let running = ck.model.running();
    let count = params.len() * 3 + running.len() * 2;
    w.u32(count as u32);
    for (name, p) in params {
        w.record(&format!("param.{name}"), p.shape(), p.iter().copied());
    }
    for (key, st) in running {
        w.record(&format!("running.{key}.mean"), st.mean.shape(), st.mean.iter().copied());
        w.record(&format!("running.{key}.var"), st.var.shape(), st.var.iter().copied());
    }
    for (prefix, moments) in [("adam.m", &ck.optimizer.m), ("adam.v", &ck.optimizer.v)] {
        for (name, a) in moments {
            w.record(&format!("{prefix}.{name}"), a.shape(), a.iter().copied());
        }
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptCheckpoint("missing checkpoint header".into()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, at: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let text_len = r.u64()? as usize;
    let text = r.string(text_len)?;
    let pairs = kv::parse(&text)?;
    let meta = |key: &str| -> Result<u64> {
        let (k, v) = pairs
            .iter()
            .find(|(k, _)| k == key)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing {key}")))?;
        kv::value(k, v)
    };
    let epoch = meta("checkpoint.epoch")? as usize;
    let adam_step = meta("checkpoint.adam_step")?;
    let config_pairs: Vec<(String, String)> = pairs
        .iter()
        .filter(|(k, _)| !k.starts_with("checkpoint."))
        .cloned()
        .collect();
    let config = TrainConfig::from_pairs(&config_pairs)?;

    let count = r.u32()?;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::CorruptCheckpoint(format!("{name}: unknown dtype {dtype}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: size overflow")))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.insert(name, Record { shape, data });
    }
    if r.at != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after the records".into()));
    }

    let matrix = |name: &str, rec: Record| -> Result<Array2<f32>> {
        match rec.shape[..] {
            [rows, cols] => Array2::from_shape_vec((rows, cols), rec.data).map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}"))),
            _ => Err(Error::CorruptCheckpoint(format!("{name} is not a matrix"))),
        }
    };
    let vector = |name: &str, rec: Record| -> Result<Array1<f32>> {
        match rec.shape[..] {
            [_] => Ok(Array1::from(rec.data)),
            _ => Err(Error::CorruptCheckpoint(format!("{name} is not a vector"))),
        }
    };

    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut means = BTreeMap::new();
    let mut vars = BTreeMap::new();
    for (name, rec) in records {
        if let Some(p) = name.strip_prefix("param.") {
            params.insert(p.to_string(), matrix(&name, rec)?);
        } else if let Some(p) = name.strip_prefix("adam.m.") {
            m.insert(p.to_string(), matrix(&name, rec)?);
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            v.insert(p.to_string(), matrix(&name, rec)?);
        } else if let Some(k) = name.strip_prefix("running.").and_then(|s| s.strip_suffix(".mean")) {
            means.insert(k.to_string(), vector(&name, rec)?);
        } else if let Some(k) = name.strip_prefix("running.").and_then(|s| s.strip_suffix(".var")) {
            vars.insert(k.to_string(), vector(&name, rec)?);
        } else {
            return Err(Error::CorruptCheckpoint(format!("unexpected record {name}")));
        }
    }
    let mut running = BTreeMap::new();
    for (key, mean) in means {
        let var = vars
            .remove(&key)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("running statistics {key} lack a variance")))?;
        running.insert(key, RunningStats { mean, var });
    }
    if !vars.is_empty() {
        return Err(Error::CorruptCheckpoint("running variance without a mean".into()));
    }
    let model = ModelBundle::from_parts(config.arch.clone(), params, running)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    for moments in [&m, &v] {
        let matches = moments.len() == model.params().len()
            && model
                .params()
                .iter()
                .all(|(k, p)| moments.get(k).is_some_and(|a| a.dim() == p.dim()));
        if !matches {
            return Err(Error::CorruptCheckpoint("optimizer moments do not match the parameters".into()));
        }
    }
    Ok(Checkpoint {
        config,
        model,
        optimizer: AdamState { step: adam_step, m, v },
        epoch,
    })
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("checkpoint path {} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
