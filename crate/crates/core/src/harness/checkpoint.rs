//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     b"CAFCT\0"
//! version   u16
//! config    u32 length + UTF-8 `key = value` text
//! epoch     u32   completed epochs
//! rng       u64 seed, u64 next epoch   (shuffle stream position)
//! bn        f64 momentum, f64 eps
//! records   u32 count, then per record:
//!           u16 name length, name bytes, u8 rank, rank x u32 extents,
//!           product(extents) x f64 values
//! ```
//!
//! Parameters come first in model order, then one `<name>.mean` and one
//! `<name>.var` record per batch-norm layer.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Cafct;
use crate::numerics::{Tensor, BN_EPS, BN_MOMENTUM};

use super::config::TrainConfig;

pub const MAGIC: &[u8; 6] = b"CAFCT\0";
pub const VERSION: u16 = 1;

/// Where the per-epoch shuffle stream resumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u32,
    pub rng: RngState,
    pub model: Cafct,
}

/// `(name, shape, values)` of every stored array, in file order.
fn records(model: &Cafct) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out: Vec<_> = model
        .store
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data()))
        .collect();
    for bn in model.store.bn_states() {
        let c = vec![bn.stats.mean.len()];
        out.push((format!("{}.mean", bn.name), c.clone(), &bn.stats.mean[..]));
        out.push((format!("{}.var", bn.name), c, &bn.stats.var[..]));
    }
    out
}

pub fn encode_checkpoint(config: &TrainConfig, model: &Cafct, epoch: u32, rng: RngState) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&epoch.to_le_bytes());
    buf.extend_from_slice(&rng.seed.to_le_bytes());
    buf.extend_from_slice(&rng.next_epoch.to_le_bytes());
    buf.extend_from_slice(&BN_MOMENTUM.to_le_bytes());
    buf.extend_from_slice(&BN_EPS.to_le_bytes());
    let recs = records(model);
    buf.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for (name, shape, values) in recs {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(shape.len() as u8);
        for d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Write via a temporary file and rename, so a crash never leaves a
/// half-written checkpoint behind.
pub fn save_checkpoint(path: &Path, config: &TrainConfig, model: &Cafct, epoch: u32, rng: RngState) -> Result<()> {
    let bytes = encode_checkpoint(config, model, epoch, rng)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            path: self.path.to_string(),
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &str) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("not a checkpoint (bad magic)");
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return r.fail(format!("unsupported checkpoint version {version}"));
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config")?).or_else(|_| r.fail("config is not UTF-8"))?;
    let config = TrainConfig::parse(text)?;
    let epoch = r.u32("epoch")?;
    let rng = RngState {
        seed: r.u64("rng seed")?,
        next_epoch: r.u64("rng epoch")?,
    };
    let (momentum, eps) = (r.f64("bn momentum")?, r.f64("bn eps")?);
    if momentum != BN_MOMENTUM || eps != BN_EPS {
        return r.fail(format!(
            "batch-norm constants momentum={momentum} eps={eps} differ from this build's {BN_MOMENTUM}/{BN_EPS}"
        ));
    }
    let mut model = Cafct::new(&config.model, config.seed)?;
    let count = r.u32("record count")? as usize;
    let mut decoded = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .or_else(|_| r.fail("record name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| Ok(r.u32("extent")? as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f64("values")).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(&shape, data).or_else(|e| {
            r.pos = start;
            r.fail(format!("record {name}: {e}"))
        })?;
        if decoded.insert(name.clone(), t).is_some() {
            r.pos = start;
            return r.fail(format!("duplicate record {name}"));
        }
    }
    if r.pos != bytes.len() {
        return r.fail("trailing bytes after the last record");
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = decoded
            .remove(name)
            .ok_or_else(|| Error::invalid(format!("{path}: checkpoint lacks record {name}")))?;
        if t.shape() != shape {
            return Err(Error::shape(format!(
                "{path}: record {name} has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    for p in model.store.params_mut() {
        p.value = take(&p.name, p.value.shape())?;
    }
    for bn in model.store.bn_states_mut() {
        let shape = [bn.stats.mean.len()];
        bn.stats.mean = take(&format!("{}.mean", bn.name), &shape)?.into_data();
        bn.stats.var = take(&format!("{}.var", bn.name), &shape)?.into_data();
    }
    if let Some(extra) = decoded.keys().next() {
        return Err(Error::invalid(format!("{path}: unexpected record {extra}")));
    }
    Ok(Checkpoint { config, epoch, rng, model })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_config() -> TrainConfig {
        TrainConfig { model: ModelConfig::tiny(), ..TrainConfig::default() }
    }

    #[test]
    fn round_trip_restores_every_value() {
        let cfg = tiny_config();
        let mut model = Cafct::new(&cfg.model, 3).unwrap();
        model.store.bn_states_mut()[0].stats.mean[0] = 0.25;
        let rng = RngState { seed: 3, next_epoch: 7 };
        let bytes = encode_checkpoint(&cfg, &model, 6, rng).unwrap();
        assert_eq!(&bytes[..6], MAGIC);
        let ck = decode_checkpoint(&bytes, "mem").unwrap();
        assert_eq!((ck.epoch, ck.rng), (6, rng));
        assert_eq!(ck.config, cfg);
        for (a, b) in ck.model.store.params().iter().zip(model.store.params()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(ck.model.store.bn_states()[0].stats.mean[0], 0.25);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let cfg = tiny_config();
        let model = Cafct::new(&cfg.model, 0).unwrap();
        let bytes = encode_checkpoint(&cfg, &model, 1, RngState { seed: 0, next_epoch: 1 }).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], "t").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad, "t"), Err(Error::Format { pos: 0, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(decode_checkpoint(&long, "t").is_err());
    }
}
