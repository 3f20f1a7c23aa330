//! `SFCK` checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "SFCK" | u32 version | u32 header_len | header (TOML)
//!        | u32 tensor_count | { u32 name_len | name | u32 rank | u32 extent × rank | f64 × numel } ...
//!        | u8 has_optimizer | [ u64 step | f64 first moments ... | f64 second moments ... ]
//!        | u32 crc32(everything before)
//! ```
//!
//! Optimizer moments follow the tensor table order and shapes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    epoch: usize,
    seed: u64,
    labels: Vec<String>,
    config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Last completed epoch.
    pub epoch: usize,
    pub seed: u64,
    pub labels: Vec<String>,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, epoch: usize, labels: &[String], store: &ParamStore, optim: Option<&AdamW>) -> Self {
        Checkpoint {
            config: config.clone(),
            epoch,
            seed: config.seed,
            labels: labels.to_vec(),
            tensors: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            optimizer: optim.map(|o| OptimizerState {
                step: o.step,
                first: o.first.clone(),
                second: o.second.clone(),
            }),
        }
    }

    /// Fails unless the stored model geometry and switches equal `live`.
    pub fn check_config(&self, live: &ModelConfig) -> Result<()> {
        if &self.config.model != live {
            return Err(err("stored model config does not match the live config"));
        }
        Ok(())
    }

    /// Copies every stored tensor into `store`; names and shapes must match exactly.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(err(format!("{} stored tensors, model has {}", self.tensors.len(), store.len())));
        }
        for (name, t) in &self.tensors {
            let id = store.id(name).ok_or_else(|| err(format!("model has no parameter `{name}`")))?;
            if store.value(id).shape() != t.shape() {
                return Err(err(format!(
                    "`{name}`: stored shape {:?}, model shape {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Rebuilds the optimizer against `store`'s parameter order.
    pub fn optimizer(&self, store: &ParamStore) -> Result<Option<AdamW>> {
        let Some(state) = &self.optimizer else {
            return Ok(None);
        };
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: self.config.weight_decay,
                ..AdamWConfig::default()
            },
            store,
        );
        opt.step = state.step;
        for (i, (name, _)) in self.tensors.iter().enumerate() {
            let id = store.id(name).ok_or_else(|| err(format!("model has no parameter `{name}`")))?;
            opt.first[id.index()] = state.first[i].clone();
            opt.second[id.index()] = state.second[i].clone();
        }
        Ok(Some(opt))
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = toml::to_string(&Header {
            epoch: self.epoch,
            seed: self.seed,
            labels: self.labels.clone(),
            config: self.config.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &e in t.shape() {
                put_u32(&mut out, e as u32);
            }
            put_f64s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.step.to_le_bytes());
                s.first.iter().chain(&s.second).for_each(|t| put_f64s(&mut out, t.data()));
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(err("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(err(format!("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(hlen)?).map_err(|_| err("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| err(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| err("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            if rank > 16 {
                return Err(err(format!("`{name}`: implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f64s(numel(&shape))?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                let moments = |r: &mut Reader| {
                    tensors
                        .iter()
                        .map(|(_, t)| Tensor::new(t.shape().to_vec(), r.f64s(t.len())?))
                        .collect::<Result<Vec<_>>>()
                };
                let first = moments(&mut r)?;
                let second = moments(&mut r)?;
                Some(OptimizerState { step, first, second })
            }
            f => return Err(err(format!("bad optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(err("trailing bytes"));
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            seed: header.seed,
            labels: header.labels,
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::decode(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| err("tensor too large"))?)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::ParamKind;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::randn(&[3, 2], 1.0, &mut rng), ParamKind::Weight);
        s.add("a.bias", Tensor::randn(&[2], 1.0, &mut rng), ParamKind::Bias);
        s.add("bn.mean", Tensor::zeros(&[2]), ParamKind::Buffer);
        s
    }

    fn checkpoint(s: &ParamStore) -> Checkpoint {
        let mut opt = AdamW::new(AdamWConfig::default(), s);
        opt.step = 7;
        opt.first[0].data_mut()[1] = 0.25;
        opt.second[1].data_mut()[0] = 1e-9;
        let labels = vec!["wave".to_string(), "kick".to_string()];
        Checkpoint::capture(&RunConfig::default(), 3, &labels, s, Some(&opt))
    }

    #[test]
    fn resave_is_byte_identical() {
        let s = store();
        let ck = checkpoint(&s);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run/model.sfck");
        ck.save(&p).unwrap();
        Checkpoint::load(&p).unwrap().save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn restore_round_trips_values_and_moments() {
        let s = store();
        let ck = checkpoint(&s);
        let mut fresh = ParamStore::new();
        fresh.add("a.weight", Tensor::zeros(&[3, 2]), ParamKind::Weight);
        fresh.add("a.bias", Tensor::zeros(&[2]), ParamKind::Bias);
        fresh.add("bn.mean", Tensor::ones(&[2]), ParamKind::Buffer);
        ck.restore(&mut fresh).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(fresh.iter()) {
            assert_eq!(a.value, b.value);
        }
        let opt = ck.optimizer(&fresh).unwrap().unwrap();
        assert_eq!(opt.step, 7);
        assert_eq!(opt.first[0].data()[1], 0.25);
    }

    #[test]
    fn mismatches_fail() {
        let ck = checkpoint(&store());
        let mut other = ModelConfig::default();
        other.fusion_depth += 1;
        assert!(ck.check_config(&other).is_err());
        assert!(ck.check_config(&ModelConfig::default()).is_ok());

        let mut wrong = ParamStore::new();
        wrong.add("a.weight", Tensor::zeros(&[2, 3]), ParamKind::Weight);
        wrong.add("a.bias", Tensor::zeros(&[2]), ParamKind::Bias);
        wrong.add("bn.mean", Tensor::zeros(&[2]), ParamKind::Buffer);
        assert!(ck.restore(&mut wrong).is_err());
    }

    #[test]
    fn corruption_fails() {
        let mut bytes = checkpoint(&store()).encode();
        let n = bytes.len();
        bytes[n / 2] ^= 1;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::decode(&bytes[..10]).is_err());
    }
}
