//! Versioned binary checkpoints.
//!
//! ```text
//! "KINETCKP"  u32 version
//! u32 len     header (TOML: kind, epoch, seed, model config, optimizer scalars)
//! u32 count   entries: u32 name_len, name, u8 kind, u8 rank, u32 dims[rank], f32 values
//! u32 count   velocities, one per trainable entry in store order: u8 rank, u32 dims, f32 values
//! ```
//!
//! All integers and floats are little-endian. Random streams are keyed by
//! `(seed, video, epoch)`, so `seed` and `epoch` are the complete rng state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{Model, ModelConfig, ModelKind};
use crate::params::{EntryKind, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::{OptimState, Schedule};

pub const MAGIC: &[u8; 8] = b"KINETCKP";
pub const VERSION: u32 = 1;

const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimHeader {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    schedule: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: ModelKind,
    epoch: usize,
    seed: u64,
    optim: Option<OptimHeader>,
    model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optim: Option<OptimState<f32>>,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Validation(format!("{v} does not fit the checkpoint format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) -> Result<()> {
    out.push(t.rank() as u8);
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.model.kind(),
            epoch: self.epoch,
            seed: self.seed,
            optim: self.optim.as_ref().map(|o| OptimHeader {
                lr: o.lr,
                momentum: o.momentum,
                weight_decay: o.weight_decay,
                schedule: o.schedule.clone(),
            }),
            model: self.model.config().clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Validation(format!("checkpoint header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        let entries = self.model.store.entries();
        put_u32(&mut out, entries.len())?;
        for e in entries {
            put_u32(&mut out, e.name.len())?;
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.kind {
                EntryKind::Param => 0,
                EntryKind::Buffer => 1,
            });
            put_tensor(&mut out, &e.tensor)?;
        }
        let velocity = self.optim.as_ref().map_or(&[][..], |o| &o.velocity[..]);
        put_u32(&mut out, velocity.len())?;
        for v in velocity {
            put_tensor(&mut out, v)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::decode("checkpoint", "bad magic; not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::decode(
                "checkpoint",
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::decode("checkpoint", "header is not UTF-8"))?;
        let header: Header =
            toml::from_str(text).map_err(|e| Error::decode("checkpoint", format!("header: {}", e.message())))?;
        header.model.validate()?;

        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        let mut scalars = 0u128;
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::decode("checkpoint", "entry name is not UTF-8"))?
                .to_string();
            let kind = match r.u8()? {
                0 => EntryKind::Param,
                1 => EntryKind::Buffer,
                k => return Err(Error::decode("checkpoint", format!("entry {name}: unknown kind {k}"))),
            };
            let t = r.tensor()?;
            scalars += t.len() as u128;
            store
                .insert(name, kind, t)
                .map_err(|e| Error::decode("checkpoint", e.to_string()))?;
        }
        let expected = header.model.scalar_count(header.kind);
        if scalars != expected {
            return Err(Error::Validation(format!(
                "checkpoint holds {scalars} values but its configuration needs {expected}"
            )));
        }
        let model = Model::from_store(&header.model, header.kind, store)?;

        let n_vel = r.u32()? as usize;
        let params = model.store.param_indices();
        let optim = match header.optim {
            None if n_vel == 0 => None,
            None => return Err(Error::decode("checkpoint", "velocities without optimizer state")),
            Some(h) => {
                if n_vel != params.len() {
                    return Err(Error::decode(
                        "checkpoint",
                        format!("{n_vel} velocities for {} trainable entries", params.len()),
                    ));
                }
                let mut velocity = Vec::with_capacity(n_vel);
                for &i in &params {
                    let v = r.tensor()?;
                    let e = model.store.entry(i);
                    if v.shape() != e.tensor.shape() {
                        return Err(Error::shape(
                            format!("velocity of {}", e.name),
                            e.tensor.shape(),
                            v.shape(),
                        ));
                    }
                    velocity.push(v);
                }
                Some(OptimState {
                    velocity,
                    lr: h.lr,
                    momentum: h.momentum,
                    weight_decay: h.weight_decay,
                    schedule: h.schedule,
                })
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::decode(
                "checkpoint",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Checkpoint {
            model,
            optim,
            epoch: header.epoch,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::distill::write_if_changed(path, &self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
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
                Error::decode(
                    "checkpoint",
                    format!("truncated: wanted {n} bytes at offset {}", self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u8()? as usize;
        if rank > MAX_RANK {
            return Err(Error::decode("checkpoint", format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n = 1usize;
        for _ in 0..rank {
            let d = self.u32()? as usize;
            n = n
                .checked_mul(d)
                .ok_or_else(|| Error::decode("checkpoint", "tensor size overflows"))?;
            shape.push(d);
        }
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::decode("checkpoint", "tensor size overflows"))?;
        let raw = self.take(bytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        Tensor::new(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::akg::RelationKind;
    use crate::netcore::build_model;
    use crate::testutil::uniform;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_hw: [16, 16],
            stem_channels: vec![4],
            stage_channels: vec![4, 6],
            stage_strides: vec![1, 2],
            blocks_per_stage: 1,
            cbi_attach: vec!["res3".into()],
            relation_kind: RelationKind::Concat,
            k_scene: 5,
            ..ModelConfig::default()
        }
    }

    fn sample(with_optim: bool) -> Checkpoint {
        let mut model = build_model::<f32>(&tiny(), 3).unwrap();
        // non-trivial buffers
        let name = model.store.entries()[3].name.clone();
        let shape = model.store.entries()[3].tensor.shape().to_vec();
        model.store.set(&name, uniform(&shape, 1, 0.5, 2.0)).unwrap();
        let optim = with_optim.then(|| {
            let mut o = OptimState::new(
                &model.store,
                0.9,
                1e-5,
                Schedule::proportional(0.02, 40, &[0.5, 0.75, 0.875]),
            );
            for (k, v) in o.velocity.iter_mut().enumerate() {
                *v = uniform(v.shape(), k as u64, -1.0, 1.0);
            }
            o.lr = 0.002;
            o
        });
        Checkpoint {
            model,
            optim,
            epoch: 21,
            seed: 42,
        }
    }

    #[test]
    fn round_trip_is_exact_and_stable() {
        for with_optim in [true, false] {
            let ck = sample(with_optim);
            let a = ck.encode().unwrap();
            let back = Checkpoint::decode(&a).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.encode().unwrap(), a);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = sample(true);
        ck.save(&p).unwrap();
        let first = std::fs::read(&p).unwrap();
        Checkpoint::load(&p).unwrap().save(&dir.path().join("n.ckpt")).unwrap();
        assert_eq!(std::fs::read(dir.path().join("n.ckpt")).unwrap(), first);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let good = sample(true).encode().unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad_magic), Err(Error::Decode { .. })));
        let mut bad_version = good.clone();
        bad_version[8] = 9;
        assert!(matches!(Checkpoint::decode(&bad_version), Err(Error::Decode { .. })));
        for cut in [0, 5, 12, good.len() / 2, good.len() - 1] {
            assert!(Checkpoint::decode(&good[..cut]).is_err(), "cut at {cut}");
        }
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(Checkpoint::decode(&trailing), Err(Error::Decode { .. })));
    }

    #[test]
    fn config_and_store_must_agree() {
        let ck = sample(false);
        let mut other = ck.clone();
        let cfg = ModelConfig { k_action: 7, ..tiny() };
        other.model = build_model::<f32>(&cfg, 3).unwrap();
        let mut bytes = other.encode().unwrap();
        // swap the header for one claiming the original class count
        let good = ck.encode().unwrap();
        let hl = |b: &[u8]| u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize;
        let body = bytes.split_off(16 + hl(&bytes));
        let mut spliced = good[..16 + hl(&good)].to_vec();
        spliced.extend(body);
        assert!(matches!(Checkpoint::decode(&spliced), Err(Error::Validation(_))));
    }
}
