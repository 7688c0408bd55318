//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `SUREv1`, `u16` format version, `u64`
//! payload length, payload, CRC32 of the payload. The payload holds the
//! config JSON (`u32` length + bytes) and a tensor table: `u32` count, then
//! per entry `u16` name length, name, `u8` dtype tag, `u8` rank, `u64` dims,
//! raw scalars.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Result, SureError};
use crate::model::SureModel;
use crate::nn::{ChannelStats, NormStats, ParamStore};

use super::RunConfig;

pub const MAGIC: &[u8; 6] = b"SUREv1";
pub const FORMAT_VERSION: u16 = 1;

const STATS_PREFIX: &str = "stats/";
const FROZEN_KEY: &str = "stats.frozen";

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl StoredTensor {
    fn tag(&self) -> u8 {
        match self {
            StoredTensor::F32 { .. } => 0,
            StoredTensor::F64 { .. } => 1,
            StoredTensor::U64 { .. } => 2,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32 { shape, .. }
            | StoredTensor::F64 { shape, .. }
            | StoredTensor::U64 { shape, .. } => shape,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical JSON of the run configuration.
    pub config_json: String,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &SureModel, config: &RunConfig) -> Result<Self> {
        if config.model != model.config {
            return Err(SureError::State(
                "run config does not describe this model".into(),
            ));
        }
        let mut tensors = BTreeMap::new();
        for (name, t) in model.params.iter() {
            tensors.insert(
                name.clone(),
                StoredTensor::F32 {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            );
        }
        for (site, s) in &model.stats.sites {
            let n = s.mean.len();
            let key = |field: &str| format!("{STATS_PREFIX}{site}/{field}");
            tensors.insert(
                key("mean"),
                StoredTensor::F64 {
                    shape: vec![n],
                    data: s.mean.clone(),
                },
            );
            tensors.insert(
                key("var"),
                StoredTensor::F64 {
                    shape: vec![n],
                    data: s.var.clone(),
                },
            );
            tensors.insert(
                key("count"),
                StoredTensor::U64 {
                    shape: vec![1],
                    data: vec![s.count],
                },
            );
        }
        tensors.insert(
            FROZEN_KEY.into(),
            StoredTensor::U64 {
                shape: vec![1],
                data: vec![model.stats.frozen as u64],
            },
        );
        Ok(Self {
            config_json: config.to_canonical_json()?,
            tensors,
        })
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_json(&self.config_json)
    }

    pub fn to_model(&self) -> Result<(SureModel, RunConfig)> {
        let config = self.config()?;
        let mut params = ParamStore::new();
        let mut sites: BTreeMap<String, ChannelStats> = BTreeMap::new();
        let mut frozen = false;
        let malformed = |name: &str| SureError::Checkpoint(format!("unexpected entry {name:?}"));
        for (name, t) in &self.tensors {
            if name == FROZEN_KEY {
                let StoredTensor::U64 { data, .. } = t else {
                    return Err(malformed(name));
                };
                frozen = data.first().copied().unwrap_or(0) != 0;
            } else if let Some(rest) = name.strip_prefix(STATS_PREFIX) {
                let (site, field) = rest.rsplit_once('/').ok_or_else(|| malformed(name))?;
                let entry = sites
                    .entry(site.to_owned())
                    .or_insert_with(|| ChannelStats {
                        mean: Vec::new(),
                        var: Vec::new(),
                        count: 0,
                    });
                match (field, t) {
                    ("mean", StoredTensor::F64 { data, .. }) => entry.mean = data.clone(),
                    ("var", StoredTensor::F64 { data, .. }) => entry.var = data.clone(),
                    ("count", StoredTensor::U64 { data, .. }) => {
                        entry.count = data.first().copied().unwrap_or(0)
                    }
                    _ => return Err(malformed(name)),
                }
            } else {
                let StoredTensor::F32 { shape, data } = t else {
                    return Err(malformed(name));
                };
                params.insert(name.clone(), Tensor::new(shape.clone(), data.clone())?);
            }
        }
        // the stored tensors must cover exactly the parameters this config builds
        let template = SureModel::new(config.model.clone(), 0)?;
        for (name, t) in template.params.iter() {
            let stored = params
                .get(name)
                .map_err(|_| SureError::Checkpoint(format!("missing parameter {name}")))?;
            if stored.shape() != t.shape() {
                return Err(SureError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != template.params.len() {
            return Err(SureError::Checkpoint(
                "checkpoint holds parameters the config does not use".into(),
            ));
        }
        for site in template.stats.sites.keys() {
            if !sites.contains_key(site) {
                return Err(SureError::Checkpoint(format!(
                    "missing normalisation statistics for {site}"
                )));
            }
        }
        let model = SureModel {
            config: config.model.clone(),
            params,
            stats: NormStats { sites, frozen },
        };
        Ok((model, config))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let cfg = self.config_json.as_bytes();
        payload.extend((cfg.len() as u32).to_le_bytes());
        payload.extend(cfg);
        payload.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let n = name.as_bytes();
            let name_len = u16::try_from(n.len())
                .map_err(|_| SureError::Checkpoint(format!("tensor name too long: {name}")))?;
            payload.extend(name_len.to_le_bytes());
            payload.extend(n);
            payload.push(t.tag());
            payload.push(t.shape().len() as u8);
            for &d in t.shape() {
                payload.extend((d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32 { data, .. } => {
                    data.iter().for_each(|v| payload.extend(v.to_le_bytes()))
                }
                StoredTensor::F64 { data, .. } => {
                    data.iter().for_each(|v| payload.extend(v.to_le_bytes()))
                }
                StoredTensor::U64 { data, .. } => {
                    data.iter().for_each(|v| payload.extend(v.to_le_bytes()))
                }
            }
        }
        let mut out = Vec::with_capacity(payload.len() + 24);
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((payload.len() as u64).to_le_bytes());
        out.extend(&payload);
        out.extend(crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(SureError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(SureError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = usize::try_from(r.u64()?)
            .map_err(|_| SureError::Checkpoint("payload too large".into()))?;
        let payload = r.take(len)?;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(SureError::Checkpoint(
                "trailing bytes after checksum".into(),
            ));
        }
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(SureError::Checkpoint(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut p = Reader {
            bytes: payload,
            pos: 0,
        };
        let cfg_len = p.u32()? as usize;
        let config_json = String::from_utf8(p.take(cfg_len)?.to_vec())
            .map_err(|_| SureError::Checkpoint("config is not UTF-8".into()))?;
        let count = p.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = p.u16()? as usize;
            let name = String::from_utf8(p.take(name_len)?.to_vec())
                .map_err(|_| SureError::Checkpoint("tensor name is not UTF-8".into()))?;
            let tag = p.take(1)?[0];
            let rank = p.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| p.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| SureError::Checkpoint(format!("shape of {name} overflows")))?;
            let t = match tag {
                0 => StoredTensor::F32 {
                    data: p.chunks::<4>(n)?.map(f32::from_le_bytes).collect(),
                    shape,
                },
                1 => StoredTensor::F64 {
                    data: p.chunks::<8>(n)?.map(f64::from_le_bytes).collect(),
                    shape,
                },
                2 => StoredTensor::U64 {
                    data: p.chunks::<8>(n)?.map(u64::from_le_bytes).collect(),
                    shape,
                },
                other => {
                    return Err(SureError::Checkpoint(format!(
                        "unknown dtype tag {other} for {name}"
                    )))
                }
            };
            if tensors.insert(name.clone(), t).is_some() {
                return Err(SureError::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if p.pos != payload.len() {
            return Err(SureError::Checkpoint("unparsed bytes in payload".into()));
        }
        Ok(Self {
            config_json,
            tensors,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| SureError::io(dir, e))?;
        tmp.write_all(&bytes)
            .map_err(|e| SureError::io(tmp.path(), e))?;
        tmp.as_file()
            .sync_all()
            .map_err(|e| SureError::io(tmp.path(), e))?;
        tmp.persist(path)
            .map_err(|e| SureError::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SureError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SureError::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn chunks<const N: usize>(&mut self, n: usize) -> Result<impl Iterator<Item = [u8; N]> + 'a> {
        let len = n
            .checked_mul(N)
            .ok_or_else(|| SureError::Checkpoint("tensor too large".into()))?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(N)
            .map(|c| c.try_into().expect("exact chunk")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn small_config() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                backbone: BackboneConfig {
                    widths: [2, 3, 4],
                    coarse_dim: 4,
                    fine_dim: 3,
                    ..BackboneConfig::default()
                },
                head_hidden: 5,
                bins: 4,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn model_round_trip() {
        let cfg = small_config();
        let mut model = SureModel::new(cfg.model.clone(), 3).unwrap();
        model.stats.frozen = true;
        if let Some(s) = model.stats.sites.values_mut().next() {
            s.mean[0] = 0.125;
            s.count = 17;
        }
        let ck = Checkpoint::from_model(&model, &cfg).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let (m2, c2) = back.to_model().unwrap();
        assert_eq!(m2, model);
        assert_eq!(c2, cfg);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = small_config();
        let model = SureModel::new(cfg.model.clone(), 0).unwrap();
        let bytes = Checkpoint::from_model(&model, &cfg)
            .unwrap()
            .to_bytes()
            .unwrap();
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x10;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(SureError::Checkpoint(_))
        ));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong_magic).is_err());
    }

    #[test]
    fn version_mismatch_reports_both() {
        let cfg = small_config();
        let model = SureModel::new(cfg.model.clone(), 0).unwrap();
        let mut bytes = Checkpoint::from_model(&model, &cfg)
            .unwrap()
            .to_bytes()
            .unwrap();
        bytes[6..8].copy_from_slice(&7u16.to_le_bytes());
        match Checkpoint::from_bytes(&bytes) {
            Err(SureError::VersionMismatch { found: 7, expected }) => {
                assert_eq!(expected, FORMAT_VERSION)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_parameter_is_refused() {
        let cfg = small_config();
        let model = SureModel::new(cfg.model.clone(), 0).unwrap();
        let mut ck = Checkpoint::from_model(&model, &cfg).unwrap();
        ck.tensors.remove("head.x.l1.w");
        assert!(ck.to_model().is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = small_config();
        let model = SureModel::new(cfg.model.clone(), 1).unwrap();
        let ck = Checkpoint::from_model(&model, &cfg).unwrap();
        ck.save(&path).unwrap();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn arbitrary_tensors_round_trip_bit_exactly(
            words in proptest::collection::vec(any::<u32>(), 0..40),
            wide in proptest::collection::vec(any::<u64>(), 0..10),
        ) {
            let mut tensors = BTreeMap::new();
            tensors.insert("a".to_string(), StoredTensor::F32 {
                shape: vec![words.len()],
                data: words.iter().map(|&w| f32::from_bits(w)).collect(),
            });
            tensors.insert("b".to_string(), StoredTensor::F64 {
                shape: vec![1, wide.len()],
                data: wide.iter().map(|&w| f64::from_bits(w)).collect(),
            });
            tensors.insert("c".to_string(), StoredTensor::U64 { shape: vec![wide.len()], data: wide.clone() });
            let ck = Checkpoint { config_json: "{}".into(), tensors };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            let bits = |c: &Checkpoint| -> Vec<u64> {
                c.tensors.values().flat_map(|t| match t {
                    StoredTensor::F32 { data, .. } => data.iter().map(|v| v.to_bits() as u64).collect::<Vec<_>>(),
                    StoredTensor::F64 { data, .. } => data.iter().map(|v| v.to_bits()).collect(),
                    StoredTensor::U64 { data, .. } => data.clone(),
                }).collect()
            };
            prop_assert_eq!(bits(&back), bits(&ck));
        }
    }
}
