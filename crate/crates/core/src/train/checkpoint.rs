use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Adam, TrainConfig, TrainError};
use crate::data::TkgDataset;
use crate::diffcore::DenseArray;
use crate::model::{init_params, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DAEMONCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained parameters plus everything needed to rebuild the model. Nothing
/// inside is indexed by entity, so a checkpoint applies to any dataset with
/// the same relation vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub num_base_relations: usize,
    pub params: ModelParams,
    pub optimizer: Option<Adam>,
    pub epoch: usize,
    pub valid_mrr: f64,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, params: ModelParams, optimizer: Option<Adam>, epoch: usize, valid_mrr: f64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            num_base_relations: params.num_base_relations,
            config,
            params,
            optimizer,
            epoch,
            valid_mrr,
        }
    }

    /// Rejects datasets whose relation vocabulary differs; entity counts may differ.
    pub fn check_dataset(&self, ds: &TkgDataset) -> Result<(), TrainError> {
        if ds.num_base_relations != self.num_base_relations {
            return Err(TrainError::Validation(format!(
                "checkpoint was trained on {} relations but the dataset has {}",
                self.num_base_relations, ds.num_base_relations
            )));
        }
        Ok(())
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn array(&mut self, name: &str, a: &DenseArray) {
        self.bytes(name.as_bytes());
        self.u32(a.shape().len() as u32);
        for &d in a.shape() {
            self.u64(d as u64);
        }
        for v in a.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.buf.len() - self.pos < n {
            return Err(TrainError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, TrainError> {
        usize::try_from(self.u64()?).map_err(|_| TrainError::Checkpoint("length overflows".into()))
    }
    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8], TrainError> {
        let n = self.usize()?;
        self.take(n)
    }
    fn array(&mut self) -> Result<(String, DenseArray), TrainError> {
        let name = String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| TrainError::Checkpoint("array name is not UTF-8".into()))?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.usize()).collect::<Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let len = len.ok_or_else(|| TrainError::Checkpoint(format!("array {name} is too large")))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        let a = DenseArray::new(shape, data).map_err(|e| TrainError::Checkpoint(format!("array {name}: {e}")))?;
        Ok((name, a))
    }
}

fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let config_json = serde_json::to_vec(&ckpt.config).expect("configuration serializes");
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(ckpt.version);
    w.0.extend_from_slice(&Sha256::digest(&config_json));
    w.u64(ckpt.num_base_relations as u64);
    w.u64(ckpt.params.dim as u64);
    w.u64(ckpt.params.num_layers() as u64);
    w.bytes(&config_json);
    w.u64(ckpt.epoch as u64);
    w.0.extend_from_slice(&ckpt.valid_mrr.to_le_bytes());
    let named = ckpt.params.named();
    w.u64(named.len() as u64);
    for (name, a) in &named {
        w.array(name, a);
    }
    match &ckpt.optimizer {
        None => w.0.push(0),
        Some(adam) => {
            w.0.push(1);
            w.0.extend_from_slice(&adam.learning_rate.to_le_bytes());
            w.u64(adam.step);
            for (k, (name, _)) in named.iter().enumerate() {
                w.array(&format!("adam.m.{name}"), &adam.first[k]);
                w.array(&format!("adam.v.{name}"), &adam.second[k]);
            }
        }
    }
    let sum = Sha256::digest(&w.0);
    w.0.extend_from_slice(&sum);
    w.0
}

fn decode(buf: &[u8]) -> Result<Checkpoint, TrainError> {
    if buf.len() < CHECKPOINT_MAGIC.len() + 4 + 32 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("not a checkpoint file".into()));
    }
    let (body, trailer) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(TrainError::Checksum);
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let digest = r.take(32)?.to_vec();
    let num_base_relations = r.usize()?;
    let dim = r.usize()?;
    let layers = r.usize()?;
    let config_json = r.bytes()?;
    if Sha256::digest(config_json).as_slice() != digest {
        return Err(TrainError::Checkpoint("configuration digest mismatch".into()));
    }
    let config: TrainConfig = serde_json::from_slice(config_json)
        .map_err(|e| TrainError::Checkpoint(format!("configuration echo: {e}")))?;
    if config.dim != dim || config.layers != layers {
        return Err(TrainError::Checkpoint("header disagrees with configuration".into()));
    }
    let epoch = r.usize()?;
    let valid_mrr = r.f64()?;
    let mut params = init_params(num_base_relations, &config.model_config(), 0)?;
    let n = r.usize()?;
    let arrays = (0..n).map(|_| r.array()).collect::<Result<Vec<_>, _>>()?;
    params
        .load_named(arrays)
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let learning_rate = r.f64()?;
            let step = r.u64()?;
            let mut adam = Adam::new(&params, learning_rate);
            adam.step = step;
            for k in 0..params.num_arrays() {
                let (_, m) = r.array()?;
                let (_, v) = r.array()?;
                if m.shape() != adam.first[k].shape() || v.shape() != adam.second[k].shape() {
                    return Err(TrainError::Checkpoint("optimizer moment shape mismatch".into()));
                }
                adam.first[k] = m;
                adam.second[k] = v;
            }
            Some(adam)
        }
        f => return Err(TrainError::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if r.pos != body.len() {
        return Err(TrainError::Checkpoint("trailing bytes after checkpoint body".into()));
    }
    Ok(Checkpoint {
        version,
        config,
        num_base_relations,
        params,
        optimizer,
        epoch,
        valid_mrr,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, encode(ckpt)).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let buf = std::fs::read(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = TrainConfig {
            dim: 4,
            layers: 2,
            ..TrainConfig::default()
        };
        let params = init_params(3, &config.model_config(), 11).unwrap();
        let mut adam = Adam::new(&params, 1e-3);
        adam.step = 7;
        adam.first[2] = DenseArray::filled(adam.first[2].shape(), 0.125);
        Checkpoint::new(config, params, Some(adam), 4, 0.625)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        assert_eq!(decode(&encode(&c)).unwrap(), c);
        let bare = Checkpoint { optimizer: None, ..c };
        assert_eq!(decode(&encode(&bare)).unwrap(), bare);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&bare, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), bare);
    }

    #[test]
    fn corruption_and_version_errors() {
        let c = sample();
        let mut bytes = encode(&c);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(TrainError::Checksum)));

        let mut bytes = encode(&c);
        let body_len = bytes.len() - 32;
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let sum = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&sum);
        assert!(matches!(decode(&bytes), Err(TrainError::Version { found: 2, expected: 1 })));

        assert!(matches!(decode(b"not a checkpoint at all, clearly"), Err(TrainError::Checkpoint(_))));
    }

    #[test]
    fn relation_vocabulary_is_checked() {
        let c = sample();
        let quad = crate::data::Quadruple::new(0, 0, 1, 0);
        let same = TkgDataset::new(50, 3, vec![quad], vec![], vec![]).unwrap();
        let other = TkgDataset::new(5, 4, vec![quad], vec![], vec![]).unwrap();
        c.check_dataset(&same).unwrap();
        assert!(matches!(c.check_dataset(&other), Err(TrainError::Validation(_))));
    }
}
