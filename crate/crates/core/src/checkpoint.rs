//! Binary checkpoints: an 8-byte magic, a little-endian u32 format version,
//! a u64 header length, a JSON header, then raw little-endian f32 payload
//! (parameters, followed by Adam moments when training state is present).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConvergenceModel, DivergenceModel, ModelConfig};
use crate::nn::{ParamStore, Tensor};
use crate::training::{AdamState, RngState, TrainState};

pub const MAGIC: &[u8; 8] = b"DVSRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Divergence,
    Convergence,
}

/// Identity of the tree a fusion head was trained against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenDivergence {
    pub config_hash: String,
    pub params_digest: String,
}

impl FrozenDivergence {
    pub fn of(model: &DivergenceModel) -> Self {
        FrozenDivergence {
            config_hash: model.config().hash(),
            params_digest: model.params().digest(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub init_seed: u64,
    pub params: ParamStore,
    pub train: Option<TrainState>,
    pub frozen_divergence: Option<FrozenDivergence>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    step: u64,
    epoch: u64,
    epoch_pos: u64,
    rng_seed: u64,
    // u128 does not survive every JSON reader, so it is kept as text.
    rng_word_pos: String,
    adam_t: u64,
    running_sum: f64,
    running_count: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    model_config: ModelConfig,
    config_hash: String,
    init_seed: u64,
    tensors: Vec<TensorMeta>,
    train: Option<TrainMeta>,
    frozen_divergence: Option<FrozenDivergence>,
}

impl Checkpoint {
    pub fn divergence(model: &DivergenceModel, train: Option<TrainState>) -> Self {
        Checkpoint {
            kind: ModelKind::Divergence,
            config: *model.config(),
            init_seed: model.seed(),
            params: model.params().clone(),
            train,
            frozen_divergence: None,
        }
    }

    pub fn convergence(
        head: &ConvergenceModel,
        train: Option<TrainState>,
        frozen: FrozenDivergence,
    ) -> Self {
        Checkpoint {
            kind: ModelKind::Convergence,
            config: *head.config(),
            init_seed: head.seed(),
            params: head.params().clone(),
            train,
            frozen_divergence: Some(frozen),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind,
            model_config: self.config,
            config_hash: self.config.hash(),
            init_seed: self.init_seed,
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorMeta {
                    name: name.to_string(),
                    shape: t.shape(),
                })
                .collect(),
            train: self.train.as_ref().map(|s| TrainMeta {
                step: s.step,
                epoch: s.epoch,
                epoch_pos: s.epoch_pos,
                rng_seed: s.rng.seed,
                rng_word_pos: s.rng.word_pos.to_string(),
                adam_t: s.adam.t,
                running_sum: s.running_sum,
                running_count: s.running_count,
            }),
            frozen_divergence: self.frozen_divergence.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(json.len() + 20 + 4 * self.params.scalar_count() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &Tensor| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, t) in self.params.iter() {
            put(t);
        }
        if let Some(s) = &self.train {
            s.adam.m.iter().chain(&s.adam.v).for_each(&mut put);
        }
        out
    }

    /// Parses checkpoint bytes; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |m: String| Error::checkpoint(path, m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(err(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let body = &bytes[20..];
        let hlen = usize::try_from(hlen)
            .ok()
            .filter(|&n| n <= body.len())
            .ok_or_else(|| err("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| err(format!("malformed header: {e}")))?;
        let recomputed = header.model_config.hash();
        if recomputed != header.config_hash {
            return Err(Error::ConfigHash {
                expected: recomputed,
                found: header.config_hash,
            });
        }

        let mut payload = Payload {
            bytes: &body[hlen..],
        };
        let truncated = || err("truncated payload".into());
        let mut params = ParamStore::new();
        for meta in &header.tensors {
            if params.index_of(&meta.name).is_some() {
                return Err(err(format!("duplicate tensor {}", meta.name)));
            }
            let t = payload.tensor(meta.shape).ok_or_else(truncated)?;
            params.push(meta.name.clone(), t);
        }
        let train = match header.train {
            None => None,
            Some(m) => {
                let mut moments = Vec::with_capacity(2 * header.tensors.len());
                for _ in 0..2 {
                    for meta in &header.tensors {
                        moments.push(payload.tensor(meta.shape).ok_or_else(truncated)?);
                    }
                }
                let v = moments.split_off(header.tensors.len());
                let word_pos = m
                    .rng_word_pos
                    .parse()
                    .map_err(|_| err("malformed rng position".into()))?;
                Some(TrainState {
                    step: m.step,
                    epoch: m.epoch,
                    epoch_pos: m.epoch_pos,
                    rng: RngState {
                        seed: m.rng_seed,
                        word_pos,
                    },
                    adam: AdamState {
                        t: m.adam_t,
                        m: moments,
                        v,
                    },
                    running_sum: m.running_sum,
                    running_count: m.running_count,
                })
            }
        };
        if !payload.bytes.is_empty() {
            return Err(err(format!("{} trailing bytes", payload.bytes.len())));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.model_config,
            init_seed: header.init_seed,
            params,
            train,
            frozen_divergence: header.frozen_divergence,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = tmp_path(path);
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and insists on the given model configuration.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let (want, got) = (expected.hash(), ckpt.config.hash());
        if want != got {
            return Err(Error::ConfigHash {
                expected: want,
                found: got,
            });
        }
        Ok(ckpt)
    }

    pub fn divergence_model(&self) -> Result<DivergenceModel> {
        self.expect_kind(ModelKind::Divergence)?;
        DivergenceModel::from_params(self.config, self.init_seed, &self.params)
    }

    pub fn convergence_model(&self) -> Result<ConvergenceModel> {
        self.expect_kind(ModelKind::Convergence)?;
        ConvergenceModel::from_params(self.config, self.init_seed, &self.params)
    }

    /// Checks that this fusion head was trained against `divergence`.
    pub fn check_pairing(&self, divergence: &DivergenceModel) -> Result<()> {
        let frozen = self
            .frozen_divergence
            .as_ref()
            .ok_or_else(|| Error::Structure("checkpoint does not record a divergence model".into()))?;
        let actual = FrozenDivergence::of(divergence);
        if frozen.config_hash != actual.config_hash {
            return Err(Error::ConfigHash {
                expected: frozen.config_hash.clone(),
                found: actual.config_hash,
            });
        }
        if frozen.params_digest != actual.params_digest {
            return Err(Error::Structure(
                "fusion head was trained against different divergence weights".into(),
            ));
        }
        Ok(())
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Structure(format!(
                "checkpoint holds a {:?} model, expected {kind:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

struct Payload<'a> {
    bytes: &'a [u8],
}

impl Payload<'_> {
    fn tensor(&mut self, shape: [usize; 4]) -> Option<Tensor> {
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
        let len = n.checked_mul(4)?;
        if len > self.bytes.len() {
            return None;
        }
        let (head, rest) = self.bytes.split_at(len);
        self.bytes = rest;
        let data = head
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Some(Tensor::from_vec(shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            tree_depth: 1,
            branching: 2,
            residual_groups: 1,
            blocks_per_group: 1,
            channels: 4,
            scale: 2,
            reduction: 2,
            deep_residual: true,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let model = DivergenceModel::new(tiny(), 5).unwrap();
        let mut state = TrainState::new(model.params(), 9);
        state.step = 17;
        state.rng.word_pos = u128::MAX - 3;
        state.running_sum = 0.1 + 0.2;
        state.adam.m[0].data_mut()[0] = 1.5e-7;
        let ckpt = Checkpoint::divergence(&model, Some(state));
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.divergence_model().unwrap().params(), model.params());
    }

    #[test]
    fn rejects_corruption() {
        let model = DivergenceModel::new(tiny(), 5).unwrap();
        let bytes = Checkpoint::divergence(&model, None).to_bytes();
        let p = Path::new("x.ckpt");

        let cut = Checkpoint::from_bytes(&bytes[..bytes.len() - 2], p).unwrap_err();
        assert!(cut.to_string().contains("truncated"), "{cut}");

        let mut v2 = bytes.clone();
        v2[8] = 2;
        let e = Checkpoint::from_bytes(&v2, p).unwrap_err();
        assert!(e.to_string().contains("version 2"), "{e}");

        let mut junk = bytes.clone();
        junk.push(0);
        assert!(Checkpoint::from_bytes(&junk, p).is_err());
        assert!(Checkpoint::from_bytes(b"hello", p).is_err());
    }

    #[test]
    fn config_hash_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let model = DivergenceModel::new(tiny(), 1).unwrap();
        Checkpoint::divergence(&model, None).save(&path).unwrap();
        let other = ModelConfig { deep_residual: false, ..tiny() };
        assert!(matches!(
            Checkpoint::load_expecting(&path, &other),
            Err(Error::ConfigHash { .. })
        ));
        assert!(Checkpoint::load_expecting(&path, &tiny()).is_ok());
        let e = Checkpoint::load(&path).unwrap().convergence_model().unwrap_err();
        assert!(matches!(e, Error::Structure(_)));
    }

    #[test]
    fn tampered_config_is_detected() {
        let model = DivergenceModel::new(tiny(), 1).unwrap();
        let mut bytes = Checkpoint::divergence(&model, None).to_bytes();
        let key = b"\"channels\":4";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        bytes[at + key.len() - 1] = b'8';
        let e = Checkpoint::from_bytes(&bytes, Path::new("t")).unwrap_err();
        assert!(matches!(e, Error::ConfigHash { .. }), "{e}");
    }

    #[test]
    fn pairing_check() {
        let div = DivergenceModel::new(tiny(), 1).unwrap();
        let head = ConvergenceModel::new(tiny(), 2).unwrap();
        let ck = Checkpoint::convergence(&head, None, FrozenDivergence::of(&div));
        assert!(ck.check_pairing(&div).is_ok());
        let other = DivergenceModel::new(tiny(), 3).unwrap();
        assert!(matches!(ck.check_pairing(&other), Err(Error::Structure(_))));
    }
}
