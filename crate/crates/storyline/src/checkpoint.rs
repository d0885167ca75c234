//! Binary checkpoints.
//!
//! Layout: the magic bytes `INCK`, a little-endian `u32` format version, a
//! `u32` byte length plus UTF-8 JSON metadata, then the binary payload —
//! first the model parameters, then the optimizer moments, each section a
//! `u32` record count followed by records of the form
//!
//! ```text
//! u16 name length | name bytes | u8 rank | u32 dim per axis | raw LE values
//! ```
//!
//! Value width follows the checkpoint's precision. The metadata carries a
//! SHA-256 digest of the payload, so a corrupted byte anywhere in the tensor
//! data fails loudly at load time instead of silently mis-loading.

use std::path::Path;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StoryModel};
use crate::rng::{hex_encode, RngState};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;
use crate::train::{AdamState, EpochRecord, TrainConfig};

const MAGIC: &[u8; 4] = b"INCK";
const VERSION: u32 = 1;

/// Everything about a run that is not raw tensor data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed training epochs.
    pub epoch: usize,
    pub adam_step: u64,
    pub rng: RngState,
    pub history: Vec<EpochRecord>,
    pub payload_sha256: String,
}

/// A fully restored checkpoint.
#[derive(Debug)]
pub struct Checkpoint<R: Scalar> {
    pub meta: CheckpointMeta,
    pub model: StoryModel<R>,
    pub adam: AdamState<R>,
    pub rng: ChaCha20Rng,
}

fn push_record<R: Scalar>(buf: &mut Vec<u8>, name: &str, t: &Tensor<R>) {
    let name_bytes = name.as_bytes();
    buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(name_bytes);
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(buf);
    }
}

/// Serialize model parameters and optimizer state and write the checkpoint.
/// `epoch` counts completed epochs; `rng` is the training stream exactly as
/// it stands, so a resumed run continues the same draw sequence.
pub fn save<R: Scalar>(
    path: &Path,
    model: &StoryModel<R>,
    train: &TrainConfig,
    epoch: usize,
    adam: &AdamState<R>,
    rng: &ChaCha20Rng,
    history: &[EpochRecord],
) -> Result<()> {
    let named = model.named_params();
    let mut payload = Vec::new();
    payload.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        push_record(&mut payload, name, t);
    }
    let n_opt = (adam.m.len() + adam.v.len()) as u32;
    payload.extend_from_slice(&n_opt.to_le_bytes());
    for ((name, _), m) in named.iter().zip(&adam.m) {
        push_record(&mut payload, &format!("m.{name}"), m);
    }
    for ((name, _), v) in named.iter().zip(&adam.v) {
        push_record(&mut payload, &format!("v.{name}"), v);
    }

    let meta = CheckpointMeta {
        format_version: VERSION,
        precision: R::PRECISION,
        model: model.config.clone(),
        train: train.clone(),
        epoch,
        adam_step: adam.step,
        rng: RngState::capture(rng),
        history: history.to_vec(),
        payload_sha256: hex_encode(&Sha256::digest(&payload)),
    };
    let meta_json = serde_json::to_string(&meta)?;

    let mut bytes = Vec::with_capacity(12 + meta_json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(meta_json.as_bytes());
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(self.fail(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn fail(&self, reason: String) -> Error {
        Error::Format {
            path: self.path.display().to_string(),
            reason,
        }
    }
}

fn read_record<R: Scalar>(cur: &mut Cursor<'_>) -> Result<(String, Tensor<R>)> {
    let name_len = cur.u16()? as usize;
    let name = std::str::from_utf8(cur.take(name_len)?)
        .map_err(|_| cur.fail("record name is not UTF-8".into()))?
        .to_string();
    let rank = cur.u8()? as usize;
    if rank > 2 {
        return Err(cur.fail(format!("record {name} has unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u32()? as usize);
    }
    let numel: usize = shape.iter().product();
    let raw = cur.take(numel * R::BYTE_WIDTH)?;
    let data: Vec<R> = raw.chunks_exact(R::BYTE_WIDTH).map(R::read_le).collect();
    Ok((name, Tensor::from_parts(shape, data)))
}

/// Read only the metadata header (no payload validation).
pub fn peek_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path)?;
    parse_meta(path, &bytes).map(|(meta, _)| meta)
}

fn parse_meta<'a>(path: &Path, bytes: &'a [u8]) -> Result<(CheckpointMeta, &'a [u8])> {
    let fail = |reason: String| Error::Format {
        path: path.display().to_string(),
        reason,
    };
    if bytes.len() < 12 {
        return Err(fail("file shorter than the fixed header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic bytes, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported format version {version}")));
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if 12 + meta_len > bytes.len() {
        return Err(fail("metadata length exceeds file size".into()));
    }
    let meta_json = std::str::from_utf8(&bytes[12..12 + meta_len])
        .map_err(|_| fail("metadata is not UTF-8".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
    if meta.format_version != VERSION {
        return Err(fail(format!(
            "metadata declares version {}, header {VERSION}",
            meta.format_version
        )));
    }
    Ok((meta, &bytes[12 + meta_len..]))
}

/// Load and fully validate a checkpoint in precision `R`.
pub fn load<R: Scalar>(path: &Path) -> Result<Checkpoint<R>> {
    let bytes = std::fs::read(path)?;
    let (meta, payload) = parse_meta(path, &bytes)?;
    if meta.precision != R::PRECISION {
        return Err(Error::Config(format!(
            "checkpoint {} stores {} values, requested {}",
            path.display(),
            meta.precision,
            R::PRECISION
        )));
    }
    let digest = hex_encode(&Sha256::digest(payload));
    if digest != meta.payload_sha256 {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: "payload checksum mismatch, checkpoint is corrupt".into(),
        });
    }

    let mut cur = Cursor {
        bytes: payload,
        at: 0,
        path,
    };
    let n_params = cur.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(read_record::<R>(&mut cur)?);
    }
    let n_opt = cur.u32()? as usize;
    let mut opt = std::collections::HashMap::with_capacity(n_opt);
    for _ in 0..n_opt {
        let (name, t) = read_record::<R>(&mut cur)?;
        opt.insert(name, t);
    }
    if cur.at != payload.len() {
        return Err(cur.fail(format!(
            "{} trailing bytes after final record",
            payload.len() - cur.at
        )));
    }

    let model = StoryModel::from_named(meta.model.clone(), &params)?;
    let named = model.named_params();
    let mut take_moment = |prefix: &str, (name, p): &(String, &Tensor<R>)| -> Result<Tensor<R>> {
        let key = format!("{prefix}.{name}");
        let t = opt.remove(&key).ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            reason: format!("optimizer record {key} missing"),
        })?;
        if t.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint_load",
                lhs: p.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        Ok(t)
    };
    let m: Vec<Tensor<R>> = named
        .iter()
        .map(|np| take_moment("m", np))
        .collect::<Result<_>>()?;
    let v: Vec<Tensor<R>> = named
        .iter()
        .map(|np| take_moment("v", np))
        .collect::<Result<_>>()?;
    if let Some(extra) = opt.keys().next() {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("unexpected optimizer record {extra}"),
        });
    }
    let adam = AdamState {
        m,
        v,
        step: meta.adam_step,
    };
    let rng = meta.rng.restore()?;
    Ok(Checkpoint {
        meta,
        model,
        adam,
        rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StoryExample;
    use crate::rng::{stream, STREAM_INIT};
    use crate::train::{train, TrainConfig};
    use rand::Rng;
    use rand::RngCore;

    fn trained_fixture() -> (
        StoryModel<f64>,
        AdamState<f64>,
        ChaCha20Rng,
        Vec<EpochRecord>,
    ) {
        let mut cfg = ModelConfig::for_features(6, 9);
        cfg.slots = 2;
        cfg.inner_dim = 3;
        cfg.max_len = 5;
        cfg.decoder_hidden = 4;
        cfg.alpha = 1;
        cfg.beta = 2;
        let mut rng = stream(10, STREAM_INIT);
        let mut model = StoryModel::init(cfg, &mut rng).unwrap();
        let mut data_rng = stream(11, crate::rng::STREAM_SYNTH);
        let corpus: Vec<StoryExample<f64>> = (0..4)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..3)
                    .map(|_| (0..6).map(|_| data_rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                StoryExample {
                    features: Tensor::from_rows(&rows).unwrap(),
                    sentences: (0..3)
                        .map(|_| vec![data_rng.gen_range(4..9u32), crate::model::EOS])
                        .collect(),
                }
            })
            .collect();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed: 12,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &corpus, &tc, None).unwrap();
        let adam = AdamState::new(&model);
        let train_rng = stream(12, crate::rng::STREAM_TRAIN);
        (model, adam, train_rng, report.history)
    }

    #[test]
    fn save_load_round_trips_bitwise() {
        let (model, adam, rng, history) = trained_fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.inck");
        let tc = TrainConfig::default();
        save(&path, &model, &tc, 3, &adam, &rng, &history).unwrap();

        let loaded = load::<f64>(&path).unwrap();
        assert_eq!(loaded.meta.epoch, 3);
        assert_eq!(loaded.meta.history, history);
        for ((n1, p1), (n2, p2)) in model
            .named_params()
            .iter()
            .zip(loaded.model.named_params().iter())
        {
            assert_eq!(n1, n2);
            let bits1: Vec<u64> = p1.data().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = p2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2, "parameter {n1}");
        }
        // Saving the loaded state reproduces the file byte for byte.
        let path2 = dir.path().join("model2.inck");
        save(
            &path2,
            &loaded.model,
            &loaded.meta.train,
            loaded.meta.epoch,
            &loaded.adam,
            &loaded.rng,
            &loaded.meta.history,
        )
        .unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        // The restored generator continues the identical draw sequence.
        let mut orig = rng.clone();
        let mut restored = loaded.rng.clone();
        for _ in 0..8 {
            assert_eq!(orig.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn corruption_and_truncation_fail_loudly() {
        let (model, adam, rng, history) = trained_fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.inck");
        save(
            &path,
            &model,
            &TrainConfig::default(),
            1,
            &adam,
            &rng,
            &history,
        )
        .unwrap();
        let clean = std::fs::read(&path).unwrap();

        // One flipped payload byte must be caught by the checksum.
        let mut corrupt = clean.clone();
        let last = corrupt.len() - 1;
        corrupt[last] ^= 0x01;
        std::fs::write(&path, &corrupt).unwrap();
        let err = load::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");

        // Bad magic.
        let mut bad_magic = clean.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Format { .. })));

        // Unsupported version.
        let mut bad_version = clean.clone();
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Format { .. })));

        // Truncation anywhere in the payload.
        std::fs::write(&path, &clean[..clean.len() - 7]).unwrap();
        assert!(load::<f64>(&path).is_err());
    }

    #[test]
    fn precision_mismatch_is_a_config_error() {
        let (model, adam, rng, history) = trained_fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.inck");
        save(
            &path,
            &model,
            &TrainConfig::default(),
            1,
            &adam,
            &rng,
            &history,
        )
        .unwrap();
        let err = load::<f32>(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("f64"));
        // peek_meta reports the stored precision for dispatch.
        assert_eq!(peek_meta(&path).unwrap().precision, Precision::F64);
    }
}
