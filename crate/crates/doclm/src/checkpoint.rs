//! Versioned binary checkpoints: a JSON meta header (configs, step, epoch),
//! then every parameter keyed by name with a shape header, then optional
//! optimizer state. All integers and floats are little-endian.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::model::ModelBundle;
use crate::tensor::{ParamSet, Tensor};
use crate::train::AdamState;

const MAGIC: &[u8; 4] = b"DLCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("meta header: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("parameter {name}: checkpoint shape {got:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
    #[error("checkpoint holds {got} parameters, model has {expected}")]
    ParamCount { got: usize, expected: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub step: u64,
    pub epoch: u64,
}

#[derive(Debug, Clone, Default)]
pub struct OptSnapshot {
    pub t: Vec<u64>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
    pub opt: Option<OptSnapshot>,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.buf.len() {
            return Err(CheckpointError::Corrupt("truncated".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save(
    path: impl AsRef<Path>,
    meta: &CheckpointMeta,
    params: &ParamSet,
    opt: Option<&AdamState>,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, FORMAT_VERSION);
    let meta_json = serde_json::to_vec(meta)?;
    push_u32(&mut buf, meta_json.len() as u32);
    buf.extend_from_slice(&meta_json);
    push_u32(&mut buf, params.len() as u32);
    for (_, p) in params.iter() {
        let name = p.name.as_bytes();
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name);
        push_u32(&mut buf, p.tensor.rank() as u32);
        for &d in p.tensor.shape() {
            push_u64(&mut buf, d as u64);
        }
        push_f64s(&mut buf, p.tensor.data());
    }
    match opt {
        None => buf.push(0),
        Some(state) => {
            buf.push(1);
            for (i, (_, p)) in params.iter().enumerate() {
                push_u64(&mut buf, state.t[i]);
                debug_assert_eq!(state.m[i].len(), p.tensor.numel());
                push_f64s(&mut buf, &state.m[i]);
                push_f64s(&mut buf, &state.v[i]);
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let data = fs::read(path)?;
    let mut r = Reader { buf: &data, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let n_params = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        tensors.push((name, tensor));
    }
    let opt = match r.take(1)?[0] {
        0 => None,
        1 => {
            let mut snap = OptSnapshot::default();
            for (_, t) in &tensors {
                snap.t.push(r.u64()?);
                snap.m.push(r.f64s(t.numel())?);
                snap.v.push(r.f64s(t.numel())?);
            }
            Some(snap)
        }
        b => return Err(CheckpointError::Corrupt(format!("bad optimizer flag {b}"))),
    };
    Ok(Checkpoint { meta, tensors, opt })
}

/// Copies checkpoint tensors into the model by name, shape-checked; fails on
/// the first mismatched parameter.
pub fn apply(model: &mut ModelBundle, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    if ckpt.tensors.len() != model.params.len() {
        return Err(CheckpointError::ParamCount {
            got: ckpt.tensors.len(),
            expected: model.params.len(),
        });
    }
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let (name, expected_shape) = {
            let p = model.params.get(id);
            (p.name.clone(), p.tensor.shape().to_vec())
        };
        let Some((_, t)) = ckpt.tensors.iter().find(|(n, _)| *n == name) else {
            return Err(CheckpointError::MissingParam(name));
        };
        if t.shape() != expected_shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: expected_shape,
                got: t.shape().to_vec(),
            });
        }
        model
            .params
            .get_mut(id)
            .tensor
            .data_mut()
            .copy_from_slice(t.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelBundle;

    fn tiny() -> ModelBundle {
        ModelBundle::init(
            EncoderConfig {
                d_enc: 16,
                n_layers: 1,
                n_heads: 2,
                patch_grid: 2,
                image_size: 8,
                ..EncoderConfig::default()
            },
            DecoderConfig {
                d_dec: 16,
                n_layers: 1,
                n_heads: 2,
                ..DecoderConfig::default()
            },
            9,
        )
        .unwrap()
    }

    fn meta(m: &ModelBundle) -> CheckpointMeta {
        CheckpointMeta {
            encoder: m.encoder.cfg.clone(),
            decoder: m.decoder.cfg.clone(),
            step: 12,
            epoch: 3,
        }
    }

    #[test]
    fn roundtrip_preserves_bits_and_meta() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&path, &meta(&m), &m.params, None).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.meta.step, 12);
        assert_eq!(ck.meta.epoch, 3);
        assert_eq!(ck.tensors.len(), m.params.len());
        for ((name, t), (_, p)) in ck.tensors.iter().zip(m.params.iter()) {
            assert_eq!(name, &p.name);
            assert_eq!(t, &p.tensor);
        }

        let mut fresh = tiny();
        // scramble, then restore
        for (_, p) in fresh.params.iter_mut() {
            p.tensor.data_mut().fill(42.0);
        }
        apply(&mut fresh, &ck).unwrap();
        for ((_, a), (_, b)) in fresh.params.iter().zip(m.params.iter()) {
            assert_eq!(a.tensor, b.tensor);
        }
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&path, &meta(&m), &m.params, None).unwrap();
        let ck = load(&path).unwrap();

        let mut other = ModelBundle::init(
            EncoderConfig {
                d_enc: 32,
                n_layers: 1,
                n_heads: 2,
                patch_grid: 2,
                image_size: 8,
                ..EncoderConfig::default()
            },
            DecoderConfig {
                d_dec: 16,
                n_layers: 1,
                n_heads: 2,
                ..DecoderConfig::default()
            },
            9,
        )
        .unwrap();
        let err = apply(&mut other, &ck).unwrap_err();
        match err {
            CheckpointError::ShapeMismatch { name, .. } => {
                assert!(name.starts_with("encoder."), "{name}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_checkpoint_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        save(&p1, &meta(&m), &m.params, None).unwrap();
        save(&p2, &meta(&m), &m.params, None).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }
}
