//! Binary checkpoint format.
//!
//! ```text
//! offset 0   magic "FSE1"
//! offset 4   u32 LE format version (1)
//! offset 8   u64 LE header length H
//! offset 16  H bytes of UTF-8 JSON: configs, step and the tensor table
//!            (name, shape, byte offset into the data section)
//! 16 + H     tensor data, little-endian f32, in table order
//! ```
//!
//! Tensors are the model parameters followed by `opt.m.*` and `opt.v.*`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig};
use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::model::{param_layout, ModelConfig, ParamStore};
use crate::sampler::SolverConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSE1";
const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub mel: MelConfig,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    /// Optimizer steps completed.
    pub step: usize,
    pub params: ParamStore<f32>,
    pub opt: AdamState<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    mel: MelConfig,
    train: TrainConfig,
    solver: SolverConfig,
    step: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn sections(ckpt: &Checkpoint) -> Vec<(String, &ArrayD<f32>)> {
    let mut out: Vec<(String, &ArrayD<f32>)> = ckpt.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    out.extend(ckpt.opt.m.iter().map(|(n, t)| (format!("opt.m.{n}"), t)));
    out.extend(ckpt.opt.v.iter().map(|(n, t)| (format!("opt.v.{n}"), t)));
    out
}

/// Writes atomically: the file appears under `path` only once complete.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tensors = sections(ckpt);
    let mut offset = 0u64;
    let mut table = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        table.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let header = Header {
        model: ckpt.model,
        mel: ckpt.mel,
        train: ckpt.train,
        solver: ckpt.solver,
        step: ckpt.step,
        tensors: table,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::config(format!("cannot encode header: {e}")))?;
    let mut bytes = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    bytes
        .get(at..at.saturating_add(len))
        .filter(|s| s.len() == len)
        .ok_or_else(|| {
            Error::format(
                bytes.len() as u64,
                format!("file ends before {what} ({len} bytes at {at})"),
            )
        })
}

fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    let magic = take(bytes, 0, 4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(take(bytes, 8, 8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| Error::format(8, "header length overflows"))?;
    let json = take(bytes, PREAMBLE, header_len, "header")?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::format(PREAMBLE as u64, format!("bad header: {e}")))?;
    let data_start = PREAMBLE + header_len;
    let data = &bytes[data_start..];

    let mut expected = 0u64;
    let mut store =
        |prefix: &str, entries: &mut std::slice::Iter<TensorEntry>, count: usize| -> Result<ParamStore<f32>> {
            let mut out = ParamStore::new();
            for _ in 0..count {
                let e = entries
                    .next()
                    .ok_or_else(|| Error::format(PREAMBLE as u64, "tensor table is too short"))?;
                let at = (data_start as u64).saturating_add(e.offset);
                let name = e
                    .name
                    .strip_prefix(prefix)
                    .ok_or_else(|| Error::format(at, format!("unexpected tensor '{}'", e.name)))?;
                if e.offset != expected {
                    return Err(Error::format(at, format!("tensor '{}' is not contiguous", e.name)));
                }
                let n: usize = e.shape.iter().product();
                let raw = take(data, e.offset as usize, 4 * n, &format!("tensor '{}'", e.name))
                    .map_err(|_| Error::format(bytes.len() as u64, format!("file ends inside tensor '{}'", e.name)))?;
                let values: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                let t = ArrayD::from_shape_vec(IxDyn(&e.shape), values).expect("length matches shape");
                out.insert(name, t);
                expected += 4 * n as u64;
            }
            Ok(out)
        };
    let n_params = header.tensors.len() / 3;
    if !header.tensors.len().is_multiple_of(3) {
        return Err(Error::format(
            PREAMBLE as u64,
            "tensor table must hold params and two moments",
        ));
    }
    let mut entries = header.tensors.iter();
    let params = store("", &mut entries, n_params)?;
    let m = store("opt.m.", &mut entries, n_params)?;
    let v = store("opt.v.", &mut entries, n_params)?;
    if expected != data.len() as u64 {
        return Err(Error::format(
            data_start as u64 + expected,
            format!("{} trailing bytes after tensor data", data.len() as u64 - expected),
        ));
    }
    for (a, b) in params.iter().zip(m.iter()).chain(params.iter().zip(v.iter())) {
        if a.0 != b.0 || a.1.shape() != b.1.shape() {
            return Err(Error::format(
                PREAMBLE as u64,
                format!("optimizer moment for '{}' does not match", a.0),
            ));
        }
    }
    params.check_layout(&header.model)?;
    Ok(Checkpoint {
        model: header.model,
        mel: header.mel,
        train: header.train,
        solver: header.solver,
        step: header.step,
        params,
        opt: AdamState { m, v },
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    parse(&bytes)
}

/// Loads a checkpoint and checks every tensor against the layout implied by
/// `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    for (name, shape) in param_layout(expected) {
        let found = ckpt.params.get(&name).map(|t| t.shape().to_vec()).unwrap_or_default();
        if found != shape {
            return Err(Error::ShapeMismatch {
                name,
                expected: shape,
                found,
            });
        }
    }
    if ckpt.params.len() != param_layout(expected).len() {
        return Err(Error::config(
            "checkpoint holds tensors the configured model does not have",
        ));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let model = ModelConfig::tiny();
        let params = init_params::<f32>(&model, 11).unwrap();
        let mut opt = AdamState::new(&params);
        for (i, (_, t)) in opt.m.iter_mut().enumerate() {
            t.mapv_inplace(|_| (i as f32 * 1e-3).sin());
        }
        for (_, t) in opt.v.iter_mut() {
            t.mapv_inplace(|_| f32::MIN_POSITIVE);
        }
        Checkpoint {
            model,
            mel: MelConfig::paper(),
            train: TrainConfig::tiny(),
            solver: SolverConfig::default(),
            step: 1234,
            params,
            opt,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fse");
        let c = sample();
        save_checkpoint(&path, &c).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        for ((_, a), (_, b)) in back.params.iter().zip(c.params.iter()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(!path.with_extension("partial").exists());
    }

    #[test]
    fn truncation_and_corruption_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fse");
        save_checkpoint(&path, &sample()).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [0, 3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(parse(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(parse(&bad), Err(Error::Format { offset: 4, .. })));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(parse(&bad), Err(Error::Format { .. })));
        let mut bad = bytes;
        bad[PREAMBLE] = b'!';
        assert!(matches!(parse(&bad), Err(Error::Format { offset: 16, .. })));
    }

    #[test]
    fn tiny_checkpoint_rejected_by_full_size_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fse");
        save_checkpoint(&path, &sample()).unwrap();
        assert!(load_checkpoint_expecting(&path, &ModelConfig::tiny()).is_ok());
        match load_checkpoint_expecting(&path, &ModelConfig::paper()) {
            Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "text.embed"),
            other => panic!("{other:?}"),
        }
    }
}
