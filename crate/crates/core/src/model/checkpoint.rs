//! Binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "RPAD" | version | len | run config document (UTF-8) | tensor count |
//!   per tensor: len | name (UTF-8) | rank | dims... | f32 data
//! ```
//!
//! Parameters come first in model order, then each batch-norm layer's
//! `<name>.running_mean` and `<name>.running_var`. Values are stored as
//! `f32`, so `f32` models round-trip bit-exactly.

use std::fs;
use std::path::Path;

use super::RopadModel;
use crate::autodiff::BatchNormState;
use crate::config::RunConfig;
use crate::error::CheckpointError;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RPAD";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("checkpoint field exceeds u32").to_le_bytes());
}

fn put_tensor<T: Scalar>(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    put_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len());
    for &d in shape {
        put_u32(buf, d);
    }
    for v in data {
        buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
}

/// Serializes `model` with `cfg`; the embedded document takes the model's
/// own architecture and shape settings. Paths are reset to their defaults so
/// the bytes do not depend on where a run was written.
pub fn to_bytes<T: Scalar>(model: &RopadModel<T>, cfg: &RunConfig) -> Vec<u8> {
    let mut cfg = cfg.clone();
    let defaults = RunConfig::default();
    cfg.model = model.config().clone();
    cfg.arch = model.arch();
    cfg.data_dir = defaults.data_dir;
    cfg.out_dir = defaults.out_dir;
    let doc = cfg.to_document();

    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut buf, doc.len());
    buf.extend_from_slice(doc.as_bytes());
    put_u32(&mut buf, model.params().len() + 2 * model.bn_states().len());
    for (_, p) in model.params().iter() {
        put_tensor(&mut buf, &p.name, p.tensor.shape(), p.tensor.data());
    }
    for (name, state) in model.bn_named() {
        put_tensor(&mut buf, &format!("{name}.running_mean"), &[state.channels()], state.mean());
        put_tensor(&mut buf, &format!("{name}.running_var"), &[state.channels()], state.var());
    }
    buf
}

pub fn save_checkpoint<T: Scalar>(model: &RopadModel<T>, cfg: &RunConfig, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model, cfg))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Vec<usize>, Vec<T>), CheckpointError> {
        let name = self.string("tensor name")?;
        let rank = self.u32("tensor rank")?;
        let shape = (0..rank).map(|_| self.u32("tensor dims")).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: dims {shape:?} overflow")))?;
        let raw = self.take(bytes, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Ok((name, shape, data))
    }
}

/// Parses a checkpoint; nothing is returned unless every tensor is present
/// and well-formed.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(RopadModel<T>, RunConfig), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: VERSION });
    }
    let cfg = RunConfig::parse(&r.string("config document")?)?;
    let mut model = RopadModel::<T>::build(&cfg.model, cfg.arch, &mut Rng::new(0))?;

    let count = r.u32("tensor count")?;
    let expected = model.params().len() + 2 * model.bn_states().len();
    if count != expected {
        return Err(CheckpointError::Malformed(format!("{count} tensors, {} architecture needs {expected}", cfg.arch.name())));
    }
    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
    for id in ids {
        let (name, shape, data) = r.tensor::<T>()?;
        let param = model.params().get(id);
        if name != param.name || shape != param.tensor.shape() {
            return Err(CheckpointError::Malformed(format!(
                "expected {} {:?}, found {name} {shape:?}",
                param.name,
                param.tensor.shape()
            )));
        }
        let mut t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        t.set_requires_grad(true);
        *model.params_mut().tensor_mut(id) = t;
    }
    let bn_names: Vec<String> = model.bn_named().map(|(n, _)| n.to_string()).collect();
    let mut states = Vec::with_capacity(bn_names.len());
    for (i, name) in bn_names.iter().enumerate() {
        let channels = model.bn_states()[i].channels();
        let mut stat = |suffix: &str| -> Result<Vec<T>, CheckpointError> {
            let (found, shape, data) = r.tensor::<T>()?;
            let want = format!("{name}.{suffix}");
            if found != want || shape != [channels] {
                return Err(CheckpointError::Malformed(format!("expected {want} [{channels}], found {found} {shape:?}")));
            }
            Ok(data)
        };
        let mean = stat("running_mean")?;
        let var = stat("running_var")?;
        states.push(BatchNormState::from_stats(mean, var).map_err(|e| CheckpointError::Malformed(e.to_string()))?);
    }
    model.commit_bn(states);
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((model, cfg))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(RopadModel<T>, RunConfig), CheckpointError> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::model::{Architecture, ModelConfig};

    fn small() -> ModelConfig {
        ModelConfig { block_channels: [4, 3, 2], embedding_dim: 8, predictor_hidden: 4, decoder_channels: [4, 3, 2, 3], ..Default::default() }
    }

    fn trained_ish() -> RopadModel<f32> {
        let mut rng = Rng::new(5);
        let mut m = RopadModel::build_ropad(&small(), &mut rng).unwrap();
        let x = Tensor::uniform(&[3, 3, 54, 54], 0.0, 1.0, &mut rng);
        m.encode(&x, Mode::Train).unwrap();
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = trained_ish();
        let cfg = RunConfig::default();
        let bytes = to_bytes(&m, &cfg);
        let (back, back_cfg) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(to_bytes(&back, &back_cfg), bytes);
        assert_eq!(back.bn_states(), m.bn_states());
        assert_eq!(back.params(), m.params());
    }

    #[test]
    fn errors_are_distinct() {
        let bytes = to_bytes(&trained_ish(), &RunConfig::default());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(from_bytes::<f32>(&bad), Err(CheckpointError::VersionMismatch { found: 9, expected: 1 })));
        for cut in [2, 6, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes::<f32>(&bytes[..cut]), Err(CheckpointError::Truncated(_))), "cut {cut}");
        }
    }

    #[test]
    fn embedded_config_follows_model() {
        let m = trained_ish().prune_for_inference();
        let bytes = to_bytes(&m, &RunConfig::default());
        let (_, cfg) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(cfg.arch, Architecture::Base);
        assert_eq!(cfg.model, small());
    }
}
