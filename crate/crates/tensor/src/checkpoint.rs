//! Binary checkpoint format with a JSON manifest sidecar.
//!
//! Layout (all integers little-endian):
//! `MAGIC`, `u32` version, model id and config hash as length-prefixed UTF-8,
//! `u32` block count, then per block: name, `u8` kind (0 parameter, 1 buffer),
//! `u32` rank, `u64` extents, and the `f32` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::nn::NamedTensors;
use crate::{Result, Scalar, Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"ADBCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_id: String,
    pub config_hash: String,
    pub params: NamedTensors<f32>,
    pub buffers: NamedTensors<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub kind: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_id: String,
    pub config_hash: String,
    pub parameter_count: usize,
    pub blocks: Vec<BlockInfo>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| TensorError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| TensorError::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn new<T: Scalar>(model_id: &str, config_hash: &str, params: &NamedTensors<T>, buffers: &NamedTensors<T>) -> Self {
        Checkpoint {
            model_id: model_id.to_string(),
            config_hash: config_hash.to_string(),
            params: params.cast(),
            buffers: buffers.cast(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.model_id);
        put_str(&mut out, &self.config_hash);
        out.extend_from_slice(&((self.params.len() + self.buffers.len()) as u32).to_le_bytes());
        for (kind, set) in [(0u8, &self.params), (1u8, &self.buffers)] {
            for (name, t) in set.iter() {
                put_str(&mut out, name);
                out.push(kind);
                out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(TensorError::Checkpoint("bad magic header".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
        }
        let model_id = r.string()?;
        let config_hash = r.string()?;
        let count = r.u32()?;
        let (mut params, mut buffers) = (NamedTensors::new(), NamedTensors::new());
        for _ in 0..count {
            let name = r.string()?;
            let kind = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let bytes = r.take(n.checked_mul(4).ok_or_else(|| TensorError::Checkpoint("block too large".into()))?)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| TensorError::Checkpoint(format!("block `{name}`: {e}")))?;
            match kind {
                0 => params.push(name, t)?,
                1 => buffers.push(name, t)?,
                k => return Err(TensorError::Checkpoint(format!("unknown block kind {k}"))),
            };
        }
        if r.pos != buf.len() {
            return Err(TensorError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { model_id, config_hash, params, buffers })
    }

    pub fn manifest(&self) -> Manifest {
        let block = |kind: &str, (name, t): (&str, &Tensor<f32>)| BlockInfo {
            name: name.to_string(),
            kind: kind.to_string(),
            shape: t.shape().to_vec(),
        };
        Manifest {
            format_version: VERSION,
            model_id: self.model_id.clone(),
            config_hash: self.config_hash.clone(),
            parameter_count: self.params.numel(),
            blocks: self
                .params
                .iter()
                .map(|b| block("parameter", b))
                .chain(self.buffers.iter().map(|b| block("buffer", b)))
                .collect(),
        }
    }

    /// `<path>.json`
    pub fn manifest_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the checkpoint and its manifest sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        let json = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(Self::manifest_path(path), json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies the stored values into `params`/`buffers`, checking that the
    /// model id and every block name and shape agree.
    pub fn restore_into<T: Scalar>(
        &self,
        model_id: &str,
        params: &mut NamedTensors<T>,
        buffers: &mut NamedTensors<T>,
    ) -> Result<()> {
        if self.model_id != model_id {
            return Err(TensorError::Checkpoint(format!("checkpoint is for `{}`, not `{model_id}`", self.model_id)));
        }
        params.assign(&self.params.cast()).map_err(|e| TensorError::Checkpoint(format!("parameters: {e}")))?;
        buffers.assign(&self.buffers.cast()).map_err(|e| TensorError::Checkpoint(format!("buffers: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = NamedTensors::new();
        params.push("fc.weight", Tensor::from_fn(&[3, 2], |i| i as f32 * 0.5 - 1.0)).unwrap();
        params.push("fc.bias", Tensor::full(&[2], 0.25)).unwrap();
        let mut buffers = NamedTensors::new();
        buffers.push("bn.running_var", Tensor::full(&[4], 1.0)).unwrap();
        Checkpoint { model_id: "presnet".into(), config_hash: "abc".into(), params, buffers }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn save_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let m: Manifest = serde_json::from_str(&fs::read_to_string(Checkpoint::manifest_path(&path)).unwrap()).unwrap();
        assert_eq!(m.parameter_count, 8);
        assert_eq!(m.blocks.len(), 3);
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn restore_checks_model_id() {
        let c = sample();
        let (mut p, mut b) = (c.params.cast::<f64>(), c.buffers.cast::<f64>());
        assert!(c.restore_into("transformer", &mut p, &mut b).is_err());
        assert!(c.restore_into("presnet", &mut p, &mut b).is_ok());
    }
}
