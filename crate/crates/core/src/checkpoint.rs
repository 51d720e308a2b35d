//! Binary checkpoints: `VITRCKPT`, u32 version, model config as JSON, then
//! every parameter as name, shape and little-endian f64 values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VitrParams};

const MAGIC: &[u8; 8] = b"VITRCKPT";
const VERSION: u32 = 1;

pub fn to_bytes(model: &VitrParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    put_u64(&mut out, config.len() as u64);
    out.extend_from_slice(&config);
    put_u64(&mut out, model.store.len() as u64);
    for (name, tensor) in model.store.iter() {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, tensor.shape().len() as u64);
        for d in tensor.shape() {
            put_u64(&mut out, *d as u64);
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > (self.bytes.len() - self.at) as u64 * 8 + 64 {
            return Err(Error::Format(format!("implausible length {v} in checkpoint")));
        }
        Ok(v as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<VitrParams> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.len()?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
    let mut model = VitrParams::new(config)?;
    let count = r.len()?;
    if count != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, model expects {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let n = r.len()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.len()?;
        let shape: Vec<usize> = (0..rank).map(|_| r.len()).collect::<Result<_>>()?;
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}` in checkpoint")))?;
        if model.store.get(id).shape() != shape.as_slice() {
            return Err(Error::shape(
                "checkpoint parameter",
                model.store.get(id).shape(),
                &shape,
            ));
        }
        let len = model.store.get(id).len();
        let raw = r.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model.store.set(&name, data)?;
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.at)));
    }
    Ok(model)
}

pub fn save(model: &VitrParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<VitrParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    from_bytes(&bytes).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> VitrParams {
        VitrParams::new(ModelConfig {
            d1: 4,
            d2: 5,
            k: 4,
            d3: 6,
            d4: 3,
            seed: 9,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut m = tiny();
        m.store.set("fusion.head.bias", vec![std::f64::consts::PI]).unwrap();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = to_bytes(&tiny());
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes(b"nonsense").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load(Path::new("/nonexistent/model.ckpt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/model.ckpt"));
    }
}
