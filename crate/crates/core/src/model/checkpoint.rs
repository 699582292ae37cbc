//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SYMUPE-CKPT v1\n"
//! u32 config length, config text (ModelConfig::to_text)
//! u32 tensor count
//! per tensor: u32 name length, name, u32 ndim, ndim x u64 dims, f32 data
//! ```
//!
//! Values are stored in single precision; loading widens them back to f64.

use std::path::Path;

use symupe_tensor::{Array, ParamStore};

use super::{ModelConfig, ModelError, PianoFlow};

pub const MAGIC: &[u8] = b"SYMUPE-CKPT v1\n";

pub fn to_bytes(model: &PianoFlow) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + model.param_count() * 4 + 4096);
    out.extend_from_slice(MAGIC);
    let cfg = model.config.to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, name, a) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
        for &d in a.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in a.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ModelError::Checkpoint(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize, ModelError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| ModelError::Checkpoint("dimension overflows usize".into()))
    }

    fn text(&mut self, n: usize) -> Result<&'a str, ModelError> {
        std::str::from_utf8(self.take(n)?).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<PianoFlow, ModelError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len()).ok() != Some(MAGIC) {
        return Err(ModelError::Checkpoint("missing SYMUPE-CKPT v1 header".into()));
    }
    let len = c.u32()?;
    let config = ModelConfig::parse(c.text(len)?)?;
    let expected = config.param_shapes();
    let count = c.u32()?;
    if count != expected.len() {
        return Err(ModelError::Checkpoint(format!("{count} tensors, config implies {}", expected.len())));
    }
    let mut params = ParamStore::new();
    for (want_name, want_shape) in &expected {
        let len = c.u32()?;
        let name = c.text(len)?.to_string();
        if &name != want_name {
            return Err(ModelError::Checkpoint(format!("expected tensor {want_name}, found {name}")));
        }
        let ndim = c.u32()?;
        let shape = (0..ndim).map(|_| c.u64()).collect::<Result<Vec<_>, _>>()?;
        if &shape != want_shape {
            return Err(ModelError::Checkpoint(format!("{name}: shape {shape:?}, config expects {want_shape:?}")));
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| ModelError::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes")))).collect();
        params.insert(name, Array::from_vec(&shape, data).map_err(|e| ModelError::Checkpoint(e.to_string()))?);
    }
    if c.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    PianoFlow::from_params(config, params)
}

pub fn save(model: &PianoFlow, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, to_bytes(model))
}

pub fn load(path: &Path) -> Result<PianoFlow, ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_rounds_to_f32() {
        let m = PianoFlow::new(ModelConfig::toy(1, 16), 3).unwrap();
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back.config, m.config);
        for ((_, n1, a), (_, n2, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, f64::from(*x as f32));
            }
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let m = PianoFlow::new(ModelConfig::toy(1, 16), 3).unwrap();
        let bytes = to_bytes(&m);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(b"nope").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
