//! Binary model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   b"PQAMODEL"
//! version u32 = 1
//! config  max_seq_len u64, hidden_size u64, learning_rate f64,
//!         epochs u64, batch_size u64, seed u64
//! input_dim u64
//! count   u32
//! count × { name_len u32, name utf-8, rows u64, cols u64, rows*cols × f64 }
//! ```
//!
//! Floats are stored bit-exactly, so load → save reproduces the same bytes.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelError, QaModel, TENSOR_NAMES};

const MAGIC: &[u8; 8] = b"PQAMODEL";
const VERSION: u32 = 1;

impl QaModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.max_seq_len as u64, c.hidden_size as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&c.learning_rate.to_le_bytes());
        for v in [c.epochs as u64, c.batch_size as u64, c.seed, self.input_dim as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let h = c.hidden_size;
        let shapes = [
            (4 * h, self.input_dim),
            (4 * h, h),
            (4 * h, 1),
        ];
        let tensors = self.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (i, t) in tensors.iter().enumerate() {
            let name = TENSOR_NAMES[i].as_bytes();
            let (rows, cols) = shapes[i % 3];
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(rows as u64).to_le_bytes());
            out.extend_from_slice(&(cols as u64).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let max_seq_len = r.usize()?;
        let hidden_size = r.usize()?;
        let learning_rate = r.f64()?;
        let epochs = r.usize()?;
        let batch_size = r.usize()?;
        let seed = r.u64()?;
        let input_dim = r.usize()?;
        let config = ModelConfig {
            max_seq_len,
            hidden_size,
            learning_rate,
            epochs,
            batch_size,
            seed,
        };
        let mut model = QaModel::zeros(config, input_dim)?;
        let count = r.u32()? as usize;
        if count != TENSOR_NAMES.len() {
            return Err(ModelError::Checkpoint(format!("expected 6 tensors, found {count}")));
        }
        for (i, t) in model.tensors_mut().into_iter().enumerate() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ModelError::Checkpoint("tensor name is not utf-8".into()))?;
            if name != TENSOR_NAMES[i] {
                return Err(ModelError::Checkpoint(format!(
                    "expected tensor `{}`, found `{name}`",
                    TENSOR_NAMES[i]
                )));
            }
            let rows = r.usize()?;
            let cols = r.usize()?;
            if rows.checked_mul(cols) != Some(t.len()) {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{name}` has shape {rows}x{cols}, expected {} values",
                    t.len()
                )));
            }
            for v in t.iter_mut() {
                *v = r.f64()?;
            }
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Checkpoint("trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| ModelError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, ModelError> {
        usize::try_from(self.u64()?).map_err(|_| ModelError::Checkpoint("size overflow".into()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
