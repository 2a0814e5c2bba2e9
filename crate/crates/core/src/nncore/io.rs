//! Binary model container: magic, version, a JSON header and raw
//! little-endian `f64` tensor data. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, ParameterSet, Tensor};

pub const MODEL_MAGIC: &[u8; 8] = b"SEFUNMDL";
const VERSION: u32 = 1;
/// Refuse headers larger than this when reading.
const MAX_HEADER: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    /// Model family, checked by loaders.
    pub kind: String,
    /// Model-specific metadata (configuration, vocabulary, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl ModelFile {
    pub fn from_params(kind: &str, meta: serde_json::Value, params: &ParameterSet) -> Self {
        ModelFile {
            kind: kind.to_string(),
            meta,
            tensors: params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Copies every stored tensor into `params`, which must have exactly the
    /// same names and shapes.
    pub fn load_into(&self, params: &mut ParameterSet) -> Result<(), NnError> {
        if self.tensors.len() != params.len() {
            return Err(NnError::Format(format!(
                "file has {} tensors, model expects {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for (name, t) in &self.tensors {
            params.load(name, t.clone())?;
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), NnError> {
        if self.kind != kind {
            return Err(NnError::Format(format!("expected a `{kind}` model, found `{}`", self.kind)));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| NnError::Format(e.to_string()))?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MODEL_MAGIC {
            return Err(NnError::Format("not a model file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(truncated)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(NnError::Format(format!("unsupported model version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(truncated)?;
        let len = u64::from_le_bytes(b8);
        if len > MAX_HEADER {
            return Err(NnError::Format("header too large".into()));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json).map_err(truncated)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| NnError::Format(e.to_string()))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut b8).map_err(truncated)?;
                data.push(f64::from_le_bytes(b8));
            }
            tensors.push((entry.name, Tensor::from_vec(&entry.shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(NnError::Format("trailing bytes after tensor data".into()));
        }
        Ok(ModelFile { kind: header.kind, meta: header.meta, tensors })
    }
}

fn truncated(e: std::io::Error) -> NnError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        NnError::Format("truncated model file".into())
    } else {
        NnError::Io(e)
    }
}

pub fn write_model_file(path: &Path, model: &ModelFile) -> Result<(), NnError> {
    model.write_to(BufWriter::new(File::create(path)?))
}

pub fn read_model_file(path: &Path) -> Result<ModelFile, NnError> {
    ModelFile::read_from(BufReader::new(File::open(path)?))
}
