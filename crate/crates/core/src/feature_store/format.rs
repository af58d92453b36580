//! Container IO. Feature files are safetensors archives; string metadata is
//! kept under a single JSON key so files are byte-reproducible.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::DataError;
use crate::real::{from_le_bytes, Real};

pub const META_KEY: &str = "meta";

pub struct RawTensor {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl RawTensor {
    pub fn real<F: Real>(name: impl Into<String>, shape: Vec<usize>, values: &[F]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            name: name.into(),
            dtype: F::DTYPE,
            shape,
            data: crate::real::to_le_bytes(values.iter().copied()),
        }
    }

    pub fn f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Self {
        Self::real(name, shape, values)
    }

    pub fn i64(name: impl Into<String>, values: &[i64]) -> Self {
        Self {
            name: name.into(),
            dtype: Dtype::I64,
            shape: vec![values.len()],
            data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }
}

pub fn write_container<M: Serialize>(
    path: &Path,
    tensors: &[RawTensor],
    meta: &M,
) -> Result<(), DataError> {
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|t| {
            TensorView::new(t.dtype, t.shape.clone(), &t.data)
                .map(|v| (t.name.clone(), v))
                .map_err(|e| DataError::Format {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })
        })
        .collect::<Result<_, _>>()?;
    let meta_json = serde_json::to_string(meta).map_err(|e| DataError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut map = HashMap::new();
    map.insert(META_KEY.to_string(), meta_json);
    let bytes = safetensors::serialize(views, &Some(map)).map_err(|e| DataError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| DataError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// An opened container: raw bytes plus decoded metadata.
pub struct Container {
    path: std::path::PathBuf,
    bytes: Vec<u8>,
}

impl Container {
    pub fn open(path: &Path) -> Result<Self, DataError> {
        if !path.exists() {
            return Err(DataError::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let c = Self {
            path: path.to_path_buf(),
            bytes,
        };
        c.tensors()?;
        Ok(c)
    }

    fn err(&self, message: impl Into<String>) -> DataError {
        DataError::Format {
            path: self.path.clone(),
            message: message.into(),
        }
    }

    fn tensors(&self) -> Result<SafeTensors<'_>, DataError> {
        SafeTensors::deserialize(&self.bytes).map_err(|e| self.err(e.to_string()))
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M, DataError> {
        let (_, header) =
            SafeTensors::read_metadata(&self.bytes).map_err(|e| self.err(e.to_string()))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| self.err("missing metadata"))?;
        serde_json::from_str(raw).map_err(|e| self.err(format!("bad metadata: {e}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors().map(|t| t.tensor(name).is_ok()).unwrap_or(false)
    }

    pub fn real<F: Real>(&self, name: &str) -> Result<(Vec<usize>, Vec<F>), DataError> {
        let st = self.tensors()?;
        let view = st
            .tensor(name)
            .map_err(|_| self.err(format!("missing tensor `{name}`")))?;
        let values = from_le_bytes::<F>(view.data(), view.dtype())
            .ok_or_else(|| self.err(format!("tensor `{name}` is not a float tensor")))?;
        Ok((view.shape().to_vec(), values))
    }

    pub fn i64(&self, name: &str) -> Result<Vec<i64>, DataError> {
        let st = self.tensors()?;
        let view = st
            .tensor(name)
            .map_err(|_| self.err(format!("missing tensor `{name}`")))?;
        if view.dtype() != Dtype::I64 {
            return Err(self.err(format!("tensor `{name}` is not i64")));
        }
        Ok(view
            .data()
            .chunks_exact(8)
            .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors()
            .map(|t| t.names().into_iter().cloned().collect())
            .unwrap_or_default()
    }
}
