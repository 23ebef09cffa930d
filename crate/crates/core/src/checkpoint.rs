//! Single-file weight container: safetensors body plus a JSON header stored
//! under the `timeweaver` metadata key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use timeweaver_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::image::ensure_parent;

const META_KEY: &str = "timeweaver";

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { tensors: BTreeMap::new(), meta }
    }

    /// Copies every parameter of `store` under `prefix`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, p) in store.iter() {
            self.tensors.insert(format!("{prefix}{name}"), p.value.as_ref().clone());
        }
    }

    /// Overwrites every parameter of `store` from tensors named `prefix + name`.
    /// All parameters must be present with matching shapes.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let key = format!("{prefix}{name}");
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            store.set(&name, t.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.data().iter().flat_map(|v| v.to_le_bytes()).collect(), t.shape().to_vec()))
            .collect();
        let views = bytes
            .iter()
            .map(|(k, b, s)| Ok((k.as_str(), TensorView::new(Dtype::F32, s.clone(), b).map_err(ck)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut info = HashMap::new();
        info.insert(META_KEY.to_string(), serde_json::to_string(&self.meta)?);
        safetensors::serialize(views, &Some(info)).map_err(ck)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(buf).map_err(ck)?;
        let meta = match header.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
            Some(s) => serde_json::from_str(s)?,
            None => serde_json::Value::Null,
        };
        let st = SafeTensors::deserialize(buf).map_err(ck)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("tensor `{name}` is not f32")));
            }
            let data: Vec<f32> =
                view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.insert(name, Tensor::new(view.shape(), data)?);
        }
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

fn ck(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_tensors_and_header() {
        let mut store = ParamStore::new();
        store.insert("a.weight", Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap());
        store.insert("b", Tensor::scalar(7.0));
        let mut ck = Checkpoint::new(serde_json::json!({"step": 12, "seed": 3}));
        ck.add_store("m.", &store);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(bytes, ck.to_bytes().unwrap());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta["step"], 12);
        let mut other = ParamStore::new();
        other.insert("a.weight", Tensor::zeros(&[2, 2]));
        other.insert("b", Tensor::scalar(0.0));
        back.load_store("m.", &mut other).unwrap();
        assert_eq!(other.tensor("a.weight").unwrap().data(), &[1.0, -2.0, 3.5, 0.25]);
        let mut wrong = ParamStore::new();
        wrong.insert("c", Tensor::scalar(0.0));
        assert!(back.load_store("m.", &mut wrong).is_err());
    }
}
