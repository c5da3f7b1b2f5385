use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::DiffError;

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into `params.bin`, in elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub endianness: String,
    pub global_step: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `params.bin` (little-endian f64, parameters in registration order)
/// and `manifest.json` into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    global_step: u64,
) -> Result<CheckpointManifest, DiffError> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(store.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for id in store.ids() {
        let t = store.value(id);
        tensors.push(TensorEntry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        dtype: "f64".into(),
        endianness: "little".into(),
        global_step,
        tensors,
    };
    fs::write(dir.join(PARAMS_FILE), bytes)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, CheckpointManifest), DiffError> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.dtype != "f64" || manifest.endianness != "little" {
        return Err(DiffError::invalid(format!(
            "unsupported checkpoint encoding {}/{}",
            manifest.dtype, manifest.endianness
        )));
    }
    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    if bytes.len() % 8 != 0 {
        return Err(DiffError::invalid(
            "params.bin length is not a multiple of 8",
        ));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let data = flat
            .get(e.offset..e.offset + e.len)
            .ok_or(DiffError::IndexOutOfRange {
                index: e.offset + e.len,
                len: flat.len(),
            })?;
        store.insert(&e.name, Tensor::new(e.shape.clone(), data.to_vec())?)?;
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamStore::new();
        ps.insert(
            "a",
            Tensor::new([2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0]).unwrap(),
        )
        .unwrap();
        ps.insert("b", Tensor::from_vec(vec![7.5])).unwrap();
        let m = save_checkpoint(dir.path(), &ps, 42).unwrap();
        let (back, m2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(m2.global_step, 42);
        for id in ps.ids() {
            let other = back.value(back.id(ps.name(id)).unwrap());
            assert_eq!(other.shape(), ps.value(id).shape());
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(other), bits(ps.value(id)));
        }
    }
}
