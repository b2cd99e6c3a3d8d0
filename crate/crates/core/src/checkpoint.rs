//! Checkpoint directories: `manifest.json` (metadata) next to `arrays.bin`
//! (named arrays in the MXAR layout, see `mixar_autodiff::io`).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use mixar_autodiff::io::{read_arrays, write_arrays, NamedArray};
use mixar_autodiff::{ParamStore, Real};
use serde_json::Value;

use crate::error::{contract, MixarError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARRAYS_FILE: &str = "arrays.bin";

pub fn save(dir: &Path, manifest: &Value, arrays: &[NamedArray]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    let w = BufWriter::new(File::create(dir.join(ARRAYS_FILE))?);
    write_arrays(w, arrays)?;
    Ok(())
}

/// Loads a checkpoint; a missing directory is reported as a dependency error.
pub fn load(dir: &Path) -> Result<(Value, Vec<NamedArray>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(MixarError::Dependency(format!(
            "no checkpoint at {}",
            dir.display()
        )));
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let r = BufReader::new(File::open(dir.join(ARRAYS_FILE))?);
    Ok((manifest, read_arrays(r)?))
}

pub fn exists(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).is_file() && dir.join(ARRAYS_FILE).is_file()
}

pub fn store_arrays<T: Real>(prefix: &str, store: &ParamStore<T>) -> Vec<NamedArray> {
    store
        .iter()
        .map(|(_, name, t)| NamedArray::from_tensor(format!("{prefix}{name}"), t))
        .collect()
}

/// Overwrites every parameter of `store` from `arrays[prefix + name]`.
pub fn fill_store<T: Real>(prefix: &str, store: &mut ParamStore<T>, arrays: &[NamedArray]) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let key = format!("{prefix}{}", store.name(id));
        let arr = arrays
            .iter()
            .find(|a| a.name == key)
            .ok_or_else(|| contract(format!("checkpoint lacks array {key}")))?;
        let t = arr.to_tensor::<T>();
        if t.shape() != store.get(id).shape() {
            return Err(contract(format!(
                "array {key} has shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

pub fn find<'a>(arrays: &'a [NamedArray], name: &str) -> Result<&'a NamedArray> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| contract(format!("checkpoint lacks array {name}")))
}

pub fn get_field<'a>(manifest: &'a Value, key: &str) -> Result<&'a Value> {
    manifest
        .get(key)
        .ok_or_else(|| contract(format!("manifest lacks field {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mixar_autodiff::Tensor;

    #[test]
    fn store_round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::from_vec(1, 3, vec![1.0, -2.0, 3.5]));
        store.add("b", Tensor::from_vec(2, 1, vec![0.25, 9.0]));
        let meta = serde_json::json!({"kind": "test", "seed": 4});
        save(dir.path(), &meta, &store_arrays("m.", &store)).unwrap();

        let (m, arrays) = load(dir.path()).unwrap();
        assert_eq!(m["seed"], 4);
        let mut other = store.clone();
        other.get_mut(other.id("a").unwrap()).data_mut()[0] = 0.0;
        fill_store("m.", &mut other, &arrays).unwrap();
        assert_eq!(other.get(other.id("a").unwrap()), store.get(store.id("a").unwrap()));
    }

    #[test]
    fn missing_checkpoint_is_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, MixarError::Dependency(_)));
    }
}
