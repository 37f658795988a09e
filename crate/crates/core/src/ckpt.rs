//! Versioned checkpoint archives: a JSON manifest describing every
//! parameter plus a raw little-endian f64 blob, so weights round-trip
//! bit-exactly and incompatible archives fail loudly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptManifest {
    pub version: u32,
    /// Which model family this archive holds (e.g. "vq", "clip").
    pub kind: String,
    pub seed: u64,
    pub step: usize,
    pub config: serde_json::Value,
    /// Extra model state that is not an optimizable parameter.
    #[serde(default)]
    pub extra: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Write `store` to `dir` as manifest.json + params.bin.
pub fn save(
    dir: &Path,
    kind: &str,
    seed: u64,
    step: usize,
    config: serde_json::Value,
    extra: serde_json::Value,
    store: &ParamStore,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for id in store.ids() {
        let value = store.value(id);
        params.push(ParamEntry {
            name: store.name(id).to_string(),
            shape: value.shape().to_vec(),
        });
        for &x in value.iter() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = CkptManifest {
        version: CKPT_VERSION,
        kind: kind.to_string(),
        seed,
        step,
        config,
        extra,
        params,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    fs::write(dir.join("params.bin"), blob)?;
    Ok(())
}

/// Read an archive's manifest, checking version and expected kind.
pub fn read_manifest(dir: &Path, expect_kind: &str) -> Result<CkptManifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::checkpoint(format!("missing manifest.json in {dir:?}: {e}")))?;
    let manifest: CkptManifest = serde_json::from_str(&text)
        .map_err(|e| Error::checkpoint(format!("manifest.json parse: {e}")))?;
    if manifest.version != CKPT_VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    if manifest.kind != expect_kind {
        return Err(Error::checkpoint(format!(
            "checkpoint kind {:?} where {expect_kind:?} was expected",
            manifest.kind
        )));
    }
    Ok(manifest)
}

/// Load parameter values into a freshly built store. The store must
/// already contain identically named and shaped parameters (i.e. the
/// model was rebuilt from the archived config).
pub fn load_into(dir: &Path, manifest: &CkptManifest, store: &mut ParamStore) -> Result<()> {
    let blob = fs::read(dir.join("params.bin"))
        .map_err(|e| Error::checkpoint(format!("missing params.bin in {dir:?}: {e}")))?;
    let total: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if blob.len() != total * 8 {
        return Err(Error::checkpoint(format!(
            "params.bin holds {} bytes where {} were expected",
            blob.len(),
            total * 8
        )));
    }
    if manifest.params.len() != store.len() {
        return Err(Error::checkpoint(format!(
            "archive has {} parameters, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    let mut offset = 0usize;
    let ids: Vec<_> = store.ids().collect();
    for (entry, id) in manifest.params.iter().zip(ids) {
        if store.name(id) != entry.name {
            return Err(Error::checkpoint(format!(
                "parameter order mismatch: archive {:?} vs model {:?}",
                entry.name,
                store.name(id)
            )));
        }
        let n: usize = entry.shape.iter().product();
        let value = store.value_mut(id);
        if value.shape() != &entry.shape[..] {
            return Err(Error::checkpoint(format!(
                "parameter {:?} shape mismatch: archive {:?} vs model {:?}",
                entry.name,
                entry.shape,
                value.shape()
            )));
        }
        for (i, x) in value.iter_mut().enumerate() {
            let b = &blob[(offset + i) * 8..(offset + i) * 8 + 8];
            *x = f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]);
        }
        offset += n;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::init;

    fn build_store(fill: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::root(3);
        store.add("a.w", init::normal(&mut rng, &[3, 4], 0.5));
        store.add("a.b", init::zeros(&[4]));
        store.add("z", init::normal(&mut rng, &[2, 2, 2], fill));
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let store = build_store(1.0);
        save(
            tmp.path(),
            "vq",
            9,
            120,
            serde_json::json!({"k": 4}),
            serde_json::json!({"usage": [1, 2]}),
            &store,
        )
        .unwrap();
        let manifest = read_manifest(tmp.path(), "vq").unwrap();
        assert_eq!(manifest.step, 120);
        let mut fresh = build_store(0.0);
        load_into(tmp.path(), &manifest, &mut fresh).unwrap();
        for id in store.ids() {
            assert_eq!(store.value(id), fresh.value(id).clone());
        }
    }

    #[test]
    fn kind_and_shape_mismatches_fail() {
        let tmp = tempfile::tempdir().unwrap();
        let store = build_store(1.0);
        save(
            tmp.path(),
            "vq",
            9,
            1,
            serde_json::Value::Null,
            serde_json::Value::Null,
            &store,
        )
        .unwrap();
        assert!(read_manifest(tmp.path(), "clip").is_err());
        let manifest = read_manifest(tmp.path(), "vq").unwrap();
        let mut wrong = ParamStore::new();
        wrong.add("a.w", init::zeros(&[3, 4]));
        assert!(load_into(tmp.path(), &manifest, &mut wrong).is_err());
    }
}
